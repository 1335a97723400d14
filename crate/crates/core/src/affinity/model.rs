//! The learned affinity model and its hand-written reverse pass.
//!
//! Row/column layout of the augmented `(n_max + 2)^2` matrix:
//! rows `0..n_max` are previous-frame detections, row `n_max` is the NB anchor
//! and row `n_max + 1` the FP anchor; columns `0..n_max` are current-frame
//! detections, column `n_max` is the DT anchor and column `n_max + 1` the FN
//! anchor.

use serde::{Deserialize, Serialize};

use crate::domain::PaddedDetections;
use crate::error::{Error, Result};
use crate::nn::{masked_softmax, Mlp, MlpCache, MlpSpec, MASKED_LOGIT, PROB_FLOOR};
use crate::residuals::{
    pair_mask, voxelnet_residual, voxelnet_residual_backward, DescriptorPoints, ResidualMatrix,
    VoxelResidualCache,
};

/// Identifies one of the twelve networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetId {
    BoxFp,
    BoxNb,
    BoxFn,
    BoxDt,
    ShapeFp,
    ShapeNb,
    ShapeFn,
    ShapeDt,
    BoxResidual,
    ShapeResidual,
    Fusion,
    Affinity,
}

impl NetId {
    pub const ALL: [NetId; 12] = [
        NetId::BoxFp,
        NetId::BoxNb,
        NetId::BoxFn,
        NetId::BoxDt,
        NetId::ShapeFp,
        NetId::ShapeNb,
        NetId::ShapeFn,
        NetId::ShapeDt,
        NetId::BoxResidual,
        NetId::ShapeResidual,
        NetId::Fusion,
        NetId::Affinity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NetId::BoxFp => "box_anchor_fp",
            NetId::BoxNb => "box_anchor_nb",
            NetId::BoxFn => "box_anchor_fn",
            NetId::BoxDt => "box_anchor_dt",
            NetId::ShapeFp => "shape_anchor_fp",
            NetId::ShapeNb => "shape_anchor_nb",
            NetId::ShapeFn => "shape_anchor_fn",
            NetId::ShapeDt => "shape_anchor_dt",
            NetId::BoxResidual => "box_residual",
            NetId::ShapeResidual => "shape_residual",
            NetId::Fusion => "residual_fusion",
            NetId::Affinity => "affinity_head",
        }
    }
}

/// Which residuals feed the affinity head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Learned per-pair weighted sum of all three residuals.
    #[default]
    Fused,
    VoxelOnly,
    BoxOnly,
    ShapeOnly,
}

impl ResidualMode {
    fn uses_voxel(self) -> bool {
        matches!(self, ResidualMode::Fused | ResidualMode::VoxelOnly)
    }
    fn uses_box(self) -> bool {
        matches!(self, ResidualMode::Fused | ResidualMode::BoxOnly)
    }
    fn uses_shape(self) -> bool {
        matches!(self, ResidualMode::Fused | ResidualMode::ShapeOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_max: usize,
    /// BEV channels `F`.
    pub channels: usize,
    pub descriptor_points: DescriptorPoints,
    pub residual_mode: ResidualMode,
    pub anchor_hidden: Vec<usize>,
    pub box_residual_hidden: Vec<usize>,
    pub shape_residual_hidden: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
    pub affinity_hidden: Vec<usize>,
    /// Box centers are divided by this before entering any network.
    pub position_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(n_max: usize, channels: usize, seed: u64) -> Self {
        Self {
            n_max,
            channels,
            descriptor_points: DescriptorPoints::CenterAndFaces,
            residual_mode: ResidualMode::Fused,
            anchor_hidden: vec![16, 16],
            box_residual_hidden: vec![16, 16],
            shape_residual_hidden: vec![24, 24],
            fusion_hidden: vec![24, 24],
            affinity_hidden: vec![16],
            position_scale: 20.0,
            seed,
        }
    }

    /// Width of one shape descriptor.
    pub fn shape_dim(&self) -> usize {
        self.descriptor_points.count() * self.channels
    }

    pub fn augmented(&self) -> usize {
        self.n_max + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 || self.channels == 0 {
            return Err(Error::Config("n_max and channels must be positive".into()));
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(Error::Config("position_scale must be positive".into()));
        }
        Ok(())
    }

    fn layer_sizes(&self, id: NetId) -> Vec<usize> {
        let d = self.shape_dim();
        let (input, hidden, output) = match id {
            NetId::BoxFp | NetId::BoxNb | NetId::BoxFn | NetId::BoxDt => {
                (self.n_max * 7, &self.anchor_hidden, 7)
            }
            NetId::ShapeFp | NetId::ShapeNb | NetId::ShapeFn | NetId::ShapeDt => {
                (self.n_max * d, &self.anchor_hidden, d)
            }
            NetId::BoxResidual => (6, &self.box_residual_hidden, 1),
            NetId::ShapeResidual => (2 * d, &self.shape_residual_hidden, 1),
            NetId::Fusion => (6 + 2 * d, &self.fusion_hidden, 3),
            NetId::Affinity => (1, &self.affinity_hidden, 1),
        };
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        sizes
    }

    /// The affinity head has no output bias: both softmaxes ignore a
    /// constant shift of every score.
    pub fn net_spec(&self, id: NetId) -> Result<MlpSpec> {
        let spec = MlpSpec::new(
            self.layer_sizes(id),
            self.seed.wrapping_mul(1_000_003).wrapping_add(id.index() as u64),
        )?;
        Ok(if id == NetId::Affinity {
            spec.without_output_bias()
        } else {
            spec
        })
    }
}

/// Padded detections of one frame together with their shape descriptors
/// (`n_max x shape_dim`, zero on padded slots).
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedFrame {
    pub dets: PaddedDetections,
    pub shapes: Vec<f64>,
    pub shape_dim: usize,
}

impl PaddedFrame {
    /// `descriptors[k]` belongs to original detection `k`.
    pub fn new(dets: PaddedDetections, descriptors: &[Vec<f64>], shape_dim: usize) -> Result<Self> {
        let n = dets.n_max();
        let mut shapes = vec![0.0; n * shape_dim];
        for slot in 0..n {
            if let Some(src) = dets.source_indices[slot] {
                let d = descriptors.get(src).ok_or_else(|| {
                    Error::Shape(format!("no descriptor for detection {src}"))
                })?;
                if d.len() != shape_dim {
                    return Err(Error::Shape(format!(
                        "descriptor width {} != {shape_dim}",
                        d.len()
                    )));
                }
                shapes[slot * shape_dim..(slot + 1) * shape_dim].copy_from_slice(d);
            }
        }
        Ok(Self {
            dets,
            shapes,
            shape_dim,
        })
    }

    pub fn empty(n_max: usize, shape_dim: usize) -> Self {
        Self {
            dets: PaddedDetections::empty(n_max),
            shapes: vec![0.0; n_max * shape_dim],
            shape_dim,
        }
    }

    pub fn n_max(&self) -> usize {
        self.dets.n_max()
    }

    pub fn shape(&self, slot: usize) -> &[f64] {
        &self.shapes[slot * self.shape_dim..(slot + 1) * self.shape_dim]
    }
}

/// The four anchor boxes of one frame pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxAnchors {
    pub fp: [f64; 7],
    pub nb: [f64; 7],
    pub fn_: [f64; 7],
    pub dt: [f64; 7],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeAnchors {
    pub fp: Vec<f64>,
    pub nb: Vec<f64>,
    pub fn_: Vec<f64>,
    pub dt: Vec<f64>,
}

/// Augmented `(n_max + 2)`-row blocks of boxes and shape descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBoxes {
    pub boxes: Vec<[f64; 7]>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedShapes {
    pub descriptors: Vec<f64>,
    pub dim: usize,
    pub valid: Vec<bool>,
}

impl AugmentedShapes {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Which side of the matrix a block is appended to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Previous frame: slots hold NB then FP.
    Previous,
    /// Current frame: slots hold DT then FN.
    Current,
}

/// Appends two anchor rows. `first` lands in slot `n_max` (NB or DT),
/// `second` in slot `n_max + 1` (FP or FN).
pub fn augment_boxes(padded: &PaddedDetections, first: [f64; 7], second: [f64; 7]) -> AugmentedBoxes {
    let mut boxes = padded.boxes.clone();
    boxes.push(first);
    boxes.push(second);
    let mut valid = padded.valid.clone();
    valid.extend([true, true]);
    AugmentedBoxes { boxes, valid }
}

pub fn augment_shapes(frame: &PaddedFrame, first: &[f64], second: &[f64]) -> Result<AugmentedShapes> {
    let d = frame.shape_dim;
    if first.len() != d || second.len() != d {
        return Err(Error::Shape(format!(
            "anchor descriptor widths {} / {} != {d}",
            first.len(),
            second.len()
        )));
    }
    let mut descriptors = frame.shapes.clone();
    descriptors.extend_from_slice(first);
    descriptors.extend_from_slice(second);
    let mut valid = frame.dets.valid.clone();
    valid.extend([true, true]);
    Ok(AugmentedShapes {
        descriptors,
        dim: d,
        valid,
    })
}

/// Inverse of [`augment_boxes`]: strips the anchor rows.
pub fn deaugment_boxes(aug: &AugmentedBoxes) -> (Vec<[f64; 7]>, Vec<bool>) {
    let n = aug.boxes.len() - 2;
    (aug.boxes[..n].to_vec(), aug.valid[..n].to_vec())
}

/// Model output for one frame pair.
#[derive(Debug, Clone)]
pub struct AffinityOutput {
    pub n_max: usize,
    /// Raw scores `A`, `(n_max+2)^2`, NaN on invalid pairs.
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
    /// Forward matching, `n_max x (n_max+2)`, row-stochastic on valid rows.
    pub forward: Vec<f64>,
    pub forward_rows: Vec<bool>,
    /// Backward matching, `(n_max+2) x n_max`, column-stochastic on valid columns.
    pub backward: Vec<f64>,
    pub backward_cols: Vec<bool>,
}

impl AffinityOutput {
    pub fn size(&self) -> usize {
        self.n_max + 2
    }

    pub fn fm(&self, i: usize, j: usize) -> f64 {
        self.forward[i * self.size() + j]
    }

    pub fn bm(&self, i: usize, j: usize) -> f64 {
        self.backward[i * self.n_max + j]
    }

    pub fn p_dt(&self, row: usize) -> f64 {
        self.fm(row, self.n_max)
    }

    pub fn p_fn(&self, row: usize) -> f64 {
        self.fm(row, self.n_max + 1)
    }

    pub fn p_nb(&self, col: usize) -> f64 {
        self.bm(self.n_max, col)
    }

    pub fn p_fp(&self, col: usize) -> f64 {
        self.bm(self.n_max + 1, col)
    }

    /// Builds the matching views from a raw score matrix: row softmax without
    /// the anchor rows, column softmax without the anchor columns.
    pub fn from_scores(n_max: usize, scores: Vec<f64>, valid: Vec<bool>) -> Self {
        let m = n_max + 2;
        let mut forward = vec![0.0; n_max * m];
        let mut forward_rows = vec![false; n_max];
        let mut backward = vec![0.0; m * n_max];
        let mut backward_cols = vec![false; n_max];
        let logit = |k: usize| if valid[k] { scores[k] } else { MASKED_LOGIT };
        for i in 0..n_max {
            let mask: Vec<bool> = (0..m).map(|j| valid[i * m + j]).collect();
            if !mask.iter().any(|v| *v) {
                continue;
            }
            let row: Vec<f64> = (0..m).map(|j| logit(i * m + j)).collect();
            let p = masked_softmax(&row, &mask).expect("row has a valid entry");
            forward[i * m..(i + 1) * m].copy_from_slice(&p);
            forward_rows[i] = true;
        }
        for j in 0..n_max {
            let mask: Vec<bool> = (0..m).map(|i| valid[i * m + j]).collect();
            if !mask.iter().any(|v| *v) {
                continue;
            }
            let col: Vec<f64> = (0..m).map(|i| logit(i * m + j)).collect();
            let p = masked_softmax(&col, &mask).expect("column has a valid entry");
            for i in 0..m {
                backward[i * n_max + j] = p[i];
            }
            backward_cols[j] = true;
        }
        Self {
            n_max,
            scores,
            valid,
            forward,
            forward_rows,
            backward,
            backward_cols,
        }
    }

    /// Uses a 0/1 ground-truth matrix directly as matching probabilities.
    pub fn from_ground_truth(
        n_max: usize,
        gt: &[f64],
        prev_valid: &[bool],
        cur_valid: &[bool],
    ) -> Self {
        let m = n_max + 2;
        let mut full_prev = prev_valid.to_vec();
        full_prev.extend([true, true]);
        let mut full_cur = cur_valid.to_vec();
        full_cur.extend([true, true]);
        let valid = pair_mask(&full_prev, &full_cur, n_max);
        let mut forward = vec![0.0; n_max * m];
        let mut forward_rows = vec![false; n_max];
        let mut backward = vec![0.0; m * n_max];
        let mut backward_cols = vec![false; n_max];
        for i in 0..n_max {
            if prev_valid[i] {
                forward_rows[i] = true;
                forward[i * m..(i + 1) * m].copy_from_slice(&gt[i * m..(i + 1) * m]);
            }
        }
        for j in 0..n_max {
            if cur_valid[j] {
                backward_cols[j] = true;
                for i in 0..m {
                    backward[i * n_max + j] = gt[i * m + j];
                }
            }
        }
        let scores = gt
            .iter()
            .zip(&valid)
            .map(|(g, v)| if *v { *g } else { f64::NAN })
            .collect();
        Self {
            n_max,
            scores,
            valid,
            forward,
            forward_rows,
            backward,
            backward_cols,
        }
    }
}

/// Elementwise affinity head followed by the two masked softmaxes.
pub fn affinity_head(residual: &ResidualMatrix, net: &Mlp, n_max: usize) -> Result<AffinityOutput> {
    let m = residual.size;
    if m != n_max + 2 {
        return Err(Error::Shape(format!("residual size {m} != n_max + 2")));
    }
    let idx: Vec<usize> = (0..m * m).filter(|&k| residual.valid[k]).collect();
    let input: Vec<f64> = idx.iter().map(|&k| residual.values[k]).collect();
    let mut scores = vec![f64::NAN; m * m];
    if !idx.is_empty() {
        let cache = net.forward_batch(&input, idx.len())?;
        for (n, &k) in idx.iter().enumerate() {
            scores[k] = cache.output()[n];
        }
    }
    Ok(AffinityOutput::from_scores(n_max, scores, residual.valid.clone()))
}

/// Per-network gradient buffers, indexed by [`NetId::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads(pub Vec<Vec<f64>>);

impl ModelGrads {
    pub fn zeros_like(model: &ShastaModel) -> Self {
        Self(model.nets.iter().map(|n| n.zero_grads()).collect())
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    box_anchor_out: Vec<Vec<f64>>,
    box_anchor_caches: Vec<MlpCache>,
    shape_anchor_caches: Vec<MlpCache>,
    prev_aug: AugmentedBoxes,
    cur_aug: AugmentedBoxes,
    mask: Vec<bool>,
    pairs: Vec<(usize, usize)>,
    voxel: Option<(ResidualMatrix, VoxelResidualCache)>,
    box_res: Option<MlpCache>,
    shape_res: Option<MlpCache>,
    fusion: Option<MlpCache>,
    head: Option<MlpCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShastaModel {
    pub config: ModelConfig,
    pub nets: Vec<Mlp>,
}

fn net_order_box() -> [NetId; 4] {
    [NetId::BoxFp, NetId::BoxNb, NetId::BoxFn, NetId::BoxDt]
}

fn net_order_shape() -> [NetId; 4] {
    [NetId::ShapeFp, NetId::ShapeNb, NetId::ShapeFn, NetId::ShapeDt]
}

impl ShastaModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut nets = Vec::with_capacity(12);
        for id in NetId::ALL {
            let mut net = Mlp::new(config.net_spec(id)?);
            let last = net.spec().num_layers() - 1;
            match id {
                NetId::BoxFp | NetId::BoxNb | NetId::BoxFn | NetId::BoxDt => {
                    // start anchors with unit dimensions
                    net.bias_mut(last)[3..6].fill(1.0);
                }
                NetId::Fusion => net.bias_mut(last).fill(1.0),
                NetId::Affinity => {
                    // alternating slopes: some hidden unit is live for any residual
                    for (u, w) in net.weights_mut(0).iter_mut().enumerate() {
                        *w = if u % 2 == 0 { w.abs() } else { -w.abs() };
                    }
                }
                _ => {}
            }
            nets.push(net);
        }
        Ok(Self { config, nets })
    }

    pub fn from_nets(config: ModelConfig, nets: Vec<Mlp>) -> Result<Self> {
        config.validate()?;
        if nets.len() != 12 {
            return Err(Error::Shape(format!("expected 12 networks, got {}", nets.len())));
        }
        for id in NetId::ALL {
            let want = config.layer_sizes(id);
            if nets[id.index()].spec().layer_sizes != want
                || nets[id.index()].spec().output_bias != (id != NetId::Affinity)
            {
                return Err(Error::Shape(format!(
                    "network {} has layers {:?}, expected {want:?}",
                    id.name(),
                    nets[id.index()].spec().layer_sizes
                )));
            }
        }
        Ok(Self { config, nets })
    }

    pub fn net(&self, id: NetId) -> &Mlp {
        &self.nets[id.index()]
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut Mlp {
        &mut self.nets[id.index()]
    }

    pub fn num_params(&self) -> usize {
        self.nets.iter().map(|n| n.params().len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|n| n.params().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut o = 0;
        for net in &mut self.nets {
            let n = net.params().len();
            net.params_mut().copy_from_slice(&flat[o..o + n]);
            o += n;
        }
        Ok(())
    }

    fn box_features(&self, b: &[f64; 7]) -> [f64; 7] {
        let s = self.config.position_scale;
        [b[0] / s, b[1] / s, b[2] / s, b[3], b[4], b[5], b[6]]
    }

    fn flat_box_input(&self, dets: &PaddedDetections) -> Vec<f64> {
        dets.boxes
            .iter()
            .flat_map(|b| self.box_features(b))
            .collect()
    }

    /// Network output -> anchor box: centers rescaled, `|w|, |l|, |h|`.
    fn box_from_output(&self, o: &[f64]) -> [f64; 7] {
        let s = self.config.position_scale;
        [
            o[0] * s,
            o[1] * s,
            o[2] * s,
            o[3].abs(),
            o[4].abs(),
            o[5].abs(),
            o[6],
        ]
    }

    fn check_frame(&self, frame: &PaddedFrame) -> Result<()> {
        if frame.n_max() != self.config.n_max || frame.shape_dim != self.config.shape_dim() {
            return Err(Error::Shape(format!(
                "frame has n_max={} shape_dim={}, model expects {} / {}",
                frame.n_max(),
                frame.shape_dim,
                self.config.n_max,
                self.config.shape_dim()
            )));
        }
        Ok(())
    }

    /// Anchor boxes: FP and NB from the current frame, FN and DT from the
    /// previous frame.
    pub fn learn_bbox_anchors(
        &self,
        prev: &PaddedDetections,
        cur: &PaddedDetections,
    ) -> Result<BoxAnchors> {
        let (out, _) = self.box_anchor_forward(prev, cur)?;
        Ok(BoxAnchors {
            fp: self.box_from_output(&out[0]),
            nb: self.box_from_output(&out[1]),
            fn_: self.box_from_output(&out[2]),
            dt: self.box_from_output(&out[3]),
        })
    }

    fn box_anchor_forward(
        &self,
        prev: &PaddedDetections,
        cur: &PaddedDetections,
    ) -> Result<(Vec<Vec<f64>>, Vec<MlpCache>)> {
        let cur_in = self.flat_box_input(cur);
        let prev_in = self.flat_box_input(prev);
        let mut outs = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        for (k, id) in net_order_box().into_iter().enumerate() {
            let input = if k < 2 { &cur_in } else { &prev_in };
            let (o, c) = self.net(id).forward(input)?;
            if o.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{} output", id.name())));
            }
            outs.push(o);
            caches.push(c);
        }
        Ok((outs, caches))
    }

    pub fn learn_shape_anchors(&self, prev: &PaddedFrame, cur: &PaddedFrame) -> Result<ShapeAnchors> {
        let (outs, _) = self.shape_anchor_forward(prev, cur)?;
        let mut it = outs.into_iter();
        Ok(ShapeAnchors {
            fp: it.next().unwrap(),
            nb: it.next().unwrap(),
            fn_: it.next().unwrap(),
            dt: it.next().unwrap(),
        })
    }

    fn shape_anchor_forward(
        &self,
        prev: &PaddedFrame,
        cur: &PaddedFrame,
    ) -> Result<(Vec<Vec<f64>>, Vec<MlpCache>)> {
        let d = self.config.shape_dim();
        let mut outs = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        for (k, id) in net_order_shape().into_iter().enumerate() {
            let input = if k < 2 { &cur.shapes } else { &prev.shapes };
            let (o, c) = self.net(id).forward(input)?;
            if o.len() != d {
                return Err(Error::Shape(format!(
                    "{} produced width {}, expected {d}",
                    id.name(),
                    o.len()
                )));
            }
            if o.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{} output", id.name())));
            }
            outs.push(o);
            caches.push(c);
        }
        Ok((outs, caches))
    }

    fn center_pair(&self, prev: &AugmentedBoxes, cur: &AugmentedBoxes, i: usize, j: usize) -> [f64; 6] {
        let s = self.config.position_scale;
        let (p, c) = (&prev.boxes[i], &cur.boxes[j]);
        [p[0] / s, p[1] / s, p[2] / s, c[0] / s, c[1] / s, c[2] / s]
    }

    fn box_residual_input(
        &self,
        prev: &AugmentedBoxes,
        cur: &AugmentedBoxes,
        pairs: &[(usize, usize)],
    ) -> Vec<f64> {
        pairs
            .iter()
            .flat_map(|&(i, j)| self.center_pair(prev, cur, i, j))
            .collect()
    }

    fn shape_residual_input(
        prev: &AugmentedShapes,
        cur: &AugmentedShapes,
        pairs: &[(usize, usize)],
    ) -> Vec<f64> {
        let mut v = Vec::with_capacity(pairs.len() * 2 * prev.dim);
        for &(i, j) in pairs {
            v.extend_from_slice(prev.row(i));
            v.extend_from_slice(cur.row(j));
        }
        v
    }

    fn fusion_input(
        &self,
        prev: &AugmentedBoxes,
        cur: &AugmentedBoxes,
        prev_s: &AugmentedShapes,
        cur_s: &AugmentedShapes,
        pairs: &[(usize, usize)],
    ) -> Vec<f64> {
        let mut v = Vec::with_capacity(pairs.len() * (6 + 2 * prev_s.dim));
        for &(i, j) in pairs {
            v.extend_from_slice(&self.center_pair(prev, cur, i, j));
            v.extend_from_slice(prev_s.row(i));
            v.extend_from_slice(cur_s.row(j));
        }
        v
    }

    fn scatter(size: usize, mask: &[bool], pairs: &[(usize, usize)], vals: &[f64]) -> ResidualMatrix {
        let mut r = ResidualMatrix::masked(size, mask.to_vec());
        for (n, &(i, j)) in pairs.iter().enumerate() {
            r.values[i * size + j] = vals[n];
        }
        r
    }

    /// Learned center residual over all valid pairs.
    pub fn bbox_residual(&self, prev: &AugmentedBoxes, cur: &AugmentedBoxes) -> Result<ResidualMatrix> {
        check_aug(prev.boxes.len(), cur.boxes.len())?;
        let m = prev.boxes.len();
        let mask = pair_mask(&prev.valid, &cur.valid, m - 2);
        let pairs = valid_pairs(&mask, m);
        let input = self.box_residual_input(prev, cur, &pairs);
        let out = self.run_batch(NetId::BoxResidual, &input, pairs.len())?;
        Ok(Self::scatter(m, &mask, &pairs, &out))
    }

    /// Learned descriptor residual over all valid pairs.
    pub fn shape_residual(&self, prev: &AugmentedShapes, cur: &AugmentedShapes) -> Result<ResidualMatrix> {
        check_aug(prev.valid.len(), cur.valid.len())?;
        let d = self.config.shape_dim();
        if prev.dim != d || cur.dim != d {
            return Err(Error::Shape(format!(
                "descriptor widths {} / {} != {d}",
                prev.dim, cur.dim
            )));
        }
        let m = prev.valid.len();
        let mask = pair_mask(&prev.valid, &cur.valid, m - 2);
        let pairs = valid_pairs(&mask, m);
        let input = Self::shape_residual_input(prev, cur, &pairs);
        let out = self.run_batch(NetId::ShapeResidual, &input, pairs.len())?;
        Ok(Self::scatter(m, &mask, &pairs, &out))
    }

    /// Per-pair learned weights `(alpha_v, alpha_b, alpha_s)` and the
    /// Hadamard-weighted sum of the three residuals.
    pub fn fuse_residuals(
        &self,
        voxel: &ResidualMatrix,
        boxes: &ResidualMatrix,
        shapes: &ResidualMatrix,
        aug: (&AugmentedBoxes, &AugmentedBoxes),
        aug_shapes: (&AugmentedShapes, &AugmentedShapes),
    ) -> Result<ResidualMatrix> {
        let m = voxel.size;
        if boxes.size != m || shapes.size != m {
            return Err(Error::Shape("residual matrices differ in size".into()));
        }
        let pairs = valid_pairs(&voxel.valid, m);
        let input = self.fusion_input(aug.0, aug.1, aug_shapes.0, aug_shapes.1, &pairs);
        let alpha = self.run_batch(NetId::Fusion, &input, pairs.len())?;
        let fused: Vec<f64> = pairs
            .iter()
            .enumerate()
            .map(|(n, &(i, j))| {
                let a = &alpha[n * 3..n * 3 + 3];
                a[0] * voxel.get(i, j) + a[1] * boxes.get(i, j) + a[2] * shapes.get(i, j)
            })
            .collect();
        Ok(Self::scatter(m, &voxel.valid, &pairs, &fused))
    }

    fn run_batch(&self, id: NetId, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        if batch == 0 {
            return Ok(Vec::new());
        }
        Ok(self.net(id).forward_batch(input, batch)?.output().to_vec())
    }

    pub fn affinity(&self, prev: &PaddedFrame, cur: &PaddedFrame) -> Result<AffinityOutput> {
        Ok(self.forward(prev, cur)?.0)
    }

    /// Full forward pass keeping intermediate values for [`Self::backward`].
    pub fn forward(&self, prev: &PaddedFrame, cur: &PaddedFrame) -> Result<(AffinityOutput, ForwardCache)> {
        self.check_frame(prev)?;
        self.check_frame(cur)?;
        let n = self.config.n_max;
        let m = n + 2;
        let mode = self.config.residual_mode;

        let (box_out, box_caches) = self.box_anchor_forward(&prev.dets, &cur.dets)?;
        let (shape_out, shape_caches) = self.shape_anchor_forward(prev, cur)?;
        let b_fp = self.box_from_output(&box_out[0]);
        let b_nb = self.box_from_output(&box_out[1]);
        let b_fn = self.box_from_output(&box_out[2]);
        let b_dt = self.box_from_output(&box_out[3]);

        let prev_aug = augment_boxes(&prev.dets, b_nb, b_fp);
        let cur_aug = augment_boxes(&cur.dets, b_dt, b_fn);
        let prev_shapes = augment_shapes(prev, &shape_out[1], &shape_out[0])?;
        let cur_shapes = augment_shapes(cur, &shape_out[3], &shape_out[2])?;

        let mask = pair_mask(&prev_aug.valid, &cur_aug.valid, n);
        let pairs = valid_pairs(&mask, m);
        let np = pairs.len();

        let voxel = if mode.uses_voxel() {
            Some(voxelnet_residual(&prev_aug.boxes, &cur_aug.boxes, &mask)?)
        } else {
            None
        };
        let box_res = if mode.uses_box() && np > 0 {
            let input = self.box_residual_input(&prev_aug, &cur_aug, &pairs);
            Some(self.net(NetId::BoxResidual).forward_batch(&input, np)?)
        } else {
            None
        };
        let shape_res = if mode.uses_shape() && np > 0 {
            let input = Self::shape_residual_input(&prev_shapes, &cur_shapes, &pairs);
            Some(self.net(NetId::ShapeResidual).forward_batch(&input, np)?)
        } else {
            None
        };
        let fusion = if mode == ResidualMode::Fused && np > 0 {
            let input = self.fusion_input(&prev_aug, &cur_aug, &prev_shapes, &cur_shapes, &pairs);
            Some(self.net(NetId::Fusion).forward_batch(&input, np)?)
        } else {
            None
        };

        let residual: Vec<f64> = pairs
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| {
                let rv = voxel.as_ref().map(|(r, _)| r.get(i, j)).unwrap_or(0.0);
                let rb = box_res.as_ref().map(|c| c.output()[k]).unwrap_or(0.0);
                let rs = shape_res.as_ref().map(|c| c.output()[k]).unwrap_or(0.0);
                match mode {
                    ResidualMode::Fused => {
                        let a = &fusion.as_ref().unwrap().output()[k * 3..k * 3 + 3];
                        a[0] * rv + a[1] * rb + a[2] * rs
                    }
                    ResidualMode::VoxelOnly => rv,
                    ResidualMode::BoxOnly => rb,
                    ResidualMode::ShapeOnly => rs,
                }
            })
            .collect();
        if residual.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("overall residual".into()));
        }

        let head = if np > 0 {
            Some(self.net(NetId::Affinity).forward_batch(&residual, np)?)
        } else {
            None
        };
        let mut scores = vec![f64::NAN; m * m];
        if let Some(h) = &head {
            for (k, &(i, j)) in pairs.iter().enumerate() {
                scores[i * m + j] = h.output()[k];
            }
        }
        let out = AffinityOutput::from_scores(n, scores, mask.clone());
        let cache = ForwardCache {
            box_anchor_out: box_out,
            box_anchor_caches: box_caches,
            shape_anchor_caches: shape_caches,
            prev_aug,
            cur_aug,
            mask,
            pairs,
            voxel,
            box_res,
            shape_res,
            fusion,
            head,
        };
        Ok((out, cache))
    }

    /// Total loss `0.5 * (L_fm + L_bm)` against a 0/1 matrix, with its
    /// gradient w.r.t. every network parameter. `None` when the ground truth
    /// carries no mass on either side.
    pub fn loss_and_grad(
        &self,
        prev: &PaddedFrame,
        cur: &PaddedFrame,
        gt: &[f64],
    ) -> Result<Option<(f64, ModelGrads)>> {
        let (out, cache) = self.forward(prev, cur)?;
        let Some((loss, d_scores)) = matching_loss(&out, gt)? else {
            return Ok(None);
        };
        let grads = self.backward(&cache, &d_scores)?;
        Ok(Some((loss, grads)))
    }

    /// Loss only; same value as [`Self::loss_and_grad`].
    pub fn loss(&self, prev: &PaddedFrame, cur: &PaddedFrame, gt: &[f64]) -> Result<Option<f64>> {
        let (out, _) = self.forward(prev, cur)?;
        Ok(matching_loss(&out, gt)?.map(|(l, _)| l))
    }

    /// Reverse pass given `d_scores[i*m + j] = dLoss/dA(i, j)`.
    pub fn backward(&self, cache: &ForwardCache, d_scores: &[f64]) -> Result<ModelGrads> {
        let n = self.config.n_max;
        let m = n + 2;
        let d = self.config.shape_dim();
        let s = self.config.position_scale;
        let mode = self.config.residual_mode;
        let mut grads = ModelGrads::zeros_like(self);
        let pairs = &cache.pairs;
        let np = pairs.len();
        if np == 0 {
            return Ok(grads);
        }

        let d_head: Vec<f64> = pairs.iter().map(|&(i, j)| d_scores[i * m + j]).collect();
        let d_res = self.net(NetId::Affinity).backward_batch(
            cache.head.as_ref().unwrap(),
            &d_head,
            &mut grads.0[NetId::Affinity.index()],
        )?;

        let mut d_rv = vec![0.0; np];
        let mut d_rb = vec![0.0; np];
        let mut d_rs = vec![0.0; np];
        match mode {
            ResidualMode::Fused => {
                let fusion = cache.fusion.as_ref().unwrap();
                let alpha = fusion.output();
                let rb = cache.box_res.as_ref().unwrap().output();
                let rs = cache.shape_res.as_ref().unwrap().output();
                let (rv_mat, _) = cache.voxel.as_ref().unwrap();
                let mut d_alpha = vec![0.0; np * 3];
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    let g = d_res[k];
                    let a = &alpha[k * 3..k * 3 + 3];
                    d_rv[k] = a[0] * g;
                    d_rb[k] = a[1] * g;
                    d_rs[k] = a[2] * g;
                    d_alpha[k * 3] = rv_mat.get(i, j) * g;
                    d_alpha[k * 3 + 1] = rb[k] * g;
                    d_alpha[k * 3 + 2] = rs[k] * g;
                }
                let d_in = self.net(NetId::Fusion).backward_batch(
                    fusion,
                    &d_alpha,
                    &mut grads.0[NetId::Fusion.index()],
                )?;
                let w = 6 + 2 * d;
                let mut dp = AugGrads::new(m, d);
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    let row = &d_in[k * w..(k + 1) * w];
                    dp.add_centers(i, j, &row[..6], s);
                    dp.add_shapes(i, j, &row[6..], d);
                }
                return self.finish_backward(cache, grads, dp, &d_rv, &d_rb, &d_rs);
            }
            ResidualMode::VoxelOnly => d_rv.copy_from_slice(&d_res),
            ResidualMode::BoxOnly => d_rb.copy_from_slice(&d_res),
            ResidualMode::ShapeOnly => d_rs.copy_from_slice(&d_res),
        }
        let dp = AugGrads::new(m, d);
        self.finish_backward(cache, grads, dp, &d_rv, &d_rb, &d_rs)
    }

    fn finish_backward(
        &self,
        cache: &ForwardCache,
        mut grads: ModelGrads,
        mut dp: AugGrads,
        d_rv: &[f64],
        d_rb: &[f64],
        d_rs: &[f64],
    ) -> Result<ModelGrads> {
        let n = self.config.n_max;
        let m = n + 2;
        let d = self.config.shape_dim();
        let s = self.config.position_scale;
        let pairs = &cache.pairs;

        if let Some(c) = &cache.box_res {
            let d_in = self.net(NetId::BoxResidual).backward_batch(
                c,
                d_rb,
                &mut grads.0[NetId::BoxResidual.index()],
            )?;
            for (k, &(i, j)) in pairs.iter().enumerate() {
                dp.add_centers(i, j, &d_in[k * 6..(k + 1) * 6], s);
            }
        }
        if let Some(c) = &cache.shape_res {
            let d_in = self.net(NetId::ShapeResidual).backward_batch(
                c,
                d_rs,
                &mut grads.0[NetId::ShapeResidual.index()],
            )?;
            for (k, &(i, j)) in pairs.iter().enumerate() {
                dp.add_shapes(i, j, &d_in[k * 2 * d..(k + 1) * 2 * d], d);
            }
        }
        if let Some((_, vcache)) = &cache.voxel {
            let mut g = vec![0.0; m * m];
            for (k, &(i, j)) in pairs.iter().enumerate() {
                g[i * m + j] = d_rv[k];
            }
            let (gp, gc) = voxelnet_residual_backward(
                &cache.prev_aug.boxes,
                &cache.cur_aug.boxes,
                &cache.mask,
                vcache,
                &g,
            );
            for r in n..m {
                for a in 0..7 {
                    dp.prev_box[r][a] += gp[r][a];
                    dp.cur_box[r][a] += gc[r][a];
                }
            }
        }

        // Anchor rows: prev n = NB, n+1 = FP; cur n = DT, n+1 = FN.
        let box_grads = [
            dp.prev_box[n + 1],
            dp.prev_box[n],
            dp.cur_box[n + 1],
            dp.cur_box[n],
        ];
        for (k, id) in net_order_box().into_iter().enumerate() {
            let o = &cache.box_anchor_out[k];
            let gb = &box_grads[k];
            let mut go = [0.0; 7];
            for a in 0..3 {
                go[a] = gb[a] * s;
            }
            for a in 3..6 {
                go[a] = gb[a] * o[a].signum() * if o[a] == 0.0 { 0.0 } else { 1.0 };
            }
            go[6] = gb[6];
            self.net(id).backward(&cache.box_anchor_caches[k], &go, &mut grads.0[id.index()])?;
        }
        let shape_rows = [
            dp.prev_shape[(n + 1) * d..(n + 2) * d].to_vec(),
            dp.prev_shape[n * d..(n + 1) * d].to_vec(),
            dp.cur_shape[(n + 1) * d..(n + 2) * d].to_vec(),
            dp.cur_shape[n * d..(n + 1) * d].to_vec(),
        ];
        for (k, id) in net_order_shape().into_iter().enumerate() {
            self.net(id).backward(&cache.shape_anchor_caches[k], &shape_rows[k], &mut grads.0[id.index()])?;
        }
        Ok(grads)
    }
}

/// Gradient accumulators for the augmented blocks.
struct AugGrads {
    prev_box: Vec<[f64; 7]>,
    cur_box: Vec<[f64; 7]>,
    prev_shape: Vec<f64>,
    cur_shape: Vec<f64>,
}

impl AugGrads {
    fn new(m: usize, d: usize) -> Self {
        Self {
            prev_box: vec![[0.0; 7]; m],
            cur_box: vec![[0.0; 7]; m],
            prev_shape: vec![0.0; m * d],
            cur_shape: vec![0.0; m * d],
        }
    }

    /// `g` is the gradient w.r.t. the scaled 6-vector of centers.
    fn add_centers(&mut self, i: usize, j: usize, g: &[f64], scale: f64) {
        for a in 0..3 {
            self.prev_box[i][a] += g[a] / scale;
            self.cur_box[j][a] += g[3 + a] / scale;
        }
    }

    fn add_shapes(&mut self, i: usize, j: usize, g: &[f64], d: usize) {
        for a in 0..d {
            self.prev_shape[i * d + a] += g[a];
            self.cur_shape[j * d + a] += g[d + a];
        }
    }
}

fn check_aug(a: usize, b: usize) -> Result<()> {
    if a != b || a < 2 {
        return Err(Error::Shape(format!("augmented sizes {a} / {b}")));
    }
    Ok(())
}

pub(crate) fn valid_pairs(mask: &[bool], m: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if mask[i * m + j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// `0.5 * (L_fm + L_bm)` and its gradient w.r.t. the raw scores. A side whose
/// ground truth has no mass contributes nothing.
pub fn matching_loss(out: &AffinityOutput, gt: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
    let n = out.n_max;
    let m = n + 2;
    if gt.len() != m * m {
        return Err(Error::Shape(format!(
            "ground truth has {} entries, expected {}",
            gt.len(),
            m * m
        )));
    }
    let max_term = -PROB_FLOOR.ln();
    let mut d_scores = vec![0.0; m * m];

    let fm_mass: f64 = (0..n)
        .filter(|&i| out.forward_rows[i])
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| gt[i * m + j])
        .sum();
    let bm_mass: f64 = (0..n)
        .filter(|&j| out.backward_cols[j])
        .flat_map(|j| (0..m).map(move |i| (i, j)))
        .map(|(i, j)| gt[i * m + j])
        .sum();
    if fm_mass <= 0.0 && bm_mass <= 0.0 {
        return Ok(None);
    }

    let mut loss = 0.0;
    if fm_mass > 0.0 {
        let w = 0.5 / fm_mass;
        for i in 0..n {
            if !out.forward_rows[i] {
                continue;
            }
            for j in 0..m {
                let g = gt[i * m + j];
                if g == 0.0 {
                    continue;
                }
                if !out.valid[i * m + j] {
                    return Err(Error::InvalidInput(format!(
                        "ground truth marks masked entry ({i}, {j})"
                    )));
                }
                let p = out.fm(i, j);
                let term = -p.ln();
                if term >= max_term || !term.is_finite() {
                    loss += w * g * max_term;
                    continue;
                }
                loss += w * g * term;
                for k in 0..m {
                    if out.valid[i * m + k] {
                        let delta = if k == j { 1.0 } else { 0.0 };
                        d_scores[i * m + k] += w * g * (out.fm(i, k) - delta);
                    }
                }
            }
        }
    }
    if bm_mass > 0.0 {
        let w = 0.5 / bm_mass;
        for j in 0..n {
            if !out.backward_cols[j] {
                continue;
            }
            for i in 0..m {
                let g = gt[i * m + j];
                if g == 0.0 {
                    continue;
                }
                if !out.valid[i * m + j] {
                    return Err(Error::InvalidInput(format!(
                        "ground truth marks masked entry ({i}, {j})"
                    )));
                }
                let p = out.bm(i, j);
                let term = -p.ln();
                if term >= max_term || !term.is_finite() {
                    loss += w * g * max_term;
                    continue;
                }
                loss += w * g * term;
                for k in 0..m {
                    if out.valid[k * m + j] {
                        let delta = if k == i { 1.0 } else { 0.0 };
                        d_scores[k * m + j] += w * g * (out.bm(k, j) - delta);
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss is {loss}")));
    }
    Ok(Some((loss, d_scores)))
}
