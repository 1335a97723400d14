//! Online track formation driven by the affinity matrix: FP elimination,
//! FN propagation, greedy association, NB initialization, DT termination and
//! sequential confidence refinement.

use serde::{Deserialize, Serialize};

use crate::affinity::{build_gt_affinity, AffinityOutput, GtBox, LabeledFrame, PaddedFrame, ShastaModel};
use crate::domain::{pad_boxes, BoundingBox3D, ClassConfig, TrackState, TrackStatus};
use crate::error::{Error, Result};
use crate::matching::greedy_assign;

/// Which affinity-driven decisions the tracker applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentations {
    pub fp_elimination: bool,
    pub fn_propagation: bool,
    pub nb_initialization: bool,
    pub dt_termination: bool,
}

impl Augmentations {
    pub const ALL: Self = Self {
        fp_elimination: true,
        fn_propagation: true,
        nb_initialization: true,
        dt_termination: true,
    };

    pub const NONE: Self = Self {
        fp_elimination: false,
        fn_propagation: false,
        nb_initialization: false,
        dt_termination: false,
    };

    pub fn any(&self) -> bool {
        self.fp_elimination || self.fn_propagation || self.nb_initialization || self.dt_termination
    }

    /// The four single-augmentation variants, labelled.
    pub fn singles() -> [(&'static str, Self); 4] {
        let n = Self::NONE;
        [
            ("fp_only", Self { fp_elimination: true, ..n }),
            ("fn_only", Self { fn_propagation: true, ..n }),
            ("nb_only", Self { nb_initialization: true, ..n }),
            ("dt_only", Self { dt_termination: true, ..n }),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerOptions {
    pub augmentations: Augmentations,
    /// Without refinement a track reports its latest detection confidence.
    pub refine_confidence: bool,
}

impl TrackerOptions {
    pub fn full() -> Self {
        Self {
            augmentations: Augmentations::ALL,
            refine_confidence: true,
        }
    }

    /// Plain greedy tracking: every unmatched detection starts a track and
    /// tracks report detection confidences.
    pub fn baseline() -> Self {
        Self {
            augmentations: Augmentations::NONE,
            refine_confidence: false,
        }
    }

    pub fn needs_affinity(&self) -> bool {
        self.augmentations.any() || self.refine_confidence
    }
}

impl Default for TrackerOptions {
    fn default() -> Self {
        Self::full()
    }
}

/// Where a step's affinity matrix comes from.
#[derive(Debug, Clone, Copy)]
pub enum Affinity<'a> {
    Model(&'a ShastaModel),
    /// Ground-truth matrices used as probabilities.
    Oracle,
    /// No affinity; only valid with [`TrackerOptions::baseline`].
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionLabel {
    Kept,
    EliminatedFp,
    NewbornCandidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrackFlags {
    pub dt: bool,
    pub fn_: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionDecision {
    pub slot: usize,
    pub label: DetectionLabel,
    pub p_fp: f64,
    pub p_nb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackDecision {
    pub track_id: u64,
    /// Row of the previous-frame detection this track owns, if any.
    pub row: Option<usize>,
    pub flags: TrackFlags,
    pub p_dt: f64,
    pub p_fn: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchTarget {
    /// A real detection in padded slot `k`.
    Detection(usize),
    /// The track's own FN pseudo-detection (or another track's).
    Propagated(u64),
}

/// Everything the tracker decided in one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameDecision {
    pub detections: Vec<DetectionDecision>,
    pub tracks: Vec<TrackDecision>,
    pub matches: Vec<(u64, MatchTarget)>,
    pub born: Vec<u64>,
    pub terminated: Vec<u64>,
}

/// A track as reported for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub track_id: u64,
    /// Box with `confidence == c_trk`.
    pub bbox: BoundingBox3D,
    pub c_trk: f64,
    pub status: TrackStatus,
}

/// DT/FN flags for each valid previous-frame row; strict thresholds.
pub fn classify_tracks(a: &AffinityOutput, cfg: &ClassConfig) -> Vec<TrackFlags> {
    (0..a.n_max)
        .map(|i| {
            if !a.forward_rows[i] {
                return TrackFlags::default();
            }
            TrackFlags {
                dt: a.p_dt(i) > cfg.tau_dt,
                fn_: a.p_fn(i) > cfg.tau_fn,
            }
        })
        .collect()
}

/// Label of each valid current-frame column (`None` on padded slots).
/// Elimination takes precedence over the NB flag.
pub fn classify_detections(a: &AffinityOutput, cfg: &ClassConfig) -> Vec<Option<DetectionLabel>> {
    (0..a.n_max)
        .map(|j| {
            if !a.backward_cols[j] {
                None
            } else if a.p_fp(j) > cfg.tau_fp {
                Some(DetectionLabel::EliminatedFp)
            } else if a.p_nb(j) > cfg.tau_nb {
                Some(DetectionLabel::NewbornCandidate)
            } else {
                Some(DetectionLabel::Kept)
            }
        })
        .collect()
}

/// Moves the planar center by the box velocity over `dt`.
pub fn propagate_fn(b: &BoundingBox3D, dt: f64) -> Result<BoundingBox3D> {
    if !b.vx.is_finite() || !b.vy.is_finite() {
        return Err(Error::NonFinite(format!("velocity ({}, {})", b.vx, b.vy)));
    }
    let mut out = *b;
    out.x += b.vx * dt;
    out.y += b.vy * dt;
    Ok(out)
}

/// Greedy center matching, gate inclusive. Returns `(track, detection)` pairs
/// in acceptance order.
pub fn greedy_match(tracks: &[[f64; 2]], detections: &[[f64; 2]], gate: f64) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize, f64)> = greedy_assign(tracks, detections, gate, false)
        .into_iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|(j, d)| (i, j, d)))
        .collect();
    out.sort_by(|x, y| x.2.total_cmp(&y.2).then(x.0.cmp(&y.0)));
    out.into_iter().map(|(i, j, _)| (i, j)).collect()
}

/// `1[p_fp < beta1] * beta2 * c_det + (1 - beta2) * c_prev`; newborn tracks
/// keep only the first term.
pub fn refine_confidence(
    c_prev: f64,
    c_det: f64,
    p_fp: f64,
    cfg: &ClassConfig,
    newborn: bool,
) -> Result<f64> {
    for (name, v) in [("c_trk", c_prev), ("c_det", c_det), ("p_fp", p_fp)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let gate = if p_fp < cfg.beta1 { 1.0 } else { 0.0 };
    let first = gate * cfg.beta2 * c_det;
    let c = if newborn {
        first
    } else {
        first + (1.0 - cfg.beta2) * c_prev
    };
    Ok(c.clamp(0.0, 1.0))
}

enum Candidate {
    Real(usize),
    Pseudo(usize, BoundingBox3D),
}

/// Per-scene, per-class tracker state.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: ClassConfig,
    pub options: TrackerOptions,
    shape_dim: usize,
    tracks: Vec<TrackState>,
    prev: Option<PaddedFrame>,
    prev_gt: Vec<GtBox>,
    prev_time: Option<f64>,
    next_id: u64,
}

impl Tracker {
    pub fn new(cfg: ClassConfig, options: TrackerOptions, shape_dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            options,
            shape_dim,
            tracks: Vec::new(),
            prev: None,
            prev_gt: Vec::new(),
            prev_time: None,
            next_id: 1,
        })
    }

    /// Live tracks, including those coasting unmatched.
    pub fn tracks(&self) -> &[TrackState] {
        &self.tracks
    }

    fn affinity(
        &self,
        source: Affinity<'_>,
        prev: &PaddedFrame,
        cur: &PaddedFrame,
        cur_gt: &[GtBox],
    ) -> Result<Option<AffinityOutput>> {
        if !self.options.needs_affinity() {
            return Ok(None);
        }
        match source {
            Affinity::Model(model) => {
                if model.config.n_max != self.cfg.n_max {
                    return Err(Error::Config(format!(
                        "model n_max {} != class n_max {}",
                        model.config.n_max, self.cfg.n_max
                    )));
                }
                model.affinity(prev, cur).map(Some)
            }
            Affinity::Oracle => {
                let gt = build_gt_affinity(&prev.dets, &cur.dets, &self.prev_gt, cur_gt)?;
                Ok(Some(AffinityOutput::from_ground_truth(
                    self.cfg.n_max,
                    &gt,
                    &prev.dets.valid,
                    &cur.dets.valid,
                )))
            }
            Affinity::Disabled => Err(Error::Config(
                "these tracker options need an affinity source".into(),
            )),
        }
    }

    /// Processes one frame; `frame.gt` is read only by the oracle.
    pub fn step(
        &mut self,
        timestamp: f64,
        frame: &LabeledFrame,
        source: Affinity<'_>,
    ) -> Result<(Vec<TrackOutput>, FrameDecision)> {
        let dt = match self.prev_time {
            Some(t) if timestamp <= t => {
                return Err(Error::InvalidInput(format!(
                    "timestamp {timestamp} does not follow {t}"
                )))
            }
            Some(t) => timestamp - t,
            None => 0.0,
        };
        let n = self.cfg.n_max;
        let gate = self.cfg.max_match_dist;
        let aug = self.options.augmentations;
        let cur = PaddedFrame::new(pad_boxes(&frame.boxes, n), &frame.descriptors, self.shape_dim)?;
        let prev = self
            .prev
            .take()
            .unwrap_or_else(|| PaddedFrame::empty(n, self.shape_dim));
        let aff = self.affinity(source, &prev, &cur, &frame.gt)?;
        let mut decision = FrameDecision::default();

        // detections; birth evidence is the backward mass not explained by
        // FP or by a row some live track owns
        let owned: Vec<usize> = self.tracks.iter().filter_map(|t| t.last_slot).collect();
        let labels = aff.as_ref().map(|a| classify_detections(a, &self.cfg));
        let mut p_fp = vec![0.0; n];
        let mut nb_flag = vec![false; n];
        let mut eliminated = vec![false; n];
        for j in (0..n).filter(|&j| cur.dets.valid[j]) {
            let (label, pf, pn) = match (&labels, &aff) {
                (Some(l), Some(a)) => (l[j].unwrap_or(DetectionLabel::Kept), a.p_fp(j), a.p_nb(j)),
                _ => (DetectionLabel::Kept, 0.0, 0.0),
            };
            p_fp[j] = pf;
            nb_flag[j] = match &aff {
                Some(a) => {
                    let claimed: f64 = owned.iter().map(|&i| a.bm(i, j)).sum();
                    1.0 - pf - claimed > self.cfg.tau_nb
                }
                None => false,
            };
            eliminated[j] = aug.fp_elimination && label == DetectionLabel::EliminatedFp;
            decision.detections.push(DetectionDecision {
                slot: j,
                label,
                p_fp: pf,
                p_nb: pn,
            });
        }

        // tracks
        let flags = aff.as_ref().map(|a| classify_tracks(a, &self.cfg));
        let mut dt_flag = vec![false; self.tracks.len()];
        let mut cands: Vec<Candidate> = (0..n)
            .filter(|&j| cur.dets.valid[j] && !eliminated[j])
            .map(Candidate::Real)
            .collect();
        let mut queries = Vec::with_capacity(self.tracks.len());
        for (k, tr) in self.tracks.iter().enumerate() {
            let q = propagate_fn(&tr.bbox, dt)?;
            queries.push([q.x, q.y]);
            let (f, pd, pn) = match (tr.last_slot, &flags, &aff) {
                (Some(i), Some(fl), Some(a)) => (fl[i], a.p_dt(i), a.p_fn(i)),
                _ => (TrackFlags::default(), 0.0, 0.0),
            };
            dt_flag[k] = f.dt;
            if aug.fn_propagation && f.fn_ {
                let mut pseudo = q;
                pseudo.confidence = tr.c_trk;
                cands.push(Candidate::Pseudo(k, pseudo));
            }
            decision.tracks.push(TrackDecision {
                track_id: tr.track_id,
                row: tr.last_slot,
                flags: f,
                p_dt: pd,
                p_fn: pn,
            });
        }

        let cand_center = |c: &Candidate| match c {
            Candidate::Real(j) => [cur.dets.boxes[*j][0], cur.dets.boxes[*j][1]],
            Candidate::Pseudo(_, b) => [b.x, b.y],
        };
        let centers: Vec<[f64; 2]> = cands.iter().map(cand_center).collect();
        let pairs = greedy_match(&queries, &centers, gate);
        let mut track_match: Vec<Option<usize>> = vec![None; self.tracks.len()];
        let mut cand_taken = vec![false; cands.len()];
        for &(k, c) in &pairs {
            track_match[k] = Some(c);
            cand_taken[c] = true;
        }

        let real_box = |j: usize| -> BoundingBox3D {
            let src = cur.dets.source_indices[j].expect("valid slot");
            frame.boxes[src]
        };
        let near = |p: [f64; 2], others: &[[f64; 2]]| {
            others
                .iter()
                .any(|o| (o[0] - p[0]).hypot(o[1] - p[1]) <= gate)
        };
        let real_centers: Vec<[f64; 2]> = cands
            .iter()
            .filter(|c| matches!(c, Candidate::Real(_)))
            .map(cand_center)
            .collect();

        let old = std::mem::take(&mut self.tracks);
        let mut next = Vec::with_capacity(old.len());
        for (k, mut tr) in old.into_iter().enumerate() {
            tr.age += 1;
            match track_match[k] {
                Some(c) => {
                    match &cands[c] {
                        Candidate::Real(j) => {
                            let b = real_box(*j);
                            let (vx, vy) = if dt > 0.0 {
                                ((b.x - tr.bbox.x) / dt, (b.y - tr.bbox.y) / dt)
                            } else {
                                (b.vx, b.vy)
                            };
                            tr.c_trk = if self.options.refine_confidence {
                                refine_confidence(tr.c_trk, b.confidence, p_fp[*j], &self.cfg, false)?
                            } else {
                                b.confidence
                            };
                            tr.bbox = b.with_velocity(vx, vy);
                            tr.status = TrackStatus::Active;
                            tr.last_slot = Some(*j);
                            decision.matches.push((tr.track_id, MatchTarget::Detection(*j)));
                        }
                        Candidate::Pseudo(owner, b) => {
                            let mut b = *b;
                            b.confidence = tr.c_trk;
                            tr.bbox = b;
                            tr.status = TrackStatus::Propagated;
                            tr.last_slot = None;
                            let owner_id = decision.tracks[*owner].track_id;
                            decision.matches.push((tr.track_id, MatchTarget::Propagated(owner_id)));
                        }
                    }
                    tr.misses = 0;
                    tr.matched = true;
                    next.push(tr);
                }
                None => {
                    let q = queries[k];
                    if aug.dt_termination && dt_flag[k] && !near(q, &real_centers) {
                        decision.terminated.push(tr.track_id);
                        continue;
                    }
                    tr.misses += 1;
                    if tr.misses > self.cfg.max_age {
                        decision.terminated.push(tr.track_id);
                        continue;
                    }
                    tr.bbox.x = q[0];
                    tr.bbox.y = q[1];
                    tr.status = TrackStatus::Propagated;
                    tr.last_slot = None;
                    tr.matched = false;
                    next.push(tr);
                }
            }
        }

        for (c, cand) in cands.iter().enumerate() {
            let Candidate::Real(j) = *cand else { continue };
            if cand_taken[c] {
                continue;
            }
            if aug.nb_initialization && (!nb_flag[j] || near(centers[c], &queries)) {
                continue;
            }
            let b = real_box(j);
            let c_trk = if self.options.refine_confidence {
                refine_confidence(0.0, b.confidence, p_fp[j], &self.cfg, true)?
            } else {
                b.confidence
            };
            let id = self.next_id;
            self.next_id += 1;
            decision.born.push(id);
            next.push(TrackState {
                track_id: id,
                bbox: b,
                c_trk,
                age: 0,
                status: TrackStatus::Active,
                misses: 0,
                last_slot: Some(j),
                matched: true,
            });
        }
        next.sort_by_key(|t| t.track_id);
        self.tracks = next;
        self.prev = Some(cur);
        self.prev_gt = frame.gt.clone();
        self.prev_time = Some(timestamp);

        let emitted = self
            .tracks
            .iter()
            .filter(|t| t.matched)
            .map(|t| TrackOutput {
                track_id: t.track_id,
                bbox: t.bbox.with_confidence(t.c_trk),
                c_trk: t.c_trk,
                status: t.status,
            })
            .collect();
        Ok((emitted, decision))
    }
}

/// Runs a fresh tracker over one sequence; returns the emitted tracks of
/// every frame.
pub fn track_sequence(
    frames: &[LabeledFrame],
    timestamps: &[f64],
    cfg: ClassConfig,
    options: TrackerOptions,
    shape_dim: usize,
    source: Affinity<'_>,
) -> Result<Vec<Vec<TrackOutput>>> {
    if frames.len() != timestamps.len() {
        return Err(Error::Shape("one timestamp per frame required".into()));
    }
    let mut tracker = Tracker::new(cfg, options, shape_dim)?;
    frames
        .iter()
        .zip(timestamps)
        .map(|(f, &t)| tracker.step(t, f, source).map(|(out, _)| out))
        .collect()
}
