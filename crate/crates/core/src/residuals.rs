//! BEV shape-descriptor extraction and the closed-form box residual.

use serde::{Deserialize, Serialize};

use crate::domain::BoundingBox3D;
use crate::error::{Error, Result};

/// Dense bird's-eye-view feature map.
///
/// Cell `(col, row)` has its center at `origin + (col, row) * cell_size`;
/// `data` is row-major `height x width x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        cell_size: f64,
        origin: [f64; 2],
    ) -> Result<Self> {
        let grid = Self {
            width,
            height,
            channels,
            cell_size,
            origin,
            data: vec![0.0; width * height * channels],
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn filled(
        width: usize,
        height: usize,
        channels: usize,
        cell_size: f64,
        origin: [f64; 2],
        value: f64,
    ) -> Result<Self> {
        let mut grid = Self::new(width, height, channels, cell_size, origin)?;
        grid.data.fill(value);
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(Error::InvalidInput(format!(
                "BEV grid must be non-empty, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "cell_size {} must be positive",
                self.cell_size
            )));
        }
        if self.data.len() != self.width * self.height * self.channels {
            return Err(Error::Shape(format!(
                "BEV data length {} != {}x{}x{}",
                self.data.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("BEV grid data".into()));
        }
        Ok(())
    }

    #[inline]
    fn offset(&self, col: usize, row: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    pub fn cell(&self, col: usize, row: usize) -> &[f64] {
        let o = self.offset(col, row);
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, col: usize, row: usize) -> &mut [f64] {
        let o = self.offset(col, row);
        let f = self.channels;
        &mut self.data[o..o + f]
    }

    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            self.origin[0] + col as f64 * self.cell_size,
            self.origin[1] + row as f64 * self.cell_size,
        ]
    }
}

/// Fractional lattice coordinate along one axis, clamped to the cell-center
/// lattice. Returns the lower index and the interpolation weight.
fn lattice_coord(pos: f64, origin: f64, cell: f64, n: usize) -> (usize, f64) {
    let f = ((pos - origin) / cell).clamp(0.0, (n - 1) as f64);
    if n == 1 {
        return (0, 0.0);
    }
    let i0 = (f.floor() as usize).min(n - 2);
    (i0, f - i0 as f64)
}

/// Channel-wise bilinear interpolation between the four surrounding cell
/// centers. Queries outside the grid clamp to the boundary lattice.
pub fn bilinear_sample(grid: &BevGrid, x: f64, y: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; grid.channels];
    bilinear_sample_into(grid, x, y, &mut out)?;
    Ok(out)
}

pub fn bilinear_sample_into(grid: &BevGrid, x: f64, y: f64, out: &mut [f64]) -> Result<()> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite(format!("BEV query ({x}, {y})")));
    }
    debug_assert_eq!(out.len(), grid.channels);
    let (c0, tx) = lattice_coord(x, grid.origin[0], grid.cell_size, grid.width);
    let (r0, ty) = lattice_coord(y, grid.origin[1], grid.cell_size, grid.height);
    let c1 = (c0 + 1).min(grid.width - 1);
    let r1 = (r0 + 1).min(grid.height - 1);
    let w00 = (1.0 - tx) * (1.0 - ty);
    let w10 = tx * (1.0 - ty);
    let w01 = (1.0 - tx) * ty;
    let w11 = tx * ty;
    let (a, b, c, d) = (
        grid.cell(c0, r0),
        grid.cell(c1, r0),
        grid.cell(c0, r1),
        grid.cell(c1, r1),
    );
    for k in 0..grid.channels {
        out[k] = w00 * a[k] + w10 * b[k] + w01 * c[k] + w11 * d[k];
    }
    Ok(())
}

/// Which box points contribute to a shape descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorPoints {
    /// Center, left, right, front and back face centers.
    #[default]
    CenterAndFaces,
    CenterOnly,
    FacesOnly,
}

impl DescriptorPoints {
    pub fn count(self) -> usize {
        match self {
            DescriptorPoints::CenterAndFaces => 5,
            DescriptorPoints::CenterOnly => 1,
            DescriptorPoints::FacesOnly => 4,
        }
    }

    /// BEV sample locations in descriptor order.
    pub fn sample_points(self, b: &BoundingBox3D) -> Vec<[f64; 2]> {
        let fwd = b.forward_axis();
        let left = b.left_axis();
        let (hw, hl) = (0.5 * b.w, 0.5 * b.l);
        let center = [b.x, b.y];
        let faces = [
            [b.x + hw * left[0], b.y + hw * left[1]],
            [b.x - hw * left[0], b.y - hw * left[1]],
            [b.x + hl * fwd[0], b.y + hl * fwd[1]],
            [b.x - hl * fwd[0], b.y - hl * fwd[1]],
        ];
        match self {
            DescriptorPoints::CenterAndFaces => {
                let mut v = vec![center];
                v.extend_from_slice(&faces);
                v
            }
            DescriptorPoints::CenterOnly => vec![center],
            DescriptorPoints::FacesOnly => faces.to_vec(),
        }
    }
}

/// Concatenated BEV samples at a box's characteristic points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDescriptor(pub Vec<f64>);

impl ShapeDescriptor {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Five-point descriptor: `[center, left, right, front, back]`, each `F` wide.
pub fn extract_shape_descriptor(grid: &BevGrid, b: &BoundingBox3D) -> Result<ShapeDescriptor> {
    extract_descriptor_with(grid, b, DescriptorPoints::CenterAndFaces)
}

pub fn extract_descriptor_with(
    grid: &BevGrid,
    b: &BoundingBox3D,
    points: DescriptorPoints,
) -> Result<ShapeDescriptor> {
    let f = grid.channels;
    let pts = points.sample_points(b);
    let mut out = vec![0.0; pts.len() * f];
    for (k, p) in pts.iter().enumerate() {
        bilinear_sample_into(grid, p[0], p[1], &mut out[k * f..(k + 1) * f])?;
    }
    Ok(ShapeDescriptor(out))
}

/// Square pairwise score matrix between augmented previous-frame rows and
/// augmented current-frame columns. Invalid entries hold NaN.
#[derive(Debug, Clone)]
pub struct ResidualMatrix {
    pub size: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ResidualMatrix {
    pub fn masked(size: usize, valid: Vec<bool>) -> Self {
        debug_assert_eq!(valid.len(), size * size);
        let values = valid
            .iter()
            .map(|&v| if v { 0.0 } else { f64::NAN })
            .collect();
        Self {
            size,
            values,
            valid,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.size + j]
    }
}

/// Pair validity for an augmented frame pair: both sides valid, and not an
/// anchor/anchor pair (those entries never enter either softmax).
pub fn pair_mask(prev_valid: &[bool], cur_valid: &[bool], n_max: usize) -> Vec<bool> {
    let m = prev_valid.len();
    debug_assert_eq!(cur_valid.len(), m);
    let mut mask = vec![false; m * m];
    for i in 0..m {
        for j in 0..m {
            mask[i * m + j] = prev_valid[i] && cur_valid[j] && !(i >= n_max && j >= n_max);
        }
    }
    mask
}

/// Intermediate terms of the box residual, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct VoxelResidualCache {
    pub size: usize,
    pub center_sq: Vec<f64>,
    pub normalizer: f64,
    pub normalizer_active: bool,
    pub n_valid: usize,
}

fn check_dims(b: &[f64; 7], side: &str, idx: usize) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{side} box {idx}")));
    }
    if b[3] <= 0.0 || b[4] <= 0.0 || b[5] <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "{side} box {idx} has non-positive dimensions ({}, {}, {})",
            b[3], b[4], b[5]
        )));
    }
    Ok(())
}

#[inline]
fn yaw_chord(a: f64, b: f64) -> f64 {
    let u = a.cos() - b.cos();
    let v = a.sin() - b.sin();
    (u * u + v * v).sqrt()
}

/// Box residual `L_c / mean(L_c) + L_d + L_r` over every valid pair.
///
/// `L_c` is the squared center distance, `L_d` the summed absolute log
/// dimension ratios and `L_r` the chord distance between yaw unit vectors.
/// The center term is divided by its mean over valid pairs (divisor 1 when
/// that mean is 0).
pub fn voxelnet_residual(
    prev: &[[f64; 7]],
    cur: &[[f64; 7]],
    valid: &[bool],
) -> Result<(ResidualMatrix, VoxelResidualCache)> {
    let m = prev.len();
    if cur.len() != m || valid.len() != m * m {
        return Err(Error::Shape(format!(
            "voxel residual expects {m}x{m} pairs, got cur={} mask={}",
            cur.len(),
            valid.len()
        )));
    }
    let mut used_prev = vec![false; m];
    let mut used_cur = vec![false; m];
    for i in 0..m {
        for j in 0..m {
            if valid[i * m + j] {
                used_prev[i] = true;
                used_cur[j] = true;
            }
        }
    }
    for i in 0..m {
        if used_prev[i] {
            check_dims(&prev[i], "previous", i)?;
        }
        if used_cur[i] {
            check_dims(&cur[i], "current", i)?;
        }
    }

    let mut center_sq = vec![0.0; m * m];
    let mut sum = 0.0;
    let mut n_valid = 0usize;
    for i in 0..m {
        for j in 0..m {
            if !valid[i * m + j] {
                continue;
            }
            let (p, c) = (&prev[i], &cur[j]);
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            center_sq[i * m + j] = d;
            sum += d;
            n_valid += 1;
        }
    }
    let mean = if n_valid > 0 { sum / n_valid as f64 } else { 0.0 };
    let (normalizer, active) = if mean > 0.0 { (mean, true) } else { (1.0, false) };

    let mut out = ResidualMatrix::masked(m, valid.to_vec());
    for i in 0..m {
        for j in 0..m {
            let k = i * m + j;
            if !valid[k] {
                continue;
            }
            let (p, c) = (&prev[i], &cur[j]);
            let ld = (p[3] / c[3]).ln().abs() + (p[4] / c[4]).ln().abs() + (p[5] / c[5]).ln().abs();
            out.values[k] = center_sq[k] / normalizer + ld + yaw_chord(p[6], c[6]);
        }
    }
    let cache = VoxelResidualCache {
        size: m,
        center_sq,
        normalizer,
        normalizer_active: active,
        n_valid,
    };
    Ok((out, cache))
}

/// Gradient of a scalar loss w.r.t. every augmented box component, given
/// `grad[i*m + j] = dLoss/dR(i, j)` (ignored on invalid entries).
pub fn voxelnet_residual_backward(
    prev: &[[f64; 7]],
    cur: &[[f64; 7]],
    valid: &[bool],
    cache: &VoxelResidualCache,
    grad: &[f64],
) -> (Vec<[f64; 7]>, Vec<[f64; 7]>) {
    let m = cache.size;
    let mut g_prev = vec![[0.0; 7]; m];
    let mut g_cur = vec![[0.0; 7]; m];
    let norm = cache.normalizer;

    // d/dL_c through the mean normalizer.
    let mut cross = 0.0;
    if cache.normalizer_active {
        for k in 0..m * m {
            if valid[k] {
                cross += grad[k] * cache.center_sq[k];
            }
        }
    }
    let shared = if cache.normalizer_active {
        cross / (norm * norm * cache.n_valid as f64)
    } else {
        0.0
    };

    for i in 0..m {
        for j in 0..m {
            let k = i * m + j;
            if !valid[k] {
                continue;
            }
            let g = grad[k];
            let (p, c) = (&prev[i], &cur[j]);
            let g_lc = g / norm - shared;
            for a in 0..3 {
                let d = 2.0 * (p[a] - c[a]) * g_lc;
                g_prev[i][a] += d;
                g_cur[j][a] -= d;
            }
            if g != 0.0 {
                for a in 3..6 {
                    let s = (p[a] / c[a]).ln();
                    let sign = if s > 0.0 {
                        1.0
                    } else if s < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    g_prev[i][a] += g * sign / p[a];
                    g_cur[j][a] -= g * sign / c[a];
                }
                let (ya, yb) = (p[6], c[6]);
                let u = ya.cos() - yb.cos();
                let v = ya.sin() - yb.sin();
                let lr = (u * u + v * v).sqrt();
                if lr > 0.0 {
                    g_prev[i][6] += g * (-u * ya.sin() + v * ya.cos()) / lr;
                    g_cur[j][6] += g * (u * yb.sin() - v * yb.cos()) / lr;
                }
            }
        }
    }
    (g_prev, g_cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ObjectClass;
    use std::f64::consts::FRAC_PI_2;

    fn ramp_grid() -> BevGrid {
        // value(col,row) = col + 2*row on a 4x3 lattice, F = 1
        let mut g = BevGrid::new(4, 3, 1, 1.0, [0.0, 0.0]).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                g.cell_mut(c, r)[0] = c as f64 + 2.0 * r as f64;
            }
        }
        g
    }

    #[test]
    fn sample_at_cell_center_is_cell_value() {
        let g = ramp_grid();
        for r in 0..3 {
            for c in 0..4 {
                let [x, y] = g.cell_center(c, r);
                assert_eq!(bilinear_sample(&g, x, y).unwrap(), g.cell(c, r).to_vec());
            }
        }
    }

    #[test]
    fn centroid_of_four_cells() {
        // cells valued 0,1,2,3 around the query point
        let mut g = BevGrid::new(2, 2, 1, 0.5, [10.0, -4.0]).unwrap();
        g.cell_mut(0, 0)[0] = 0.0;
        g.cell_mut(1, 0)[0] = 1.0;
        g.cell_mut(0, 1)[0] = 2.0;
        g.cell_mut(1, 1)[0] = 3.0;
        let v = bilinear_sample(&g, 10.25, -3.75).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn outside_queries_clamp_to_boundary() {
        let g = ramp_grid();
        let inside = bilinear_sample(&g, 3.0, 1.3).unwrap();
        let outside = bilinear_sample(&g, 50.0, 1.3).unwrap();
        assert_eq!(inside, outside);
        let corner = bilinear_sample(&g, -10.0, -10.0).unwrap();
        assert_eq!(corner, vec![0.0]);
    }

    #[test]
    fn non_finite_queries_are_rejected() {
        let g = ramp_grid();
        assert!(bilinear_sample(&g, f64::NAN, 0.0).is_err());
        assert!(bilinear_sample(&g, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn front_face_lies_along_plus_y_at_zero_yaw() {
        let g = ramp_grid();
        let b = BoundingBox3D::new([1.0, 0.0, 0.0], [2.0, 4.0, 1.5], 0.0, ObjectClass::Car);
        let d = extract_shape_descriptor(&g, &b).unwrap();
        assert_eq!(d.len(), 5);
        let expected = bilinear_sample(&g, 1.0, 2.0).unwrap();
        assert_eq!(d.0[3], expected[0]);
        // back face at (1, -2) clamps to row 0
        assert_eq!(d.0[4], 1.0);
        // left face at (0, 0), right at (2, 0)
        assert_eq!(d.0[1], 0.0);
        assert_eq!(d.0[2], 2.0);
    }

    #[test]
    fn constant_field_gives_constant_descriptor() {
        let g = BevGrid::filled(8, 8, 3, 0.5, [-2.0, -2.0], 0.25).unwrap();
        let b = BoundingBox3D::new([0.3, 0.1, 0.0], [1.9, 4.6, 1.7], 0.7, ObjectClass::Car);
        let d = extract_shape_descriptor(&g, &b).unwrap();
        assert_eq!(d.0, vec![0.25; 15]);
    }

    #[test]
    fn zero_box_samples_clamped_origin() {
        let g = ramp_grid();
        let zero = [0.0; 7];
        let b = BoundingBox3D::new([zero[0], zero[1], 0.0], [0.0, 0.0, 0.0], 0.0, ObjectClass::Car);
        let d = extract_shape_descriptor(&g, &b).unwrap();
        assert_eq!(d.0, vec![0.0; 5]);
    }

    #[test]
    fn descriptor_point_counts() {
        let g = BevGrid::filled(4, 4, 2, 1.0, [0.0, 0.0], 1.0).unwrap();
        let b = BoundingBox3D::new([1.0, 1.0, 0.0], [1.0, 1.0, 1.0], 0.0, ObjectClass::Car);
        for p in [
            DescriptorPoints::CenterAndFaces,
            DescriptorPoints::CenterOnly,
            DescriptorPoints::FacesOnly,
        ] {
            assert_eq!(extract_descriptor_with(&g, &b, p).unwrap().len(), 2 * p.count());
        }
    }

    fn all_valid(m: usize) -> Vec<bool> {
        vec![true; m * m]
    }

    #[test]
    fn identical_boxes_have_zero_residual() {
        let b = [1.0, 2.0, 0.5, 1.9, 4.6, 1.7, 0.3];
        let (r, _) = voxelnet_residual(&[b], &[b], &all_valid(1)).unwrap();
        assert_eq!(r.get(0, 0), 0.0);
    }

    #[test]
    fn center_dimension_and_yaw_terms() {
        let p = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let c = [3.0, 4.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let (_, cache) = voxelnet_residual(&[p], &[c], &all_valid(1)).unwrap();
        assert_eq!(cache.center_sq[0], 25.0);
        // single pair: normalized center term is exactly 1
        let (r, _) = voxelnet_residual(&[p], &[c], &all_valid(1)).unwrap();
        assert!((r.get(0, 0) - 1.0).abs() < 1e-15);

        let p = [0.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0];
        let c = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, FRAC_PI_2];
        let (r, _) = voxelnet_residual(&[p], &[c], &all_valid(1)).unwrap();
        let expected = 2f64.ln() + 2f64.sqrt();
        assert!((r.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn non_positive_dims_are_rejected_only_when_used() {
        let good = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let bad = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        assert!(voxelnet_residual(&[good, bad], &[good, good], &all_valid(2)).is_err());
        // row 1 fully masked: no error
        let mask = vec![true, true, false, false];
        assert!(voxelnet_residual(&[good, bad], &[good, good], &mask).is_ok());
    }

    #[test]
    fn all_invalid_pairs_give_all_masked_output() {
        let b = [0.0; 7];
        let (r, _) = voxelnet_residual(&[b, b], &[b, b], &[false; 4]).unwrap();
        assert!(r.valid.iter().all(|v| !v));
        assert!(r.values.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn pair_mask_excludes_anchor_anchor_block() {
        let prev = [true, false, true, true];
        let cur = [true, true, true, true];
        let mask = pair_mask(&prev, &cur, 2);
        assert!(mask[0]);
        assert!(!mask[1 * 4]);
        assert!(mask[2 * 4]);
        assert!(!mask[2 * 4 + 2]);
        assert!(!mask[3 * 4 + 3]);
        assert!(mask[3 * 4 + 1]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let prev = vec![
            [0.3, -1.2, 0.1, 1.8, 4.2, 1.6, 0.4],
            [5.0, 2.0, -0.3, 2.1, 4.9, 1.5, -1.1],
            [1.0, 1.0, 0.0, 0.9, 1.3, 1.1, 2.3],
        ];
        let cur = vec![
            [0.8, -0.9, 0.2, 1.7, 4.5, 1.8, 0.6],
            [4.4, 2.6, -0.1, 2.4, 4.1, 1.2, -0.7],
            [-2.0, 0.5, 0.4, 1.1, 0.8, 1.4, 1.9],
        ];
        let mut mask = all_valid(3);
        mask[2 * 3 + 2] = false;
        let weights: Vec<f64> = (0..9).map(|k| 0.3 + 0.17 * k as f64).collect();
        let loss = |p: &[[f64; 7]], c: &[[f64; 7]]| {
            let (r, _) = voxelnet_residual(p, c, &mask).unwrap();
            (0..9).filter(|&k| mask[k]).map(|k| weights[k] * r.values[k]).sum::<f64>()
        };
        let (_, cache) = voxelnet_residual(&prev, &cur, &mask).unwrap();
        let (gp, gc) = voxelnet_residual_backward(&prev, &cur, &mask, &cache, &weights);
        let h = 1e-6;
        for side in 0..2 {
            for i in 0..3 {
                for a in 0..7 {
                    let (mut p1, mut c1) = (prev.clone(), cur.clone());
                    let (mut p2, mut c2) = (prev.clone(), cur.clone());
                    if side == 0 {
                        p1[i][a] += h;
                        p2[i][a] -= h;
                    } else {
                        c1[i][a] += h;
                        c2[i][a] -= h;
                    }
                    let num = (loss(&p1, &c1) - loss(&p2, &c2)) / (2.0 * h);
                    let ana = if side == 0 { gp[i][a] } else { gc[i][a] };
                    assert!(
                        (num - ana).abs() < 1e-6 * (1.0 + num.abs()),
                        "side {side} row {i} comp {a}: {num} vs {ana}"
                    );
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = [f64; 7]> {
            (
                -20.0f64..20.0,
                -20.0f64..20.0,
                -2.0f64..2.0,
                0.2f64..5.0,
                0.2f64..5.0,
                0.2f64..5.0,
                -3.1f64..3.1,
            )
                .prop_map(|(x, y, z, w, l, h, r)| [x, y, z, w, l, h, r])
        }

        proptest! {
            #[test]
            fn residual_transposes_under_role_swap(
                a in prop::collection::vec(arb_box(), 3),
                b in prop::collection::vec(arb_box(), 3),
            ) {
                let mask = vec![true; 9];
                let (r1, _) = voxelnet_residual(&a, &b, &mask).unwrap();
                let (r2, _) = voxelnet_residual(&b, &a, &mask).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        prop_assert!((r1.get(i, j) - r2.get(j, i)).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn dimension_term_is_scale_invariant(p in arb_box(), c in arb_box(), k in 0.1f64..10.0) {
                let ld = |p: &[f64; 7], c: &[f64; 7]| {
                    let (r, cache) = voxelnet_residual(&[*p], &[*c], &[true]).unwrap();
                    r.get(0, 0) - cache.center_sq[0] / cache.normalizer - yaw_chord(p[6], c[6])
                };
                let mut ps = p;
                let mut cs = c;
                for a in 3..6 {
                    ps[a] *= k;
                    cs[a] *= k;
                }
                prop_assert!((ld(&p, &c) - ld(&ps, &cs)).abs() < 1e-9);
            }

            #[test]
            fn normalized_center_term_has_unit_mean(
                a in prop::collection::vec(arb_box(), 4),
                b in prop::collection::vec(arb_box(), 4),
            ) {
                let mask = vec![true; 16];
                let (_, cache) = voxelnet_residual(&a, &b, &mask).unwrap();
                let mean: f64 = cache.center_sq.iter().map(|v| v / cache.normalizer).sum::<f64>() / 16.0;
                prop_assert!((mean - 1.0).abs() < 1e-12);
            }

            #[test]
            fn bilinear_is_linear_in_grid(
                d1 in prop::collection::vec(-5.0f64..5.0, 24),
                d2 in prop::collection::vec(-5.0f64..5.0, 24),
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
                x in -1.0f64..5.0,
                y in -1.0f64..4.0,
            ) {
                let mk = |d: Vec<f64>| BevGrid { width: 4, height: 3, channels: 2, cell_size: 1.0, origin: [0.0, 0.0], data: d };
                let g1 = mk(d1.clone());
                let g2 = mk(d2.clone());
                let g3 = mk(d1.iter().zip(&d2).map(|(u, v)| a * u + b * v).collect());
                let s1 = bilinear_sample(&g1, x, y).unwrap();
                let s2 = bilinear_sample(&g2, x, y).unwrap();
                let s3 = bilinear_sample(&g3, x, y).unwrap();
                for k in 0..2 {
                    prop_assert!((s3[k] - (a * s1[k] + b * s2[k])).abs() < 1e-10);
                }
            }
        }
    }
}
