//! Domain types shared across the pipeline: boxes, frames, padded detection
//! blocks, per-class configuration and track state.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residuals::BevGrid;

/// The seven nuScenes tracking categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Bicycle,
    Bus,
    Car,
    Motorcycle,
    Pedestrian,
    Trailer,
    Truck,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 7] = [
        ObjectClass::Bicycle,
        ObjectClass::Bus,
        ObjectClass::Car,
        ObjectClass::Motorcycle,
        ObjectClass::Pedestrian,
        ObjectClass::Trailer,
        ObjectClass::Truck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Bicycle => "bicycle",
            ObjectClass::Bus => "bus",
            ObjectClass::Car => "car",
            ObjectClass::Motorcycle => "motorcycle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Trailer => "trailer",
            ObjectClass::Truck => "truck",
        }
    }

    /// Weight given to the matched detection in confidence refinement.
    pub fn default_beta2(self) -> f64 {
        match self {
            ObjectClass::Bicycle | ObjectClass::Trailer => 0.4,
            ObjectClass::Bus => 0.7,
            _ => 0.5,
        }
    }

    /// Typical (w, l, h) in meters.
    pub fn typical_dims(self) -> [f64; 3] {
        match self {
            ObjectClass::Bicycle => [0.6, 1.7, 1.3],
            ObjectClass::Bus => [2.9, 11.0, 3.5],
            ObjectClass::Car => [1.9, 4.6, 1.7],
            ObjectClass::Motorcycle => [0.8, 2.1, 1.5],
            ObjectClass::Pedestrian => [0.7, 0.7, 1.8],
            ObjectClass::Trailer => [2.9, 12.0, 3.9],
            ObjectClass::Truck => [2.5, 7.0, 3.0],
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectClass::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown class id `{s}`")))
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_yaw(angle: f64) -> Result<f64> {
    if !angle.is_finite() {
        return Err(Error::NonFinite(format!("yaw {angle}")));
    }
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the other boundary
    if a <= -PI {
        a += 2.0 * PI;
    }
    Ok(a)
}

/// 7-DoF box with planar velocity and detector confidence.
///
/// Heading convention: at `yaw = 0` the box's length axis points along +y;
/// positive yaw rotates counter-clockwise about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub confidence: f64,
    pub class: ObjectClass,
}

impl BoundingBox3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64, class: ObjectClass) -> Self {
        Self {
            x: center[0],
            y: center[1],
            z: center[2],
            w: dims[0],
            l: dims[1],
            h: dims[2],
            yaw,
            vx: 0.0,
            vy: 0.0,
            confidence: 1.0,
            class,
        }
    }

    pub fn with_velocity(mut self, vx: f64, vy: f64) -> Self {
        self.vx = vx;
        self.vy = vy;
        self
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// `(x, y, z, w, l, h, yaw)`
    pub fn to_array7(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.yaw]
    }

    pub fn planar_distance(&self, other: &BoundingBox3D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Unit vector of the length axis.
    pub fn forward_axis(&self) -> [f64; 2] {
        [-self.yaw.sin(), self.yaw.cos()]
    }

    /// Unit vector of the width axis, pointing to the box's left.
    pub fn left_axis(&self) -> [f64; 2] {
        [-self.yaw.cos(), -self.yaw.sin()]
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.x,
            self.y,
            self.z,
            self.w,
            self.l,
            self.h,
            self.yaw,
            self.vx,
            self.vy,
            self.confidence,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("box {self:?}")));
        }
        if self.w <= 0.0 || self.l <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "box dimensions must be positive, got ({}, {}, {})",
                self.w, self.l, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidInput(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Detections of one class at one timestamp.
#[derive(Debug, Clone)]
pub struct DetectionFrame {
    pub timestamp: f64,
    pub boxes: Vec<BoundingBox3D>,
    pub bev: Option<BevGrid>,
}

impl DetectionFrame {
    pub fn new(timestamp: f64, boxes: Vec<BoundingBox3D>) -> Self {
        Self {
            timestamp,
            boxes,
            bev: None,
        }
    }
}

/// Fixed-capacity detection block fed to the affinity model.
///
/// Padded slots are exactly zero and carry `valid == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedDetections {
    pub boxes: Vec<[f64; 7]>,
    pub velocities: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    pub valid: Vec<bool>,
    /// Slot -> index into the original detection list.
    pub source_indices: Vec<Option<usize>>,
}

impl PaddedDetections {
    pub fn empty(n_max: usize) -> Self {
        Self {
            boxes: vec![[0.0; 7]; n_max],
            velocities: vec![[0.0; 2]; n_max],
            confidences: vec![0.0; n_max],
            valid: vec![false; n_max],
            source_indices: vec![None; n_max],
        }
    }

    pub fn n_max(&self) -> usize {
        self.boxes.len()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Slot holding original detection `index`, if it was kept.
    pub fn slot_of(&self, index: usize) -> Option<usize> {
        self.source_indices.iter().position(|s| *s == Some(index))
    }
}

/// Keeps at most `n_max` boxes (highest confidence first, ties by index) and
/// zero-pads the rest. Kept boxes stay in their original relative order.
pub fn pad_boxes(boxes: &[BoundingBox3D], n_max: usize) -> PaddedDetections {
    let mut keep: Vec<usize> = (0..boxes.len()).collect();
    if boxes.len() > n_max {
        keep.sort_by(|&a, &b| {
            boxes[b]
                .confidence
                .total_cmp(&boxes[a].confidence)
                .then(a.cmp(&b))
        });
        keep.truncate(n_max);
        keep.sort_unstable();
    }
    let mut out = PaddedDetections::empty(n_max);
    for (slot, &idx) in keep.iter().enumerate() {
        let b = &boxes[idx];
        out.boxes[slot] = b.to_array7();
        out.velocities[slot] = [b.vx, b.vy];
        out.confidences[slot] = b.confidence;
        out.valid[slot] = true;
        out.source_indices[slot] = Some(idx);
    }
    out
}

pub fn pad_or_sample(frame: &DetectionFrame, cfg: &ClassConfig) -> PaddedDetections {
    pad_boxes(&frame.boxes, cfg.n_max)
}

/// Per-class thresholds and capacities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassConfig {
    pub class: ObjectClass,
    pub n_max: usize,
    pub tau_fp: f64,
    pub tau_fn: f64,
    pub tau_nb: f64,
    pub tau_dt: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Planar gate for greedy matching and the NB/DT distance checks, meters.
    pub max_match_dist: f64,
    /// Consecutive unmatched frames a non-DT track survives.
    pub max_age: u32,
}

impl ClassConfig {
    pub fn for_class(class: ObjectClass) -> Self {
        Self {
            class,
            n_max: 20,
            tau_fp: 0.7,
            tau_fn: 0.5,
            tau_nb: 0.5,
            tau_dt: 0.5,
            beta1: 0.5,
            beta2: class.default_beta2(),
            max_match_dist: 5.0,
            max_age: 3,
        }
    }

    /// Gate derived from the fastest expected object: `2 * v_max * dt + 1`.
    pub fn with_speed_envelope(mut self, v_max: f64, dt: f64) -> Self {
        self.max_match_dist = 2.0 * v_max * dt + 1.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("tau_fp", self.tau_fp),
            ("tau_fn", self.tau_fn),
            ("tau_nb", self.tau_nb),
            ("tau_dt", self.tau_dt),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.beta1 > self.tau_fp {
            return Err(Error::Config(format!(
                "beta1 ({}) must not exceed tau_fp ({})",
                self.beta1, self.tau_fp
            )));
        }
        if !(20..=90).contains(&self.n_max) {
            return Err(Error::Config(format!(
                "n_max = {} outside [20, 90]",
                self.n_max
            )));
        }
        if !(self.max_match_dist > 0.0 && self.max_match_dist.is_finite()) {
            return Err(Error::Config(format!(
                "max_match_dist = {} must be positive",
                self.max_match_dist
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Active,
    Propagated,
    Dead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub track_id: u64,
    pub bbox: BoundingBox3D,
    pub c_trk: f64,
    pub age: u32,
    pub status: TrackStatus,
    /// Consecutive frames without any match (real or propagated).
    pub misses: u32,
    /// Slot of the detection this track matched in the previous frame.
    pub(crate) last_slot: Option<usize>,
    /// Whether the track was matched (and is emitted) in the latest frame.
    pub(crate) matched: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(conf: f64) -> BoundingBox3D {
        BoundingBox3D::new([conf, 0.0, 0.0], [1.0, 2.0, 1.5], 0.0, ObjectClass::Car)
            .with_confidence(conf)
    }

    #[test]
    fn pads_short_frames() {
        let boxes: Vec<_> = [0.9, 0.5, 0.7].iter().map(|&c| boxed(c)).collect();
        let p = pad_boxes(&boxes, 5);
        assert_eq!(p.valid, vec![true, true, true, false, false]);
        assert_eq!(p.boxes[1], boxes[1].to_array7());
        assert_eq!(p.boxes[3], [0.0; 7]);
        assert_eq!(p.boxes[4], [0.0; 7]);
        assert_eq!(p.confidences[4], 0.0);
        assert_eq!(p.source_indices[2], Some(2));
    }

    #[test]
    fn empty_frame_is_all_padding() {
        let p = pad_boxes(&[], 20);
        assert_eq!(p.num_valid(), 0);
        assert!(p.boxes.iter().all(|b| *b == [0.0; 7]));
    }

    #[test]
    fn over_capacity_keeps_most_confident_in_original_order() {
        // Shuffled confidences 0.3..0.9; oracle: sort descending, take 5.
        let confs = [0.5, 0.9, 0.3, 0.7, 0.4, 0.8, 0.6];
        let boxes: Vec<_> = confs.iter().map(|&c| boxed(c)).collect();
        let mut oracle: Vec<usize> = (0..confs.len()).collect();
        oracle.sort_by(|&a, &b| confs[b].partial_cmp(&confs[a]).unwrap());
        let mut oracle: Vec<usize> = oracle[..5].to_vec();
        oracle.sort();
        assert_eq!(oracle, vec![0, 1, 3, 5, 6]);

        let p = pad_boxes(&boxes, 5);
        let kept: Vec<usize> = p.source_indices.iter().map(|s| s.unwrap()).collect();
        assert_eq!(kept, oracle);
        assert!(p.confidences.iter().all(|&c| c >= 0.5));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let boxes: Vec<_> = [0.5, 0.5, 0.5].iter().map(|&c| boxed(c)).collect();
        let p = pad_boxes(&boxes, 2);
        assert_eq!(p.source_indices, vec![Some(0), Some(1)]);
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(normalize_yaw(0.0).unwrap(), 0.0);
        assert!((normalize_yaw(1.5 * PI).unwrap() + 0.5 * PI).abs() < 1e-12);
        assert_eq!(normalize_yaw(-PI).unwrap(), PI);
        assert_eq!(normalize_yaw(PI).unwrap(), PI);
        assert!(normalize_yaw(f64::NAN).is_err());
        assert!(normalize_yaw(f64::INFINITY).is_err());
    }

    #[test]
    fn class_config_defaults_validate() {
        for class in ObjectClass::ALL {
            ClassConfig::for_class(class).validate().unwrap();
        }
        assert_eq!(ClassConfig::for_class(ObjectClass::Bus).beta2, 0.7);
        assert_eq!(ClassConfig::for_class(ObjectClass::Bicycle).beta2, 0.4);
        assert_eq!(ClassConfig::for_class(ObjectClass::Trailer).beta2, 0.4);
        assert_eq!(ClassConfig::for_class(ObjectClass::Car).beta2, 0.5);
        let mut bad = ClassConfig::for_class(ObjectClass::Car);
        bad.beta1 = 0.8;
        assert!(bad.validate().is_err());
        bad = ClassConfig::for_class(ObjectClass::Car);
        bad.n_max = 10;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn class_names_round_trip() {
        for class in ObjectClass::ALL {
            assert_eq!(class.name().parse::<ObjectClass>().unwrap(), class);
        }
        assert!("tram".parse::<ObjectClass>().is_err());
    }

    #[test]
    fn speed_envelope_gate() {
        let cfg = ClassConfig::for_class(ObjectClass::Car).with_speed_envelope(4.0, 0.5);
        assert_eq!(cfg.max_match_dist, 5.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn valid_count_is_min_of_count_and_capacity(
                confs in prop::collection::vec(0.0f64..=1.0, 0..40),
                n_max in 1usize..30,
            ) {
                let boxes: Vec<_> = confs.iter().map(|&c| boxed(c)).collect();
                let p = pad_boxes(&boxes, n_max);
                prop_assert_eq!(p.num_valid(), confs.len().min(n_max));
                for s in 0..n_max {
                    if !p.valid[s] {
                        prop_assert_eq!(p.boxes[s], [0.0; 7]);
                        prop_assert_eq!(p.confidences[s], 0.0);
                    }
                }
            }

            #[test]
            fn padding_is_idempotent_on_real_boxes(
                confs in prop::collection::vec(0.0f64..=1.0, 0..40),
                n_max in 1usize..30,
            ) {
                let boxes: Vec<_> = confs.iter().map(|&c| boxed(c)).collect();
                let p = pad_boxes(&boxes, n_max);
                let kept: Vec<_> = p.source_indices.iter().flatten().map(|&i| boxes[i]).collect();
                let again = pad_boxes(&kept, n_max);
                prop_assert_eq!(&again.boxes, &p.boxes);
                prop_assert_eq!(&again.valid, &p.valid);
            }

            #[test]
            fn yaw_in_range(a in -100.0f64..100.0) {
                let y = normalize_yaw(a).unwrap();
                prop_assert!(y > -PI && y <= PI);
                let k = ((a - y) / (2.0 * PI)).round();
                prop_assert!((k * 2.0 * PI - (a - y)).abs() < 1e-9);
            }
        }
    }
}
