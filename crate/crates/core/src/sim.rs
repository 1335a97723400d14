//! Deterministic scene generator: ground-truth trajectories, corrupted
//! detections and a BEV feature field in which every object stamps its own
//! latent shape vector.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::affinity::{GtBox, LabeledFrame};
use crate::domain::{normalize_yaw, BoundingBox3D, ObjectClass};
use crate::error::{Error, Result};
use crate::residuals::{extract_shape_descriptor, BevGrid, DescriptorPoints};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub num_scenes: usize,
    /// Index of the first generated scene; lets disjoint splits share a seed.
    pub first_scene: usize,
    pub frames_per_scene: usize,
    /// Hz.
    pub frame_rate: f64,
    /// Side of the square arena, meters. The arena spans `[0, arena_size]^2`.
    pub arena_size: f64,
    pub cell_size: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Turn rates are drawn from `[-turn_rate_max, turn_rate_max]`, rad/s.
    pub turn_rate_max: f64,
    /// Inclusive frame range for births.
    pub birth_window: (usize, usize),
    /// Inclusive frame range for scheduled deaths; frames past the end mean
    /// the object survives.
    pub death_window: (usize, usize),
    /// Minimum distance between a newborn and every live object.
    pub spawn_clearance: f64,
    /// Two live objects closer than this: the younger one is removed.
    pub min_separation: f64,
    pub sigma_pos: f64,
    /// Relative dimension noise.
    pub sigma_dim: f64,
    pub sigma_yaw: f64,
    pub sigma_vel: f64,
    /// Expected clutter boxes per live object per frame.
    pub fp_rate: f64,
    /// Miss probability per object and frame.
    pub fn_rate: f64,
    pub tp_conf_mean: f64,
    pub tp_conf_std: f64,
    pub fp_conf_mean: f64,
    pub fp_conf_std: f64,
    /// BEV channels `F`.
    pub channels: usize,
    pub occlusion: bool,
    /// Miss-rate multiplier for objects whose footprint overlaps another's.
    pub occlusion_factor: f64,
    pub latent_std: f64,
    pub cell_noise: f64,
    pub background_mean: f64,
    pub background_std: f64,
    pub classes: Vec<ObjectClass>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_scenes: 200,
            first_scene: 0,
            frames_per_scene: 40,
            frame_rate: 2.0,
            arena_size: 64.0,
            cell_size: 1.0,
            objects_min: 4,
            objects_max: 10,
            speed_min: 1.0,
            speed_max: 4.0,
            turn_rate_max: 0.2,
            birth_window: (0, 20),
            death_window: (20, 60),
            spawn_clearance: 6.0,
            min_separation: 2.0,
            sigma_pos: 0.15,
            sigma_dim: 0.05,
            sigma_yaw: 0.05,
            sigma_vel: 0.3,
            fp_rate: 0.3,
            fn_rate: 0.1,
            tp_conf_mean: 0.7,
            tp_conf_std: 0.15,
            fp_conf_mean: 0.45,
            fp_conf_std: 0.15,
            channels: 4,
            occlusion: true,
            occlusion_factor: 3.0,
            latent_std: 1.0,
            cell_noise: 0.05,
            background_mean: 0.0,
            background_std: 0.3,
            classes: vec![ObjectClass::Car],
        }
    }
}

impl SimConfig {
    /// Exact detections: no jitter, no clutter, no misses.
    pub fn noise_free(mut self) -> Self {
        self.sigma_pos = 0.0;
        self.sigma_dim = 0.0;
        self.sigma_yaw = 0.0;
        self.sigma_vel = 0.0;
        self.fp_rate = 0.0;
        self.fn_rate = 0.0;
        self.occlusion = false;
        self
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }

    /// Greedy-matching gate matched to the speed envelope.
    pub fn match_gate(&self) -> f64 {
        2.0 * self.speed_max * self.dt() + 1.0
    }

    pub fn grid_cells(&self) -> usize {
        (self.arena_size / self.cell_size).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames_per_scene < 2 {
            return bad(format!("frames_per_scene = {} < 2", self.frames_per_scene));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad("frame_rate must be positive".into());
        }
        if !(self.arena_size > 0.0 && self.cell_size > 0.0) || self.grid_cells() == 0 {
            return bad("arena_size and cell_size must be positive".into());
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min > objects_max".into());
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max) {
            return bad("speed range must satisfy 0 <= min <= max".into());
        }
        for (name, r) in [("fp_rate", self.fp_rate), ("fn_rate", self.fn_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} = {r} outside [0, 1]"));
            }
        }
        let sigmas = [
            ("sigma_pos", self.sigma_pos),
            ("sigma_dim", self.sigma_dim),
            ("sigma_yaw", self.sigma_yaw),
            ("sigma_vel", self.sigma_vel),
            ("tp_conf_std", self.tp_conf_std),
            ("fp_conf_std", self.fp_conf_std),
            ("latent_std", self.latent_std),
            ("cell_noise", self.cell_noise),
            ("background_std", self.background_std),
            ("turn_rate_max", self.turn_rate_max),
            ("occlusion_factor", self.occlusion_factor),
            ("spawn_clearance", self.spawn_clearance),
            ("min_separation", self.min_separation),
        ];
        for (name, s) in sigmas {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} = {s} must be finite and >= 0"));
            }
        }
        if self.birth_window.0 > self.birth_window.1 || self.death_window.0 > self.death_window.1 {
            return bad("birth/death windows must be ordered".into());
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        Ok(())
    }
}

/// One simulated object over its lifetime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub gt_id: u64,
    pub class: ObjectClass,
    pub latent: Vec<f64>,
    pub first_frame: usize,
    /// Exact box for each frame from `first_frame` on.
    pub boxes: Vec<BoundingBox3D>,
}

impl GroundTruthTrack {
    pub fn box_at(&self, frame: usize) -> Option<&BoundingBox3D> {
        frame
            .checked_sub(self.first_frame)
            .and_then(|k| self.boxes.get(k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub timestamp: f64,
    pub gt: Vec<GtBox>,
    pub detections: Vec<BoundingBox3D>,
    /// Five-point descriptors (`5F`), one per detection.
    pub descriptors: Vec<Vec<f64>>,
    /// Generating object of each detection; `None` for clutter.
    pub sources: Vec<Option<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: usize,
    pub tracks: Vec<GroundTruthTrack>,
    pub frames: Vec<SceneFrame>,
}

impl Scene {
    /// Training/tracking view of one class, with descriptors cut down to the
    /// requested sample points.
    pub fn labeled_frames(&self, class: ObjectClass, points: DescriptorPoints) -> Vec<LabeledFrame> {
        self.frames
            .iter()
            .map(|f| class_frame(f, class, points))
            .collect()
    }
}

pub fn class_frame(f: &SceneFrame, class: ObjectClass, points: DescriptorPoints) -> LabeledFrame {
    let keep: Vec<usize> = (0..f.detections.len())
        .filter(|&k| f.detections[k].class == class)
        .collect();
    LabeledFrame {
        boxes: keep.iter().map(|&k| f.detections[k]).collect(),
        descriptors: keep
            .iter()
            .map(|&k| slice_descriptor(&f.descriptors[k], points))
            .collect(),
        gt: f
            .gt
            .iter()
            .filter(|g| g.bbox.class == class)
            .cloned()
            .collect(),
    }
}

/// Cuts a five-point descriptor `[center, left, right, front, back]` down to
/// the requested points.
pub fn slice_descriptor(full: &[f64], points: DescriptorPoints) -> Vec<f64> {
    let f = full.len() / 5;
    match points {
        DescriptorPoints::CenterAndFaces => full.to_vec(),
        DescriptorPoints::CenterOnly => full[..f].to_vec(),
        DescriptorPoints::FacesOnly => full[f..].to_vec(),
    }
}

/// Independent stream per `(seed, scene, salt)`.
fn stream(seed: u64, scene: usize, salt: u64) -> ChaCha8Rng {
    let mut z = seed
        .wrapping_add((scene as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    }
}

fn draw_confidence(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    let c = if std > 0.0 {
        Normal::new(mean, std).expect("std checked").sample(rng)
    } else {
        mean
    };
    c.clamp(0.01, 0.99)
}

fn draw_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct Mover {
    id: u64,
    class: ObjectClass,
    latent: Vec<f64>,
    birth: usize,
    death: usize,
    dims: [f64; 3],
    speed: f64,
    turn: f64,
    pos: [f64; 2],
    heading: f64,
    boxes: Vec<BoundingBox3D>,
    alive: bool,
}

impl Mover {
    fn bbox(&self) -> BoundingBox3D {
        let fwd = [-self.heading.sin(), self.heading.cos()];
        let yaw = normalize_yaw(self.heading).expect("finite heading");
        BoundingBox3D::new(
            [self.pos[0], self.pos[1], 0.5 * self.dims[2]],
            self.dims,
            yaw,
            self.class,
        )
        .with_velocity(self.speed * fwd[0], self.speed * fwd[1])
    }
}

/// Generates scene `scene_index`; a pure function of `(cfg, scene_index)`.
pub fn generate_scene(cfg: &SimConfig, scene_index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, scene_index, 1);
    let dt = cfg.dt();
    let size = cfg.arena_size;
    let t_count = cfg.frames_per_scene;
    let n_obj = rng.random_range(cfg.objects_min..=cfg.objects_max);

    let mut movers: Vec<Mover> = (0..n_obj)
        .map(|k| {
            let class = cfg.classes[rng.random_range(0..cfg.classes.len())];
            let typical = class.typical_dims();
            let dims = typical.map(|d| d * (1.0 + 0.1 * gauss(&mut rng, 1.0)).clamp(0.7, 1.3));
            let latent = (0..cfg.channels)
                .map(|_| gauss(&mut rng, cfg.latent_std))
                .collect();
            let birth = rng.random_range(cfg.birth_window.0..=cfg.birth_window.1);
            let death = rng.random_range(cfg.death_window.0..=cfg.death_window.1);
            Mover {
                id: k as u64 + 1,
                class,
                latent,
                birth,
                death: death.max(birth + 2),
                dims,
                speed: draw_range(&mut rng, cfg.speed_min, cfg.speed_max),
                turn: draw_range(&mut rng, -cfg.turn_rate_max, cfg.turn_rate_max),
                pos: [0.0; 2],
                heading: 0.0,
                boxes: Vec::new(),
                alive: false,
            }
        })
        .collect();
    let mut first_frame = vec![usize::MAX; n_obj];
    let mut retired = vec![false; n_obj];

    for t in 0..t_count {
        // move, then retire, then spawn
        for m in movers.iter_mut().filter(|m| m.alive) {
            m.heading += m.turn * dt;
            let fwd = [-m.heading.sin(), m.heading.cos()];
            m.pos[0] += m.speed * dt * fwd[0];
            m.pos[1] += m.speed * dt * fwd[1];
        }
        for k in 0..n_obj {
            let m = &movers[k];
            if !m.alive {
                continue;
            }
            let outside = m.pos.iter().any(|p| *p < 0.0 || *p > size);
            if t >= m.death || outside {
                movers[k].alive = false;
                retired[k] = true;
            }
        }
        for k in 0..n_obj {
            if !movers[k].alive {
                continue;
            }
            for j in 0..k {
                if !movers[j].alive {
                    continue;
                }
                let d = (movers[k].pos[0] - movers[j].pos[0])
                    .hypot(movers[k].pos[1] - movers[j].pos[1]);
                if d < cfg.min_separation {
                    // later born (higher index on ties) yields
                    let younger = if first_frame[j] > first_frame[k] { j } else { k };
                    movers[younger].alive = false;
                    retired[younger] = true;
                }
            }
        }
        for k in 0..n_obj {
            if retired[k] || movers[k].alive || movers[k].birth != t {
                continue;
            }
            let margin = (0.15 * size).min(8.0);
            let mut placed = None;
            for _ in 0..100 {
                let p = [
                    draw_range(&mut rng, margin, size - margin),
                    draw_range(&mut rng, margin, size - margin),
                ];
                let clear = movers.iter().filter(|o| o.alive).all(|o| {
                    (o.pos[0] - p[0]).hypot(o.pos[1] - p[1]) >= cfg.spawn_clearance
                });
                if clear {
                    placed = Some(p);
                    break;
                }
            }
            match placed {
                Some(p) => {
                    let m = &mut movers[k];
                    m.pos = p;
                    m.heading = draw_range(&mut rng, -PI, PI);
                    m.alive = true;
                    first_frame[k] = t;
                }
                None => retired[k] = true,
            }
        }
        for m in movers.iter_mut().filter(|m| m.alive) {
            let b = m.bbox();
            m.boxes.push(b);
        }
    }

    let tracks: Vec<GroundTruthTrack> = movers
        .iter()
        .enumerate()
        .filter(|(k, _)| first_frame[*k] != usize::MAX)
        .map(|(k, m)| GroundTruthTrack {
            gt_id: m.id,
            class: m.class,
            latent: m.latent.clone(),
            first_frame: first_frame[k],
            boxes: m.boxes.clone(),
        })
        .collect();

    let radius: Vec<f64> = tracks
        .iter()
        .map(|tr| 0.5 * tr.boxes[0].w.hypot(tr.boxes[0].l))
        .collect();

    let mut det_rng = stream(cfg.seed, scene_index, 2);
    let mut frames = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let live: Vec<(usize, &BoundingBox3D)> = tracks
            .iter()
            .enumerate()
            .filter_map(|(k, tr)| tr.box_at(t).map(|b| (k, b)))
            .collect();
        let gt: Vec<GtBox> = live
            .iter()
            .map(|(k, b)| GtBox {
                gt_id: tracks[*k].gt_id,
                bbox: **b,
            })
            .collect();
        let mut detections = Vec::new();
        let mut sources = Vec::new();
        for (a, (k, b)) in live.iter().enumerate() {
            let occluded = cfg.occlusion
                && live.iter().enumerate().any(|(c, (j, o))| {
                    c != a && b.planar_distance(o) < radius[*k] + radius[*j]
                });
            let p_miss = if occluded {
                (cfg.fn_rate * cfg.occlusion_factor).min(1.0)
            } else {
                cfg.fn_rate
            };
            let miss = det_rng.random::<f64>() < p_miss;
            let det = jitter(cfg, b, &mut det_rng)?;
            if !miss {
                detections.push(det);
                sources.push(Some(tracks[*k].gt_id));
            }
        }
        let lambda = cfg.fp_rate * live.len() as f64;
        let n_fp = if lambda > 0.0 {
            Poisson::new(lambda).expect("lambda > 0").sample(&mut det_rng) as usize
        } else {
            0
        };
        for _ in 0..n_fp {
            detections.push(clutter_box(cfg, &mut det_rng));
            sources.push(None);
        }
        frames.push(SceneFrame {
            timestamp: t as f64 * dt,
            gt,
            detections,
            descriptors: Vec::new(),
            sources,
        });
    }

    let mut scene = Scene {
        index: scene_index,
        tracks,
        frames,
    };
    for t in 0..t_count {
        let grid = render_bev(cfg, &scene, t)?;
        let descs = scene.frames[t]
            .detections
            .iter()
            .map(|b| extract_shape_descriptor(&grid, b).map(|d| d.0))
            .collect::<Result<Vec<_>>>()?;
        scene.frames[t].descriptors = descs;
    }
    Ok(scene)
}

fn jitter(cfg: &SimConfig, b: &BoundingBox3D, rng: &mut ChaCha8Rng) -> Result<BoundingBox3D> {
    let mut d = *b;
    d.x += gauss(rng, cfg.sigma_pos);
    d.y += gauss(rng, cfg.sigma_pos);
    d.z += gauss(rng, 0.5 * cfg.sigma_pos);
    d.w *= (1.0 + gauss(rng, cfg.sigma_dim)).max(0.5);
    d.l *= (1.0 + gauss(rng, cfg.sigma_dim)).max(0.5);
    d.h *= (1.0 + gauss(rng, cfg.sigma_dim)).max(0.5);
    d.yaw = normalize_yaw(d.yaw + gauss(rng, cfg.sigma_yaw))?;
    d.vx += gauss(rng, cfg.sigma_vel);
    d.vy += gauss(rng, cfg.sigma_vel);
    d.confidence = draw_confidence(rng, cfg.tp_conf_mean, cfg.tp_conf_std);
    Ok(d)
}

fn clutter_box(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> BoundingBox3D {
    let class = cfg.classes[rng.random_range(0..cfg.classes.len())];
    let dims = class
        .typical_dims()
        .map(|d| d * (1.0 + 0.1 * gauss(rng, 1.0)).clamp(0.7, 1.3));
    let size = cfg.arena_size;
    let x = draw_range(rng, 0.0, size);
    let y = draw_range(rng, 0.0, size);
    let yaw = draw_range(rng, -PI, PI);
    let speed = draw_range(rng, 0.0, cfg.speed_max);
    let heading = draw_range(rng, -PI, PI);
    let conf = draw_confidence(rng, cfg.fp_conf_mean, cfg.fp_conf_std);
    BoundingBox3D::new([x, y, 0.5 * dims[2]], dims, normalize_yaw(yaw).expect("finite"), class)
        .with_velocity(-speed * heading.sin(), speed * heading.cos())
        .with_confidence(conf)
}

/// Whether world point `p` lies inside the box footprint.
pub fn footprint_contains(b: &BoundingBox3D, p: [f64; 2]) -> bool {
    let d = [p[0] - b.x, p[1] - b.y];
    let fwd = b.forward_axis();
    let left = b.left_axis();
    let along = d[0] * fwd[0] + d[1] * fwd[1];
    let across = d[0] * left[0] + d[1] * left[1];
    along.abs() <= 0.5 * b.l && across.abs() <= 0.5 * b.w
}

/// Renders the BEV field of one frame: cells inside a ground-truth footprint
/// carry the object's latent vector (averaged where footprints overlap) plus
/// cell noise; other cells carry background noise.
pub fn render_bev(cfg: &SimConfig, scene: &Scene, frame: usize) -> Result<BevGrid> {
    let n = cfg.grid_cells();
    let f = cfg.channels;
    let half = 0.5 * cfg.cell_size;
    let mut grid = BevGrid::new(n, n, f, cfg.cell_size, [half, half])?;
    let mut rng = stream(cfg.seed, scene.index, 1000 + frame as u64);
    let live: Vec<(&BoundingBox3D, &[f64])> = scene
        .tracks
        .iter()
        .filter_map(|tr| tr.box_at(frame).map(|b| (b, tr.latent.as_slice())))
        .collect();
    let mut acc = vec![0.0; f];
    for row in 0..n {
        for col in 0..n {
            let c = grid.cell_center(col, row);
            acc.fill(0.0);
            let mut hits = 0usize;
            for (b, latent) in &live {
                let reach = 0.5 * b.w.hypot(b.l);
                if (c[0] - b.x).abs() > reach || (c[1] - b.y).abs() > reach {
                    continue;
                }
                if footprint_contains(b, c) {
                    hits += 1;
                    for k in 0..f {
                        acc[k] += latent[k];
                    }
                }
            }
            let cell = grid.cell_mut(col, row);
            if hits > 0 {
                for k in 0..f {
                    cell[k] = acc[k] / hits as f64 + gauss(&mut rng, cfg.cell_noise);
                }
            } else {
                for v in cell.iter_mut() {
                    *v = cfg.background_mean + gauss(&mut rng, cfg.background_std);
                }
            }
        }
    }
    Ok(grid)
}

/// Scenes `first_scene .. first_scene + num_scenes`.
pub fn generate_dataset(cfg: &SimConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (cfg.first_scene..cfg.first_scene + cfg.num_scenes)
        .map(|k| generate_scene(cfg, k))
        .collect()
}
