//! Flat `key=value` run configuration.
//!
//! ```text
//! version=1
//! seed=7
//! sim.num_scenes=200
//! train.epochs=8
//! track.fn_propagation=false
//! ```
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::affinity::{ModelConfig, ResidualMode, TrainConfig};
use crate::domain::{ClassConfig, ObjectClass};
use crate::error::{Error, Result};
use crate::metrics::RECALL_POINTS;
use crate::residuals::DescriptorPoints;
use crate::sim::SimConfig;
use crate::tracker::TrackerOptions;

pub const CONFIG_VERSION: u32 = 1;

/// Tracker thresholds and switches; `None` fields fall back to class or
/// simulator defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSettings {
    pub n_max: usize,
    pub tau_fp: f64,
    pub tau_fn: f64,
    pub tau_nb: f64,
    pub tau_dt: f64,
    pub beta1: f64,
    pub beta2: Option<f64>,
    pub max_match_dist: Option<f64>,
    pub max_age: u32,
    pub options: TrackerOptions,
}

impl Default for TrackSettings {
    fn default() -> Self {
        let c = ClassConfig::for_class(ObjectClass::Car);
        Self {
            n_max: c.n_max,
            tau_fp: c.tau_fp,
            tau_fn: c.tau_fn,
            tau_nb: c.tau_nb,
            tau_dt: c.tau_dt,
            beta1: c.beta1,
            beta2: None,
            max_match_dist: None,
            max_age: c.max_age,
            options: TrackerOptions::full(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    /// Write per-frame BEV grids next to the scene records.
    pub write_bev: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub track: TrackSettings,
    pub recall_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let track = TrackSettings::default();
        let mut train = TrainConfig {
            epochs: 8,
            ..TrainConfig::default()
        };
        train.seed = sim.seed;
        Self {
            seed: sim.seed,
            model: ModelConfig::new(track.n_max, sim.channels, sim.seed),
            sim,
            write_bev: false,
            train,
            track,
            recall_points: RECALL_POINTS,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x)).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(usize, usize)> {
    match parse_list::<usize>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key} needs two comma-separated values"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn points_name(p: DescriptorPoints) -> &'static str {
    match p {
        DescriptorPoints::CenterAndFaces => "center_and_faces",
        DescriptorPoints::CenterOnly => "center_only",
        DescriptorPoints::FacesOnly => "faces_only",
    }
}

fn parse_points(key: &str, v: &str) -> Result<DescriptorPoints> {
    match v.trim() {
        "center_and_faces" => Ok(DescriptorPoints::CenterAndFaces),
        "center_only" => Ok(DescriptorPoints::CenterOnly),
        "faces_only" => Ok(DescriptorPoints::FacesOnly),
        _ => Err(Error::Config(format!("bad value `{v}` for {key}"))),
    }
}

fn mode_name(m: ResidualMode) -> &'static str {
    match m {
        ResidualMode::Fused => "fused",
        ResidualMode::VoxelOnly => "voxel_only",
        ResidualMode::BoxOnly => "box_only",
        ResidualMode::ShapeOnly => "shape_only",
    }
}

fn parse_mode(key: &str, v: &str) -> Result<ResidualMode> {
    match v.trim() {
        "fused" => Ok(ResidualMode::Fused),
        "voxel_only" => Ok(ResidualMode::VoxelOnly),
        "box_only" => Ok(ResidualMode::BoxOnly),
        "shape_only" => Ok(ResidualMode::ShapeOnly),
        _ => Err(Error::Config(format!("bad value `{v}` for {key}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut version = None;
        let mut seed_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            let k = k.trim();
            match k {
                "version" => version = Some(parse::<u32>(k, v)?),
                "seed" => {
                    cfg.seed = parse(k, v)?;
                    seed_set = true;
                }
                _ => cfg
                    .set(k, v)
                    .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?,
            }
        }
        match version {
            Some(CONFIG_VERSION) => {}
            Some(v) => return Err(Error::Config(format!("unsupported config version {v}"))),
            None => return Err(Error::Config("missing `version` key".into())),
        }
        if seed_set {
            cfg.set_seed(cfg.seed);
        }
        cfg.model.n_max = cfg.track.n_max;
        cfg.model.channels = cfg.sim.channels;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Routes one seed to the simulator, the model initialiser and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sim.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if self.recall_points < 2 {
            return Err(Error::Config("eval.recall_points must be at least 2".into()));
        }
        for &c in &self.sim.classes {
            self.class_config(c).validate()?;
        }
        Ok(())
    }

    /// Tracking configuration of one class.
    pub fn class_config(&self, class: ObjectClass) -> ClassConfig {
        let t = &self.track;
        let mut c = ClassConfig::for_class(class).with_speed_envelope(self.sim.speed_max, self.sim.dt());
        c.n_max = t.n_max;
        c.tau_fp = t.tau_fp;
        c.tau_fn = t.tau_fn;
        c.tau_nb = t.tau_nb;
        c.tau_dt = t.tau_dt;
        c.beta1 = t.beta1;
        c.max_age = t.max_age;
        if let Some(b) = t.beta2 {
            c.beta2 = b;
        }
        if let Some(d) = t.max_match_dist {
            c.max_match_dist = d;
        }
        c
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.sim;
        let m = &mut self.model;
        let tr = &mut self.train;
        let t = &mut self.track;
        let aug = &mut t.options.augmentations;
        match key {
            "sim.num_scenes" => s.num_scenes = parse(key, v)?,
            "sim.first_scene" => s.first_scene = parse(key, v)?,
            "sim.frames_per_scene" => s.frames_per_scene = parse(key, v)?,
            "sim.frame_rate" => s.frame_rate = parse(key, v)?,
            "sim.arena_size" => s.arena_size = parse(key, v)?,
            "sim.cell_size" => s.cell_size = parse(key, v)?,
            "sim.objects_min" => s.objects_min = parse(key, v)?,
            "sim.objects_max" => s.objects_max = parse(key, v)?,
            "sim.speed_min" => s.speed_min = parse(key, v)?,
            "sim.speed_max" => s.speed_max = parse(key, v)?,
            "sim.turn_rate_max" => s.turn_rate_max = parse(key, v)?,
            "sim.birth_window" => s.birth_window = parse_pair(key, v)?,
            "sim.death_window" => s.death_window = parse_pair(key, v)?,
            "sim.spawn_clearance" => s.spawn_clearance = parse(key, v)?,
            "sim.min_separation" => s.min_separation = parse(key, v)?,
            "sim.sigma_pos" => s.sigma_pos = parse(key, v)?,
            "sim.sigma_dim" => s.sigma_dim = parse(key, v)?,
            "sim.sigma_yaw" => s.sigma_yaw = parse(key, v)?,
            "sim.sigma_vel" => s.sigma_vel = parse(key, v)?,
            "sim.fp_rate" => s.fp_rate = parse(key, v)?,
            "sim.fn_rate" => s.fn_rate = parse(key, v)?,
            "sim.tp_conf_mean" => s.tp_conf_mean = parse(key, v)?,
            "sim.tp_conf_std" => s.tp_conf_std = parse(key, v)?,
            "sim.fp_conf_mean" => s.fp_conf_mean = parse(key, v)?,
            "sim.fp_conf_std" => s.fp_conf_std = parse(key, v)?,
            "sim.channels" => s.channels = parse(key, v)?,
            "sim.occlusion" => s.occlusion = parse(key, v)?,
            "sim.occlusion_factor" => s.occlusion_factor = parse(key, v)?,
            "sim.latent_std" => s.latent_std = parse(key, v)?,
            "sim.cell_noise" => s.cell_noise = parse(key, v)?,
            "sim.background_mean" => s.background_mean = parse(key, v)?,
            "sim.background_std" => s.background_std = parse(key, v)?,
            "sim.classes" => s.classes = parse_list(key, v)?,
            "sim.write_bev" => self.write_bev = parse(key, v)?,
            "model.descriptor_points" => m.descriptor_points = parse_points(key, v)?,
            "model.residual_mode" => m.residual_mode = parse_mode(key, v)?,
            "model.anchor_hidden" => m.anchor_hidden = parse_list(key, v)?,
            "model.box_residual_hidden" => m.box_residual_hidden = parse_list(key, v)?,
            "model.shape_residual_hidden" => m.shape_residual_hidden = parse_list(key, v)?,
            "model.fusion_hidden" => m.fusion_hidden = parse_list(key, v)?,
            "model.affinity_hidden" => m.affinity_hidden = parse_list(key, v)?,
            "model.position_scale" => m.position_scale = parse(key, v)?,
            "train.epochs" => tr.epochs = parse(key, v)?,
            "train.batch_size" => tr.batch_size = parse(key, v)?,
            "train.lr" => tr.adam.lr = parse(key, v)?,
            "train.beta1" => tr.adam.beta1 = parse(key, v)?,
            "train.beta2" => tr.adam.beta2 = parse(key, v)?,
            "train.eps" => tr.adam.eps = parse(key, v)?,
            "train.weight_decay" => tr.adam.weight_decay = parse(key, v)?,
            "train.fp_downsample" => tr.fp_downsample = parse(key, v)?,
            "track.n_max" => t.n_max = parse(key, v)?,
            "track.tau_fp" => t.tau_fp = parse(key, v)?,
            "track.tau_fn" => t.tau_fn = parse(key, v)?,
            "track.tau_nb" => t.tau_nb = parse(key, v)?,
            "track.tau_dt" => t.tau_dt = parse(key, v)?,
            "track.beta1" => t.beta1 = parse(key, v)?,
            "track.beta2" => t.beta2 = Some(parse(key, v)?),
            "track.max_match_dist" => t.max_match_dist = Some(parse(key, v)?),
            "track.max_age" => t.max_age = parse(key, v)?,
            "track.fp_elimination" => aug.fp_elimination = parse(key, v)?,
            "track.fn_propagation" => aug.fn_propagation = parse(key, v)?,
            "track.nb_initialization" => aug.nb_initialization = parse(key, v)?,
            "track.dt_termination" => aug.dt_termination = parse(key, v)?,
            "track.refine_confidence" => t.options.refine_confidence = parse(key, v)?,
            "eval.recall_points" => self.recall_points = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let s = &self.sim;
        let m = &self.model;
        let tr = &self.train;
        let t = &self.track;
        let a = t.options.augmentations;
        let classes: Vec<&str> = s.classes.iter().map(|c| c.name()).collect();
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k}={v}");
        };
        kv("version", CONFIG_VERSION.to_string());
        kv("seed", self.seed.to_string());
        kv("sim.num_scenes", s.num_scenes.to_string());
        kv("sim.first_scene", s.first_scene.to_string());
        kv("sim.frames_per_scene", s.frames_per_scene.to_string());
        kv("sim.frame_rate", s.frame_rate.to_string());
        kv("sim.arena_size", s.arena_size.to_string());
        kv("sim.cell_size", s.cell_size.to_string());
        kv("sim.objects_min", s.objects_min.to_string());
        kv("sim.objects_max", s.objects_max.to_string());
        kv("sim.speed_min", s.speed_min.to_string());
        kv("sim.speed_max", s.speed_max.to_string());
        kv("sim.turn_rate_max", s.turn_rate_max.to_string());
        kv("sim.birth_window", format!("{},{}", s.birth_window.0, s.birth_window.1));
        kv("sim.death_window", format!("{},{}", s.death_window.0, s.death_window.1));
        kv("sim.spawn_clearance", s.spawn_clearance.to_string());
        kv("sim.min_separation", s.min_separation.to_string());
        kv("sim.sigma_pos", s.sigma_pos.to_string());
        kv("sim.sigma_dim", s.sigma_dim.to_string());
        kv("sim.sigma_yaw", s.sigma_yaw.to_string());
        kv("sim.sigma_vel", s.sigma_vel.to_string());
        kv("sim.fp_rate", s.fp_rate.to_string());
        kv("sim.fn_rate", s.fn_rate.to_string());
        kv("sim.tp_conf_mean", s.tp_conf_mean.to_string());
        kv("sim.tp_conf_std", s.tp_conf_std.to_string());
        kv("sim.fp_conf_mean", s.fp_conf_mean.to_string());
        kv("sim.fp_conf_std", s.fp_conf_std.to_string());
        kv("sim.channels", s.channels.to_string());
        kv("sim.occlusion", s.occlusion.to_string());
        kv("sim.occlusion_factor", s.occlusion_factor.to_string());
        kv("sim.latent_std", s.latent_std.to_string());
        kv("sim.cell_noise", s.cell_noise.to_string());
        kv("sim.background_mean", s.background_mean.to_string());
        kv("sim.background_std", s.background_std.to_string());
        kv("sim.classes", classes.join(","));
        kv("sim.write_bev", self.write_bev.to_string());
        kv("model.descriptor_points", points_name(m.descriptor_points).into());
        kv("model.residual_mode", mode_name(m.residual_mode).into());
        kv("model.anchor_hidden", join(&m.anchor_hidden));
        kv("model.box_residual_hidden", join(&m.box_residual_hidden));
        kv("model.shape_residual_hidden", join(&m.shape_residual_hidden));
        kv("model.fusion_hidden", join(&m.fusion_hidden));
        kv("model.affinity_hidden", join(&m.affinity_hidden));
        kv("model.position_scale", m.position_scale.to_string());
        kv("train.epochs", tr.epochs.to_string());
        kv("train.batch_size", tr.batch_size.to_string());
        kv("train.lr", tr.adam.lr.to_string());
        kv("train.beta1", tr.adam.beta1.to_string());
        kv("train.beta2", tr.adam.beta2.to_string());
        kv("train.eps", tr.adam.eps.to_string());
        kv("train.weight_decay", tr.adam.weight_decay.to_string());
        kv("train.fp_downsample", tr.fp_downsample.to_string());
        kv("track.n_max", t.n_max.to_string());
        kv("track.tau_fp", t.tau_fp.to_string());
        kv("track.tau_fn", t.tau_fn.to_string());
        kv("track.tau_nb", t.tau_nb.to_string());
        kv("track.tau_dt", t.tau_dt.to_string());
        kv("track.beta1", t.beta1.to_string());
        if let Some(b) = t.beta2 {
            kv("track.beta2", b.to_string());
        }
        if let Some(d) = t.max_match_dist {
            kv("track.max_match_dist", d.to_string());
        }
        kv("track.max_age", t.max_age.to_string());
        kv("track.fp_elimination", a.fp_elimination.to_string());
        kv("track.fn_propagation", a.fn_propagation.to_string());
        kv("track.nb_initialization", a.nb_initialization.to_string());
        kv("track.dt_termination", a.dt_termination.to_string());
        kv("track.refine_confidence", t.options.refine_confidence.to_string());
        kv("eval.recall_points", self.recall_points.to_string());
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gives_defaults() {
        let c = RunConfig::parse("version=1\n").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.set_seed(42);
        c.sim.classes = vec![ObjectClass::Car, ObjectClass::Truck];
        c.model.residual_mode = ResidualMode::BoxOnly;
        c.model.descriptor_points = DescriptorPoints::CenterOnly;
        c.track.beta2 = Some(0.6);
        c.track.options.augmentations.fn_propagation = false;
        c.sim.frame_rate = 2.5;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(RunConfig::parse("version=1\nsim.bogus=3\n").is_err());
        assert!(RunConfig::parse("version=1\nsim.num_scenes=many\n").is_err());
        assert!(RunConfig::parse("version=1\njust text\n").is_err());
        assert!(RunConfig::parse("sim.num_scenes=3\n").is_err());
        assert!(RunConfig::parse("version=9\n").is_err());
        assert!(RunConfig::parse("version=1\nsim.classes=car,spaceship\n").is_err());
    }

    #[test]
    fn comments_and_seed_routing() {
        let c = RunConfig::parse("# run\nversion=1\n\nseed=11 # all streams\n").unwrap();
        assert_eq!((c.sim.seed, c.model.seed, c.train.seed), (11, 11, 11));
    }

    #[test]
    fn class_config_uses_speed_envelope() {
        let c = RunConfig::default();
        let cc = c.class_config(ObjectClass::Car);
        assert!((cc.max_match_dist - (2.0 * 4.0 * 0.5 + 1.0)).abs() < 1e-12);
        let bus = c.class_config(ObjectClass::Bus);
        assert_eq!(bus.beta2, 0.7);
    }
}
