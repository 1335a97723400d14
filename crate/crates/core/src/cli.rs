//! The `shasta` command line: `simulate`, `train`, `track`, `eval` and
//! `gradcheck`. Every command writes a `manifest.json` into its output
//! directory and holds `<out>/.lock` while it runs.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::affinity::{sequence_pairs, train_from, Checkpoint, ShastaModel, TrainConfig, TrainState};
use crate::config::RunConfig;
use crate::domain::ObjectClass;
use crate::error::{Error, Result};
use crate::io::{
    bev_file_name, read_jsonl, read_scenes, scene_file_name, scene_files, scene_lines, track_lines, tracks_by_frame,
    write_bev, write_jsonl, TrackRecord,
};
use crate::metrics::EvalReport;
use crate::nn::GRADCHECK_TOLERANCE;
use crate::pipeline::{evaluate_tracks, labeled, par_map, run_gradcheck, track_scenes};
use crate::sim::{generate_scene, render_bev, Scene};
use crate::tracker::{Affinity, TrackOutput, TrackerOptions};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Parser)]
#[command(name = "shasta", version, about = "Learned-affinity 3D multi-object tracking on simulated scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset of scenes.
    Simulate(SimulateArgs),
    /// Train one affinity model per class.
    Train(TrainArgs),
    /// Run the tracker over a dataset.
    Track(TrackArgs),
    /// Score tracks against a dataset's annotations.
    Eval(EvalArgs),
    /// Finite-difference check of the full model's gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value run configuration; defaults to the dataset's config.txt.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Classes to train; all configured classes when omitted.
    #[arg(long)]
    pub class: Vec<String>,
    /// Continue from the checkpoint and optimizer state in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding `checkpoint_<class>.json` files.
    #[arg(long, conflicts_with_all = ["oracle_affinity", "baseline"])]
    pub models: Option<PathBuf>,
    /// Feed ground-truth affinity matrices to the tracker.
    #[arg(long)]
    pub oracle_affinity: bool,
    /// Greedy matching only: no affinity, no augmentations, no refinement.
    #[arg(long, conflicts_with = "oracle_affinity")]
    pub baseline: bool,
    #[arg(long)]
    pub class: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `track`.
    #[arg(long)]
    pub tracks: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional directory for `gradcheck.json` and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test hook: tamper with the analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

/// Holds `<dir>/.lock` until dropped.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What a command printed and where it wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub message: String,
    /// Non-zero for a completed run whose check failed.
    pub exit_code: i32,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Track(a) => cmd_track(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn load_config(common: &Common, data: Option<&Path>) -> Result<(RunConfig, Option<PathBuf>)> {
    let path = match (&common.config, data) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(d)) if d.join(CONFIG_FILE).exists() => Some(d.join(CONFIG_FILE)),
        _ => None,
    };
    let mut cfg = match &path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok((cfg, path))
}

fn classes(names: &[String], cfg: &RunConfig) -> Result<Vec<ObjectClass>> {
    if names.is_empty() {
        return Ok(cfg.sim.classes.clone());
    }
    names
        .iter()
        .map(|n| n.parse::<ObjectClass>().map_err(|_| Error::InvalidInput(format!("unknown class `{n}`"))))
        .collect()
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

struct Run {
    command: &'static str,
    out: PathBuf,
    config_path: Option<PathBuf>,
    seed: u64,
    inputs: Vec<PathBuf>,
    start: Instant,
    _lock: DirLock,
}

impl Run {
    fn start(command: &'static str, out: &Path, config_path: Option<PathBuf>, seed: u64, inputs: &[&Path]) -> Result<Self> {
        let start = Instant::now();
        Ok(Self {
            command,
            out: out.to_path_buf(),
            config_path,
            seed,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            start,
            _lock: DirLock::acquire(out)?,
        })
    }

    fn finish(self, outputs: Vec<PathBuf>, message: String, exit_code: i32) -> Result<Outcome> {
        let m = RunManifest {
            command: self.command.to_string(),
            config_path: self.config_path.as_deref().map(show),
            seed: self.seed,
            inputs: self.inputs.iter().map(|p| show(p)).collect(),
            outputs: outputs.iter().map(|p| show(p)).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
        };
        write_json(&self.out.join(MANIFEST_FILE), &m)?;
        Ok(Outcome {
            outputs,
            message,
            exit_code,
        })
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<Outcome> {
    let (cfg, cfg_path) = load_config(&a.common, None)?;
    let out = &a.common.out;
    let run = Run::start("simulate", out, cfg_path, cfg.seed, &[])?;
    let scenes_dir = out.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
    let indices: Vec<usize> = (cfg.sim.first_scene..cfg.sim.first_scene + cfg.sim.num_scenes).collect();
    let written = par_map(&indices, |&k| -> Result<PathBuf> {
        let scene = generate_scene(&cfg.sim, k)?;
        let bev = if cfg.write_bev {
            let mut names = Vec::with_capacity(scene.frames.len());
            for f in 0..scene.frames.len() {
                let name = bev_file_name(k, f);
                write_bev(&scenes_dir.join(&name), &render_bev(&cfg.sim, &scene, f)?)?;
                names.push(name);
            }
            Some(names)
        } else {
            None
        };
        let path = scenes_dir.join(scene_file_name(k));
        write_jsonl(&path, scene_lines(&scene, bev.as_deref()))?;
        Ok(path)
    });
    written.into_iter().collect::<Result<Vec<_>>>()?;
    let cfg_out = out.join(CONFIG_FILE);
    write_text(&cfg_out, &cfg.to_text())?;
    let msg = format!("wrote {} scenes to {}", indices.len(), show(&scenes_dir));
    run.finish(vec![scenes_dir, cfg_out], msg, 0)
}

fn load_dataset(data: &Path) -> Result<Vec<Scene>> {
    read_scenes(&data.join("scenes"))
}

pub fn checkpoint_path(dir: &Path, class: ObjectClass) -> PathBuf {
    dir.join(format!("checkpoint_{}.json", class.name()))
}

fn state_path(dir: &Path, class: ObjectClass) -> PathBuf {
    dir.join(format!("train_state_{}.json", class.name()))
}

fn loss_log_path(dir: &Path, class: ObjectClass) -> PathBuf {
    dir.join(format!("loss_{}.log", class.name()))
}

/// Trains epoch by epoch, writing checkpoint, optimizer state and the loss
/// log after each one so an interrupted run can resume.
fn train_one(cfg: &RunConfig, scenes: &[Scene], class: ObjectClass, out: &Path, resume: bool) -> Result<Vec<PathBuf>> {
    let frames = labeled(scenes, class, cfg.model.descriptor_points);
    if frames.iter().flatten().all(|f| f.gt.is_empty()) {
        return Err(Error::InvalidInput(format!("dataset has no {} objects", class.name())));
    }
    let pairs: Vec<_> = frames.iter().flat_map(|f| sequence_pairs(f)).collect();
    let (ck, st, log) = (checkpoint_path(out, class), state_path(out, class), loss_log_path(out, class));
    let (mut model, mut state, mut lines) = if resume && ck.exists() && st.exists() {
        let (model, _) = Checkpoint::load(&ck)?.into_model()?;
        if model.config != cfg.model {
            return Err(Error::Config(format!("{} was trained with a different model config", show(&ck))));
        }
        let state: TrainState = read_json(&st)?;
        let text = fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
        let lines: Vec<String> = text.lines().take(state.epoch).map(str::to_string).collect();
        if lines.len() != state.epoch {
            return Err(Error::InvalidInput(format!("{} is shorter than the saved epoch count", show(&log))));
        }
        (model, state, lines)
    } else {
        let model = ShastaModel::new(cfg.model.clone())?;
        let state = TrainState::new(&model);
        (model, state, Vec::new())
    };
    let class_cfg = cfg.class_config(class);
    for epoch in state.epoch..cfg.train.epochs {
        let step = TrainConfig {
            epochs: epoch + 1,
            ..cfg.train.clone()
        };
        let report = train_from(&mut model, &pairs, &step, &mut state)?;
        lines.push(format!("epoch={} loss={:.17e}", epoch + 1, report.loss_curve[0]));
        Checkpoint::from_model(&model, class_cfg).save(&ck)?;
        write_json(&st, &state)?;
        write_text(&log, &(lines.join("\n") + "\n"))?;
    }
    if !ck.exists() {
        Checkpoint::from_model(&model, class_cfg).save(&ck)?;
    }
    Ok(vec![ck, st, log])
}

pub fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let (cfg, cfg_path) = load_config(&a.common, Some(&a.data))?;
    let classes = classes(&a.class, &cfg)?;
    let out = &a.common.out;
    let run = Run::start("train", out, cfg_path, cfg.seed, &[&a.data])?;
    let scenes = load_dataset(&a.data)?;
    let mut outputs = Vec::new();
    let mut msg = String::new();
    for class in classes {
        outputs.extend(train_one(&cfg, &scenes, class, out, a.resume)?);
        msg += &format!("trained {} for {} epochs\n", class.name(), cfg.train.epochs);
    }
    run.finish(outputs, msg.trim_end().to_string(), 0)
}

enum Source {
    Models(PathBuf),
    Oracle,
    Baseline,
}

pub fn cmd_track(a: &TrackArgs) -> Result<Outcome> {
    let (cfg, cfg_path) = load_config(&a.common, Some(&a.data))?;
    let classes = classes(&a.class, &cfg)?;
    let source = match (&a.models, a.oracle_affinity, a.baseline) {
        (Some(m), _, _) => Source::Models(m.clone()),
        (None, true, _) => Source::Oracle,
        (None, false, true) => Source::Baseline,
        _ => return Err(Error::InvalidInput("one of --models, --oracle-affinity or --baseline is required".into())),
    };
    // load every checkpoint before touching the output directory
    let mut models = Vec::new();
    if let Source::Models(dir) = &source {
        for &class in &classes {
            let path = checkpoint_path(dir, class);
            if !path.exists() {
                return Err(Error::MissingModel(format!("{} ({} not found)", class.name(), show(&path))));
            }
            let (model, _) = Checkpoint::load(&path)?.into_model()?;
            if model.config.n_max != cfg.track.n_max {
                return Err(Error::Config(format!(
                    "{} has n_max {} but the tracker uses {}",
                    show(&path),
                    model.config.n_max,
                    cfg.track.n_max
                )));
            }
            models.push(model);
        }
    }
    let out = &a.common.out;
    let mut inputs: Vec<&Path> = vec![&a.data];
    if let Some(m) = &a.models {
        inputs.push(m);
    }
    let run = Run::start("track", out, cfg_path, cfg.seed, &inputs)?;
    let scenes = load_dataset(&a.data)?;
    let mut per_class: Vec<Vec<Vec<Vec<TrackOutput>>>> = Vec::new();
    for (k, &class) in classes.iter().enumerate() {
        let (options, aff, points, shape_dim) = match &source {
            Source::Models(_) => {
                let m = &models[k];
                (cfg.track.options, Affinity::Model(m), m.config.descriptor_points, m.config.shape_dim())
            }
            Source::Oracle => (cfg.track.options, Affinity::Oracle, cfg.model.descriptor_points, cfg.model.shape_dim()),
            Source::Baseline => (
                TrackerOptions::baseline(),
                Affinity::Disabled,
                cfg.model.descriptor_points,
                cfg.model.shape_dim(),
            ),
        };
        per_class.push(track_scenes(&scenes, cfg.class_config(class), options, aff, points, shape_dim)?);
    }
    let tracks_dir = out.join("tracks");
    fs::create_dir_all(&tracks_dir).map_err(|e| Error::io(&tracks_dir, e))?;
    let mut count = 0usize;
    for (s, scene) in scenes.iter().enumerate() {
        let mut records: Vec<TrackRecord> = per_class.iter().flat_map(|c| track_lines(scene, &c[s])).collect();
        // frame-major, class order within a frame
        records.sort_by_key(|r| r.frame);
        count += records.len();
        write_jsonl(&tracks_dir.join(scene_file_name(scene.index)), &records)?;
    }
    let msg = format!("wrote {count} track records for {} scenes", scenes.len());
    run.finish(vec![tracks_dir], msg, 0)
}

/// Reads `tracks/scene_*.jsonl` aligned with `scenes`.
pub fn read_tracks(dir: &Path, scenes: &[Scene]) -> Result<Vec<Vec<Vec<TrackOutput>>>> {
    let tracks_dir = dir.join("tracks");
    let files = scene_files(&tracks_dir)?;
    let expected: Vec<PathBuf> = scenes.iter().map(|s| tracks_dir.join(scene_file_name(s.index))).collect();
    if files != expected {
        return Err(Error::InvalidInput(format!(
            "{} holds {} track files that do not line up with the {} dataset scenes",
            show(&tracks_dir),
            files.len(),
            scenes.len()
        )));
    }
    scenes
        .iter()
        .zip(&files)
        .map(|(s, p)| tracks_by_frame(p, s.index, s.frames.len(), read_jsonl(p)?))
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let (cfg, cfg_path) = load_config(&a.common, Some(&a.data))?;
    let out = &a.common.out;
    let run = Run::start("eval", out, cfg_path, cfg.seed, &[&a.data, &a.tracks])?;
    let scenes = load_dataset(&a.data)?;
    let tracks = read_tracks(&a.tracks, &scenes)?;
    let report: EvalReport = evaluate_tracks(&scenes, &tracks, cfg.recall_points)?;
    let (json, txt) = (out.join("report.json"), out.join("report.txt"));
    write_json(&json, &report)?;
    let table = report.to_table();
    write_text(&txt, &table)?;
    run.finish(vec![json, txt], table.trim_end().to_string(), 0)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let run = match &a.out {
        Some(out) => Some(Run::start("gradcheck", out, None, a.seed, &[])?),
        None => None,
    };
    let report = run_gradcheck(a.seed, a.corrupt_backward)?;
    let pass = report.passed(GRADCHECK_TOLERANCE);
    let msg = format!(
        "gradcheck {}: max relative error {:.3e} over {} parameters (worst index {})",
        if pass { "passed" } else { "FAILED" },
        report.max_rel_error,
        report.num_params,
        report.worst_index
    );
    let code = if pass { 0 } else { 2 };
    match (run, &a.out) {
        (Some(run), Some(out)) => {
            let path = out.join("gradcheck.json");
            write_json(&path, &report)?;
            run.finish(vec![path], msg, code)
        }
        _ => Ok(Outcome {
            outputs: Vec::new(),
            message: msg,
            exit_code: code,
        }),
    }
}

/// Manifest of an output directory.
pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}
