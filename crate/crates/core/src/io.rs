//! On-disk formats: line-delimited JSON records and binary BEV blocks.
//!
//! A scene file holds one `scene` line, then per frame a `frame` line
//! followed by its `gt` and `det` lines. Track files hold `TrackRecord`
//! lines only.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::affinity::GtBox;
use crate::domain::{BoundingBox3D, ObjectClass, TrackStatus};
use crate::error::{Error, Result};
use crate::residuals::BevGrid;
use crate::sim::{Scene, SceneFrame};
use crate::tracker::TrackOutput;

pub const BEV_MAGIC: [u8; 4] = *b"BEV1";
pub const BEV_HEADER_LEN: usize = 24;

/// Box fields shared by every record kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxFields {
    pub class: ObjectClass,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub ry: f64,
    pub vx: f64,
    pub vy: f64,
    pub conf: f64,
}

impl From<&BoundingBox3D> for BoxFields {
    fn from(b: &BoundingBox3D) -> Self {
        Self {
            class: b.class,
            x: b.x,
            y: b.y,
            z: b.z,
            w: b.w,
            l: b.l,
            h: b.h,
            ry: b.yaw,
            vx: b.vx,
            vy: b.vy,
            conf: b.confidence,
        }
    }
}

impl BoxFields {
    pub fn to_box(&self) -> BoundingBox3D {
        BoundingBox3D::new([self.x, self.y, self.z], [self.w, self.l, self.h], self.ry, self.class)
            .with_velocity(self.vx, self.vy)
            .with_confidence(self.conf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene: usize,
    pub frame: usize,
    pub t: f64,
    #[serde(flatten)]
    pub bbox: BoxFields,
    /// Five-point shape descriptor.
    pub descriptor: Vec<f64>,
    /// Generating object; absent for clutter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub scene: usize,
    pub frame: usize,
    pub t: f64,
    #[serde(flatten)]
    pub bbox: BoxFields,
    pub gt_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub scene: usize,
    pub frame: usize,
    pub t: f64,
    #[serde(flatten)]
    pub bbox: BoxFields,
    pub track_id: u64,
    pub c_trk: f64,
    pub status: TrackStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub scene: usize,
    pub frame: usize,
    pub t: f64,
    /// BEV block path relative to the scene file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bev: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneLine {
    Scene(SceneRecord),
    Frame(FrameRecord),
    Gt(GtRecord),
    Det(DetectionRecord),
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r)
            .map_err(|e| Error::InvalidInput(format!("encoding {}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.jsonl")
}

pub fn bev_file_name(scene: usize, frame: usize) -> String {
    format!("scene_{scene:05}_{frame:03}.bev")
}

/// Scene records; `bev_paths[f]` is stored on frame `f` when given.
pub fn scene_lines(scene: &Scene, bev_paths: Option<&[String]>) -> Vec<SceneLine> {
    let mut out = vec![SceneLine::Scene(SceneRecord {
        scene: scene.index,
        frames: scene.frames.len(),
    })];
    for (f, fr) in scene.frames.iter().enumerate() {
        let (s, t) = (scene.index, fr.timestamp);
        out.push(SceneLine::Frame(FrameRecord {
            scene: s,
            frame: f,
            t,
            bev: bev_paths.map(|p| p[f].clone()),
        }));
        for g in &fr.gt {
            out.push(SceneLine::Gt(GtRecord {
                scene: s,
                frame: f,
                t,
                bbox: BoxFields::from(&g.bbox),
                gt_id: g.gt_id,
            }));
        }
        for (k, d) in fr.detections.iter().enumerate() {
            out.push(SceneLine::Det(DetectionRecord {
                scene: s,
                frame: f,
                t,
                bbox: BoxFields::from(d),
                descriptor: fr.descriptors[k].clone(),
                source: fr.sources[k],
            }));
        }
    }
    out
}

/// Rebuilds a scene from its records. Simulator-only state (object latents
/// and full trajectories) is not stored, so `tracks` comes back empty.
pub fn scene_from_lines(path: &Path, lines: Vec<SceneLine>) -> Result<Scene> {
    let bad = |m: String| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        message: m,
    };
    let mut it = lines.into_iter();
    let Some(SceneLine::Scene(head)) = it.next() else {
        return Err(bad("first record must be the scene record".into()));
    };
    let mut frames: Vec<SceneFrame> = Vec::with_capacity(head.frames);
    for line in it {
        let (scene, frame) = match &line {
            SceneLine::Scene(_) => return Err(bad("second scene record".into())),
            SceneLine::Frame(r) => (r.scene, r.frame),
            SceneLine::Gt(r) => (r.scene, r.frame),
            SceneLine::Det(r) => (r.scene, r.frame),
        };
        if scene != head.scene {
            return Err(bad(format!("record of scene {scene} in scene {}", head.scene)));
        }
        match line {
            SceneLine::Frame(r) => {
                if r.frame != frames.len() {
                    return Err(bad(format!("frame {} out of order", r.frame)));
                }
                frames.push(SceneFrame {
                    timestamp: r.t,
                    gt: Vec::new(),
                    detections: Vec::new(),
                    descriptors: Vec::new(),
                    sources: Vec::new(),
                });
            }
            SceneLine::Gt(r) => {
                let n = frames.len();
                let fr = frames
                    .get_mut(frame)
                    .filter(|_| frame + 1 == n)
                    .ok_or_else(|| bad(format!("gt record before its frame {frame}")))?;
                fr.gt.push(GtBox {
                    gt_id: r.gt_id,
                    bbox: r.bbox.to_box(),
                });
            }
            SceneLine::Det(r) => {
                let n = frames.len();
                let fr = frames
                    .get_mut(frame)
                    .filter(|_| frame + 1 == n)
                    .ok_or_else(|| bad(format!("detection record before its frame {frame}")))?;
                fr.detections.push(r.bbox.to_box());
                fr.descriptors.push(r.descriptor);
                fr.sources.push(r.source);
            }
            SceneLine::Scene(_) => unreachable!(),
        }
    }
    if frames.len() != head.frames {
        return Err(bad(format!("{} frames announced, {} found", head.frames, frames.len())));
    }
    Ok(Scene {
        index: head.scene,
        tracks: Vec::new(),
        frames,
    })
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    scene_from_lines(path, read_jsonl(path)?)
}

/// All `scene_*.jsonl` files of a directory, in index order.
pub fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("scene_") && n.ends_with(".jsonl"))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let files = scene_files(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no scene files in {}", dir.display())));
    }
    files.iter().map(|p| read_scene(p)).collect()
}

pub fn track_lines(scene: &Scene, tracks: &[Vec<TrackOutput>]) -> Vec<TrackRecord> {
    let mut out = Vec::new();
    for (f, (fr, outs)) in scene.frames.iter().zip(tracks).enumerate() {
        for o in outs {
            out.push(TrackRecord {
                scene: scene.index,
                frame: f,
                t: fr.timestamp,
                bbox: BoxFields::from(&o.bbox),
                track_id: o.track_id,
                c_trk: o.c_trk,
                status: o.status,
            });
        }
    }
    out
}

/// Groups track records of one scene by frame; `frames` is the scene length.
pub fn tracks_by_frame(
    path: &Path,
    scene: usize,
    frames: usize,
    records: Vec<TrackRecord>,
) -> Result<Vec<Vec<TrackOutput>>> {
    let mut out = vec![Vec::new(); frames];
    for (n, r) in records.into_iter().enumerate() {
        if r.scene != scene || r.frame >= frames {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("track record for scene {} frame {} does not fit scene {scene}", r.scene, r.frame),
            });
        }
        out[r.frame].push(TrackOutput {
            track_id: r.track_id,
            bbox: r.bbox.to_box(),
            c_trk: r.c_trk,
            status: r.status,
        });
    }
    Ok(out)
}

/// Header: magic, `H` and `W` as u16, `F` as u32, cell size and origin as
/// f32; then `H * W * F` f32 values, row-major, little-endian.
pub fn encode_bev(grid: &BevGrid) -> Result<Vec<u8>> {
    let (h, w) = (grid.height, grid.width);
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::InvalidInput(format!("BEV grid {h}x{w} too large to store")));
    }
    let mut out = Vec::with_capacity(BEV_HEADER_LEN + 4 * grid.data.len());
    out.extend_from_slice(&BEV_MAGIC);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(grid.channels as u32).to_le_bytes());
    out.extend_from_slice(&(grid.cell_size as f32).to_le_bytes());
    out.extend_from_slice(&(grid.origin[0] as f32).to_le_bytes());
    out.extend_from_slice(&(grid.origin[1] as f32).to_le_bytes());
    for v in &grid.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_bev(path: &Path, bytes: &[u8]) -> Result<BevGrid> {
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        message: m.to_string(),
    };
    if bytes.len() < BEV_HEADER_LEN || bytes[..4] != BEV_MAGIC {
        return Err(bad("not a BEV block"));
    }
    let u16_at = |k: usize| u16::from_le_bytes([bytes[k], bytes[k + 1]]) as usize;
    let u32_at = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
    let f32_at = |k: usize| f32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as f64;
    let (h, w, f) = (u16_at(4), u16_at(6), u32_at(8));
    let cell = f32_at(12);
    let origin = [f32_at(16), f32_at(20)];
    let n = h * w * f;
    if bytes.len() != BEV_HEADER_LEN + 4 * n {
        return Err(bad("BEV payload length does not match its header"));
    }
    let mut grid = BevGrid::new(w, h, f, cell, origin).map_err(|e| bad(&e.to_string()))?;
    for (k, v) in grid.data.iter_mut().enumerate() {
        *v = f32_at(BEV_HEADER_LEN + 4 * k);
    }
    Ok(grid)
}

pub fn write_bev(path: &Path, grid: &BevGrid) -> Result<()> {
    fs::write(path, encode_bev(grid)?).map_err(|e| Error::io(path, e))
}

pub fn read_bev(path: &Path) -> Result<BevGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bev(path, &bytes)
}
