//! CLEAR-style evaluation with recall-averaged MOTA (AMOTA) and MOTP (AMOTP).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::affinity::GtBox;
use crate::domain::{BoundingBox3D, ObjectClass};
use crate::error::{Error, Result};
use crate::matching::{greedy_assign, MATCH_GATE};

/// Number of recall sample points (`n - 1` recall targets are used).
pub const RECALL_POINTS: usize = 40;

/// One predicted track box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredBox {
    pub track_id: u64,
    pub bbox: BoundingBox3D,
    pub confidence: f64,
}

/// Predictions and annotations of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalFrame {
    pub gt: Vec<GtBox>,
    pub preds: Vec<PredBox>,
}

/// Outcome of matching one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    /// `(prediction index, gt index, distance)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub misses: Vec<usize>,
    /// GT ids whose matched track id differs from their last matched one.
    pub switches: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    /// Sum of TP center distances, meters.
    pub dist_sum: f64,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.ids += o.ids;
        self.dist_sum += o.dist_sum;
    }
}

/// Greedy 2 m matching of one frame. `history` maps GT id to the track id it
/// was last matched to; it is read, not updated.
pub fn match_frame(preds: &[PredBox], gt: &[GtBox], history: &HashMap<u64, u64>) -> FrameMatch {
    let p: Vec<[f64; 2]> = preds.iter().map(|b| [b.bbox.x, b.bbox.y]).collect();
    let g: Vec<[f64; 2]> = gt.iter().map(|b| [b.bbox.x, b.bbox.y]).collect();
    let assign = greedy_assign(&p, &g, MATCH_GATE, true);
    let mut out = FrameMatch::default();
    let mut gt_hit = vec![false; gt.len()];
    for (i, m) in assign.into_iter().enumerate() {
        match m {
            Some((j, d)) => {
                out.pairs.push((i, j, d));
                gt_hit[j] = true;
                if let Some(&last) = history.get(&gt[j].gt_id) {
                    if last != preds[i].track_id {
                        out.switches.push(gt[j].gt_id);
                    }
                }
            }
            None => out.false_positives.push(i),
        }
    }
    out.misses = (0..gt.len()).filter(|&j| !gt_hit[j]).collect();
    out
}

/// `max(0, 1 - (IDS + FP + FN - (1 - r) * GT) / (r * GT))`.
pub fn motar(counts: &Counts, recall: f64, gt_count: usize) -> Result<f64> {
    if gt_count == 0 {
        return Err(Error::InvalidInput("MOTAR needs ground truth".into()));
    }
    if !(recall > 0.0 && recall <= 1.0) {
        return Err(Error::InvalidInput(format!("recall {recall} outside (0, 1]")));
    }
    let gt = gt_count as f64;
    let err = (counts.ids + counts.fp + counts.fn_) as f64;
    Ok((1.0 - (err - (1.0 - recall) * gt) / (recall * gt)).max(0.0))
}

/// Counts over whole sequences keeping predictions with confidence `>= threshold`.
/// Identity history restarts with every sequence.
pub fn accumulate(sequences: &[Vec<EvalFrame>], threshold: f64) -> Counts {
    accumulate_with(sequences, threshold, |_| {})
}

fn accumulate_with(
    sequences: &[Vec<EvalFrame>],
    threshold: f64,
    mut on_tp: impl FnMut(f64),
) -> Counts {
    let mut c = Counts::default();
    for seq in sequences {
        let mut history = HashMap::new();
        for f in seq {
            let preds: Vec<PredBox> = f
                .preds
                .iter()
                .filter(|p| p.confidence >= threshold)
                .copied()
                .collect();
            let m = match_frame(&preds, &f.gt, &history);
            for &(i, j, d) in &m.pairs {
                history.insert(f.gt[j].gt_id, preds[i].track_id);
                c.dist_sum += d;
                on_tp(preds[i].confidence);
            }
            c.tp += m.pairs.len();
            c.fp += m.false_positives.len();
            c.fn_ += m.misses.len();
            c.ids += m.switches.len();
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub recall_target: f64,
    /// `None` when the target recall is unreachable.
    pub threshold: Option<f64>,
    pub recall: f64,
    pub motar: f64,
    pub motp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub amota: f64,
    pub amotp: f64,
    pub gt_count: usize,
    /// Counts with every prediction kept.
    pub counts: Counts,
    pub table: Vec<ThresholdRow>,
}

/// AMOTA/AMOTP of one class over `n - 1` evenly spaced recall targets.
///
/// For each target the highest TP-confidence threshold reaching it is used;
/// unreachable targets score MOTAR 0 and are left out of AMOTP. With no
/// reachable target AMOTP is the matching gate.
pub fn amota_amotp(sequences: &[Vec<EvalFrame>], n: usize) -> Result<ClassReport> {
    if n < 2 {
        return Err(Error::Config("need at least two recall points".into()));
    }
    let gt_count: usize = sequences.iter().flatten().map(|f| f.gt.len()).sum();
    if gt_count == 0 {
        return Err(Error::InvalidInput("no ground truth to evaluate".into()));
    }
    let mut tp_conf = Vec::new();
    let counts = accumulate_with(sequences, f64::NEG_INFINITY, |c| tp_conf.push(c));
    tp_conf.sort_by(|a, b| b.total_cmp(a));

    let mut table = Vec::with_capacity(n - 1);
    let mut cache: HashMap<u64, Counts> = HashMap::new();
    for k in 1..n {
        let target = k as f64 / (n - 1) as f64;
        let need = ((target * gt_count as f64) - 1e-9).ceil().max(1.0) as usize;
        if need > tp_conf.len() {
            table.push(ThresholdRow {
                recall_target: target,
                threshold: None,
                recall: 0.0,
                motar: 0.0,
                motp: None,
            });
            continue;
        }
        let thr = tp_conf[need - 1];
        let c = *cache
            .entry(thr.to_bits())
            .or_insert_with(|| accumulate(sequences, thr));
        let recall = c.tp as f64 / gt_count as f64;
        let (m, motp) = if c.tp == 0 {
            (0.0, None)
        } else {
            (motar(&c, recall, gt_count)?, Some(c.dist_sum / c.tp as f64))
        };
        table.push(ThresholdRow {
            recall_target: target,
            threshold: Some(thr),
            recall,
            motar: m,
            motp,
        });
    }
    let amota = table.iter().map(|r| r.motar).sum::<f64>() / table.len() as f64;
    let motps: Vec<f64> = table.iter().filter_map(|r| r.motp).collect();
    let amotp = if motps.is_empty() {
        MATCH_GATE
    } else {
        motps.iter().sum::<f64>() / motps.len() as f64
    };
    Ok(ClassReport {
        amota,
        amotp,
        gt_count,
        counts,
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub amota: f64,
    pub amotp: f64,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: BTreeMap<ObjectClass, ClassReport>,
    /// Class means of AMOTA/AMOTP; summed counts.
    pub overall: Overall,
}

impl EvalReport {
    /// One row per class plus `overall`, whitespace separated.
    pub fn to_table(&self) -> String {
        let mut s = String::from("class amota amotp tp fp fn ids\n");
        let mut row = |name: &str, amota: f64, amotp: f64, c: &Counts| {
            let _ = writeln!(
                s,
                "{name} {amota:.6} {amotp:.6} {} {} {} {}",
                c.tp, c.fp, c.fn_, c.ids
            );
        };
        for (class, r) in &self.classes {
            row(class.name(), r.amota, r.amotp, &r.counts);
        }
        let o = &self.overall;
        row("overall", o.amota, o.amotp, &o.counts);
        s
    }
}

/// Splits frames by class (GT and predictions alike) and evaluates every
/// class that has ground truth.
pub fn evaluate(sequences: &[Vec<EvalFrame>], n: usize) -> Result<EvalReport> {
    let mut classes: Vec<ObjectClass> = sequences
        .iter()
        .flatten()
        .flat_map(|f| f.gt.iter().map(|g| g.bbox.class))
        .collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::InvalidInput("no ground truth to evaluate".into()));
    }
    let mut reports = BTreeMap::new();
    let mut counts = Counts::default();
    for &class in &classes {
        let split: Vec<Vec<EvalFrame>> = sequences
            .iter()
            .map(|seq| {
                seq.iter()
                    .map(|f| EvalFrame {
                        gt: f.gt.iter().filter(|g| g.bbox.class == class).cloned().collect(),
                        preds: f.preds.iter().filter(|p| p.bbox.class == class).copied().collect(),
                    })
                    .collect()
            })
            .collect();
        let r = amota_amotp(&split, n)?;
        counts.add(&r.counts);
        reports.insert(class, r);
    }
    let k = reports.len() as f64;
    let overall = Overall {
        amota: reports.values().map(|r| r.amota).sum::<f64>() / k,
        amotp: reports.values().map(|r| r.amotp).sum::<f64>() / k,
        counts,
    };
    Ok(EvalReport {
        classes: reports,
        overall,
    })
}
