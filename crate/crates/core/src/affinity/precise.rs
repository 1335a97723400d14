//! Loss-only forward pass over any [`Real`] scalar.
//!
//! Mirrors [`ShastaModel::forward`] followed by [`matching_loss`]. With
//! [`DoubleDouble`] it resolves loss differences far below `f64` rounding,
//! which is what finite-difference gradient checks need.
//!
//! [`matching_loss`]: super::model::matching_loss

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{gradcheck, DoubleDouble, GradcheckReport, Real, PROB_FLOOR};
use crate::residuals::pair_mask;

use super::model::{valid_pairs, NetId, PaddedFrame, ResidualMode, ShastaModel};

fn r<T: Real>(v: f64) -> T {
    T::from_f64(v)
}

fn box_input<T: Real>(model: &ShastaModel, f: &PaddedFrame) -> Vec<T> {
    let s: T = r(model.config.position_scale);
    let mut v = Vec::with_capacity(f.n_max() * 7);
    for b in &f.dets.boxes {
        v.extend([r::<T>(b[0]) / s, r::<T>(b[1]) / s, r::<T>(b[2]) / s]);
        v.extend(b[3..7].iter().map(|x| r::<T>(*x)));
    }
    v
}

fn anchor_box<T: Real>(o: &[T], scale: T) -> [T; 7] {
    [
        o[0] * scale,
        o[1] * scale,
        o[2] * scale,
        o[3].abs(),
        o[4].abs(),
        o[5].abs(),
        o[6],
    ]
}

fn softmax<T: Real>(v: &[T], mask: &[bool]) -> Vec<T> {
    let mut max: Option<T> = None;
    for (x, m) in v.iter().zip(mask) {
        if *m {
            max = Some(max.map_or(*x, |a| a.max(*x)));
        }
    }
    let max = max.expect("caller checks for a valid entry");
    let e: Vec<T> = v
        .iter()
        .zip(mask)
        .map(|(x, m)| if *m { (*x - max).exp() } else { T::zero() })
        .collect();
    let sum = e.iter().fold(T::zero(), |a, b| a + *b);
    e.into_iter().map(|x| x / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    Net(NetId),
    /// Unnormalised voxel terms `[center, dims + yaw]` of each pair.
    Voxel,
}

#[derive(Debug, Clone)]
struct Rows<T> {
    input: Vec<T>,
    output: Vec<T>,
}

/// Row-wise inputs and outputs of every network call of one evaluation.
/// Replaying it, rows whose input is unchanged are copied instead of
/// recomputed; the network named `stale` is always recomputed.
#[derive(Debug, Clone)]
struct Memo<T> {
    rows: HashMap<Slot, Rows<T>>,
    recording: bool,
    stale: Option<NetId>,
}

impl<T: Real> Memo<T> {
    fn recorder() -> Self {
        Self {
            rows: HashMap::new(),
            recording: true,
            stale: None,
        }
    }
}

fn call<T: Real>(
    memo: &mut Option<&mut Memo<T>>,
    slot: Slot,
    x: &[T],
    rows: usize,
    f: impl Fn(&[T], usize) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let Some(memo) = memo.as_deref_mut() else {
        return f(x, rows);
    };
    if memo.recording {
        let y = f(x, rows)?;
        memo.rows.insert(slot, Rows { input: x.to_vec(), output: y.clone() });
        return Ok(y);
    }
    if memo.stale.map(Slot::Net) == Some(slot) {
        return f(x, rows);
    }
    let Some(rec) = memo.rows.get(&slot) else {
        return f(x, rows);
    };
    if rows == 0 || rec.input.len() != x.len() {
        return f(x, rows);
    }
    let in_w = x.len() / rows;
    let out_w = rec.output.len() / rows;
    let miss: Vec<usize> = (0..rows)
        .filter(|&k| x[k * in_w..(k + 1) * in_w] != rec.input[k * in_w..(k + 1) * in_w])
        .collect();
    let mut y = rec.output.clone();
    if !miss.is_empty() {
        let xm: Vec<T> = miss
            .iter()
            .flat_map(|&k| x[k * in_w..(k + 1) * in_w].iter().copied())
            .collect();
        let ym = f(&xm, miss.len())?;
        for (q, &k) in miss.iter().enumerate() {
            y[k * out_w..(k + 1) * out_w].copy_from_slice(&ym[q * out_w..(q + 1) * out_w]);
        }
    }
    Ok(y)
}

/// `0.5 * (L_fm + L_bm)` evaluated in `T`; `None` without ground-truth mass.
pub fn loss_in<T: Real>(
    model: &ShastaModel,
    prev: &PaddedFrame,
    cur: &PaddedFrame,
    gt: &[f64],
) -> Result<Option<T>> {
    loss_memo(model, prev, cur, gt, None)
}

fn loss_memo<T: Real>(
    model: &ShastaModel,
    prev: &PaddedFrame,
    cur: &PaddedFrame,
    gt: &[f64],
    mut memo: Option<&mut Memo<T>>,
) -> Result<Option<T>> {
    let cfg = &model.config;
    let n = cfg.n_max;
    let m = n + 2;
    let d = cfg.shape_dim();
    if prev.n_max() != n || cur.n_max() != n || gt.len() != m * m {
        return Err(Error::Shape("frame pair does not fit the model".into()));
    }
    let scale: T = r(cfg.position_scale);

    let cur_in = box_input::<T>(model, cur);
    let prev_in = box_input::<T>(model, prev);
    macro_rules! fwd {
        ($id:expr, $x:expr, $rows:expr) => {
            call(&mut memo, Slot::Net($id), $x, $rows, |x, b| model.net($id).forward_in(x, b))
        };
    }
    let b_fp = anchor_box(&fwd!(NetId::BoxFp, &cur_in, 1)?, scale);
    let b_nb = anchor_box(&fwd!(NetId::BoxNb, &cur_in, 1)?, scale);
    let b_fn = anchor_box(&fwd!(NetId::BoxFn, &prev_in, 1)?, scale);
    let b_dt = anchor_box(&fwd!(NetId::BoxDt, &prev_in, 1)?, scale);
    let cur_s: Vec<T> = cur.shapes.iter().map(|x| r(*x)).collect();
    let prev_s: Vec<T> = prev.shapes.iter().map(|x| r(*x)).collect();
    let s_fp = fwd!(NetId::ShapeFp, &cur_s, 1)?;
    let s_nb = fwd!(NetId::ShapeNb, &cur_s, 1)?;
    let s_fn = fwd!(NetId::ShapeFn, &prev_s, 1)?;
    let s_dt = fwd!(NetId::ShapeDt, &prev_s, 1)?;

    let to_t = |b: &[f64; 7]| b.map(|x| r::<T>(x));
    let mut pb: Vec<[T; 7]> = prev.dets.boxes.iter().map(to_t).collect();
    pb.extend([b_nb, b_fp]);
    let mut cb: Vec<[T; 7]> = cur.dets.boxes.iter().map(to_t).collect();
    cb.extend([b_dt, b_fn]);
    let mut ps = prev_s.clone();
    ps.extend(s_nb.iter().chain(&s_fp));
    let mut cs = cur_s.clone();
    cs.extend(s_dt.iter().chain(&s_fn));

    let mut pv = prev.dets.valid.clone();
    pv.extend([true, true]);
    let mut cv = cur.dets.valid.clone();
    cv.extend([true, true]);
    let mask = pair_mask(&pv, &cv, n);
    let pairs = valid_pairs(&mask, m);
    let np = pairs.len();
    if np == 0 {
        return Ok(None);
    }
    let mode = cfg.residual_mode;

    let voxel: Vec<T> = if matches!(mode, ResidualMode::Fused | ResidualMode::VoxelOnly) {
        let x: Vec<T> = pairs
            .iter()
            .flat_map(|&(i, j)| pb[i].iter().chain(&cb[j]).copied())
            .collect();
        let terms = call(&mut memo, Slot::Voxel, &x, np, |x, rows| {
            Ok((0..rows)
                .flat_map(|k| {
                    let (p, c) = (&x[14 * k..14 * k + 7], &x[14 * k + 7..14 * k + 14]);
                    let l_c = (0..3).fold(T::zero(), |a, q| a + (p[q] - c[q]) * (p[q] - c[q]));
                    let l_d = (3..6).fold(T::zero(), |a, q| a + (p[q] / c[q]).ln().abs());
                    let u = p[6].cos() - c[6].cos();
                    let v = p[6].sin() - c[6].sin();
                    [l_c, l_d + (u * u + v * v).sqrt()]
                })
                .collect())
        })?;
        let mean = (0..np).fold(T::zero(), |a, k| a + terms[2 * k]) / r(np as f64);
        let norm = if mean > T::zero() { mean } else { r(1.0) };
        (0..np).map(|k| terms[2 * k] / norm + terms[2 * k + 1]).collect()
    } else {
        vec![T::zero(); np]
    };

    let centers = |i: usize, j: usize| -> [T; 6] {
        let (p, c) = (&pb[i], &cb[j]);
        [p[0] / scale, p[1] / scale, p[2] / scale, c[0] / scale, c[1] / scale, c[2] / scale]
    };
    let rb = if matches!(mode, ResidualMode::Fused | ResidualMode::BoxOnly) {
        let x: Vec<T> = pairs.iter().flat_map(|&(i, j)| centers(i, j)).collect();
        fwd!(NetId::BoxResidual, &x, np)?
    } else {
        vec![T::zero(); np]
    };
    let shape_pair = |i: usize, j: usize| -> Vec<T> {
        ps[i * d..(i + 1) * d]
            .iter()
            .chain(&cs[j * d..(j + 1) * d])
            .copied()
            .collect()
    };
    let rs = if matches!(mode, ResidualMode::Fused | ResidualMode::ShapeOnly) {
        let x: Vec<T> = pairs.iter().flat_map(|&(i, j)| shape_pair(i, j)).collect();
        fwd!(NetId::ShapeResidual, &x, np)?
    } else {
        vec![T::zero(); np]
    };
    let residual: Vec<T> = match mode {
        ResidualMode::Fused => {
            let x: Vec<T> = pairs
                .iter()
                .flat_map(|&(i, j)| {
                    let mut v = centers(i, j).to_vec();
                    v.extend(shape_pair(i, j));
                    v
                })
                .collect();
            let a = fwd!(NetId::Fusion, &x, np)?;
            (0..np)
                .map(|k| a[3 * k] * voxel[k] + a[3 * k + 1] * rb[k] + a[3 * k + 2] * rs[k])
                .collect()
        }
        ResidualMode::VoxelOnly => voxel,
        ResidualMode::BoxOnly => rb,
        ResidualMode::ShapeOnly => rs,
    };
    let head = fwd!(NetId::Affinity, &residual, np)?;
    let mut scores = vec![T::zero(); m * m];
    for (k, &(i, j)) in pairs.iter().enumerate() {
        scores[i * m + j] = head[k];
    }

    let max_term: T = r(-PROB_FLOOR.ln());
    let mut loss = T::zero();
    let mut any = false;
    for forward in [true, false] {
        let at = |line: usize, k: usize| if forward { line * m + k } else { k * m + line };
        let mut mass = 0.0;
        let mut lines = Vec::new();
        for line in 0..n {
            let live = if forward { pv[line] } else { cv[line] };
            if live {
                mass += (0..m).map(|k| gt[at(line, k)]).sum::<f64>();
                lines.push(line);
            }
        }
        if mass <= 0.0 {
            continue;
        }
        any = true;
        let w: T = r(0.5 / mass);
        for line in lines {
            let lmask: Vec<bool> = (0..m).map(|k| mask[at(line, k)]).collect();
            let vals: Vec<T> = (0..m).map(|k| scores[at(line, k)]).collect();
            let p = softmax(&vals, &lmask);
            for k in 0..m {
                let g = gt[at(line, k)];
                if g == 0.0 {
                    continue;
                }
                let term = -p[k].ln();
                let term = if term >= max_term { max_term } else { term };
                loss = loss + w * r(g) * term;
            }
        }
    }
    Ok(if any { Some(loss) } else { None })
}

/// Central-difference check of [`ShastaModel::loss_and_grad`] over every
/// parameter of all twelve networks.
///
/// Each probe loss is evaluated in double-double and offset by the
/// unperturbed loss, so the returned differences are not limited by `f64`
/// resolution of the loss value itself.
pub fn model_gradcheck(
    model: &ShastaModel,
    prev: &PaddedFrame,
    cur: &PaddedFrame,
    gt: &[f64],
) -> Result<GradcheckReport> {
    model_gradcheck_with(model, prev, cur, gt, |_| {})
}

/// [`model_gradcheck`] with a hook that may alter the flattened analytic
/// gradient before comparison (negative controls).
pub fn model_gradcheck_with(
    model: &ShastaModel,
    prev: &PaddedFrame,
    cur: &PaddedFrame,
    gt: &[f64],
    tamper: impl FnOnce(&mut [f64]),
) -> Result<GradcheckReport> {
    let (_, grads) = model
        .loss_and_grad(prev, cur, gt)?
        .ok_or_else(|| Error::InvalidInput("ground truth carries no mass".into()))?;
    let mut analytic = grads.flatten();
    tamper(&mut analytic);
    let mut memo = Memo::<DoubleDouble>::recorder();
    let base = loss_memo(model, prev, cur, gt, Some(&mut memo))?.expect("mass checked above");
    memo.recording = false;
    let params = model.flat_params();
    // owning network of every flat parameter
    let owner: Vec<NetId> = NetId::ALL
        .iter()
        .flat_map(|&id| std::iter::repeat_n(id, model.net(id).params().len()))
        .collect();
    let mut probe = model.clone();
    let mut failure = None;
    let report = gradcheck(&params, &analytic, |p| {
        probe.set_flat_params(p).expect("same length");
        memo.stale = p.iter().zip(&params).position(|(a, b)| a != b).map(|k| owner[k]);
        match loss_memo::<DoubleDouble>(&probe, prev, cur, gt, Some(&mut memo)) {
            Ok(Some(l)) => (l - base).to_f64(),
            Ok(None) => 0.0,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
