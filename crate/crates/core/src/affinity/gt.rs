//! Ground-truth affinity matrices.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox3D, PaddedDetections};
use crate::error::{Error, Result};
use crate::matching::{greedy_assign, MATCH_GATE};

/// An annotated box with a persistent identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub gt_id: u64,
    pub bbox: BoundingBox3D,
}

pub fn check_unique_ids(gt: &[GtBox]) -> Result<()> {
    let mut seen = HashSet::new();
    for g in gt {
        if !seen.insert(g.gt_id) {
            return Err(Error::InvalidInput(format!(
                "duplicate ground-truth id {} in one frame",
                g.gt_id
            )));
        }
    }
    Ok(())
}

fn centers(gt: &[GtBox]) -> Vec<[f64; 2]> {
    gt.iter().map(|g| [g.bbox.x, g.bbox.y]).collect()
}

/// GT id of each box (TP) or `None` (FP), by greedy 2 m center matching.
pub fn label_boxes(boxes: &[BoundingBox3D], gt: &[GtBox]) -> Vec<Option<u64>> {
    let det: Vec<[f64; 2]> = boxes.iter().map(|b| [b.x, b.y]).collect();
    greedy_assign(&det, &centers(gt), MATCH_GATE, true)
        .into_iter()
        .map(|m| m.map(|(j, _)| gt[j].gt_id))
        .collect()
}

/// Same as [`label_boxes`] on the valid slots of a padded block.
pub fn label_slots(dets: &PaddedDetections, gt: &[GtBox]) -> Vec<Option<u64>> {
    let slots: Vec<usize> = (0..dets.n_max()).filter(|&s| dets.valid[s]).collect();
    let pts: Vec<[f64; 2]> = slots.iter().map(|&s| [dets.boxes[s][0], dets.boxes[s][1]]).collect();
    let mut out = vec![None; dets.n_max()];
    for (k, m) in greedy_assign(&pts, &centers(gt), MATCH_GATE, true)
        .into_iter()
        .enumerate()
    {
        out[slots[k]] = m.map(|(j, _)| gt[j].gt_id);
    }
    out
}

/// 0/1 target matrix of size `(n_max+2)^2` (row-major).
///
/// Row `n_max` is NB, row `n_max+1` FP, column `n_max` DT, column `n_max+1` FN.
/// A current TP whose object existed in the previous frame but was not
/// detected there has an all-zero column.
pub fn build_gt_affinity(
    prev: &PaddedDetections,
    cur: &PaddedDetections,
    gt_prev: &[GtBox],
    gt_cur: &[GtBox],
) -> Result<Vec<f64>> {
    let n = prev.n_max();
    if cur.n_max() != n {
        return Err(Error::Shape(format!(
            "previous n_max {n} != current n_max {}",
            cur.n_max()
        )));
    }
    check_unique_ids(gt_prev)?;
    check_unique_ids(gt_cur)?;
    let m = n + 2;
    let (nb, fp, dt, fn_) = (n, n + 1, n, n + 1);
    let prev_lab = label_slots(prev, gt_prev);
    let cur_lab = label_slots(cur, gt_cur);
    let prev_ids: HashSet<u64> = gt_prev.iter().map(|g| g.gt_id).collect();
    let cur_ids: HashSet<u64> = gt_cur.iter().map(|g| g.gt_id).collect();
    let cur_slot_of: HashMap<u64, usize> = cur_lab
        .iter()
        .enumerate()
        .filter_map(|(s, l)| l.map(|id| (id, s)))
        .collect();

    let mut a = vec![0.0; m * m];
    for i in (0..n).filter(|&i| prev.valid[i]) {
        match prev_lab[i] {
            None => a[i * m + dt] = 1.0,
            Some(id) => match cur_slot_of.get(&id) {
                Some(&j) => a[i * m + j] = 1.0,
                None if cur_ids.contains(&id) => a[i * m + fn_] = 1.0,
                None => a[i * m + dt] = 1.0,
            },
        }
    }
    for j in (0..n).filter(|&j| cur.valid[j]) {
        match cur_lab[j] {
            None => a[fp * m + j] = 1.0,
            Some(id) if !prev_ids.contains(&id) => a[nb * m + j] = 1.0,
            Some(_) => {}
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{pad_boxes, ObjectClass};

    fn car(x: f64, y: f64) -> BoundingBox3D {
        BoundingBox3D::new([x, y, 0.0], [1.9, 4.5, 1.6], 0.0, ObjectClass::Car).with_confidence(0.8)
    }

    fn gt(id: u64, x: f64, y: f64) -> GtBox {
        GtBox {
            gt_id: id,
            bbox: car(x, y),
        }
    }

    const N: usize = 4;
    const M: usize = N + 2;
    const NB: usize = N;
    const FP: usize = N + 1;
    const DT: usize = N;
    const FN: usize = N + 1;

    fn ones(a: &[f64]) -> Vec<(usize, usize)> {
        (0..M * M).filter(|k| a[*k] == 1.0).map(|k| (k / M, k % M)).collect()
    }

    fn matrices(frames: &[(Vec<BoundingBox3D>, Vec<GtBox>)]) -> Vec<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        let mut prev = PaddedDetections::empty(N);
        let mut prev_gt: Vec<GtBox> = Vec::new();
        for (dets, g) in frames {
            let cur = pad_boxes(dets, N);
            out.push(ones(&build_gt_affinity(&prev, &cur, &prev_gt, g).unwrap()));
            prev = cur;
            prev_gt = g.clone();
        }
        out
    }

    // yellow = id 1 at x=0, red = id 2 at x=10
    #[test]
    fn car_scenario_a() {
        let frames = vec![
            (vec![car(0.0, 0.0)], vec![gt(1, 0.0, 0.0)]),
            (
                vec![car(0.0, 1.0), car(10.0, 0.0)],
                vec![gt(1, 0.0, 1.0), gt(2, 10.0, 0.0)],
            ),
            (vec![car(10.0, 1.0)], vec![gt(2, 10.0, 1.0)]),
        ];
        let a = matrices(&frames);
        assert_eq!(a[0], vec![(NB, 0)]);
        assert_eq!(a[1], vec![(0, 0), (NB, 1)]);
        assert_eq!(a[2], vec![(0, DT), (1, 0)]);
    }

    #[test]
    fn car_scenario_b() {
        let frames = vec![
            (vec![car(0.0, 0.0)], vec![gt(1, 0.0, 0.0)]),
            (vec![car(10.0, 0.0)], vec![gt(1, 0.0, 1.0), gt(2, 10.0, 0.0)]),
            (
                vec![car(10.0, 1.0), car(-20.0, 5.0)],
                vec![gt(2, 10.0, 1.0)],
            ),
        ];
        let a = matrices(&frames);
        assert_eq!(a[0], vec![(NB, 0)]);
        assert_eq!(a[1], vec![(0, FN), (NB, 0)]);
        assert_eq!(a[2], vec![(0, 0), (FP, 1)]);
    }

    #[test]
    fn no_detections_gives_zero_matrix() {
        let e = PaddedDetections::empty(N);
        let a = build_gt_affinity(&e, &e, &[gt(1, 0.0, 0.0)], &[gt(1, 0.0, 0.0)]).unwrap();
        assert!(a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = PaddedDetections::empty(N);
        let g = vec![gt(3, 0.0, 0.0), gt(3, 5.0, 0.0)];
        assert!(build_gt_affinity(&e, &e, &g, &[]).is_err());
        assert!(build_gt_affinity(&e, &e, &[], &g).is_err());
    }

    #[test]
    fn reappearing_object_has_empty_column() {
        let prev = pad_boxes(&[], N);
        let cur = pad_boxes(&[car(0.0, 0.0)], N);
        let a = build_gt_affinity(&prev, &cur, &[gt(1, 0.0, 0.0)], &[gt(1, 0.0, 0.5)]).unwrap();
        assert!(a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prev_false_positive_dies() {
        let prev = pad_boxes(&[car(30.0, 0.0)], N);
        let cur = pad_boxes(&[], N);
        let a = build_gt_affinity(&prev, &cur, &[], &[]).unwrap();
        assert_eq!(ones(&a), vec![(0, DT)]);
    }

    mod oracle {
        use super::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        /// Independent labelling: repeatedly take the globally closest
        /// unmatched pair under the gate.
        fn oracle_labels(dets: &[[f64; 2]], gts: &[(u64, [f64; 2])]) -> Vec<Option<u64>> {
            let mut lab = vec![None; dets.len()];
            let mut used = vec![false; gts.len()];
            loop {
                let mut best: Option<(f64, usize, usize)> = None;
                for (i, d) in dets.iter().enumerate() {
                    if lab[i].is_some() {
                        continue;
                    }
                    for (j, (_, g)) in gts.iter().enumerate() {
                        if used[j] {
                            continue;
                        }
                        let dist = ((d[0] - g[0]).powi(2) + (d[1] - g[1]).powi(2)).sqrt();
                        if dist < 2.0 && best.map_or(true, |b| (dist, i, j) < b) {
                            best = Some((dist, i, j));
                        }
                    }
                }
                match best {
                    Some((_, i, j)) => {
                        lab[i] = Some(gts[j].0);
                        used[j] = true;
                    }
                    None => return lab,
                }
            }
        }

        /// Decides each cell from the labels alone.
        fn oracle_cell(
            i: usize,
            j: usize,
            pl: &[Option<u64>],
            cl: &[Option<u64>],
            pg: &[u64],
            cg: &[u64],
        ) -> f64 {
            let np = pl.len();
            let nc = cl.len();
            let row_det = i < np;
            let col_det = j < nc;
            let hit = match (row_det, col_det) {
                (true, true) => pl[i].is_some() && pl[i] == cl[j],
                (true, false) if j == DT => match pl[i] {
                    None => true,
                    Some(id) => !cg.contains(&id),
                },
                (true, false) if j == FN => match pl[i] {
                    None => false,
                    Some(id) => cg.contains(&id) && !cl.contains(&Some(id)),
                },
                (false, true) if i == NB => matches!(cl[j], Some(id) if !pg.contains(&id)),
                (false, true) if i == FP => cl[j].is_none(),
                _ => false,
            };
            if hit {
                1.0
            } else {
                0.0
            }
        }

        #[test]
        fn matches_brute_force_oracle() {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for _ in 0..500 {
                let frame = |rng: &mut ChaCha8Rng| {
                    let n_obj = rng.random_range(0..=5usize);
                    let mut ids: Vec<u64> = (1..=8).collect();
                    let mut gts = Vec::new();
                    for _ in 0..n_obj {
                        let k = rng.random_range(0..ids.len());
                        let id = ids.swap_remove(k);
                        // small id set so objects persist across frames
                        gts.push((id, [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)]));
                    }
                    let mut dets = Vec::new();
                    for (_, g) in &gts {
                        if rng.random_bool(0.8) {
                            dets.push([g[0] + rng.random_range(-2.5..2.5), g[1] + rng.random_range(-2.5..2.5)]);
                        }
                    }
                    for _ in 0..rng.random_range(0..2usize) {
                        dets.push([rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)]);
                    }
                    dets.truncate(N);
                    (dets, gts)
                };
                let (pd, pg) = frame(&mut rng);
                let (cd, cg) = frame(&mut rng);
                let to_boxes = |d: &[[f64; 2]]| -> Vec<BoundingBox3D> {
                    d.iter().map(|p| car(p[0], p[1])).collect()
                };
                let to_gt = |g: &[(u64, [f64; 2])]| -> Vec<GtBox> {
                    g.iter().map(|(id, p)| gt(*id, p[0], p[1])).collect()
                };
                let a = build_gt_affinity(
                    &pad_boxes(&to_boxes(&pd), N),
                    &pad_boxes(&to_boxes(&cd), N),
                    &to_gt(&pg),
                    &to_gt(&cg),
                )
                .unwrap();
                let pl = oracle_labels(&pd, &pg);
                let cl = oracle_labels(&cd, &cg);
                let pids: Vec<u64> = pg.iter().map(|g| g.0).collect();
                let cids: Vec<u64> = cg.iter().map(|g| g.0).collect();
                for i in 0..M {
                    for j in 0..M {
                        // padded slots hold no detection
                        let padded = (i < N && i >= pd.len()) || (j < N && j >= cd.len());
                        let expect = if padded {
                            0.0
                        } else {
                            oracle_cell(i, j, &pl, &cl, &pids, &cids)
                        };
                        assert_eq!(a[i * M + j], expect, "cell ({i},{j}) pd={pd:?} pg={pg:?} cd={cd:?} cg={cg:?}");
                    }
                }
                // rows: exactly one 1; columns: at most one 1
                for i in 0..pd.len() {
                    assert_eq!((0..M).filter(|&j| a[i * M + j] == 1.0).count(), 1);
                }
                for j in 0..cd.len() {
                    assert!((0..M).filter(|&i| a[i * M + j] == 1.0).count() <= 1);
                }
            }
        }
    }
}
