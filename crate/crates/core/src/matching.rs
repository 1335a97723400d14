//! Greedy center-distance assignment shared by ground-truth labelling,
//! the tracker and evaluation.

/// Detection-to-ground-truth gate in meters.
pub const MATCH_GATE: f64 = 2.0;

/// Greedy one-to-one assignment of `a` to `b` by ascending planar distance.
///
/// Pairs with distance `<= gate` are candidates (`< gate` when `strict`).
/// Ties break by `(a index, b index)`. Returns, for each element of `a`, the
/// matched index into `b` and the distance.
pub fn greedy_assign(
    a: &[[f64; 2]],
    b: &[[f64; 2]],
    gate: f64,
    strict: bool,
) -> Vec<Option<(usize, f64)>> {
    let mut cands = Vec::new();
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            let inside = if strict { d < gate } else { d <= gate };
            if inside {
                cands.push((d, i, j));
            }
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out = vec![None; a.len()];
    let mut taken = vec![false; b.len()];
    for (d, i, j) in cands {
        if out[i].is_none() && !taken[j] {
            out[i] = Some((j, d));
            taken[j] = true;
        }
    }
    out
}
