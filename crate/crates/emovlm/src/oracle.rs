//! Independent brute-force reference implementations used by the
//! verification suites. Nothing here calls into the production code paths it
//! is used to check; each function recomputes its answer from first
//! principles so the test suites can compare two routes.

use crate::geometry::{FaceRegion, Landmark, PatchGrid};
use ndarray::Array2;

/// Full-image rasterization membership: classify every pixel center with a
/// standalone even-odd test (boundary inside), then count per patch.
pub fn raster_membership(
    landmarks: &[Landmark],
    regions: &[FaceRegion],
    grid: PatchGrid,
    threshold: f64,
) -> Array2<bool> {
    fn inside(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
        let n = poly.len();
        let mut hits = 0usize;
        let mut on_edge = false;
        for k in 0..n {
            let (ax, ay) = poly[k];
            let (bx, by) = poly[(k + 1) % n];
            let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
            if cross == 0.0
                && px >= ax.min(bx)
                && px <= ax.max(bx)
                && py >= ay.min(by)
                && py <= ay.max(by)
            {
                on_edge = true;
            }
            if (ay > py) != (by > py) && px < ax + (bx - ax) * (py - ay) / (by - ay) {
                hits += 1;
            }
        }
        on_edge || hits % 2 == 1
    }

    let mut out = Array2::from_elem((grid.n_patches(), regions.len()), false);
    for (r, region) in regions.iter().enumerate() {
        let poly: Vec<(f64, f64)> = region
            .indices
            .iter()
            .map(|&i| (landmarks[i].x, landmarks[i].y))
            .collect();
        let mut raster = vec![vec![false; grid.image_w]; grid.image_h];
        for (py, row) in raster.iter_mut().enumerate() {
            for (px, cell) in row.iter_mut().enumerate() {
                let cx = (px as f64 + 0.5) / grid.image_w as f64;
                let cy = (py as f64 + 0.5) / grid.image_h as f64;
                *cell = inside(cx, cy, &poly);
            }
        }
        for pr in 0..grid.n_rows() {
            for pc in 0..grid.n_cols() {
                let mut count = 0usize;
                for dy in 0..grid.patch {
                    for dx in 0..grid.patch {
                        if raster[pr * grid.patch + dy][pc * grid.patch + dx] {
                            count += 1;
                        }
                    }
                }
                let frac = count as f64 / (grid.patch * grid.patch) as f64;
                out[[pr * grid.n_cols() + pc, r]] = frac >= threshold;
            }
        }
    }
    out
}

/// Pairwise shared-region scan for the attention expansion: `allowed[i][j]`
/// iff i and j share a region, j == i, or i belongs to no region at all.
pub fn pairwise_shared_region(membership: &Array2<bool>) -> Array2<bool> {
    let n = membership.nrows();
    let mut allowed = Array2::from_elem((n, n), false);
    for i in 0..n {
        let row_i: Vec<bool> = membership.row(i).to_vec();
        let any_i = row_i.iter().any(|&b| b);
        for j in 0..n {
            if !any_i || i == j {
                allowed[[i, j]] = true;
                continue;
            }
            let row_j = membership.row(j);
            allowed[[i, j]] = row_i
                .iter()
                .zip(row_j.iter())
                .any(|(&a, &b)| a && b);
        }
    }
    allowed
}

/// Dense masked multi-head attention with -inf fill: the textbook route the
/// support-restricted softmax implementation is compared against.
///
/// `wq`, `wk`, `wv` are `[d, d]` with row-vector convention `q = x . wq`;
/// heads are contiguous column blocks. Output is the concatenation of the
/// per-head attention results (no output projection).
#[allow(clippy::too_many_arguments)]
pub fn dense_masked_attention(
    x: &Array2<f64>,
    wq: &Array2<f64>,
    bq: &Array2<f64>,
    wk: &Array2<f64>,
    bk: &Array2<f64>,
    wv: &Array2<f64>,
    bv: &Array2<f64>,
    heads: usize,
    allowed: &Array2<bool>,
) -> Array2<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let dk = d / heads;
    let q = x.dot(wq) + &bq.row(0);
    let k = x.dot(wk) + &bk.row(0);
    let v = x.dot(wv) + &bv.row(0);
    let mut out = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t()) / (dk as f64).sqrt();
        for i in 0..n {
            for j in 0..n {
                if !allowed[[i, j]] {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        // row softmax over the -inf-filled scores
        for i in 0..n {
            let row_max = scores
                .row(i)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.row(i).iter().map(|&s| (s - row_max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..n {
                scores[[i, j]] = exps[j] / denom;
            }
        }
        let oh = scores.dot(&vh);
        out.slice_mut(ndarray::s![.., cols]).assign(&oh);
    }
    out
}

/// Direct negative mean log-softmax over the scored rows, computed with an
/// explicit log-sum-exp.
pub fn masked_nll(logits: &Array2<f64>, answer_ids: &[usize], scored_rows: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut next_answer = 0usize;
    for (i, &scored) in scored_rows.iter().enumerate() {
        if !scored {
            continue;
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[answer_ids[next_answer]];
        next_answer += 1;
        count += 1;
    }
    total / count as f64
}

/// Brute-force utterance window membership: frame f is in window u iff
/// `start <= t_f < end`.
pub fn window_membership_scan(
    utterances: &[(f64, f64)],
    frame_times: &[f64],
) -> Vec<Vec<usize>> {
    utterances
        .iter()
        .map(|&(start, end)| {
            frame_times
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= start && t < end)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}
