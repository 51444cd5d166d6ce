use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::region::Flagged;
use super::{check_shapes, GroundTruthMask, PredictionMap};
use crate::error::Result;

/// Machine epsilon; the toolbox adds it to every denominator.
const EPS: f64 = f64::EPSILON;

/// Number of binarization thresholds of the mean E-measure.
pub const E_THRESHOLDS: usize = 256;

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for a single value.
fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`.
pub fn s_measure(pred: &PredictionMap, gt: &GroundTruthMask, alpha: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    let p = pred.data();
    let g = gt.data();
    let y = g.mean().unwrap();
    if y == 0.0 {
        return Ok(1.0 - p.mean().unwrap());
    }
    if y == 1.0 {
        return Ok(p.mean().unwrap());
    }
    let q = alpha * s_object(p, g) + (1.0 - alpha) * s_region(p, g);
    Ok(q.clamp(0.0, 1.0))
}

fn object_score(values: &[f64]) -> f64 {
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std_dev(values) + EPS)
}

fn s_object(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&pv, &gv) in p.iter().zip(g) {
        if gv == 1.0 {
            fg.push(pv);
        } else {
            bg.push(1.0 - pv);
        }
    }
    let u = g.mean().unwrap();
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// GT centroid as 1-based `(column, row)` split positions.
fn centroid(g: &Array2<f64>) -> (usize, usize) {
    let (h, w) = g.dim();
    let total: f64 = g.sum();
    let mut cx = 0.0;
    let mut cy = 0.0;
    for ((i, j), &v) in g.indexed_iter() {
        cx += v * (j + 1) as f64;
        cy += v * (i + 1) as f64;
    }
    let x = (cx / total).round() as usize;
    let y = (cy / total).round() as usize;
    (x.min(w), y.min(h))
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = mean(p);
    let y = mean(g);
    let denom = n - 1.0 + EPS;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in p.iter().zip(g) {
        sx += (a - x) * (a - x);
        sy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx + sy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let (h, w) = g.dim();
    let (x, y) = centroid(g);
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = ((w - x) * y) as f64 / area;
    let w3 = (x * (h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quadrants = [
        (0..y, 0..x, w1),
        (0..y, x..w, w2),
        (y..h, 0..x, w3),
        (y..h, x..w, w4),
    ];
    let mut q = 0.0;
    for (rows, cols, weight) in quadrants {
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let mut pv = Vec::with_capacity(rows.len() * cols.len());
        let mut gv = Vec::with_capacity(pv.capacity());
        for i in rows {
            for j in cols.clone() {
                pv.push(p[[i, j]]);
                gv.push(g[[i, j]]);
            }
        }
        q += weight * ssim(&pv, &gv);
    }
    q
}

/// How the E-measure picks its binarization thresholds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EMeasureMode {
    /// Mean over 256 thresholds at the centres of `[k/256, (k+1)/256)`.
    #[default]
    Mean,
    /// A single threshold `min(2 * mean(pred), 1)`.
    Adaptive,
}

/// Threshold `k` of the mean E-measure.
fn threshold(k: usize) -> f64 {
    (k as f64 + 0.5) / E_THRESHOLDS as f64
}

/// Enhanced alignment score of one binarization, given the foreground
/// fraction of the mask and the counts of predicted-foreground pixels inside
/// and outside the mask.
fn enhanced_score(n: usize, gt_fg: usize, on_fg: usize, on_bg: usize) -> f64 {
    let nf = n as f64;
    let on = (on_fg + on_bg) as f64;
    if gt_fg == 0 {
        return 1.0 - on / nf;
    }
    if gt_fg == n {
        return on / nf;
    }
    let mu_g = gt_fg as f64 / nf;
    let mu_p = on / nf;
    let cell = |g: f64, b: f64| {
        let ag = g - mu_g;
        let ap = b - mu_p;
        let align = 2.0 * ag * ap / (ag * ag + ap * ap + EPS);
        (align + 1.0) * (align + 1.0) / 4.0
    };
    let off_fg = gt_fg - on_fg;
    let off_bg = n - gt_fg - on_bg;
    (on_fg as f64 * cell(1.0, 1.0)
        + off_fg as f64 * cell(1.0, 0.0)
        + on_bg as f64 * cell(0.0, 1.0)
        + off_bg as f64 * cell(0.0, 0.0))
        / nf
}

/// Number of mean-mode thresholds at or below `p`.
fn thresholds_passed(p: f64) -> usize {
    let mut k =
        ((p * E_THRESHOLDS as f64 - 0.5).floor() + 1.0).clamp(0.0, E_THRESHOLDS as f64) as usize;
    while k > 0 && p < threshold(k - 1) {
        k -= 1;
    }
    while k < E_THRESHOLDS && p >= threshold(k) {
        k += 1;
    }
    k
}

/// Enhanced-alignment measure in the given mode.
pub fn e_measure(pred: &PredictionMap, gt: &GroundTruthMask, mode: EMeasureMode) -> Result<f64> {
    check_shapes(pred, gt)?;
    let n = pred.data().len();
    let gt_fg = gt.foreground();
    match mode {
        EMeasureMode::Mean => {
            // hist[k]: pixels passing exactly k thresholds, split by class
            let mut hist_fg = vec![0usize; E_THRESHOLDS + 1];
            let mut hist_bg = vec![0usize; E_THRESHOLDS + 1];
            for (&p, &g) in pred.data().iter().zip(gt.data()) {
                let k = thresholds_passed(p);
                if g == 1.0 {
                    hist_fg[k] += 1;
                } else {
                    hist_bg[k] += 1;
                }
            }
            // pixels passing threshold k are those with count > k
            let mut on_fg = gt_fg - hist_fg[0];
            let mut on_bg = (n - gt_fg) - hist_bg[0];
            let mut total = 0.0;
            for k in 0..E_THRESHOLDS {
                total += enhanced_score(n, gt_fg, on_fg, on_bg);
                on_fg -= hist_fg[k + 1];
                on_bg -= hist_bg[k + 1];
            }
            Ok(total / E_THRESHOLDS as f64)
        }
        EMeasureMode::Adaptive => {
            let t = (2.0 * pred.data().mean().unwrap()).min(1.0);
            let (mut on_fg, mut on_bg) = (0, 0);
            for (&p, &g) in pred.data().iter().zip(gt.data()) {
                if p >= t {
                    if g == 1.0 {
                        on_fg += 1;
                    } else {
                        on_bg += 1;
                    }
                }
            }
            Ok(enhanced_score(n, gt_fg, on_fg, on_bg))
        }
    }
}

/// Mean E-measure over 256 thresholds.
pub fn e_measure_mean(pred: &PredictionMap, gt: &GroundTruthMask) -> Result<f64> {
    e_measure(pred, gt, EMeasureMode::Mean)
}

/// Normalized 7x7 Gaussian with sigma 5.
fn gaussian_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Exact squared Euclidean distance transform of a 1D sampled function.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let r = v[k];
            s = ((f[q] + (q * q) as f64) - (f[r] + (r * r) as f64))
                / (2.0 * q as f64 - 2.0 * r as f64);
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let r = v[k];
        let d = q as f64 - r as f64;
        *o = d * d + f[r];
    }
}

/// Squared distance of every pixel to the nearest foreground pixel.
fn squared_distances(fg: &Array2<bool>) -> Array2<u64> {
    let (h, w) = fg.dim();
    // large but finite so the parabola arithmetic stays exact
    let far = ((h * h + w * w) as f64 + 1.0) * 4.0;
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut cols = Array2::<f64>::zeros((h, w));
    let mut f = vec![0.0; h];
    let mut o = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            f[i] = if fg[[i, j]] { 0.0 } else { far };
        }
        edt_1d(&f, &mut o, &mut v, &mut z);
        for i in 0..h {
            cols[[i, j]] = o[i];
        }
    }
    let mut out = Array2::<u64>::zeros((h, w));
    let mut f = vec![0.0; w];
    let mut o = vec![0.0; w];
    for i in 0..h {
        for j in 0..w {
            f[j] = cols[[i, j]];
        }
        edt_1d(&f, &mut o, &mut v, &mut z);
        for j in 0..w {
            out[[i, j]] = o[j] as u64;
        }
    }
    out
}

fn isqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Nearest foreground pixel of `(i, j)` at squared distance `d2`; ties go to
/// the smallest row-major index.
fn nearest_at(fg: &Array2<bool>, i: usize, j: usize, d2: u64) -> (usize, usize) {
    let (h, w) = fg.dim();
    let r = isqrt(d2) as i64;
    for dy in -r..=r {
        let rem = d2 - (dy * dy) as u64;
        let dx = isqrt(rem);
        if dx * dx != rem {
            continue;
        }
        let y = i as i64 + dy;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for x in [j as i64 - dx as i64, j as i64 + dx as i64] {
            if x >= 0 && x < w as i64 && fg[[y as usize, x as usize]] {
                return (y as usize, x as usize);
            }
        }
    }
    unreachable!("distance transform points at a foreground pixel")
}

/// Weighted F-measure with `beta2 = beta^2`. Undefined for an empty mask,
/// which yields 0 flagged as degenerate.
pub fn weighted_f_beta(pred: &PredictionMap, gt: &GroundTruthMask, beta2: f64) -> Result<Flagged> {
    check_shapes(pred, gt)?;
    if gt.foreground() == 0 {
        return Ok(Flagged {
            value: 0.0,
            degenerate: true,
        });
    }
    let (h, w) = gt.dim();
    let fg = gt.data().mapv(|v| v == 1.0);
    let err = (pred.data() - gt.data()).mapv(f64::abs);
    let d2 = squared_distances(&fg);

    let mut et = err.clone();
    for i in 0..h {
        for j in 0..w {
            if !fg[[i, j]] {
                let (y, x) = nearest_at(&fg, i, j, d2[[i, j]]);
                et[[i, j]] = err[[y, x]];
            }
        }
    }

    let k = gaussian_kernel();
    let mut ea = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (a, row) in k.iter().enumerate() {
                let y = i as i64 + a as i64 - 3;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                for (b, kv) in row.iter().enumerate() {
                    let x = j as i64 + b as i64 - 3;
                    if x < 0 || x >= w as i64 {
                        continue;
                    }
                    acc += kv * et[[y as usize, x as usize]];
                }
            }
            ea[[i, j]] = acc;
        }
    }

    let decay = 0.5f64.ln() / 5.0;
    let mut fg_count = 0.0;
    let mut ew_fg = 0.0;
    let mut ew_bg = 0.0;
    for i in 0..h {
        for j in 0..w {
            let e = err[[i, j]];
            if fg[[i, j]] {
                fg_count += 1.0;
                ew_fg += if ea[[i, j]] < e { ea[[i, j]] } else { e };
            } else {
                let b = 2.0 - (decay * (d2[[i, j]] as f64).sqrt()).exp();
                ew_bg += e * b;
            }
        }
    }
    let tpw = fg_count - ew_fg;
    let fpw = ew_bg;
    let recall = 1.0 - ew_fg / fg_count;
    let precision = tpw / (EPS + tpw + fpw);
    Ok(Flagged {
        value: (1.0 + beta2) * recall * precision / (EPS + recall + beta2 * precision),
        degenerate: false,
    })
}
