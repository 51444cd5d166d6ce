//! Direct, unoptimized restatements of the metric definitions used as
//! oracles for the library implementations.

use adapterseg::metrics::{
    ber, dice_iou, e_measure_mean, f1_semantic, mae, s_measure, weighted_f_beta, GroundTruthMask,
    PredictionMap,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = f64::EPSILON;

fn bits_to_map(bits: u32) -> Array2<f64> {
    Array2::from_shape_fn((3, 3), |(i, j)| ((bits >> (3 * i + j)) & 1) as f64)
}

/// Every pair of binary 3x3 maps; returns the number of pairs checked.
pub fn exhaustive_binary_three_by_three() -> usize {
    for gbits in 0u32..512 {
        let gt = GroundTruthMask::new(bits_to_map(gbits)).unwrap();
        for pbits in 0u32..512 {
            let pred = PredictionMap::new(bits_to_map(pbits)).unwrap();
            let tp = (gbits & pbits).count_ones() as f64;
            let fp = (!gbits & pbits & 511).count_ones() as f64;
            let fn_ = (gbits & !pbits & 511).count_ones() as f64;
            let tn = 9.0 - tp - fp - fn_;

            let want_mae = (fp + fn_) / 9.0;
            let (want_dice, want_iou) = if tp + fp + fn_ == 0.0 {
                (1.0, 1.0)
            } else {
                (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
            };
            let tpr = if tp + fn_ == 0.0 {
                1.0
            } else {
                tp / (tp + fn_)
            };
            let tnr = if tn + fp == 0.0 { 1.0 } else { tn / (tn + fp) };
            let want_ber = 100.0 * (1.0 - (tpr + tnr) / 2.0);

            let (dice, iou) = dice_iou(&pred, &gt, 0.5).unwrap();
            let tag = format!("gt {gbits:09b} pred {pbits:09b}");
            assert!(
                (mae(&pred, &gt).unwrap() - want_mae).abs() < 1e-12,
                "mae {tag}"
            );
            assert!((dice - want_dice).abs() < 1e-12, "dice {tag}");
            assert!((iou - want_iou).abs() < 1e-12, "iou {tag}");
            assert!(
                (ber(&pred, &gt, 0.5).unwrap().value - want_ber).abs() < 1e-12,
                "ber {tag}"
            );
            // for binary maps F1 and Dice coincide
            assert!(
                (f1_semantic(&pred, &gt, 0.5).unwrap() - want_dice).abs() < 1e-12,
                "f1 {tag}"
            );
        }
    }
    512 * 512
}

fn avg(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() <= 1 {
        return 0.0;
    }
    let m = avg(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn oracle_s_measure(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let (h, w) = p.dim();
    let n = (h * w) as f64;
    let gm = g.sum() / n;
    if gm == 0.0 {
        return 1.0 - p.sum() / n;
    }
    if gm == 1.0 {
        return p.sum() / n;
    }

    let mut fg = vec![];
    let mut bg = vec![];
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] > 0.5 {
                fg.push(p[[i, j]]);
            } else {
                bg.push(1.0 - p[[i, j]]);
            }
        }
    }
    let score = |v: &[f64]| {
        let x = avg(v);
        2.0 * x / (x * x + 1.0 + sample_std(v) + EPS)
    };
    let s_obj = gm * score(&fg) + (1.0 - gm) * score(&bg);

    // 1-based centroid, rounded half away from zero
    let mut sy = 0.0;
    let mut sx = 0.0;
    for i in 0..h {
        for j in 0..w {
            sy += g[[i, j]] * (i as f64 + 1.0);
            sx += g[[i, j]] * (j as f64 + 1.0);
        }
    }
    let cy = (sy / g.sum()).round() as usize;
    let cx = (sx / g.sum()).round() as usize;

    let region_ssim = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut a = vec![];
        let mut b = vec![];
        for i in r0..r1 {
            for j in c0..c1 {
                a.push(p[[i, j]]);
                b.push(g[[i, j]]);
            }
        }
        let k = a.len() as f64;
        let (ma, mb) = (avg(&a), avg(&b));
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (k - 1.0 + EPS);
        let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (k - 1.0 + EPS);
        let cov = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / (k - 1.0 + EPS);
        let num = 4.0 * ma * mb * cov;
        let den = (ma * ma + mb * mb) * (va + vb);
        if num != 0.0 {
            num / (den + EPS)
        } else if den == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut s_reg = 0.0;
    let mut weight_left = 1.0;
    for (q, &(r0, r1, c0, c1)) in quads.iter().enumerate() {
        let weight = if q < 3 {
            ((r1 - r0) * (c1 - c0)) as f64 / n
        } else {
            weight_left
        };
        weight_left -= weight;
        if r1 > r0 && c1 > c0 {
            s_reg += weight * region_ssim(r0, r1, c0, c1);
        }
    }
    (0.5 * s_obj + 0.5 * s_reg).clamp(0.0, 1.0)
}

fn oracle_e_measure(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let n = p.len() as f64;
    let gm = g.sum() / n;
    let mut acc = 0.0;
    for k in 0..256 {
        let t = (k as f64 + 0.5) / 256.0;
        let b = p.mapv(|v| if v >= t { 1.0 } else { 0.0 });
        let bm = b.sum() / n;
        let score = if gm == 0.0 {
            1.0 - bm
        } else if gm == 1.0 {
            bm
        } else {
            let mut s = 0.0;
            for (&bv, &gv) in b.iter().zip(g) {
                let (x, y) = (bv - bm, gv - gm);
                let align = 2.0 * x * y / (x * x + y * y + EPS);
                s += (1.0 + align).powi(2) / 4.0;
            }
            s / n
        };
        acc += score;
    }
    acc / 256.0
}

fn oracle_weighted_f(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let (h, w) = p.dim();
    let fg: Vec<(usize, usize)> = (0..h * w)
        .map(|k| (k / w, k % w))
        .filter(|&(i, j)| g[[i, j]] == 1.0)
        .collect();
    if fg.is_empty() {
        return 0.0;
    }
    let e = Array2::from_shape_fn((h, w), |(i, j)| (p[[i, j]] - g[[i, j]]).abs());

    // brute-force nearest foreground; `fg` is in row-major order and only a
    // strictly closer pixel replaces the current best
    let mut dist = Array2::<f64>::zeros((h, w));
    let mut et = e.clone();
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] == 1.0 {
                continue;
            }
            let mut best = (u64::MAX, (0, 0));
            for &(y, x) in &fg {
                let d = ((y as i64 - i as i64).pow(2) + (x as i64 - j as i64).pow(2)) as u64;
                if d < best.0 {
                    best = (d, (y, x));
                }
            }
            dist[[i, j]] = (best.0 as f64).sqrt();
            et[[i, j]] = e[[best.1 .0, best.1 .1]];
        }
    }

    let mut kernel = [[0.0f64; 7]; 7];
    let mut ksum = 0.0;
    for a in 0..7 {
        for b in 0..7 {
            let r2 = ((a as f64) - 3.0).powi(2) + ((b as f64) - 3.0).powi(2);
            kernel[a][b] = (-r2 / (2.0 * 25.0)).exp();
            ksum += kernel[a][b];
        }
    }
    let mut ea = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            for a in 0..7 {
                for b in 0..7 {
                    let (y, x) = (i as i64 + a as i64 - 3, j as i64 + b as i64 - 3);
                    if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                        ea[[i, j]] += kernel[a][b] / ksum * et[[y as usize, x as usize]];
                    }
                }
            }
        }
    }

    let mut min_e_fg = 0.0;
    let mut weighted_bg = 0.0;
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] == 1.0 {
                min_e_fg += e[[i, j]].min(ea[[i, j]]);
            } else {
                let importance = 2.0 - (0.5f64.ln() / 5.0 * dist[[i, j]]).exp();
                weighted_bg += e[[i, j]] * importance;
            }
        }
    }
    let nf = fg.len() as f64;
    let tpw = nf - min_e_fg;
    let r = 1.0 - min_e_fg / nf;
    let q = tpw / (EPS + tpw + weighted_bg);
    2.0 * r * q / (EPS + r + q)
}

fn random_pair(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let density: f64 = match rng.gen_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.gen_range(0.05..0.95),
    };
    let g = Array2::from_shape_fn((8, 8), |_| if rng.gen_bool(density) { 1.0 } else { 0.0 });
    let p = Array2::from_shape_fn((8, 8), |_| match rng.gen_range(0..10) {
        // exactly on a threshold, or a saturated value
        0 => (rng.gen_range(0..256) as f64 + 0.5) / 256.0,
        1 => rng.gen_range(0..2) as f64,
        _ => rng.gen_range(0.0..=1.0),
    });
    (p, g)
}

/// Random real-valued 8x8 maps; returns the largest deviation seen.
pub fn random_maps_match_definition_oracles(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (p, g) = random_pair(&mut rng);
        let pred = PredictionMap::new(p.clone()).unwrap();
        let gt = GroundTruthMask::new(g.clone()).unwrap();

        let s = s_measure(&pred, &gt, 0.5).unwrap();
        let e = e_measure_mean(&pred, &gt).unwrap();
        let f = weighted_f_beta(&pred, &gt, 1.0).unwrap().value;
        let (so, eo, fo) = (
            oracle_s_measure(&p, &g),
            oracle_e_measure(&p, &g),
            oracle_weighted_f(&p, &g),
        );
        assert!(
            (s - so).abs() < 1e-9,
            "case {case}: s_measure {s} vs oracle {so}"
        );
        assert!(
            (e - eo).abs() < 1e-9,
            "case {case}: e_measure {e} vs oracle {eo}"
        );
        assert!(
            (f - fo).abs() < 1e-9,
            "case {case}: weighted_f_beta {f} vs oracle {fo}"
        );
        worst = worst
            .max((s - so).abs())
            .max((e - eo).abs())
            .max((f - fo).abs());
    }
    worst
}

/// Scores each random mask against itself; returns the lowest
/// higher-is-better score seen.
pub fn identity_predictions_are_perfect(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lowest = 1.0f64;
    for _ in 0..cases {
        let (_, g) = random_pair(&mut rng);
        let gt = GroundTruthMask::new(g).unwrap();
        let pred = gt.to_prediction();
        let s = s_measure(&pred, &gt, 0.5).unwrap();
        let e = e_measure_mean(&pred, &gt).unwrap();
        let (dice, iou) = dice_iou(&pred, &gt, 0.5).unwrap();
        let f1 = f1_semantic(&pred, &gt, 0.5).unwrap();
        for v in [s, e, dice, iou, f1] {
            assert!(v >= 1.0 - 1e-6, "identity score {v}");
        }
        assert_eq!(mae(&pred, &gt).unwrap(), 0.0);
        assert_eq!(ber(&pred, &gt, 0.5).unwrap().value, 0.0);
        lowest = lowest.min(s).min(e).min(dice).min(iou).min(f1);
        if gt.foreground() > 0 {
            let f = weighted_f_beta(&pred, &gt, 1.0).unwrap().value;
            assert!(f >= 1.0 - 1e-6);
            lowest = lowest.min(f);
        }
    }
    lowest
}
