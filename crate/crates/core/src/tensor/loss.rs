//! Loss ops with fused backwards: mean-squared error against constants and
//! the per-position cosine of unit-normalized channel vectors.

use super::{acc, Arr, BackFn, Tape, TensorId};
use ndarray::ArrayD;

/// Norm floor below which a channel vector counts as degenerate: it is
/// mapped to the zero vector and excluded from cosine means.
pub const NORM_FLOOR: f64 = 1e-12;

/// Unit-normalize each spatial position's channel vector of a `[C,H,W]`
/// grid. Returns the normalized grid and a mask of included positions.
pub fn l2_normalize_positions(x: &Arr) -> (Arr, Vec<bool>) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expects [C,H,W]");
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut y = ArrayD::<f64>::zeros(x.raw_dim());
    let mut mask = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut n2 = 0.0;
            for cc in 0..c {
                n2 += x[[cc, i, j]] * x[[cc, i, j]];
            }
            let n = n2.sqrt();
            if n >= NORM_FLOOR {
                mask[i * w + j] = true;
                for cc in 0..c {
                    y[[cc, i, j]] = x[[cc, i, j]] / n;
                }
            }
        }
    }
    (y, mask)
}

/// Mean cosine between the unit-normalized positions of `y` and an already
/// unit-normalized constant target, over positions included on both sides.
/// Inputs are `[N,C,H,W]`; the result is the mean of per-sample means.
fn cosine_mean_value(y: &Arr, target: &Arr) -> (f64, Vec<f64>) {
    let s = y.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut per_sample = Vec::with_capacity(n);
    for ni in 0..n {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..h {
            for j in 0..w {
                let mut ny2 = 0.0;
                let mut nt2 = 0.0;
                for cc in 0..c {
                    ny2 += y[[ni, cc, i, j]] * y[[ni, cc, i, j]];
                    nt2 += target[[ni, cc, i, j]] * target[[ni, cc, i, j]];
                }
                if ny2.sqrt() < NORM_FLOOR || nt2.sqrt() < NORM_FLOOR {
                    continue;
                }
                let ny = ny2.sqrt();
                let mut dot = 0.0;
                for cc in 0..c {
                    dot += (y[[ni, cc, i, j]] / ny) * target[[ni, cc, i, j]];
                }
                total += dot;
                count += 1;
            }
        }
        per_sample.push(if count > 0 { total / count as f64 } else { 0.0 });
    }
    let mean = per_sample.iter().sum::<f64>() / n as f64;
    (mean, per_sample)
}

impl Tape {
    /// Mean squared error between `pred` and a constant `target` of the same
    /// shape; the mean runs over every element.
    pub fn mse_to_const(&mut self, pred: TensorId, target: &Arr) -> TensorId {
        let pv = &self.vals[pred.0];
        assert_eq!(pv.shape(), target.shape(), "mse shape mismatch");
        let m = pv.len() as f64;
        let mut s = 0.0;
        for (a, b) in pv.iter().zip(target.iter()) {
            let d = a - b;
            s += d * d;
        }
        let v = super::scalar(s / m);
        let tgt = target.clone();
        let needs = self.wants(&[pred]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let scale = 2.0 * gout[[0]] / m;
                let d = (&vals[pred.0] - &tgt) * scale;
                acc(grads, pred, d);
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Mean cosine similarity between the per-position unit normalization of
    /// `y: [N,C,H,W]` and an already-normalized constant `target` of the
    /// same shape. Positions whose norm falls below [`NORM_FLOOR`] on either
    /// side are excluded from the mean. Returns a `[1]` scalar: the mean over
    /// samples of the per-sample position means.
    pub fn cosine_mean_to_unit_const(&mut self, y: TensorId, target: &Arr) -> TensorId {
        let yv = &self.vals[y.0];
        assert_eq!(yv.shape(), target.shape(), "cosine shape mismatch");
        let (mean, _) = cosine_mean_value(yv, target);
        let v = super::scalar(mean);
        let tgt = target.clone();
        let needs = self.wants(&[y]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let yv = &vals[y.0];
                let s = yv.shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut dy = ArrayD::<f64>::zeros(yv.raw_dim());
                // per-sample included counts first
                for ni in 0..n {
                    let mut included = Vec::new();
                    for i in 0..h {
                        for j in 0..w {
                            let mut ny2 = 0.0;
                            let mut nt2 = 0.0;
                            for cc in 0..c {
                                ny2 += yv[[ni, cc, i, j]] * yv[[ni, cc, i, j]];
                                nt2 += tgt[[ni, cc, i, j]] * tgt[[ni, cc, i, j]];
                            }
                            if ny2.sqrt() >= NORM_FLOOR && nt2.sqrt() >= NORM_FLOOR {
                                included.push((i, j, ny2.sqrt()));
                            }
                        }
                    }
                    if included.is_empty() {
                        continue;
                    }
                    let denom = included.len() as f64 * n as f64;
                    for (i, j, ny) in included {
                        let mut dot = 0.0;
                        for cc in 0..c {
                            dot += (yv[[ni, cc, i, j]] / ny) * tgt[[ni, cc, i, j]];
                        }
                        // d cos / d y = (t - cos * u) / ||y||
                        for cc in 0..c {
                            let u = yv[[ni, cc, i, j]] / ny;
                            dy[[ni, cc, i, j]] =
                                gout[[0]] * (tgt[[ni, cc, i, j]] - dot * u) / (ny * denom);
                        }
                    }
                }
                acc(grads, y, dy);
            }) as BackFn
        });
        self.push(v, back, needs)
    }
}
