//! Dense correspondence probing: nearest-neighbor cosine matching between
//! per-pixel features of a transformed frame pair, scored as the fraction of
//! probes whose match lands within each pixel threshold.

use crate::error::{Error, Result};
use crate::latent::ImageFrame;
use crate::synth::CorrespondencePair;
use crate::tensor::Arr;

/// Accuracy per threshold; accuracies are non-decreasing in the threshold.
#[derive(Debug, Clone)]
pub struct PCKReport {
    pub thresholds: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub probe_count: usize,
}

impl PCKReport {
    pub fn at(&self, delta: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - delta).abs() < 1e-9)
            .map(|i| self.accuracies[i])
    }
}

/// Unit-normalize per-pixel channel vectors; zero vectors stay zero.
fn normalize_pixels(f: &Arr) -> Arr {
    let (u, _) = crate::tensor::l2_normalize_positions(f);
    u
}

/// Match one probe by cosine against every pixel of `fb` (both inputs
/// already unit-normalized). Ties break toward the smallest raster index.
fn match_pixel(fa: &Arr, fb: &Arr, row: usize, col: usize) -> (usize, usize) {
    let (c, h, w) = (fa.shape()[0], fa.shape()[1], fa.shape()[2]);
    let mut best = (0usize, 0usize);
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0;
            for cc in 0..c {
                dot += fa[[cc, row, col]] * fb[[cc, i, j]];
            }
            if dot > best_v {
                best_v = dot;
                best = (i, j);
            }
        }
    }
    best
}

/// Evaluate PCK over pairs using `features`, a per-frame extractor that must
/// return a `[C, res, res]` per-pixel feature grid.
pub fn eval_pck<F>(
    pairs: &[CorrespondencePair],
    thresholds: &[f64],
    mut features: F,
) -> Result<PCKReport>
where
    F: FnMut(&ImageFrame) -> Result<Arr>,
{
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("pck needs at least one pair".into()));
    }
    let mut hits = vec![0usize; thresholds.len()];
    let mut total = 0usize;
    for pair in pairs {
        let fa = normalize_pixels(&features(&pair.frame_a)?);
        let fb = normalize_pixels(&features(&pair.frame_b)?);
        let res = pair.frame_a.height();
        if fa.shape()[1] != res || fa.shape()[2] != res {
            return Err(Error::ShapeMismatch(format!(
                "feature grid {:?} must match frame {res}x{res}",
                fa.shape()
            )));
        }
        for ((row, col), (gt_r, gt_c)) in &pair.probes {
            let (mr, mc) = match_pixel(&fa, &fb, *row, *col);
            let err = ((mr as f64 - gt_r).powi(2) + (mc as f64 - gt_c).powi(2)).sqrt();
            for (ti, &t) in thresholds.iter().enumerate() {
                if err <= t {
                    hits[ti] += 1;
                }
            }
            total += 1;
        }
    }
    let accuracies = hits
        .iter()
        .map(|&h| h as f64 / total as f64)
        .collect::<Vec<_>>();
    Ok(PCKReport {
        thresholds: thresholds.to_vec(),
        accuracies,
        probe_count: total,
    })
}

/// Analytic chance level for threshold `delta` on an `res x res` frame: the
/// area fraction of a delta-disk.
pub fn chance_level(delta: f64, res: usize) -> f64 {
    (std::f64::consts::PI * delta * delta) / (res as f64 * res as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_correspondence_pairs;
    use ndarray::IxDyn;

    /// Raw-pixel features: each pixel's own RGB, a weak but honest baseline.
    fn rgb_features(f: &ImageFrame) -> Result<Arr> {
        let (h, w, _) = f.pixels.dim();
        let mut out = ndarray::ArrayD::<f64>::zeros(IxDyn(&[3, h, w]));
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    out[[c, i, j]] = f.pixels[[i, j, c]];
                }
            }
        }
        Ok(out)
    }

    #[test]
    fn identical_frames_self_match_perfectly() {
        // zero transform: probe features are bit-identical at gt, and
        // position-free rgb features still matched at index order; use a
        // feature with per-pixel uniqueness by mixing in coordinates
        let pairs = make_correspondence_pairs(2, 0, 0.0, 12, 1, 32).unwrap();
        let coord_features = |f: &ImageFrame| -> Result<Arr> {
            let (h, w, _) = f.pixels.dim();
            let mut out = ndarray::ArrayD::<f64>::zeros(IxDyn(&[5, h, w]));
            for i in 0..h {
                for j in 0..w {
                    for c in 0..3 {
                        out[[c, i, j]] = f.pixels[[i, j, c]];
                    }
                    out[[3, i, j]] = i as f64 / h as f64 + 0.1;
                    out[[4, i, j]] = j as f64 / w as f64 + 0.1;
                }
            }
            Ok(out)
        };
        let report = eval_pck(&pairs, &[1.0, 2.0, 4.0], coord_features).unwrap();
        assert_eq!(report.at(1.0), Some(1.0));
    }

    #[test]
    fn accuracies_monotone_in_threshold() {
        let pairs = make_correspondence_pairs(3, 4, 0.0, 10, 5, 32).unwrap();
        let report = eval_pck(&pairs, &[1.0, 2.0, 4.0, 8.0], rgb_features).unwrap();
        for w in report.accuracies.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        assert!(report.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn chance_level_formula() {
        let c = chance_level(2.0, 32);
        assert!((c - std::f64::consts::PI * 4.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(eval_pck(&[], &[1.0], rgb_features).is_err());
    }
}
