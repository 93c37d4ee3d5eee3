//! Image-to-latent codec, DDPM noise schedule, and closed-form forward
//! noising `z_tau = sqrt(abar) z0 + sqrt(1 - abar) eps`.

use crate::error::{Error, Result};
use crate::tensor::Arr;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Default spatial downsampling factor of the codec.
pub const DOWNSAMPLE_FACTOR: usize = 4;

/// RGB frame with pixels in `[0,1]`, stored `[H, W, 3]`.
#[derive(Debug, Clone)]
pub struct ImageFrame {
    pub pixels: Array3<f64>,
    pub camera_id: usize,
}

impl ImageFrame {
    pub fn new(pixels: Array3<f64>, camera_id: usize) -> Result<Self> {
        let (_, _, c) = pixels.dim();
        if c != 3 {
            return Err(Error::DimMismatch(format!("expected 3 channels, got {c}")));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "pixel values must lie in [0,1]".into(),
            ));
        }
        Ok(ImageFrame { pixels, camera_id })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Latent grid `[C, h, w]`; `is_clean` distinguishes z0 from z_tau.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub data: Arr,
    pub is_clean: bool,
}

impl LatentGrid {
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// Cumulative signal-retention coefficients of a linear-beta DDPM schedule.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;
/// The linear-beta endpoints are calibrated for a 1000-step schedule; betas
/// are rescaled by `1000 / T_diff` so the cumulative product reaches the
/// same near-zero endpoint at smaller step counts.
const REFERENCE_T: f64 = 1000.0;

impl NoiseSchedule {
    pub fn build(t_diff: usize) -> Result<Self> {
        if t_diff < 2 {
            return Err(Error::InvalidArgument(format!(
                "T_diff must be >= 2, got {t_diff}"
            )));
        }
        let scale = REFERENCE_T / t_diff as f64;
        let mut alpha_bar = Vec::with_capacity(t_diff);
        let mut prod = 1.0;
        for i in 0..t_diff {
            let frac = i as f64 / (t_diff - 1) as f64;
            let beta = (BETA_START + (BETA_END - BETA_START) * frac) * scale;
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidArgument(format!(
                    "T_diff = {t_diff} too small: scaled beta {beta} leaves (0,1)"
                )));
            }
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        let s = Self { alpha_bar };
        s.validate()?;
        Ok(s)
    }

    /// Wrap raw coefficients without invariant checks. Test hook for the
    /// degenerate endpoints `abar = 1` and `abar = 0`.
    pub fn from_alpha_bar_unchecked(alpha_bar: Vec<f64>) -> Self {
        Self { alpha_bar }
    }

    fn validate(&self) -> Result<()> {
        let n = self.alpha_bar.len();
        if self.alpha_bar[0] <= 0.99 {
            return Err(Error::InvalidArgument(format!(
                "alpha_bar[0] = {} must exceed 0.99",
                self.alpha_bar[0]
            )));
        }
        if self.alpha_bar[n - 1] >= 0.01 {
            return Err(Error::InvalidArgument(format!(
                "alpha_bar[T-1] = {} must be below 0.01",
                self.alpha_bar[n - 1]
            )));
        }
        for w in self.alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::InvalidArgument(
                    "alpha_bar must be strictly decreasing".into(),
                ));
            }
        }
        if self.alpha_bar.iter().any(|&a| a <= 0.0 || a > 1.0) {
            return Err(Error::InvalidArgument(
                "alpha_bar entries must lie in (0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, tau: usize) -> Result<f64> {
        self.alpha_bar
            .get(tau)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                tau,
                t_diff: self.alpha_bar.len(),
            })
    }
}

/// Lossless space-to-depth encoder: each `factor x factor` pixel block of
/// every RGB channel becomes one latent channel, giving
/// `[3 * factor^2, H/factor, W/factor]`. Channel index is
/// `rgb * factor^2 + dy * factor + dx`. No rescaling constant is applied to
/// the latents.
pub fn encode(frame: &ImageFrame, factor: usize) -> Result<LatentGrid> {
    let (h, w, _) = frame.pixels.dim();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::DimMismatch(format!(
            "frame {h}x{w} not divisible by downsample factor {factor}"
        )));
    }
    let (lh, lw) = (h / factor, w / factor);
    let c = 3 * factor * factor;
    let mut data = ArrayD::<f64>::zeros(IxDyn(&[c, lh, lw]));
    for rgb in 0..3 {
        for dy in 0..factor {
            for dx in 0..factor {
                let ch = rgb * factor * factor + dy * factor + dx;
                for i in 0..lh {
                    for j in 0..lw {
                        data[[ch, i, j]] = frame.pixels[[i * factor + dy, j * factor + dx, rgb]];
                    }
                }
            }
        }
    }
    Ok(LatentGrid {
        data,
        is_clean: true,
    })
}

/// Inverse of [`encode`]; exact because space-to-depth is a rearrangement.
pub fn decode(latent: &LatentGrid, factor: usize) -> Result<ImageFrame> {
    let (c, lh, lw) = latent.shape();
    if c != 3 * factor * factor {
        return Err(Error::DimMismatch(format!(
            "latent has {c} channels, expected {}",
            3 * factor * factor
        )));
    }
    let mut pixels = Array3::<f64>::zeros((lh * factor, lw * factor, 3));
    for rgb in 0..3 {
        for dy in 0..factor {
            for dx in 0..factor {
                let ch = rgb * factor * factor + dy * factor + dx;
                for i in 0..lh {
                    for j in 0..lw {
                        pixels[[i * factor + dy, j * factor + dx, rgb]] = latent.data[[ch, i, j]];
                    }
                }
            }
        }
    }
    Ok(ImageFrame {
        pixels,
        camera_id: 0,
    })
}

/// Closed-form forward noising at an explicit coefficient. Exposed so tests
/// can pin the degenerate endpoints without a schedule.
pub fn add_noise_with_alpha(z0: &LatentGrid, alpha_bar: f64, eps: &Arr) -> Result<LatentGrid> {
    if !z0.is_clean {
        return Err(Error::InvalidArgument(
            "add_noise requires a clean latent".into(),
        ));
    }
    if z0.data.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "z0 {:?} vs eps {:?}",
            z0.data.shape(),
            eps.shape()
        )));
    }
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    Ok(LatentGrid {
        data: &z0.data * signal + &(eps * noise),
        is_clean: false,
    })
}

/// `z_tau = sqrt(abar_tau) z0 + sqrt(1 - abar_tau) eps`.
pub fn add_noise(
    z0: &LatentGrid,
    tau: usize,
    eps: &Arr,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    let abar = sched.alpha_bar(tau)?;
    add_noise_with_alpha(z0, abar, eps)
}

/// Uniform timestep over `{0, .., T_diff - 1}`.
pub fn sample_timestep<R: Rng>(rng: &mut R, sched: &NoiseSchedule) -> usize {
    rng.gen_range(0..sched.len())
}

/// Standard-normal noise with the given shape.
pub fn sample_noise<R: Rng>(rng: &mut R, shape: &[usize]) -> Arr {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker_frame(h: usize, w: usize) -> ImageFrame {
        let pixels =
            Array3::from_shape_fn((h, w, 3), |(i, j, c)| (((i + j + c) % 5) as f64) / 5.0);
        ImageFrame::new(pixels, 0).unwrap()
    }

    #[test]
    fn encode_64x64_factor4_shape() {
        let frame = checker_frame(64, 64);
        let z = encode(&frame, 4).unwrap();
        assert_eq!(z.shape(), (48, 16, 16));
        assert!(z.is_clean);
    }

    #[test]
    fn encode_zero_frame_gives_zero_latent() {
        let frame = ImageFrame::new(Array3::zeros((16, 16, 3)), 0).unwrap();
        let z = encode(&frame, 4).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_and_pure() {
        let frame = checker_frame(32, 32);
        let a = encode(&frame, 4).unwrap();
        let b = encode(&frame, 4).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        let frame = ImageFrame::new(Array3::zeros((30, 32, 3)), 0).unwrap();
        assert!(matches!(encode(&frame, 4), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn decode_roundtrip_exact() {
        let frame = checker_frame(32, 32);
        let z = encode(&frame, 4).unwrap();
        let back = decode(&z, 4).unwrap();
        assert_eq!(back.pixels, frame.pixels);
    }

    #[test]
    fn schedule_product_formula() {
        // first two entries follow the product of (1 - beta_i) exactly
        let t_diff = 60;
        let sched = NoiseSchedule::build(t_diff).unwrap();
        let scale = 1000.0 / t_diff as f64;
        let b0 = 1e-4 * scale;
        let b1 = (1e-4 + (2e-2 - 1e-4) / (t_diff as f64 - 1.0)) * scale;
        assert!((sched.alpha_bar(0).unwrap() - (1.0 - b0)).abs() < 1e-15);
        assert!((sched.alpha_bar(1).unwrap() - (1.0 - b0) * (1.0 - b1)).abs() < 1e-15);
    }

    #[test]
    fn schedule_unscaled_t2_product_form() {
        // the raw (unscaled) linear-beta endpoints at T=2 give exactly
        // [1-1e-4, (1-1e-4)(1-2e-2)]; kept via the unchecked constructor
        // because completing corruption in two steps is incompatible with
        // the alpha_bar[T-1] < 0.01 invariant.
        let raw = NoiseSchedule::from_alpha_bar_unchecked(vec![
            1.0 - 1e-4,
            (1.0 - 1e-4) * (1.0 - 2e-2),
        ]);
        assert!((raw.alpha_bar(1).unwrap() - 0.979_902).abs() < 1e-12);
    }

    #[test]
    fn schedule_monotone_and_endpoints() {
        for t in [50, 100, 250, 1000] {
            let s = NoiseSchedule::build(t).unwrap();
            assert!(s.alpha_bar(0).unwrap() > 0.99);
            assert!(s.alpha_bar(t - 1).unwrap() < 0.01);
            for tau in 1..t {
                assert!(s.alpha_bar(tau).unwrap() < s.alpha_bar(tau - 1).unwrap());
            }
        }
    }

    #[test]
    fn schedule_rejects_tiny_t() {
        assert!(NoiseSchedule::build(1).is_err());
        assert!(NoiseSchedule::build(0).is_err());
    }

    #[test]
    fn add_noise_degenerate_endpoints() {
        let frame = checker_frame(16, 16);
        let z0 = encode(&frame, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = sample_noise(&mut rng, z0.data.shape());
        let pure_signal = add_noise_with_alpha(&z0, 1.0, &eps).unwrap();
        assert_eq!(pure_signal.data, z0.data);
        assert!(!pure_signal.is_clean);
        let pure_noise = add_noise_with_alpha(&z0, 0.0, &eps).unwrap();
        assert_eq!(pure_noise.data, eps);
    }

    #[test]
    fn add_noise_quarter_alpha_ones() {
        // abar = 0.25, z0 = ones, eps = ones -> 0.5 + sqrt(0.75)
        let z0 = LatentGrid {
            data: ndarray::ArrayD::ones(ndarray::IxDyn(&[2, 2, 2])),
            is_clean: true,
        };
        let eps = ndarray::ArrayD::ones(ndarray::IxDyn(&[2, 2, 2]));
        let z = add_noise_with_alpha(&z0, 0.25, &eps).unwrap();
        let expected = 0.5 + 0.75_f64.sqrt();
        assert!(z.data.iter().all(|&v| (v - expected).abs() < 1e-12));
        assert!((expected - 1.36603).abs() < 1e-5);
    }

    #[test]
    fn add_noise_rejects_noisy_input_and_bad_shapes() {
        let sched = NoiseSchedule::build(50).unwrap();
        let z0 = LatentGrid {
            data: ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 4, 4])),
            is_clean: true,
        };
        let eps = ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 4, 4]));
        let z1 = add_noise(&z0, 3, &eps, &sched).unwrap();
        assert!(add_noise(&z1, 3, &eps, &sched).is_err());
        let bad = ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 4, 5]));
        assert!(matches!(
            add_noise(&z0, 3, &bad, &sched),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            add_noise(&z0, 50, &eps, &sched),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn timestep_sampler_uniform_within_4_sigma() {
        let sched = NoiseSchedule::build(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000usize;
        let mut counts = vec![0usize; 100];
        for _ in 0..n {
            counts[sample_timestep(&mut rng, &sched)] += 1;
        }
        let p = 1.0 / 100.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - mean).abs() < 4.0 * sigma, "bin count {c}");
        }
    }

    #[test]
    fn timestep_sampler_seeded_reproducible() {
        let sched = NoiseSchedule::build(50).unwrap();
        let seq_a: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..32).map(|_| sample_timestep(&mut rng, &sched)).collect()
        };
        let seq_b: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..32).map(|_| sample_timestep(&mut rng, &sched)).collect()
        };
        assert_eq!(seq_a, seq_b);
    }

    #[test]
    fn single_point_schedule_always_zero() {
        let s = NoiseSchedule::from_alpha_bar_unchecked(vec![0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..16 {
            assert_eq!(sample_timestep(&mut rng, &s), 0);
        }
    }

    #[test]
    fn noising_statistics_match_closed_form() {
        // per-element signal energy abar * z0^2 and variance (1 - abar),
        // each aggregated over all cells so the 5% band is statistically
        // meaningful at 1e4 draws
        let frame = checker_frame(16, 16);
        let z0 = encode(&frame, 4).unwrap();
        let (sig, var) = noising_statistics(&z0, &NoiseSchedule::build(100).unwrap(), 10_000, 11);
        for (tau, (sig_emp, sig_true)) in sig {
            assert!(
                (sig_emp - sig_true).abs() <= 0.05 * sig_true,
                "tau {tau}: signal {sig_emp} vs {sig_true}"
            );
        }
        for (tau, (var_emp, var_true)) in var {
            assert!(
                (var_emp - var_true).abs() <= 0.05 * var_true,
                "tau {tau}: variance {var_emp} vs {var_true}"
            );
        }
    }

    #[test]
    fn corruption_is_monotone_in_tau() {
        let frame = checker_frame(16, 16);
        let z0 = encode(&frame, 4).unwrap();
        let sched = NoiseSchedule::build(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prev = 0.0;
        for k in 0..10 {
            let tau = k * 11;
            let mut dist = 0.0;
            for _ in 0..1000 {
                let eps = sample_noise(&mut rng, z0.data.shape());
                let z = add_noise(&z0, tau, &eps, &sched).unwrap();
                let d = &z.data - &z0.data;
                dist += d.iter().map(|v| v * v).sum::<f64>();
            }
            dist /= 1000.0;
            assert!(dist >= prev - 1e-9, "tau {tau}: {dist} < {prev}");
            prev = dist;
        }
    }
}
