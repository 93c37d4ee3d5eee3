//! Frozen diffusion teacher: denoising pretraining, per-block decoder taps,
//! weight fingerprints and checkpoint round-trips.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::latent::{add_noise, sample_noise, sample_timestep, LatentGrid, NoiseSchedule};
use crate::nn::{collect_grads, Adam};
use crate::tensor::{Arr, Tape};
use crate::unet::{DecoderTaps, UNet, UNetConfig};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Content hash over all parameter tensors in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightFingerprint(pub [u8; 32]);

impl WeightFingerprint {
    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub struct Teacher {
    pub unet: UNet,
    frozen: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global step to resume from; the per-step rng derives from
    /// `(seed, global_step)`, so a resumed run replays the exact trajectory.
    pub start_step: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-4,
            seed: 0,
            start_step: 0,
        }
    }
}

pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// (step, training loss) pairs, one per step.
    pub loss_curve: Vec<(usize, f64)>,
    pub holdout_mse_initial: f64,
    pub holdout_mse_final: f64,
}

impl Teacher {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        Ok(Teacher {
            unet: UNet::new(cfg, "teacher", seed)?,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// After freezing, parameters are immutable and the forward pass becomes
    /// available; training APIs reject a frozen teacher.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn fingerprint(&self) -> WeightFingerprint {
        WeightFingerprint(self.unet.params.fingerprint())
    }

    /// Noise prediction plus every decoder block's activation. The teacher
    /// must be frozen: no gradient path exists because parameters enter the
    /// graph as constants on an inference tape.
    pub fn forward(
        &self,
        z_tau: &LatentGrid,
        tau: usize,
        ctx: Option<&Array2<f64>>,
    ) -> Result<(LatentGrid, DecoderTaps)> {
        if !self.frozen {
            return Err(Error::UnfrozenTeacher(
                "teacher_forward requires freeze() first".into(),
            ));
        }
        let (eps, taps) = self.unet.infer_single(&z_tau.data, tau, ctx)?;
        Ok((
            LatentGrid {
                data: eps,
                is_clean: false,
            },
            taps,
        ))
    }

    /// Batched tap extraction for training loops; inference-only.
    pub fn forward_batch(
        &self,
        x: &Arr,
        taus: &[usize],
        ctx: Option<&Array2<f64>>,
    ) -> Result<(Arr, Vec<Arr>)> {
        if !self.frozen {
            return Err(Error::UnfrozenTeacher(
                "batched teacher forward requires freeze() first".into(),
            ));
        }
        let mut tape = Tape::inference();
        let bound = self.unet.params.bind(&mut tape, false);
        let xid = tape.constant(x.clone());
        let (eps, taps) = self.unet.forward(&mut tape, &bound, xid, taus, ctx)?;
        let eps_v = tape.value(eps).clone();
        let tap_v = taps.iter().map(|&t| tape.value(t).clone()).collect();
        Ok((eps_v, tap_v))
    }

    /// Denoising pretraining on clean latents: sample tau and eps, corrupt,
    /// regress the noise. Returns the loss curve and held-out MSE before and
    /// after. Batches are drawn with a per-step rng derived from
    /// `(seed, global_step)`; resuming with the exported optimizer continues
    /// the identical trajectory.
    pub fn pretrain(
        &mut self,
        train: &[Arr],
        holdout: &[Arr],
        sched: &NoiseSchedule,
        cfg: &PretrainConfig,
        opt: &mut Adam,
    ) -> Result<PretrainReport> {
        if self.frozen {
            return Err(Error::FrozenViolation(
                "cannot pretrain a frozen teacher".into(),
            ));
        }
        if train.is_empty() {
            return Err(Error::EmptyDataset("pretraining needs latents".into()));
        }
        let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let holdout_mse_initial = self.holdout_mse(holdout, sched, &mut eval_rng)?;

        let mut loss_curve = Vec::with_capacity(cfg.steps);
        for step in cfg.start_step..cfg.start_step + cfg.steps {
            let mut rng = step_rng(cfg.seed, step);
            let mut xs = Vec::with_capacity(cfg.batch_size);
            let mut taus = Vec::with_capacity(cfg.batch_size);
            let mut eps_batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let z0 = &train[rng.gen_range(0..train.len())];
                let tau = sample_timestep(&mut rng, sched);
                let eps = sample_noise(&mut rng, z0.shape());
                let z = add_noise(
                    &LatentGrid {
                        data: z0.clone(),
                        is_clean: true,
                    },
                    tau,
                    &eps,
                    sched,
                )?;
                xs.push(z.data);
                taus.push(tau);
                eps_batch.push(eps);
            }
            let x = stack_batch(&xs);
            let target = stack_batch(&eps_batch);

            let mut tape = Tape::new();
            let bound = self.unet.params.bind(&mut tape, true);
            let xid = tape.constant(x);
            let (pred, _) = self.unet.forward(&mut tape, &bound, xid, &taus, None)?;
            let loss = tape.mse_to_const(pred, &target);
            let loss_val = tape.value(loss)[[0]];
            let grads = tape.backward(loss);
            let gmap = collect_grads(&[(&self.unet.params, &bound)], &grads);
            opt.step(&mut [&mut self.unet.params], &gmap)?;
            loss_curve.push((step, loss_val));
        }

        let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let holdout_mse_final = self.holdout_mse(holdout, sched, &mut eval_rng)?;
        Ok(PretrainReport {
            loss_curve,
            holdout_mse_initial,
            holdout_mse_final,
        })
    }

    fn holdout_mse(
        &self,
        holdout: &[Arr],
        sched: &NoiseSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if holdout.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for z0 in holdout {
            let tau = sample_timestep(rng, sched);
            let eps = sample_noise(rng, z0.shape());
            let z = add_noise(
                &LatentGrid {
                    data: z0.clone(),
                    is_clean: true,
                },
                tau,
                &eps,
                sched,
            )?;
            let mut tape = Tape::inference();
            let bound = self.unet.params.bind(&mut tape, false);
            let s = z.data.shape();
            let xid = tape.constant(
                z.data
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]]))
                    .unwrap(),
            );
            let (pred, _) = self.unet.forward(&mut tape, &bound, xid, &[tau], None)?;
            let p = tape.value(pred).index_axis(Axis(0), 0).to_owned();
            let d = &p - &eps;
            total += d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        }
        Ok(total / holdout.len() as f64)
    }

    pub fn export(&self, path: &std::path::Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.add_store(&self.unet.params);
        ck.write(path)
    }

    /// Import into a matching config; the first tensor whose shape disagrees
    /// is named in the error.
    pub fn import(path: &std::path::Path, cfg: UNetConfig) -> Result<Teacher> {
        let ck = Checkpoint::read(path)?;
        let mut teacher = Teacher::new(cfg, 0)?;
        ck.load_store(&mut teacher.unet.params)?;
        Ok(teacher)
    }
}

/// Stack `[C,h,w]` arrays into `[N,C,h,w]`.
pub fn stack_batch(xs: &[Arr]) -> Arr {
    assert!(!xs.is_empty());
    let s = xs[0].shape();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[xs.len(), s[0], s[1], s[2]]));
    for (i, x) in xs.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_normal;

    fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            levels: 3,
            base_channels: 8,
            blocks_per_level: 2,
            in_channels: 4,
            time_embed_dim: 16,
            context_dim: 0,
        }
    }

    fn toy_latents(n: usize, seed: u64) -> Vec<Arr> {
        (0..n)
            .map(|i| seeded_normal(&[4, 8, 8], 0.5, seed + i as u64))
            .collect()
    }

    #[test]
    fn forward_requires_frozen() {
        let teacher = Teacher::new(tiny_cfg(), 1).unwrap();
        let z = LatentGrid {
            data: seeded_normal(&[4, 8, 8], 1.0, 2),
            is_clean: false,
        };
        assert!(matches!(
            teacher.forward(&z, 0, None),
            Err(Error::UnfrozenTeacher(_))
        ));
    }

    #[test]
    fn frozen_forward_is_deterministic_with_k_taps() {
        let mut teacher = Teacher::new(tiny_cfg(), 1).unwrap();
        teacher.freeze();
        let z = LatentGrid {
            data: seeded_normal(&[4, 16, 16], 1.0, 3),
            is_clean: false,
        };
        let (e1, t1) = teacher.forward(&z, 7, None).unwrap();
        let (e2, t2) = teacher.forward(&z, 7, None).unwrap();
        assert_eq!(e1.data, e2.data);
        assert_eq!(t1.k(), 6);
        for (a, b) in t1.taps.iter().zip(t2.taps.iter()) {
            assert_eq!(a, b);
        }
        let sides: Vec<usize> = t1.taps.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(sides, vec![4, 4, 8, 8, 16, 16]);
    }

    #[test]
    fn pretrain_zero_steps_keeps_parameters() {
        let mut teacher = Teacher::new(tiny_cfg(), 1).unwrap();
        let before = teacher.fingerprint();
        let sched = NoiseSchedule::build(50).unwrap();
        let data = toy_latents(4, 10);
        let mut opt = Adam::new(1e-3);
        opt.register(&teacher.unet.params);
        let report = teacher
            .pretrain(
                &data,
                &data,
                &sched,
                &PretrainConfig {
                    steps: 0,
                    batch_size: 2,
                    learning_rate: 1e-3,
                    seed: 0,
                    start_step: 0,
                },
                &mut opt,
            )
            .unwrap();
        assert_eq!(teacher.fingerprint(), before);
        assert!(report.loss_curve.is_empty());
    }

    #[test]
    fn pretrain_reduces_loss() {
        let mut teacher = Teacher::new(tiny_cfg(), 1).unwrap();
        let sched = NoiseSchedule::build(50).unwrap();
        let data = toy_latents(8, 20);
        let mut opt = Adam::new(1e-3);
        opt.register(&teacher.unet.params);
        let report = teacher
            .pretrain(
                &data,
                &data,
                &sched,
                &PretrainConfig {
                    steps: 60,
                    batch_size: 4,
                    learning_rate: 1e-3,
                    seed: 0,
                    start_step: 0,
                },
                &mut opt,
            )
            .unwrap();
        let first = report.loss_curve[0].1;
        let last: f64 = report.loss_curve[report.loss_curve.len() - 5..]
            .iter()
            .map(|(_, l)| l)
            .sum::<f64>()
            / 5.0;
        assert!(last < first, "loss should decrease: {first} -> {last}");
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let mut teacher = Teacher::new(tiny_cfg(), 1).unwrap();
        let sched = NoiseSchedule::build(50).unwrap();
        let mut opt = Adam::new(1e-3);
        opt.register(&teacher.unet.params);
        assert!(matches!(
            teacher.pretrain(&[], &[], &sched, &PretrainConfig::default(), &mut opt),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn export_import_roundtrip_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.ckpt");
        let teacher = Teacher::new(tiny_cfg(), 42).unwrap();
        teacher.export(&path).unwrap();
        let back = Teacher::import(&path, tiny_cfg()).unwrap();
        assert_eq!(teacher.fingerprint(), back.fingerprint());
    }

    #[test]
    fn import_into_mismatched_config_names_offender() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.ckpt");
        let teacher = Teacher::new(tiny_cfg(), 42).unwrap();
        teacher.export(&path).unwrap();
        let mut other = tiny_cfg();
        other.base_channels = 16;
        let err = match Teacher::import(&path, other) {
            Ok(_) => panic!("import must fail"),
            Err(e) => e,
        };
        match err {
            Error::TensorShape { name, .. } => assert!(!name.is_empty()),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn perfect_predictor_loss_is_zero() {
        // at abar ~ 0 the corrupted latent is pure noise; a predictor that
        // returns eps exactly scores zero denoising MSE
        let eps = seeded_normal(&[4, 8, 8], 1.0, 30);
        let mut tape = Tape::new();
        let pred = tape.constant(eps.clone());
        let loss = tape.mse_to_const(pred, &eps);
        assert_eq!(tape.value(loss)[[0]], 0.0);
    }
}
