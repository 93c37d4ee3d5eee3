//! Chunked action head: deterministic regression or iterative denoising of
//! an action chunk, behavior-cloning loss, and the receding-horizon control
//! loop (predict a chunk, execute a prefix, replan).

use crate::distill::DeployBundle;
use crate::error::{Error, Result};
use crate::lang::ObservationEmbedding;
use crate::latent::NoiseSchedule;
use crate::nn::{linear_init, zeros, Bound, ParamStore};
use crate::synth::{StepOutcome, ToyEnv};
use crate::tensor::{Arr, Tape, TensorId};
use crate::unet::sinusoidal_embedding;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Deterministic MLP regression to the chunk.
    BcMse,
    /// Conditional denoiser sampled with a seeded rng.
    Denoise,
}

#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub head_kind: HeadKind,
    pub denoise_steps: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub execute_steps: usize,
    pub hidden: usize,
    pub obs_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            head_kind: HeadKind::BcMse,
            denoise_steps: 10,
            action_dim: 3,
            horizon: 16,
            execute_steps: 8,
            hidden: 256,
            obs_dim: 256,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.execute_steps > self.horizon {
            return Err(Error::InvalidArgument(format!(
                "execute_steps {} exceeds horizon {}",
                self.execute_steps, self.horizon
            )));
        }
        if self.head_kind == HeadKind::Denoise && self.denoise_steps < 1 {
            return Err(Error::InvalidArgument(
                "denoise head needs at least one step".into(),
            ));
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }
}

/// `horizon x action_dim` action matrix.
#[derive(Debug, Clone)]
pub struct ActionChunk {
    pub actions: Array2<f64>,
}

impl ActionChunk {
    pub fn row(&self, t: usize) -> [f64; 3] {
        [
            self.actions[[t, 0]],
            self.actions[[t, 1]],
            self.actions[[t, 2]],
        ]
    }
}

const ACTION_TEMB: usize = 16;

pub struct PolicyHead {
    pub cfg: PolicyConfig,
    pub params: ParamStore,
    m1: (usize, usize),
    m2: (usize, usize),
    d1: Option<(usize, usize)>,
    d2: Option<(usize, usize)>,
    d3: Option<(usize, usize)>,
    action_sched: NoiseSchedule,
}

/// Linear-beta schedule over the action space; separate from the latent
/// schedule and not subject to its endpoint invariants.
fn action_schedule(steps: usize) -> NoiseSchedule {
    let mut abar = Vec::with_capacity(steps.max(1));
    let mut prod = 1.0;
    for i in 0..steps.max(1) {
        let frac = if steps > 1 {
            i as f64 / (steps - 1) as f64
        } else {
            0.0
        };
        let beta = 0.05 + 0.55 * frac;
        prod *= 1.0 - beta;
        abar.push(prod);
    }
    NoiseSchedule::from_alpha_bar_unchecked(abar)
}

impl PolicyHead {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new("policy");
        let chunk = cfg.chunk_len();
        let m1 = (
            p.add("bc.m1.w", linear_init(&[cfg.obs_dim, cfg.hidden], seed + 1)),
            p.add("bc.m1.b", zeros(&[cfg.hidden])),
        );
        let m2 = (
            p.add("bc.m2.w", linear_init(&[cfg.hidden, chunk], seed + 2)),
            p.add("bc.m2.b", zeros(&[chunk])),
        );
        let (d1, d2, d3) = if cfg.head_kind == HeadKind::Denoise {
            let din = chunk + cfg.obs_dim + ACTION_TEMB;
            (
                Some((
                    p.add("dn.l1.w", linear_init(&[din, cfg.hidden], seed + 3)),
                    p.add("dn.l1.b", zeros(&[cfg.hidden])),
                )),
                Some((
                    p.add("dn.l2.w", linear_init(&[cfg.hidden, cfg.hidden], seed + 4)),
                    p.add("dn.l2.b", zeros(&[cfg.hidden])),
                )),
                Some((
                    p.add("dn.l3.w", linear_init(&[cfg.hidden, chunk], seed + 5)),
                    p.add("dn.l3.b", zeros(&[chunk])),
                )),
            )
        } else {
            (None, None, None)
        };
        let action_sched = action_schedule(cfg.denoise_steps);
        Ok(PolicyHead {
            cfg,
            params: p,
            m1,
            m2,
            d1,
            d2,
            d3,
            action_sched,
        })
    }

    /// Regression path on a tape: `obs: [N, obs_dim] -> [N, horizon * dim]`.
    pub fn forward_bc_tape(&self, tape: &mut Tape, bound: &Bound, obs: TensorId) -> TensorId {
        let h = tape.linear(obs, bound.ids[self.m1.0], bound.ids[self.m1.1]);
        let h = tape.gelu(h);
        tape.linear(h, bound.ids[self.m2.0], bound.ids[self.m2.1])
    }

    /// Denoiser network: input rows are `[noisy_chunk | obs | temb]`.
    fn eps_net_tape(&self, tape: &mut Tape, bound: &Bound, input: TensorId) -> TensorId {
        let (d1, d2, d3) = (
            self.d1.expect("denoise head"),
            self.d2.expect("denoise head"),
            self.d3.expect("denoise head"),
        );
        let h = tape.linear(input, bound.ids[d1.0], bound.ids[d1.1]);
        let h = tape.gelu(h);
        let h = tape.linear(h, bound.ids[d2.0], bound.ids[d2.1]);
        let h = tape.gelu(h);
        tape.linear(h, bound.ids[d3.0], bound.ids[d3.1])
    }

    /// Predict a chunk from one observation. The denoise path uses a rng
    /// seeded by `seed`, so identical inputs give identical chunks.
    pub fn forward(&self, obs: &ObservationEmbedding, seed: u64) -> Result<ActionChunk> {
        if obs.dim() != self.cfg.obs_dim {
            return Err(Error::DimMismatch(format!(
                "obs dim {} != configured {}",
                obs.dim(),
                self.cfg.obs_dim
            )));
        }
        match self.cfg.head_kind {
            HeadKind::BcMse => {
                let mut tape = Tape::inference();
                let bound = self.params.bind(&mut tape, false);
                let o = tape.constant(
                    ArrayD::from_shape_vec(IxDyn(&[1, obs.dim()]), obs.vector.clone()).unwrap(),
                );
                let out = self.forward_bc_tape(&mut tape, &bound, o);
                Ok(self.chunk_from_row(tape.value(out)))
            }
            HeadKind::Denoise => self.sample_denoise(obs, seed),
        }
    }

    fn chunk_from_row(&self, row: &Arr) -> ActionChunk {
        let mut actions = Array2::<f64>::zeros((self.cfg.horizon, self.cfg.action_dim));
        for t in 0..self.cfg.horizon {
            for d in 0..self.cfg.action_dim {
                actions[[t, d]] = row[[0, t * self.cfg.action_dim + d]];
            }
        }
        ActionChunk { actions }
    }

    fn sample_denoise(&self, obs: &ObservationEmbedding, seed: u64) -> Result<ActionChunk> {
        let chunk = self.cfg.chunk_len();
        let steps = self.cfg.denoise_steps;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = crate::latent::sample_noise(&mut rng, &[1, chunk]);
        for t in (0..steps).rev() {
            let abar_t = self.action_sched.alpha_bar(t)?;
            let abar_prev = if t == 0 {
                1.0
            } else {
                self.action_sched.alpha_bar(t - 1)?
            };
            let alpha_t = abar_t / abar_prev;
            let beta_t = 1.0 - alpha_t;
            let eps_hat = {
                let mut tape = Tape::inference();
                let bound = self.params.bind(&mut tape, false);
                let input = self.denoise_input(&mut tape, &x, obs, t);
                let out = self.eps_net_tape(&mut tape, &bound, input);
                tape.value(out).clone()
            };
            let x0 = (&x - &(&eps_hat * (1.0 - abar_t).sqrt())) / abar_t.sqrt();
            let x0 = x0.mapv(|v| v.clamp(-1.5, 1.5));
            let mean = &x0 * (abar_prev.sqrt() * beta_t / (1.0 - abar_t))
                + &x * (alpha_t.sqrt() * (1.0 - abar_prev) / (1.0 - abar_t));
            if t > 0 {
                let sigma = ((1.0 - abar_prev) / (1.0 - abar_t) * beta_t).sqrt();
                let z = crate::latent::sample_noise(&mut rng, &[1, chunk]);
                x = &mean + &(&z * sigma);
            } else {
                x = mean;
            }
        }
        Ok(self.chunk_from_row(&x))
    }

    fn denoise_input(
        &self,
        tape: &mut Tape,
        noisy: &Arr,
        obs: &ObservationEmbedding,
        t: usize,
    ) -> TensorId {
        let chunk = self.cfg.chunk_len();
        let temb = sinusoidal_embedding(t, ACTION_TEMB);
        let mut row = vec![0.0; chunk + self.cfg.obs_dim + ACTION_TEMB];
        for (i, v) in noisy.iter().enumerate() {
            row[i] = *v;
        }
        row[chunk..chunk + self.cfg.obs_dim].copy_from_slice(&obs.vector);
        row[chunk + self.cfg.obs_dim..].copy_from_slice(&temb);
        tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, row.len()]), row).unwrap())
    }

    /// Behavior-cloning MSE between a predicted chunk and the target.
    pub fn bc_loss(&self, pred: &ActionChunk, target: &ActionChunk) -> Result<f64> {
        if pred.actions.dim() != target.actions.dim() {
            return Err(Error::ShapeMismatch(format!(
                "chunk {:?} vs {:?}",
                pred.actions.dim(),
                target.actions.dim()
            )));
        }
        let d = &pred.actions - &target.actions;
        Ok(d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
    }

    /// Denoising loss on noised target chunks. `obs_rows: [N, obs_dim]`
    /// stays on the tape, so gradients reach the visual backbone when the
    /// head trains jointly with it.
    pub fn denoise_loss_obs_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        obs_rows: TensorId,
        target_rows: &Arr,
        seed: u64,
    ) -> Result<TensorId> {
        let n = target_rows.shape()[0];
        let chunk = self.cfg.chunk_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total: Option<TensorId> = None;
        for i in 0..n {
            let tau = crate::latent::sample_timestep(&mut rng, &self.action_sched);
            let abar = self.action_sched.alpha_bar(tau)?;
            let eps = crate::latent::sample_noise(&mut rng, &[1, chunk]);
            let mut clean = ArrayD::<f64>::zeros(IxDyn(&[1, chunk]));
            for j in 0..chunk {
                clean[[0, j]] = target_rows[[i, j]];
            }
            let noisy = &clean * abar.sqrt() + &eps * (1.0 - abar).sqrt();
            let noisy_id = tape.constant(noisy);
            let obs_i = tape.select_batch(obs_rows, &[i]);
            let temb = sinusoidal_embedding(tau, ACTION_TEMB);
            let temb_id =
                tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, ACTION_TEMB]), temb).unwrap());
            let no = tape.concat_cols(noisy_id, obs_i);
            let input = tape.concat_cols(no, temb_id);
            let out = self.eps_net_tape(tape, bound, input);
            let l = tape.mse_to_const(out, &eps);
            total = Some(match total {
                Some(acc) => tape.add(acc, l),
                None => l,
            });
        }
        Ok(tape.scale(total.expect("n >= 1"), 1.0 / n as f64))
    }
}

/// One rollout record, serialized as a JSON line per episode.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeResult {
    pub task: String,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub mean_latency_ms: f64,
}

/// Closed-loop rollout with an arbitrary chunk source.
pub fn rollout_with<F>(env: &mut ToyEnv, mut predict: F) -> Result<EpisodeResult>
where
    F: FnMut(&ToyEnv) -> Result<ActionChunk>,
{
    let task = env.task.name().to_string();
    let seed = env.scene.seed;
    let mut latencies = Vec::new();
    let mut steps = 0usize;
    let mut success = false;
    if env.cfg.step_cap == 0 {
        return Ok(EpisodeResult {
            task,
            seed,
            success: false,
            steps: 0,
            mean_latency_ms: 0.0,
        });
    }
    'outer: while !env.is_done() {
        let t0 = Instant::now();
        let chunk = predict(env)?;
        latencies.push(t0.elapsed().as_secs_f64() * 1e3);
        let execute_steps = chunk.actions.dim().0.min(8).max(1);
        for t in 0..execute_steps {
            let out: StepOutcome = env.step(chunk.row(t))?;
            steps += 1;
            if out.done {
                success = out.success;
                break 'outer;
            }
        }
    }
    let mean_latency_ms = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };
    Ok(EpisodeResult {
        task,
        seed,
        success,
        steps,
        mean_latency_ms,
    })
}

/// Receding-horizon rollout with a deployable bundle: embed the current
/// views, predict a 16-step chunk, execute the first 8 closed-loop, replan.
pub fn receding_horizon_rollout(
    env: &mut ToyEnv,
    bundle: &DeployBundle,
    chunk_seed: u64,
) -> Result<EpisodeResult> {
    let execute_steps = bundle.policy.cfg.execute_steps;
    let task = env.task.name().to_string();
    let seed = env.scene.seed;
    if env.cfg.step_cap == 0 {
        return Ok(EpisodeResult {
            task,
            seed,
            success: false,
            steps: 0,
            mean_latency_ms: 0.0,
        });
    }
    let instruction = env.instruction();
    let mut latencies = Vec::new();
    let mut steps = 0usize;
    let mut success = false;
    let mut replan = 0u64;
    'outer: while !env.is_done() {
        let frames = env.observe();
        let t0 = Instant::now();
        let chunk = bundle.predict(&frames, &instruction, chunk_seed.wrapping_add(replan))?;
        latencies.push(t0.elapsed().as_secs_f64() * 1e3);
        replan += 1;
        for t in 0..execute_steps.min(chunk.actions.dim().0) {
            let out = env.step(chunk.row(t))?;
            steps += 1;
            if out.done {
                success = out.success;
                break 'outer;
            }
        }
    }
    let mean_latency_ms = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };
    Ok(EpisodeResult {
        task,
        seed,
        success,
        steps,
        mean_latency_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{EnvConfig, Task};

    fn obs(seed: u64, dim: usize) -> ObservationEmbedding {
        let v = crate::nn::seeded_normal(&[dim], 1.0, seed);
        ObservationEmbedding {
            vector: v.iter().copied().collect(),
        }
    }

    fn small_cfg(kind: HeadKind) -> PolicyConfig {
        PolicyConfig {
            head_kind: kind,
            denoise_steps: 5,
            action_dim: 3,
            horizon: 16,
            execute_steps: 8,
            hidden: 32,
            obs_dim: 24,
        }
    }

    #[test]
    fn bc_head_is_deterministic_with_fixed_shape() {
        let head = PolicyHead::new(small_cfg(HeadKind::BcMse), 1).unwrap();
        let o = obs(2, 24);
        let a = head.forward(&o, 0).unwrap();
        let b = head.forward(&o, 99).unwrap(); // seed ignored on bc path
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.actions.dim(), (16, 3));
    }

    #[test]
    fn denoise_head_seeded_reproducible() {
        let head = PolicyHead::new(small_cfg(HeadKind::Denoise), 1).unwrap();
        let o = obs(3, 24);
        let a = head.forward(&o, 7).unwrap();
        let b = head.forward(&o, 7).unwrap();
        assert_eq!(a.actions, b.actions);
        let c = head.forward(&o, 8).unwrap();
        assert_ne!(a.actions, c.actions, "different seeds should differ");
        assert_eq!(c.actions.dim(), (16, 3));
    }

    #[test]
    fn bc_loss_zero_and_unit_offset() {
        let head = PolicyHead::new(small_cfg(HeadKind::BcMse), 1).unwrap();
        let t = ActionChunk {
            actions: Array2::from_shape_fn((16, 3), |(i, j)| (i * 3 + j) as f64 * 0.01),
        };
        assert_eq!(head.bc_loss(&t, &t).unwrap(), 0.0);
        let off = ActionChunk {
            actions: &t.actions + 1.0,
        };
        assert!((head.bc_loss(&off, &t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bc_loss_sensitive_to_row_swaps() {
        let head = PolicyHead::new(small_cfg(HeadKind::BcMse), 1).unwrap();
        let target = ActionChunk {
            actions: Array2::from_shape_fn((16, 3), |(i, j)| (i * 3 + j) as f64 * 0.05),
        };
        let mut swapped = target.actions.clone();
        for d in 0..3 {
            swapped.swap([0, d], [5, d]);
        }
        let swapped = ActionChunk { actions: swapped };
        let l0 = head.bc_loss(&target, &target).unwrap();
        let l1 = head.bc_loss(&swapped, &target).unwrap();
        assert_eq!(l0, 0.0);
        assert!(l1 > 0.0, "distinct rows swapped must change the loss");
    }

    #[test]
    fn bc_loss_rejects_shape_mismatch() {
        let head = PolicyHead::new(small_cfg(HeadKind::BcMse), 1).unwrap();
        let a = ActionChunk {
            actions: Array2::zeros((16, 3)),
        };
        let b = ActionChunk {
            actions: Array2::zeros((8, 3)),
        };
        assert!(head.bc_loss(&a, &b).is_err());
    }

    #[test]
    fn forward_rejects_wrong_obs_dim() {
        let head = PolicyHead::new(small_cfg(HeadKind::BcMse), 1).unwrap();
        assert!(head.forward(&obs(1, 10), 0).is_err());
    }

    #[test]
    fn rollout_with_expert_chunks_succeeds() {
        // clone the env, run the scripted controller forward to produce an
        // open-loop chunk; rollout executes 8 of 16 then replans
        let cfg = EnvConfig {
            res: 32,
            views: 1,
            step_cap: 60,
            scene: Default::default(),
        };
        for seed in 0..5 {
            let mut env = ToyEnv::reset(seed, Task::Reach, cfg.clone());
            let result = rollout_with(&mut env, |live| {
                let mut sim = live.clone();
                let mut rows = Array2::<f64>::zeros((16, 3));
                for t in 0..16 {
                    let target = sim.scene.objects[0].pos;
                    let a = [
                        ((target.0 - sim.ee.0) / crate::synth::STEP_SCALE).clamp(-1.0, 1.0),
                        ((target.1 - sim.ee.1) / crate::synth::STEP_SCALE).clamp(-1.0, 1.0),
                        1.0,
                    ];
                    if !sim.is_done() {
                        sim.step(a).ok();
                    }
                    for d in 0..3 {
                        rows[[t, d]] = a[d];
                    }
                }
                Ok(ActionChunk { actions: rows })
            })
            .unwrap();
            assert!(result.success, "seed {seed}");
        }
    }

    #[test]
    fn rollout_step_cap_zero_is_empty_failure() {
        let cfg = EnvConfig {
            res: 32,
            views: 1,
            step_cap: 0,
            scene: Default::default(),
        };
        let mut env = ToyEnv::reset(1, Task::Reach, cfg);
        let r = rollout_with(&mut env, |_| {
            Err(Error::EnvStep("must not be called at cap 0".into()))
        })
        .unwrap();
        assert!(!r.success);
        assert_eq!(r.steps, 0);
    }
}
