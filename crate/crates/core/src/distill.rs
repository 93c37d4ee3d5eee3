//! Manifold distillation: timestep-conditioned projection heads, per-block
//! cosine alignment between the clean student and the noise-conditioned
//! frozen teacher, linear annealing of the alignment weight, the joint
//! training step, teacher discard, and the drift metric.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lang::{LangFusion, ObservationEmbedding, TextStub};
use crate::latent::{
    add_noise, encode, sample_noise, sample_timestep, ImageFrame, LatentGrid, NoiseSchedule,
};
use crate::nn::{collect_grads, linear_init, zeros, Adam, Bound, ParamStore};
use crate::policy::{ActionChunk, HeadKind, PolicyHead};
use crate::student::Student;
use crate::synth::Episode;
use crate::teacher::{stack_batch, Teacher, WeightFingerprint};
use crate::tensor::{l2_normalize_positions, Arr, Tape, TensorId};
use crate::unet::{sinusoidal_embedding, UNetConfig};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Alignment-loss schedule and per-block weights.
#[derive(Debug, Clone)]
pub struct AlignmentConfig {
    pub lambda0: f64,
    pub lambda_min: f64,
    pub t_decay: usize,
    pub weights: Vec<f64>,
    pub total_steps: usize,
}

impl AlignmentConfig {
    /// Defaults: lambda from 0.1 down to 0.001 over half the run, uniform
    /// unit block weights.
    pub fn for_run(total_steps: usize, k: usize) -> Self {
        AlignmentConfig {
            lambda0: 0.1,
            lambda_min: 0.001,
            t_decay: (total_steps / 2).max(1),
            weights: vec![1.0; k],
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > self.lambda_min && self.lambda_min > 0.0) {
            return Err(Error::InvalidArgument(
                "need lambda0 > lambda_min > 0".into(),
            ));
        }
        if self.t_decay == 0 || self.t_decay > self.total_steps.max(1) {
            return Err(Error::InvalidArgument(
                "need 0 < T_decay <= total_steps".into(),
            ));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument("block weights must be positive".into()));
        }
        Ok(())
    }
}

/// Linear decay from `lambda0` to `lambda_min` over `t_decay` steps, flat
/// afterwards.
pub fn anneal_lambda(t: usize, cfg: &AlignmentConfig) -> f64 {
    let frac = (1.0 - t as f64 / cfg.t_decay as f64).max(0.0);
    cfg.lambda_min + (cfg.lambda0 - cfg.lambda_min) * frac
}

/// How the alignment weight is driven during a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Annealed,
    Constant(f64),
}

impl LambdaMode {
    pub fn value(&self, t: usize, cfg: &AlignmentConfig) -> f64 {
        match self {
            LambdaMode::Annealed => anneal_lambda(t, cfg),
            LambdaMode::Constant(v) => *v,
        }
    }
}

struct HeadDef {
    conv: (usize, usize),
    temb: (usize, usize),
}

/// One lightweight 1x1-conv head per decoder block, shifted additively by a
/// projection of the sinusoidal timestep embedding.
pub struct ProjectionHeads {
    pub params: ParamStore,
    defs: Vec<HeadDef>,
    pub time_dim: usize,
    channels: Vec<usize>,
}

fn tap_channels(cfg: &UNetConfig) -> Vec<usize> {
    let mut out = Vec::new();
    for li in 0..cfg.levels {
        let level = cfg.levels - 1 - li;
        for _ in 0..cfg.blocks_per_level {
            out.push(cfg.channels_at_level(level));
        }
    }
    out
}

impl ProjectionHeads {
    pub fn new(cfg: &UNetConfig, seed: u64) -> Self {
        Self::build(cfg, Some(seed))
    }

    /// Identity hook: unit conv, zero bias, zero timestep shift. With this
    /// head the projected student feature equals the raw tap.
    pub fn identity(cfg: &UNetConfig) -> Self {
        Self::build(cfg, None)
    }

    fn build(cfg: &UNetConfig, seed: Option<u64>) -> Self {
        let channels = tap_channels(cfg);
        let time_dim = cfg.time_embed_dim;
        let mut params = ParamStore::new("heads");
        let mut defs = Vec::with_capacity(channels.len());
        for (k, &c) in channels.iter().enumerate() {
            let conv_w = match seed {
                Some(s) => crate::nn::conv_init(&[c, c, 1, 1], s + 31 * k as u64),
                None => {
                    let mut w = zeros(&[c, c, 1, 1]);
                    for i in 0..c {
                        w[[i, i, 0, 0]] = 1.0;
                    }
                    w
                }
            };
            let temb_w = match seed {
                Some(s) => linear_init(&[time_dim, c], s + 31 * k as u64 + 7),
                None => zeros(&[time_dim, c]),
            };
            defs.push(HeadDef {
                conv: (
                    params.add(&format!("h{k}.conv.w"), conv_w),
                    params.add(&format!("h{k}.conv.b"), zeros(&[c])),
                ),
                temb: (
                    params.add(&format!("h{k}.temb.w"), temb_w),
                    params.add(&format!("h{k}.temb.b"), zeros(&[c])),
                ),
            });
        }
        ProjectionHeads {
            params,
            defs,
            time_dim,
            channels,
        }
    }

    pub fn k(&self) -> usize {
        self.defs.len()
    }

    /// Project block-k taps `[N,C,h,w]` conditioned on per-sample timesteps.
    pub fn apply_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tap: TensorId,
        taus: &[usize],
        k: usize,
    ) -> TensorId {
        let def = &self.defs[k];
        let conv = tape.conv1x1(tap, bound.ids[def.conv.0], Some(bound.ids[def.conv.1]));
        let n = taus.len();
        let mut emb = Array2::<f64>::zeros((n, self.time_dim));
        for (i, &t) in taus.iter().enumerate() {
            for (j, v) in sinusoidal_embedding(t, self.time_dim).into_iter().enumerate() {
                emb[[i, j]] = v;
            }
        }
        let emb = tape.constant(emb.into_dyn());
        let shift = tape.linear(emb, bound.ids[def.temb.0], bound.ids[def.temb.1]);
        tape.add_channels_nc(conv, shift)
    }

    /// Single-sample inference projection `[C,h,w]`.
    pub fn apply_infer(&self, tap: &Arr, tau: usize, k: usize) -> Arr {
        let s = tap.shape();
        let mut tape = Tape::inference();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(
            tap.clone()
                .into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]]))
                .unwrap(),
        );
        let y = self.apply_tape(&mut tape, &bound, x, &[tau], k);
        tape.value(y).index_axis(Axis(0), 0).to_owned()
    }
}

/// Head projection followed by per-position unit normalization; positions
/// with vanishing norm map to zero and are flagged excluded.
pub fn project_and_normalize(
    tap: &Arr,
    tau: usize,
    heads: &ProjectionHeads,
    k: usize,
) -> Result<(Arr, Vec<bool>)> {
    if tap.ndim() != 3 || tap.shape()[0] != heads.channels[k] {
        return Err(Error::ShapeMismatch(format!(
            "tap {:?} does not match head {k} channels {}",
            tap.shape(),
            heads.channels[k]
        )));
    }
    let projected = heads.apply_infer(tap, tau, k);
    Ok(l2_normalize_positions(&projected))
}

/// Teacher-side normalization: no projection, no gradient.
pub fn normalize_teacher(tap: &Arr) -> (Arr, Vec<bool>) {
    l2_normalize_positions(tap)
}

fn mean_cosine(u: &Arr, v: &Arr, mask_u: &[bool], mask_v: &[bool]) -> f64 {
    let s = u.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            if !mask_u[i * w + j] || !mask_v[i * w + j] {
                continue;
            }
            let mut dot = 0.0;
            for cc in 0..c {
                dot += u[[cc, i, j]] * v[[cc, i, j]];
            }
            total += dot;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// `L_align = sum_k w_k (1 - mean-position-cosine(u_k, v_k))` for one
/// sample's tap sets; value lies in `[0, 2 * sum(w)]`.
pub fn alignment_loss(
    student_taps: &[Arr],
    teacher_taps: &[Arr],
    tau: usize,
    heads: &ProjectionHeads,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    if student_taps.len() != teacher_taps.len() || student_taps.len() != heads.k() {
        return Err(Error::ShapeMismatch(format!(
            "block counts differ: student {}, teacher {}, heads {}",
            student_taps.len(),
            teacher_taps.len(),
            heads.k()
        )));
    }
    let mut total = 0.0;
    for k in 0..heads.k() {
        let (u, mu) = project_and_normalize(&student_taps[k], tau, heads, k)?;
        let (v, mv) = normalize_teacher(&teacher_taps[k]);
        total += cfg.weights[k] * (1.0 - mean_cosine(&u, &v, &mu, &mv));
    }
    Ok(total)
}

/// One training sample: per-view clean latents, the instruction, and the
/// flattened target action chunk.
#[derive(Debug, Clone)]
pub struct DistillSample {
    pub views: Vec<Arr>,
    pub instruction: String,
    pub target_chunk: Vec<f64>,
}

/// Build a sample from an episode timestep; chunks past the episode end
/// repeat the final action.
pub fn make_sample(
    ep: &Episode,
    t: usize,
    factor: usize,
    horizon: usize,
) -> Result<DistillSample> {
    let views = ep.frames[t]
        .iter()
        .map(|f| encode(f, factor).map(|z| z.data))
        .collect::<Result<Vec<_>>>()?;
    let dim = 3usize;
    let mut chunk = Vec::with_capacity(horizon * dim);
    for h in 0..horizon {
        let idx = (t + h).min(ep.actions.len().saturating_sub(1));
        let a = ep.actions[idx];
        chunk.extend_from_slice(&a);
    }
    Ok(DistillSample {
        views,
        instruction: ep.instruction.clone(),
        target_chunk: chunk,
    })
}

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub l_policy: f64,
    pub l_align: f64,
    pub lambda: f64,
    pub cos_blocks: Vec<f64>,
}

/// Everything the joint step trains, plus the frozen teacher.
pub struct DistillState {
    pub teacher: Teacher,
    pub student: Student,
    pub heads: ProjectionHeads,
    pub lang: LangFusion,
    pub policy: PolicyHead,
    pub text: TextStub,
    pub sched: NoiseSchedule,
    pub align: AlignmentConfig,
    pub lambda_mode: LambdaMode,
    pub opt: Adam,
    pub step: usize,
}

impl DistillState {
    /// Register every trainable store; the teacher is deliberately absent
    /// from the optimizer registry.
    pub fn new(
        teacher: Teacher,
        student: Student,
        heads: ProjectionHeads,
        lang: LangFusion,
        policy: PolicyHead,
        text: TextStub,
        sched: NoiseSchedule,
        align: AlignmentConfig,
        lambda_mode: LambdaMode,
        learning_rate: f64,
    ) -> Result<Self> {
        if !teacher.is_frozen() {
            return Err(Error::UnfrozenTeacher(
                "distillation requires a frozen teacher".into(),
            ));
        }
        align.validate()?;
        let mut opt = Adam::new(learning_rate);
        opt.register(&student.unet.params);
        opt.register(&student.fpn.params);
        opt.register(&heads.params);
        opt.register(&lang.params);
        opt.register(&policy.params);
        Ok(DistillState {
            teacher,
            student,
            heads,
            lang,
            policy,
            text,
            sched,
            align,
            lambda_mode,
            opt,
            step: 0,
        })
    }

    pub fn optimizer_registry(&self) -> &[String] {
        self.opt.registry()
    }
}

/// One joint step: per sample draw a timestep, corrupt one view for the
/// teacher, align every student decoder block to the teacher anchor, add the
/// policy loss on the pooled multi-view embedding, update everything except
/// the teacher.
pub fn distill_step(state: &mut DistillState, batch: &[DistillSample]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("distill batch is empty".into()));
    }
    if !state.teacher.is_frozen() {
        return Err(Error::UnfrozenTeacher("teacher must stay frozen".into()));
    }
    let step = state.step;
    let mut rng = ChaCha8Rng::seed_from_u64(
        0x5f3759df ^ (step as u64).wrapping_mul(0x9E3779B97F4A7C15),
    );
    let n = batch.len();
    let views_per_sample = batch[0].views.len();

    // alignment inputs: one designated view per sample
    let mut taus = Vec::with_capacity(n);
    let mut align_rows = Vec::with_capacity(n);
    let mut teacher_inputs = Vec::with_capacity(n);
    for (i, sample) in batch.iter().enumerate() {
        if sample.views.len() != views_per_sample {
            return Err(Error::ShapeMismatch("ragged view counts in batch".into()));
        }
        let tau = sample_timestep(&mut rng, &state.sched);
        let view_idx = rng.gen_range(0..views_per_sample);
        let z0 = LatentGrid {
            data: sample.views[view_idx].clone(),
            is_clean: true,
        };
        let eps = sample_noise(&mut rng, z0.data.shape());
        let z_tau = add_noise(&z0, tau, &eps, &state.sched)?;
        teacher_inputs.push(z_tau.data);
        taus.push(tau);
        align_rows.push(i * views_per_sample + view_idx);
    }
    let teacher_batch = stack_batch(&teacher_inputs);
    let (_, teacher_taps) = state.teacher.forward_batch(&teacher_batch, &taus, None)?;
    // teacher anchors: unit-normalized, gradient-free constants
    let teacher_norm: Vec<Arr> = teacher_taps
        .iter()
        .map(|tap| {
            let mut out = ArrayD::<f64>::zeros(tap.raw_dim());
            for ni in 0..n {
                let (u, _) = l2_normalize_positions(&tap.index_axis(Axis(0), ni).to_owned());
                out.index_axis_mut(Axis(0), ni).assign(&u);
            }
            out
        })
        .collect();

    // student forward over every view of every sample
    let all_views: Vec<Arr> = batch
        .iter()
        .flat_map(|s| s.views.iter().cloned())
        .collect();
    let student_batch = stack_batch(&all_views);

    let mut tape = Tape::new();
    let unet_bound = state.student.unet.params.bind(&mut tape, true);
    let fpn_bound = state.student.fpn.params.bind(&mut tape, true);
    let heads_bound = state.heads.params.bind(&mut tape, true);
    let lang_bound = state.lang.params.bind(&mut tape, true);
    let policy_bound = state.policy.params.bind(&mut tape, true);

    let x = tape.constant(student_batch);
    let (taps_all, fused_all) =
        state
            .student
            .forward_batch_tape(&mut tape, &unet_bound, &fpn_bound, x)?;

    // alignment branch
    let mut cos_blocks = Vec::with_capacity(state.heads.k());
    let mut l_align: Option<TensorId> = None;
    for k in 0..state.heads.k() {
        let sel = tape.select_batch(taps_all[k], &align_rows);
        let projected = state
            .heads
            .apply_tape(&mut tape, &heads_bound, sel, &taus, k);
        let cos = tape.cosine_mean_to_unit_const(projected, &teacher_norm[k]);
        cos_blocks.push(tape.value(cos)[[0]]);
        let neg = tape.scale(cos, -state.align.weights[k]);
        let term = tape.add_const(neg, state.align.weights[k]);
        l_align = Some(match l_align {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let l_align = l_align.expect("K >= 1");

    // policy branch on pooled multi-view embeddings
    let fused_shape = tape.value(fused_all).shape().to_vec();
    let (hf, wf) = (fused_shape[2], fused_shape[3]);
    let mut obs_rows = Vec::with_capacity(n);
    for (i, sample) in batch.iter().enumerate() {
        let text = state.text.encode(&sample.instruction);
        let view_ids: Vec<(TensorId, (usize, usize))> = (0..views_per_sample)
            .map(|v| {
                let row = tape.index_batch(fused_all, i * views_per_sample + v);
                (row, (hf, wf))
            })
            .collect();
        let obs = state
            .lang
            .embed_views_tape(&mut tape, &lang_bound, &view_ids, &text, None)?;
        obs_rows.push(obs);
    }
    let obs_mat = tape.stack_rows(&obs_rows);
    let chunk_len = state.policy.cfg.chunk_len();
    let mut targets = ArrayD::<f64>::zeros(IxDyn(&[n, chunk_len]));
    for (i, s) in batch.iter().enumerate() {
        for (j, v) in s.target_chunk.iter().enumerate() {
            targets[[i, j]] = *v;
        }
    }
    let l_policy = match state.policy.cfg.head_kind {
        HeadKind::BcMse => {
            let pred = state
                .policy
                .forward_bc_tape(&mut tape, &policy_bound, obs_mat);
            tape.mse_to_const(pred, &targets)
        }
        HeadKind::Denoise => {
            let seed = 0xac7e ^ (step as u64).wrapping_mul(0x2545F4914F6CDD1D);
            state.policy.denoise_loss_obs_tape(
                &mut tape,
                &policy_bound,
                obs_mat,
                &targets,
                seed,
            )?
        }
    };

    let lambda = state.lambda_mode.value(step, &state.align);
    let total = tape.add_scaled(l_policy, l_align, lambda);

    let l_policy_val = tape.value(l_policy)[[0]];
    let l_align_val = tape.value(l_align)[[0]];
    let grads = tape.backward(total);
    let gmap = collect_grads(
        &[
            (&state.student.unet.params, &unet_bound),
            (&state.student.fpn.params, &fpn_bound),
            (&state.heads.params, &heads_bound),
            (&state.lang.params, &lang_bound),
            (&state.policy.params, &policy_bound),
        ],
        &grads,
    );
    state.opt.step(
        &mut [
            &mut state.student.unet.params,
            &mut state.student.fpn.params,
            &mut state.heads.params,
            &mut state.lang.params,
            &mut state.policy.params,
        ],
        &gmap,
    )?;
    state.step += 1;
    Ok(StepMetrics {
        step,
        l_policy: l_policy_val,
        l_align: l_align_val,
        lambda,
        cos_blocks,
    })
}

/// Deployable artifact: student backbone, pyramid, fusion head and policy.
/// The teacher and alignment heads are gone; asking for the teacher is an
/// error and is counted, so rollouts can prove they never touched it.
pub struct DeployBundle {
    pub student: Student,
    pub lang: LangFusion,
    pub policy: PolicyHead,
    pub text: TextStub,
    pub factor: usize,
    teacher_queries: AtomicUsize,
}

impl DeployBundle {
    pub fn new(
        student: Student,
        lang: LangFusion,
        policy: PolicyHead,
        text: TextStub,
        factor: usize,
    ) -> Self {
        DeployBundle {
            student,
            lang,
            policy,
            text,
            factor,
            teacher_queries: AtomicUsize::new(0),
        }
    }

    /// Frames (one per view) to a pooled observation embedding.
    pub fn embed(&self, frames: &[ImageFrame], instruction: &str) -> Result<ObservationEmbedding> {
        let maps = frames
            .iter()
            .map(|f| {
                let z = encode(f, self.factor)?;
                self.student.fused_map(&z)
            })
            .collect::<Result<Vec<_>>>()?;
        let ctx = self.text.encode(instruction);
        self.lang.embed_views(&maps, &ctx)
    }

    pub fn predict(
        &self,
        frames: &[ImageFrame],
        instruction: &str,
        seed: u64,
    ) -> Result<ActionChunk> {
        let obs = self.embed(frames, instruction)?;
        self.policy.forward(&obs, seed)
    }

    /// The teacher was discarded at deployment; every call is an error and
    /// is tallied for the never-queries-the-teacher assertion.
    pub fn teacher_forward(&self) -> Result<()> {
        self.teacher_queries.fetch_add(1, Ordering::SeqCst);
        Err(Error::TeacherNotAvailable(
            "deployable bundle carries no teacher".into(),
        ))
    }

    pub fn teacher_query_count(&self) -> usize {
        self.teacher_queries.load(Ordering::SeqCst)
    }

    pub fn backbone_fingerprint(&self) -> WeightFingerprint {
        WeightFingerprint(crate::nn::fingerprint_stores(&[
            &self.student.unet.params,
            &self.student.fpn.params,
            &self.lang.params,
        ]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.add_store(&self.student.unet.params);
        ck.add_store(&self.student.fpn.params);
        ck.add_store(&self.lang.params);
        ck.add_store(&self.policy.params);
        ck.add_tensor(
            "meta/factor",
            ArrayD::from_elem(IxDyn(&[1]), self.factor as f64),
        );
        ck.write(path)
    }

    pub fn load(
        path: &Path,
        unet_cfg: UNetConfig,
        fusion_cfg: crate::student::FusionConfig,
        lang_cfg: crate::lang::LangConfig,
        policy_cfg: crate::policy::PolicyConfig,
        text_seed: u64,
    ) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let mut student = Student::random(unet_cfg, fusion_cfg, 0)?;
        ck.load_store(&mut student.unet.params)?;
        ck.load_store(&mut student.fpn.params)?;
        let c_v = student.fpn.cfg.c_v;
        let n_tokens = lang_cfg.n_tokens;
        let c_lang = lang_cfg.c_lang;
        let mut lang = LangFusion::new(lang_cfg, c_v, 0)?;
        ck.load_store(&mut lang.params)?;
        let mut policy = PolicyHead::new(policy_cfg, 0)?;
        ck.load_store(&mut policy.params)?;
        let factor = ck
            .get("meta/factor")
            .map(|a| a[[0]] as usize)
            .unwrap_or(crate::latent::DOWNSAMPLE_FACTOR);
        let text = TextStub::new(text_seed, n_tokens, c_lang);
        Ok(DeployBundle::new(student, lang, policy, text, factor))
    }
}

/// Strip the training state down to the deployable bundle.
pub fn discard_teacher(state: DistillState, factor: usize) -> DeployBundle {
    DeployBundle::new(
        state.student,
        state.lang,
        state.policy,
        state.text,
        factor,
    )
}

/// Full training checkpoint: every section including teacher, heads and
/// optimizer-free copies of the trainables. Strictly larger than a bundle.
pub fn save_training_checkpoint(state: &DistillState, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.add_store(&state.teacher.unet.params);
    ck.add_store(&state.student.unet.params);
    ck.add_store(&state.student.fpn.params);
    ck.add_store(&state.heads.params);
    ck.add_store(&state.lang.params);
    ck.add_store(&state.policy.params);
    ck.add_tensor("meta/step", ArrayD::from_elem(IxDyn(&[1]), state.step as f64));
    ck.write(path)
}

/// Mean over probes, given timesteps and blocks of `1 - cosine` between the
/// head-projected student features and the teacher anchor, with the current
/// heads. Noise draws are derived from `seed`, so the metric is reproducible.
pub fn drift_metric(
    student: &Student,
    heads: &ProjectionHeads,
    teacher: &Teacher,
    probes: &[Arr],
    taus: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (pi, z0_data) in probes.iter().enumerate() {
        let z0 = LatentGrid {
            data: z0_data.clone(),
            is_clean: true,
        };
        let (student_taps, _) = student.forward(&z0)?;
        for &tau in taus {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (pi as u64 * 7919) ^ (tau as u64 * 104729));
            let eps = sample_noise(&mut rng, z0.data.shape());
            let z_tau = add_noise(&z0, tau, &eps, sched)?;
            let (_, teacher_taps) = teacher.forward(&z_tau, tau, None)?;
            for k in 0..heads.k() {
                let (u, mu) = project_and_normalize(&student_taps.taps[k], tau, heads, k)?;
                let (v, mv) = normalize_teacher(&teacher_taps.taps[k]);
                total += 1.0 - mean_cosine(&u, &v, &mu, &mv);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Train only the policy head on demonstrations against a frozen backbone.
/// Embeddings are precomputed once (the backbone does not change), then the
/// head is fitted with Adam. Returns per-step losses.
pub fn train_policy_head(
    bundle: &DeployBundle,
    policy: &mut PolicyHead,
    episodes: &[Episode],
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes.is_empty() {
        return Err(Error::EmptyDataset("policy training needs episodes".into()));
    }
    // precompute embeddings for every (episode, t)
    let mut inputs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let horizon = policy.cfg.horizon;
    for ep in episodes {
        for t in 0..ep.actions.len() {
            let obs = bundle.embed(&ep.frames[t], &ep.instruction)?;
            let sample = make_sample(ep, t, bundle.factor, horizon)?;
            inputs.push((obs.vector, sample.target_chunk));
        }
    }
    let mut opt = Adam::new(learning_rate);
    opt.register(&policy.params);
    let obs_dim = policy.cfg.obs_dim;
    let chunk_len = policy.cfg.chunk_len();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let mut obs = ArrayD::<f64>::zeros(IxDyn(&[batch_size, obs_dim]));
        let mut tgt = ArrayD::<f64>::zeros(IxDyn(&[batch_size, chunk_len]));
        for b in 0..batch_size {
            let pick = rng.gen_range(0..inputs.len());
            for (j, v) in inputs[pick].0.iter().enumerate() {
                obs[[b, j]] = *v;
            }
            for (j, v) in inputs[pick].1.iter().enumerate() {
                tgt[[b, j]] = *v;
            }
        }
        let mut tape = Tape::new();
        let bound = policy.params.bind(&mut tape, true);
        let o = tape.constant(obs);
        let loss = match policy.cfg.head_kind {
            HeadKind::BcMse => {
                let pred = policy.forward_bc_tape(&mut tape, &bound, o);
                tape.mse_to_const(pred, &tgt)
            }
            HeadKind::Denoise => {
                policy.denoise_loss_obs_tape(&mut tape, &bound, o, &tgt, seed ^ step as u64)?
            }
        };
        losses.push(tape.value(loss)[[0]]);
        let grads = tape.backward(loss);
        let gmap = collect_grads(&[(&policy.params, &bound)], &grads);
        opt.step(&mut [&mut policy.params], &gmap)?;
    }
    Ok(losses)
}
