//! Run configuration: flat `key = value` lines under bracketed section
//! headers. Unknown sections or keys are errors; every artifact a run emits
//! embeds the hash of the canonical serialization.

use crate::error::{Error, Result};
use crate::lang::LangConfig;
use crate::policy::{HeadKind, PolicyConfig};
use crate::student::{FpnMode, FusionConfig};
use crate::synth::DataConfig;
use crate::unet::UNetConfig;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RunConfig {
    // [run]
    pub seed: u64,
    pub out_dir: String,
    // [data]
    pub res: usize,
    pub views: usize,
    pub factor: usize,
    pub tasks: Vec<String>,
    pub episodes_per_task: usize,
    pub step_cap: usize,
    pub n_objects: usize,
    pub dataset_dir: String,
    // [schedule]
    pub t_diff: usize,
    // [unet]
    pub levels: usize,
    pub base_channels: usize,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub context_dim: usize,
    // [fusion]
    pub conv_block_depth: usize,
    pub c_v: usize,
    pub tap_indices: [usize; 3],
    // [lang]
    pub n_tokens: usize,
    pub c_lang: usize,
    pub c_shared: usize,
    pub heads: usize,
    pub d_obs: usize,
    pub mlp_hidden: usize,
    // [align]
    pub lambda0: f64,
    pub lambda_min: f64,
    // [policy]
    pub head_kind: String,
    pub denoise_steps: usize,
    pub horizon: usize,
    pub execute_steps: usize,
    pub policy_hidden: usize,
    // [train]
    pub pretrain_steps: usize,
    pub distill_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub policy_steps: usize,
    pub policy_batch: usize,
    pub policy_lr: f64,
    // [eval]
    pub rollout_seeds: usize,
    pub pck_pairs: usize,
    pub probes_per_pair: usize,
    pub max_shift_px: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "runs/out".into(),
            res: 64,
            views: 2,
            factor: 4,
            tasks: vec!["reach".into(), "push_to_zone".into(), "press_button".into()],
            episodes_per_task: 50,
            step_cap: 60,
            n_objects: 2,
            dataset_dir: "data".into(),
            t_diff: 100,
            levels: 3,
            base_channels: 32,
            blocks_per_level: 2,
            time_embed_dim: 64,
            context_dim: 0,
            conv_block_depth: 2,
            c_v: 64,
            tap_indices: [1, 3, 5],
            n_tokens: 8,
            c_lang: 64,
            c_shared: 128,
            heads: 4,
            d_obs: 256,
            mlp_hidden: 256,
            lambda0: 0.1,
            lambda_min: 0.001,
            head_kind: "bc_mse".into(),
            denoise_steps: 10,
            horizon: 16,
            execute_steps: 8,
            policy_hidden: 256,
            pretrain_steps: 1500,
            distill_steps: 800,
            batch_size: 16,
            learning_rate: 1e-4,
            policy_steps: 2500,
            policy_batch: 64,
            policy_lr: 1e-3,
            rollout_seeds: 50,
            pck_pairs: 40,
            probes_per_pair: 16,
            max_shift_px: 5,
        }
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

macro_rules! parse_num {
    ($cfg:expr, $field:ident, $v:expr, $key:expr) => {
        $cfg.$field = $v
            .parse()
            .map_err(|_| Error::Config(format!("bad value for {}: {}", $key, $v)))?
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                const SECTIONS: &[&str] = &[
                    "run", "data", "schedule", "unet", "fusion", "lang", "align", "policy",
                    "train", "eval",
                ];
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(Error::Config(format!(
                        "unknown section [{section}] at line {}",
                        lineno + 1
                    )));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "expected key = value at line {}: {line}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let v = value.trim();
            let full = format!("{section}.{key}");
            match full.as_str() {
                "run.seed" => parse_num!(cfg, seed, v, full),
                "run.out_dir" => cfg.out_dir = v.to_string(),
                "data.res" => parse_num!(cfg, res, v, full),
                "data.views" => parse_num!(cfg, views, v, full),
                "data.factor" => parse_num!(cfg, factor, v, full),
                "data.tasks" => cfg.tasks = parse_list(v),
                "data.episodes_per_task" => parse_num!(cfg, episodes_per_task, v, full),
                "data.step_cap" => parse_num!(cfg, step_cap, v, full),
                "data.n_objects" => parse_num!(cfg, n_objects, v, full),
                "data.dataset_dir" => cfg.dataset_dir = v.to_string(),
                "schedule.t_diff" => parse_num!(cfg, t_diff, v, full),
                "unet.levels" => parse_num!(cfg, levels, v, full),
                "unet.base_channels" => parse_num!(cfg, base_channels, v, full),
                "unet.blocks_per_level" => parse_num!(cfg, blocks_per_level, v, full),
                "unet.time_embed_dim" => parse_num!(cfg, time_embed_dim, v, full),
                "unet.context_dim" => parse_num!(cfg, context_dim, v, full),
                "fusion.conv_block_depth" => parse_num!(cfg, conv_block_depth, v, full),
                "fusion.c_v" => parse_num!(cfg, c_v, v, full),
                "fusion.tap_indices" => {
                    let parts = parse_list(v);
                    if parts.len() != 3 {
                        return Err(Error::Config("tap_indices needs 3 entries".into()));
                    }
                    for (i, p) in parts.iter().enumerate() {
                        cfg.tap_indices[i] = p
                            .parse()
                            .map_err(|_| Error::Config(format!("bad tap index {p}")))?;
                    }
                }
                "lang.n_tokens" => parse_num!(cfg, n_tokens, v, full),
                "lang.c_lang" => parse_num!(cfg, c_lang, v, full),
                "lang.c_shared" => parse_num!(cfg, c_shared, v, full),
                "lang.heads" => parse_num!(cfg, heads, v, full),
                "lang.d_obs" => parse_num!(cfg, d_obs, v, full),
                "lang.mlp_hidden" => parse_num!(cfg, mlp_hidden, v, full),
                "align.lambda0" => parse_num!(cfg, lambda0, v, full),
                "align.lambda_min" => parse_num!(cfg, lambda_min, v, full),
                "policy.head_kind" => cfg.head_kind = v.to_string(),
                "policy.denoise_steps" => parse_num!(cfg, denoise_steps, v, full),
                "policy.horizon" => parse_num!(cfg, horizon, v, full),
                "policy.execute_steps" => parse_num!(cfg, execute_steps, v, full),
                "policy.hidden" => parse_num!(cfg, policy_hidden, v, full),
                "train.pretrain_steps" => parse_num!(cfg, pretrain_steps, v, full),
                "train.distill_steps" => parse_num!(cfg, distill_steps, v, full),
                "train.batch_size" => parse_num!(cfg, batch_size, v, full),
                "train.learning_rate" => parse_num!(cfg, learning_rate, v, full),
                "train.policy_steps" => parse_num!(cfg, policy_steps, v, full),
                "train.policy_batch" => parse_num!(cfg, policy_batch, v, full),
                "train.policy_lr" => parse_num!(cfg, policy_lr, v, full),
                "eval.rollout_seeds" => parse_num!(cfg, rollout_seeds, v, full),
                "eval.pck_pairs" => parse_num!(cfg, pck_pairs, v, full),
                "eval.probes_per_pair" => parse_num!(cfg, probes_per_pair, v, full),
                "eval.max_shift_px" => parse_num!(cfg, max_shift_px, v, full),
                other => {
                    return Err(Error::Config(format!(
                        "unknown key {other} at line {}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.res % self.factor != 0 {
            return Err(Error::Config(format!(
                "res {} must be divisible by factor {}",
                self.res, self.factor
            )));
        }
        if self.head_kind != "bc_mse" && self.head_kind != "denoise" {
            return Err(Error::Config(format!(
                "head_kind must be bc_mse or denoise, got {}",
                self.head_kind
            )));
        }
        if self.views == 0 {
            return Err(Error::Config("views must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key in a fixed order. Hash input and echo
    /// format.
    pub fn canonical(&self) -> String {
        format!(
            "[run]\nseed = {}\nout_dir = {}\n[data]\nres = {}\nviews = {}\nfactor = {}\ntasks = {}\nepisodes_per_task = {}\nstep_cap = {}\nn_objects = {}\ndataset_dir = {}\n[schedule]\nt_diff = {}\n[unet]\nlevels = {}\nbase_channels = {}\nblocks_per_level = {}\ntime_embed_dim = {}\ncontext_dim = {}\n[fusion]\nconv_block_depth = {}\nc_v = {}\ntap_indices = {},{},{}\n[lang]\nn_tokens = {}\nc_lang = {}\nc_shared = {}\nheads = {}\nd_obs = {}\nmlp_hidden = {}\n[align]\nlambda0 = {}\nlambda_min = {}\n[policy]\nhead_kind = {}\ndenoise_steps = {}\nhorizon = {}\nexecute_steps = {}\nhidden = {}\n[train]\npretrain_steps = {}\ndistill_steps = {}\nbatch_size = {}\nlearning_rate = {}\npolicy_steps = {}\npolicy_batch = {}\npolicy_lr = {}\n[eval]\nrollout_seeds = {}\npck_pairs = {}\nprobes_per_pair = {}\nmax_shift_px = {}\n",
            self.seed,
            self.out_dir,
            self.res,
            self.views,
            self.factor,
            self.tasks.join(","),
            self.episodes_per_task,
            self.step_cap,
            self.n_objects,
            self.dataset_dir,
            self.t_diff,
            self.levels,
            self.base_channels,
            self.blocks_per_level,
            self.time_embed_dim,
            self.context_dim,
            self.conv_block_depth,
            self.c_v,
            self.tap_indices[0],
            self.tap_indices[1],
            self.tap_indices[2],
            self.n_tokens,
            self.c_lang,
            self.c_shared,
            self.heads,
            self.d_obs,
            self.mlp_hidden,
            self.lambda0,
            self.lambda_min,
            self.head_kind,
            self.denoise_steps,
            self.horizon,
            self.execute_steps,
            self.policy_hidden,
            self.pretrain_steps,
            self.distill_steps,
            self.batch_size,
            self.learning_rate,
            self.policy_steps,
            self.policy_batch,
            self.policy_lr,
            self.rollout_seeds,
            self.pck_pairs,
            self.probes_per_pair,
            self.max_shift_px,
        )
    }

    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let d: [u8; 32] = h.finalize().into();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            blocks_per_level: self.blocks_per_level,
            in_channels: 3 * self.factor * self.factor,
            time_embed_dim: self.time_embed_dim,
            context_dim: self.context_dim,
        }
    }

    pub fn fusion_config(&self, mode: FpnMode) -> FusionConfig {
        FusionConfig {
            conv_block_depth: self.conv_block_depth,
            c_v: self.c_v,
            tap_indices: self.tap_indices,
            mode,
        }
    }

    pub fn lang_config(&self) -> LangConfig {
        LangConfig {
            n_tokens: self.n_tokens,
            c_lang: self.c_lang,
            c_shared: self.c_shared,
            heads: self.heads,
            d_obs: self.d_obs,
            mlp_hidden: self.mlp_hidden,
            proprio_dim: 0,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            head_kind: if self.head_kind == "denoise" {
                HeadKind::Denoise
            } else {
                HeadKind::BcMse
            },
            denoise_steps: self.denoise_steps,
            action_dim: 3,
            horizon: self.horizon,
            execute_steps: self.execute_steps,
            hidden: self.policy_hidden,
            obs_dim: self.d_obs,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            tasks: self.tasks.clone(),
            episodes_per_task: self.episodes_per_task,
            seed: self.seed,
            res: self.res,
            views: self.views,
            step_cap: self.step_cap,
            n_objects: self.n_objects,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_canonical() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg.canonical(), parsed.canonical());
        assert_eq!(cfg.config_hash(), parsed.config_hash());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = "[run]\nseed = 1\nbogus = 2\n";
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_section_rejected() {
        let text = "[nope]\nseed = 1\n";
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# comment\n[run]\n\nseed = 9\n; other comment\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn hash_changes_with_values() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1234;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn res_factor_divisibility_enforced() {
        let text = "[data]\nres = 30\nfactor = 4\n";
        assert!(RunConfig::parse(text).is_err());
    }
}
