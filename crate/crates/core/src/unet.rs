//! Time-conditional U-Net with per-decoder-block activation taps.
//!
//! Three resolution levels, channels doubling per level, two decoder blocks
//! per level. The decoder exposes every block's activation in coarse-to-fine
//! order; those grids are the supervision anchors for distillation and the
//! student's pyramid sources.

use crate::error::{Error, Result};
use crate::nn::{conv_init, linear_init, ones, zeros, Bound, ParamStore};
use crate::tensor::{Arr, Tape, TensorId};
use ndarray::{Array2, IxDyn};

const GN_GROUPS: usize = 8;
const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    /// Resolution levels; channels double per downsampling.
    pub levels: usize,
    /// Channel width at the finest level.
    pub base_channels: usize,
    /// Decoder blocks per level; `K = levels * blocks_per_level`.
    pub blocks_per_level: usize,
    /// Latent channels in and out.
    pub in_channels: usize,
    /// Sinusoidal timestep embedding width.
    pub time_embed_dim: usize,
    /// Conditioning token width; 0 disables cross-attention conditioning.
    pub context_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 32,
            blocks_per_level: 2,
            in_channels: 48,
            time_embed_dim: 64,
            context_dim: 0,
        }
    }
}

impl UNetConfig {
    pub fn decoder_blocks(&self) -> usize {
        self.levels * self.blocks_per_level
    }

    pub fn channels_at_level(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_blocks() < 3 {
            return Err(Error::InvalidArgument(format!(
                "K = {} must be >= 3",
                self.decoder_blocks()
            )));
        }
        if self.base_channels % GN_GROUPS != 0 {
            return Err(Error::InvalidArgument(format!(
                "base_channels {} must divide into {GN_GROUPS} groups",
                self.base_channels
            )));
        }
        if self.levels == 0 || self.blocks_per_level == 0 {
            return Err(Error::InvalidArgument(
                "levels and blocks_per_level must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-block decoder activations of one sample, coarse to fine, plus the
/// timestep they were taken at.
#[derive(Debug, Clone)]
pub struct DecoderTaps {
    pub taps: Vec<Arr>,
    pub timestep: usize,
}

impl DecoderTaps {
    pub fn k(&self) -> usize {
        self.taps.len()
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000_f64.powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

struct ResBlockDef {
    gn1: (usize, usize),
    conv1: (usize, usize),
    temb: Option<(usize, usize)>,
    gn2: (usize, usize),
    conv2: (usize, usize),
    skip: Option<(usize, usize)>,
}

struct CrossAttnDef {
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
}

pub struct UNet {
    pub cfg: UNetConfig,
    pub params: ParamStore,
    time_l1: (usize, usize),
    time_l2: (usize, usize),
    stem: (usize, usize),
    enc_blocks: Vec<ResBlockDef>,
    downs: Vec<(usize, usize)>,
    dec_blocks: Vec<ResBlockDef>,
    ups: Vec<(usize, usize)>,
    head_gn: (usize, usize),
    head_conv: (usize, usize),
    ctx_attn: Option<CrossAttnDef>,
}

fn add_res_block(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    time_hidden: Option<usize>,
    seed: &mut u64,
) -> ResBlockDef {
    let mut next = |k: u64| {
        *seed += k;
        *seed
    };
    let gn1 = (
        store.add(&format!("{name}.gn1.g"), ones(&[in_ch])),
        store.add(&format!("{name}.gn1.b"), zeros(&[in_ch])),
    );
    let conv1 = (
        store.add(
            &format!("{name}.conv1.w"),
            conv_init(&[out_ch, in_ch, 3, 3], next(1)),
        ),
        store.add(&format!("{name}.conv1.b"), zeros(&[out_ch])),
    );
    let temb = time_hidden.map(|th| {
        (
            store.add(&format!("{name}.temb.w"), linear_init(&[th, out_ch], next(1))),
            store.add(&format!("{name}.temb.b"), zeros(&[out_ch])),
        )
    });
    let gn2 = (
        store.add(&format!("{name}.gn2.g"), ones(&[out_ch])),
        store.add(&format!("{name}.gn2.b"), zeros(&[out_ch])),
    );
    let conv2 = (
        store.add(
            &format!("{name}.conv2.w"),
            conv_init(&[out_ch, out_ch, 3, 3], next(1)),
        ),
        store.add(&format!("{name}.conv2.b"), zeros(&[out_ch])),
    );
    let skip = (in_ch != out_ch).then(|| {
        (
            store.add(
                &format!("{name}.skip.w"),
                conv_init(&[out_ch, in_ch, 1, 1], next(1)),
            ),
            store.add(&format!("{name}.skip.b"), zeros(&[out_ch])),
        )
    });
    ResBlockDef {
        gn1,
        conv1,
        temb,
        gn2,
        conv2,
        skip,
    }
}

impl UNet {
    pub fn new(cfg: UNetConfig, prefix: &str, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(prefix);
        let mut s = seed;
        let th = cfg.time_embed_dim * 2;
        let time_l1 = (
            store.add("time.l1.w", linear_init(&[cfg.time_embed_dim, th], s + 1)),
            store.add("time.l1.b", zeros(&[th])),
        );
        let time_l2 = (
            store.add("time.l2.w", linear_init(&[th, th], s + 2)),
            store.add("time.l2.b", zeros(&[th])),
        );
        s += 10;
        let stem = (
            store.add(
                "stem.w",
                conv_init(&[cfg.base_channels, cfg.in_channels, 3, 3], s),
            ),
            store.add("stem.b", zeros(&[cfg.base_channels])),
        );
        s += 10;
        let mut enc_blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..cfg.levels {
            let ch = cfg.channels_at_level(l);
            enc_blocks.push(add_res_block(
                &mut store,
                &format!("enc{l}"),
                ch,
                ch,
                Some(th),
                &mut s,
            ));
            if l + 1 < cfg.levels {
                let next_ch = cfg.channels_at_level(l + 1);
                downs.push((
                    store.add(&format!("down{l}.w"), conv_init(&[next_ch, ch, 3, 3], s + 1)),
                    store.add(&format!("down{l}.b"), zeros(&[next_ch])),
                ));
                s += 10;
            }
        }
        let ctx_attn = (cfg.context_dim > 0).then(|| {
            let ch = cfg.channels_at_level(cfg.levels - 1);
            let def = CrossAttnDef {
                q: (
                    store.add("ctx.q.w", linear_init(&[ch, ch], s + 1)),
                    store.add("ctx.q.b", zeros(&[ch])),
                ),
                k: (
                    store.add("ctx.k.w", linear_init(&[cfg.context_dim, ch], s + 2)),
                    store.add("ctx.k.b", zeros(&[ch])),
                ),
                v: (
                    store.add("ctx.v.w", linear_init(&[cfg.context_dim, ch], s + 3)),
                    store.add("ctx.v.b", zeros(&[ch])),
                ),
                o: (
                    store.add("ctx.o.w", linear_init(&[ch, ch], s + 4)),
                    store.add("ctx.o.b", zeros(&[ch])),
                ),
            };
            def
        });
        s += 10;
        // decoder: coarse level first, two blocks per level, skip concat on
        // the first block of each level
        let mut dec_blocks = Vec::new();
        let mut ups = Vec::new();
        for li in 0..cfg.levels {
            let level = cfg.levels - 1 - li; // coarse to fine
            let ch = cfg.channels_at_level(level);
            for b in 0..cfg.blocks_per_level {
                let in_ch = if b == 0 { ch * 2 } else { ch };
                dec_blocks.push(add_res_block(
                    &mut store,
                    &format!("dec{}", li * cfg.blocks_per_level + b),
                    in_ch,
                    ch,
                    Some(th),
                    &mut s,
                ));
            }
            if level > 0 {
                let next_ch = cfg.channels_at_level(level - 1);
                ups.push((
                    store.add(&format!("up{li}.w"), conv_init(&[next_ch, ch, 3, 3], s + 1)),
                    store.add(&format!("up{li}.b"), zeros(&[next_ch])),
                ));
                s += 10;
            }
        }
        let head_gn = (
            store.add("head.gn.g", ones(&[cfg.base_channels])),
            store.add("head.gn.b", zeros(&[cfg.base_channels])),
        );
        let head_conv = (
            store.add(
                "head.conv.w",
                conv_init(&[cfg.in_channels, cfg.base_channels, 3, 3], s + 1),
            ),
            store.add("head.conv.b", zeros(&[cfg.in_channels])),
        );
        Ok(UNet {
            cfg,
            params: store,
            time_l1,
            time_l2,
            stem,
            enc_blocks,
            downs,
            dec_blocks,
            ups,
            head_gn,
            head_conv,
            ctx_attn,
        })
    }

    fn res_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        def: &ResBlockDef,
        x: TensorId,
        temb: Option<TensorId>,
    ) -> TensorId {
        let p = |idx: usize| bound.ids[idx];
        let h = tape.group_norm(x, p(def.gn1.0), p(def.gn1.1), GN_GROUPS, GN_EPS);
        let h = tape.silu(h);
        let mut h = tape.conv2d(h, p(def.conv1.0), Some(p(def.conv1.1)), 1, 1);
        if let (Some(te), Some((tw, tb))) = (temb, def.temb) {
            let shift = tape.linear(te, p(tw), p(tb)); // [N, out_ch]
            h = tape.add_channels_nc(h, shift);
        }
        let h = tape.group_norm(h, p(def.gn2.0), p(def.gn2.1), GN_GROUPS, GN_EPS);
        let h = tape.silu(h);
        let h = tape.conv2d(h, p(def.conv2.0), Some(p(def.conv2.1)), 1, 1);
        let sk = match def.skip {
            Some((w, b)) => tape.conv1x1(x, p(w), Some(p(b))),
            None => x,
        };
        tape.add(h, sk)
    }

    fn ctx_attend(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        def: &CrossAttnDef,
        x: TensorId,
        ctx: &Array2<f64>,
    ) -> TensorId {
        let p = |idx: usize| bound.ids[idx];
        let shape = tape.value(x).shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let ctx_id = tape.constant(ctx.clone().into_dyn());
        let k = tape.linear(ctx_id, p(def.k.0), p(def.k.1));
        let v = tape.linear(ctx_id, p(def.v.0), p(def.v.1));
        let mut per_sample = Vec::with_capacity(n);
        for ni in 0..n {
            let xi = tape.index_batch(x, ni);
            let tok = tape.chw_to_tokens(xi); // [h*w, c]
            let q = tape.linear(tok, p(def.q.0), p(def.q.1));
            let att = tape.attention(q, k, v, 4);
            let out = tape.linear(att, p(def.o.0), p(def.o.1));
            let res = tape.add(tok, out);
            // tokens back to [c, h, w]
            let tr = {
                // [h*w, c] -> [c, h, w]: reuse chw_to_tokens' inverse via
                // reshape + per-token transpose done by a second flatten
                let rs = tape.reshape(res, &[h, w, c]);
                rs
            };
            per_sample.push(tr);
        }
        // stack back to [N, c, h, w]
        let flat: Vec<TensorId> = per_sample
            .iter()
            .map(|&t| tape.reshape(t, &[h * w * c]))
            .collect();
        let stacked = tape.stack_rows(&flat); // [N, h*w*c]
        let nhwc = tape.reshape(stacked, &[n, h, w, c]);
        // [N,h,w,c] -> [N,c,h,w] via explicit op
        self.nhwc_to_nchw(tape, nhwc, n, h, w, c)
    }

    fn nhwc_to_nchw(
        &self,
        tape: &mut Tape,
        x: TensorId,
        n: usize,
        h: usize,
        w: usize,
        c: usize,
    ) -> TensorId {
        // express the permutation with existing ops: per sample, flatten to
        // tokens [h*w, c], then invert chw_to_tokens by building [c,h,w]
        let mut rows = Vec::with_capacity(n);
        for ni in 0..n {
            let s = tape.index_batch(x, ni); // [h, w, c]
            let tok = tape.reshape(s, &[h * w, c]);
            let chw = self.tokens_to_chw(tape, tok, c, h, w);
            rows.push(tape.reshape(chw, &[c * h * w]));
        }
        let stacked = tape.stack_rows(&rows);
        tape.reshape(stacked, &[n, c, h, w])
    }

    fn tokens_to_chw(
        &self,
        tape: &mut Tape,
        tok: TensorId,
        c: usize,
        h: usize,
        w: usize,
    ) -> TensorId {
        // transpose [h*w, c] -> [c, h*w] using matmul with identity would be
        // wasteful; chw_to_tokens of a reshaped [c', h', w'] view performs the
        // same permutation when c' = h*w, (h', w') = (1, c):
        // [h*w, 1, c] tokens -> [1*c, h*w] = [c, h*w]
        let v = tape.reshape(tok, &[h * w, 1, c]);
        let t = tape.chw_to_tokens(v); // [1*c, h*w]
        tape.reshape(t, &[c, h, w])
    }

    /// Forward pass over a batch. `taus` holds one timestep per sample (the
    /// student wrapper passes zeros). Returns the noise prediction and all
    /// `K` decoder-tap tensors `[N, C_k, h_k, w_k]`, coarse to fine.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: TensorId,
        taus: &[usize],
        ctx: Option<&Array2<f64>>,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "unet input {shape:?}, expected [N, {}, h, w]",
                self.cfg.in_channels
            )));
        }
        if shape[0] != taus.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} timesteps for batch of {}",
                taus.len(),
                shape[0]
            )));
        }
        let min_side = 1 << (self.cfg.levels - 1);
        if shape[2] % min_side != 0 || shape[3] % min_side != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims {}x{} must be divisible by {min_side}",
                shape[2], shape[3]
            )));
        }
        let p = |idx: usize| bound.ids[idx];

        // timestep embedding [N, th]
        let n = shape[0];
        let mut emb = Array2::<f64>::zeros((n, self.cfg.time_embed_dim));
        for (ni, &t) in taus.iter().enumerate() {
            for (j, v) in sinusoidal_embedding(t, self.cfg.time_embed_dim)
                .into_iter()
                .enumerate()
            {
                emb[[ni, j]] = v;
            }
        }
        let emb = tape.constant(emb.into_dyn());
        let te = tape.linear(emb, p(self.time_l1.0), p(self.time_l1.1));
        let te = tape.silu(te);
        let temb = tape.linear(te, p(self.time_l2.0), p(self.time_l2.1));

        // encoder
        let mut h = tape.conv2d(x, p(self.stem.0), Some(p(self.stem.1)), 1, 1);
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for l in 0..self.cfg.levels {
            h = self.res_block(tape, bound, &self.enc_blocks[l], h, Some(temb));
            skips.push(h);
            if l + 1 < self.cfg.levels {
                let (dw, db) = self.downs[l];
                h = tape.conv2d(h, p(dw), Some(p(db)), 2, 1);
            }
        }

        if let (Some(def), Some(ctx_tokens)) = (&self.ctx_attn, ctx) {
            h = self.ctx_attend(tape, bound, def, h, ctx_tokens);
        }

        // decoder with taps
        let mut taps = Vec::with_capacity(self.cfg.decoder_blocks());
        for li in 0..self.cfg.levels {
            let level = self.cfg.levels - 1 - li;
            let skip = skips[level];
            for b in 0..self.cfg.blocks_per_level {
                let idx = li * self.cfg.blocks_per_level + b;
                let input = if b == 0 {
                    tape.concat_channels(h, skip)
                } else {
                    h
                };
                h = self.res_block(tape, bound, &self.dec_blocks[idx], input, Some(temb));
                taps.push(h);
            }
            if level > 0 {
                let up = tape.nearest_up2(h);
                let (uw, ub) = self.ups[li];
                h = tape.conv2d(up, p(uw), Some(p(ub)), 1, 1);
            }
        }

        let out = tape.group_norm(h, p(self.head_gn.0), p(self.head_gn.1), GN_GROUPS, GN_EPS);
        let out = tape.silu(out);
        let eps = tape.conv2d(out, p(self.head_conv.0), Some(p(self.head_conv.1)), 1, 1);
        Ok((eps, taps))
    }

    /// Inference helper: single sample `[C,h,w]`, no gradients.
    pub fn infer_single(
        &self,
        x: &Arr,
        tau: usize,
        ctx: Option<&Array2<f64>>,
    ) -> Result<(Arr, DecoderTaps)> {
        let s = x.shape();
        let mut tape = Tape::inference();
        let bound = self.params.bind(&mut tape, false);
        let batched = x
            .clone()
            .into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]]))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let xid = tape.constant(batched);
        let (eps, taps) = self.forward(&mut tape, &bound, xid, &[tau], ctx)?;
        let eps_single = tape.value(eps).index_axis(ndarray::Axis(0), 0).to_owned();
        let tap_arrs = taps
            .iter()
            .map(|&t| tape.value(t).index_axis(ndarray::Axis(0), 0).to_owned())
            .collect();
        Ok((
            eps_single,
            DecoderTaps {
                taps: tap_arrs,
                timestep: tau,
            },
        ))
    }
}

/// Expected tap resolutions for a square input of side `side`, coarse to
/// fine, mirroring the decoder layout.
pub fn expected_tap_sides(cfg: &UNetConfig, side: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for li in 0..cfg.levels {
        let level = cfg.levels - 1 - li;
        for _ in 0..cfg.blocks_per_level {
            out.push(side >> level);
        }
    }
    out
}
