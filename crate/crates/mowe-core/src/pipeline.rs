//! Embedding fusion, adapter downsampling, projection, and the tiny
//! LoRA-adapted decoder with the composite objective.
//!
//! The fused per-frame embeddings are downsampled to a fixed number of
//! audio tokens, projected into decoder space, and prepended to the
//! embedded instruction and target tokens. The decoder is a small causal
//! pre-norm transformer whose base weights stay frozen (it stands in for
//! a pretrained language model); only low-rank adapters on the attention
//! projections train. Cross-entropy is masked to the positions that
//! predict target tokens.

use serde::{Deserialize, Serialize};

use crate::error::{MoweError, Result};
use crate::numerics::params::{ParamStore, Session};
use crate::numerics::rng::Rng;
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

/// Weight of the routing loss inside the total objective.
pub const MOWE_LOSS_WEIGHT: f64 = 0.1;

const NEG_INF_MASK: f64 = -1e30;

// ── fusion ──────────────────────────────────────────────────────────

/// Feature-concatenate the base embedding with the mixture embedding.
/// Token count is unchanged.
pub fn fuse_embeddings(sess: &mut Session, z_base: Var, z_mowe: Var) -> Result<Var> {
    sess.tape.concat_feature(z_base, z_mowe)
}

// ── adapter ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    GroupedLinearGelu,
    StridedConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    /// Grouped variant: exact number of output tokens.
    pub target_tokens: usize,
    /// Strided-conv variant.
    pub kernel: usize,
    pub stride: usize,
    pub d_out: usize,
}

pub const ADAPTER_PREFIX: &str = "adapter";

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec::grouped(100, 64)
    }
}

impl AdapterSpec {
    pub fn grouped(target_tokens: usize, d_out: usize) -> Self {
        AdapterSpec {
            kind: AdapterKind::GroupedLinearGelu,
            target_tokens,
            kernel: 8,
            stride: 8,
            d_out,
        }
    }

    pub fn strided_conv(kernel: usize, stride: usize, d_out: usize) -> Self {
        AdapterSpec {
            kind: AdapterKind::StridedConv,
            target_tokens: 0,
            kernel,
            stride,
            d_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AdapterKind::GroupedLinearGelu if self.target_tokens == 0 => Err(MoweError::config(
                "grouped adapter needs a positive token count",
            )),
            AdapterKind::StridedConv if self.kernel == 0 || self.stride == 0 => {
                Err(MoweError::config("conv adapter needs positive kernel and stride"))
            }
            _ if self.d_out == 0 => Err(MoweError::config("adapter output dim must be positive")),
            _ => Ok(()),
        }
    }

    /// Tokens emitted for a sequence of `s` frames.
    pub fn output_tokens(&self, s: usize) -> usize {
        match self.kind {
            AdapterKind::GroupedLinearGelu => self.target_tokens,
            AdapterKind::StridedConv => s.div_ceil(self.stride),
        }
    }

    /// Frames per output token in the grouped variant, after padding.
    pub fn group_size(&self, s: usize) -> usize {
        s.div_ceil(self.target_tokens)
    }

    pub fn init_params(&self, d_in: usize, seq_len: usize, store: &mut ParamStore, seed: u64) {
        let rows = match self.kind {
            AdapterKind::GroupedLinearGelu => self.group_size(seq_len) * d_in,
            AdapterKind::StridedConv => self.kernel * d_in,
        };
        let mut rng = Rng::new(seed, "init.adapter");
        let scale = 1.0 / (rows as f64).sqrt();
        store.insert(
            &format!("{ADAPTER_PREFIX}.w"),
            Tensor::randn(vec![rows, self.d_out], scale, &mut rng),
            true,
        );
        store.insert(&format!("{ADAPTER_PREFIX}.b"), Tensor::zeros(vec![self.d_out]), true);
    }

    /// Downsample `[S×d] -> [output_tokens(S)×d_out]`.
    pub fn forward(&self, sess: &mut Session, z: Var) -> Result<Var> {
        let s = sess.tape.value(z).rows();
        let d = sess.tape.value(z).cols();
        let w = sess.param(&format!("{ADAPTER_PREFIX}.w"))?;
        let b = sess.param(&format!("{ADAPTER_PREFIX}.b"))?;
        match self.kind {
            AdapterKind::GroupedLinearGelu => {
                let t_a = self.target_tokens;
                if s < t_a {
                    return Err(MoweError::config(format!(
                        "sequence of {s} frames is shorter than the {t_a} adapter tokens; \
                         lower the adapter token count to at most {s} or switch to the \
                         strided-conv adapter"
                    )));
                }
                let g = self.group_size(s);
                let padded = sess.tape.pad_rows(z, g * t_a)?;
                let grouped = sess.tape.reshape(padded, vec![t_a, g * d])?;
                let lin = sess.tape.matmul(grouped, w)?;
                let biased = sess.tape.add_bias(lin, b)?;
                Ok(sess.tape.gelu(biased))
            }
            AdapterKind::StridedConv => {
                let n_out = s.div_ceil(self.stride);
                let required = (n_out - 1) * self.stride + self.kernel;
                let pad_right = required.saturating_sub(s);
                sess.tape.conv1d(z, w, b, self.kernel, self.stride, 0, pad_right)
            }
        }
    }
}

// ── projection ──────────────────────────────────────────────────────

pub const PROJ_PREFIX: &str = "proj";

pub fn init_projection(d_in: usize, d_out: usize, store: &mut ParamStore, seed: u64) {
    let mut rng = Rng::new(seed, "init.proj");
    let scale = 1.0 / (d_in as f64).sqrt();
    store.insert(
        &format!("{PROJ_PREFIX}.w"),
        Tensor::randn(vec![d_in, d_out], scale, &mut rng),
        true,
    );
    store.insert(&format!("{PROJ_PREFIX}.b"), Tensor::zeros(vec![d_out]), true);
}

/// Linear map into decoder embedding space.
pub fn project(sess: &mut Session, z: Var) -> Result<Var> {
    let w = sess.param(&format!("{PROJ_PREFIX}.w"))?;
    let b = sess.param(&format!("{PROJ_PREFIX}.b"))?;
    let lin = sess.tape.matmul(z, w)?;
    sess.tape.add_bias(lin, b)
}

// ── decoder ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Positional table size; an assembled sequence must fit.
    pub max_seq: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            vocab: 256,
            d_model: 64,
            layers: 2,
            heads: 4,
            lora_rank: 4,
            lora_alpha: 8.0,
            max_seq: 128,
        }
    }
}

pub const DEC_PREFIX: &str = "dec";

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.layers == 0 || self.heads == 0 {
            return Err(MoweError::config("decoder dims must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(MoweError::config(format!(
                "decoder width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.lora_rank == 0 {
            return Err(MoweError::config("adapter rank must be at least 1"));
        }
        Ok(())
    }

    /// All decoder-base weights are frozen; only the low-rank factors on
    /// the attention projections train.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let d = self.d_model;
        let frozen_mat = |store: &mut ParamStore, name: String, rows: usize, cols: usize, scale: f64| {
            let mut rng = Rng::new(seed, &format!("init.{name}"));
            store.insert(&name, Tensor::randn(vec![rows, cols], scale, &mut rng), false);
        };
        frozen_mat(store, format!("{DEC_PREFIX}.tok_embed"), self.vocab, d, 0.3);
        frozen_mat(store, format!("{DEC_PREFIX}.pos_embed"), self.max_seq, d, 0.1);
        for i in 0..self.layers {
            let lp = format!("{DEC_PREFIX}.layer{i}");
            for ln in ["ln1", "ln2"] {
                store.insert(&format!("{lp}.{ln}.gamma"), Tensor::new(vec![d], vec![1.0; d]).unwrap(), false);
                store.insert(&format!("{lp}.{ln}.beta"), Tensor::zeros(vec![d]), false);
            }
            let scale = 1.0 / (d as f64).sqrt();
            for proj in ["q", "k", "v", "o"] {
                frozen_mat(store, format!("{lp}.attn.{proj}.w"), d, d, scale);
                store.insert(&format!("{lp}.attn.{proj}.b"), Tensor::zeros(vec![d]), false);
                let mut rng = Rng::new(seed, &format!("init.{lp}.attn.{proj}.lora_a"));
                store.insert(
                    &format!("{lp}.attn.{proj}.lora_a"),
                    Tensor::randn(vec![self.lora_rank, d], scale, &mut rng),
                    true,
                );
                store.insert(
                    &format!("{lp}.attn.{proj}.lora_b"),
                    Tensor::zeros(vec![d, self.lora_rank]),
                    true,
                );
            }
            frozen_mat(store, format!("{lp}.ffn.in.w"), d, 4 * d, scale);
            store.insert(&format!("{lp}.ffn.in.b"), Tensor::zeros(vec![4 * d]), false);
            frozen_mat(store, format!("{lp}.ffn.out.w"), 4 * d, d, 1.0 / (4.0 * d as f64).sqrt());
            store.insert(&format!("{lp}.ffn.out.b"), Tensor::zeros(vec![d]), false);
        }
        store.insert(&format!("{DEC_PREFIX}.final_ln.gamma"), Tensor::new(vec![d], vec![1.0; d]).unwrap(), false);
        store.insert(&format!("{DEC_PREFIX}.final_ln.beta"), Tensor::zeros(vec![d]), false);
        frozen_mat(store, format!("{DEC_PREFIX}.head.w"), d, self.vocab, 1.0 / (d as f64).sqrt());
        store.insert(&format!("{DEC_PREFIX}.head.b"), Tensor::zeros(vec![self.vocab]), false);
    }

    /// Frozen linear plus trainable low-rank path:
    /// x·W + b + (α/r)·x·B·A.
    fn lora_linear(&self, sess: &mut Session, prefix: &str, x: Var) -> Result<Var> {
        let w = sess.param(&format!("{prefix}.w"))?;
        let b = sess.param(&format!("{prefix}.b"))?;
        let lora_a = sess.param(&format!("{prefix}.lora_a"))?;
        let lora_b = sess.param(&format!("{prefix}.lora_b"))?;
        let base = sess.tape.matmul(x, w)?;
        let base = sess.tape.add_bias(base, b)?;
        let xb = sess.tape.matmul(x, lora_b)?;
        let xba = sess.tape.matmul(xb, lora_a)?;
        let low_rank = sess.tape.scale(xba, self.lora_alpha / self.lora_rank as f64);
        sess.tape.add(base, low_rank)
    }

    fn attention(&self, sess: &mut Session, layer: usize, x: Var, mask: Var) -> Result<Var> {
        let lp = format!("{DEC_PREFIX}.layer{layer}.attn");
        let q = self.lora_linear(sess, &format!("{lp}.q"), x)?;
        let k = self.lora_linear(sess, &format!("{lp}.k"), x)?;
        let v = self.lora_linear(sess, &format!("{lp}.v"), x)?;
        let d_head = self.d_model / self.heads;
        let mut ctx: Option<Var> = None;
        for h in 0..self.heads {
            let qh = sess.tape.slice_cols(q, h * d_head, d_head)?;
            let kh = sess.tape.slice_cols(k, h * d_head, d_head)?;
            let vh = sess.tape.slice_cols(v, h * d_head, d_head)?;
            let scores = sess.tape.matmul_transb(qh, kh)?;
            let scaled = sess.tape.scale(scores, 1.0 / (d_head as f64).sqrt());
            let masked = sess.tape.add(scaled, mask)?;
            let probs = sess.tape.softmax(masked)?;
            let ctx_h = sess.tape.matmul(probs, vh)?;
            ctx = Some(match ctx {
                None => ctx_h,
                Some(prev) => sess.tape.concat_feature(prev, ctx_h)?,
            });
        }
        self.lora_linear(sess, &format!("{lp}.o"), ctx.expect("at least one head"))
    }

    fn ffn(&self, sess: &mut Session, layer: usize, x: Var) -> Result<Var> {
        let lp = format!("{DEC_PREFIX}.layer{layer}.ffn");
        let w1 = sess.param(&format!("{lp}.in.w"))?;
        let b1 = sess.param(&format!("{lp}.in.b"))?;
        let w2 = sess.param(&format!("{lp}.out.w"))?;
        let b2 = sess.param(&format!("{lp}.out.b"))?;
        let h = sess.tape.matmul(x, w1)?;
        let h = sess.tape.add_bias(h, b1)?;
        let h = sess.tape.gelu(h);
        let out = sess.tape.matmul(h, w2)?;
        sess.tape.add_bias(out, b2)
    }

    fn layer_norm(&self, sess: &mut Session, name: &str, x: Var) -> Result<Var> {
        let gamma = sess.param(&format!("{name}.gamma"))?;
        let beta = sess.param(&format!("{name}.beta"))?;
        sess.tape.layer_norm(x, gamma, beta, 1e-5)
    }

    /// Causal decode over audio tokens ++ instruction ++ target.
    /// Returns logits `[T×vocab]`.
    pub fn decode(&self, sess: &mut Session, batch: &TokenBatch) -> Result<Var> {
        let t_a = sess.tape.value(batch.audio_tokens).rows();
        let d = sess.tape.value(batch.audio_tokens).cols();
        if d != self.d_model {
            return Err(MoweError::invalid(format!(
                "audio tokens are {d} wide, decoder expects {}",
                self.d_model
            )));
        }
        let total = t_a + batch.text_ids.len();
        if total > self.max_seq {
            return Err(MoweError::config(format!(
                "assembled sequence of {total} tokens exceeds the positional table ({})",
                self.max_seq
            )));
        }

        let tok_embed = sess.param(&format!("{DEC_PREFIX}.tok_embed"))?;
        let text = sess.tape.embedding(tok_embed, &batch.text_ids)?;
        let x = sess.tape.concat_sequence(batch.audio_tokens, text)?;
        let pos_embed = sess.param(&format!("{DEC_PREFIX}.pos_embed"))?;
        let pos = sess.tape.slice_rows(pos_embed, 0, total)?;
        let mut x = sess.tape.add(x, pos)?;

        let mask = causal_mask(sess, total);
        for i in 0..self.layers {
            let normed = self.layer_norm(sess, &format!("{DEC_PREFIX}.layer{i}.ln1"), x)?;
            let att = self.attention(sess, i, normed, mask)?;
            x = sess.tape.add(x, att)?;
            let normed2 = self.layer_norm(sess, &format!("{DEC_PREFIX}.layer{i}.ln2"), x)?;
            let ff = self.ffn(sess, i, normed2)?;
            x = sess.tape.add(x, ff)?;
        }
        let x = self.layer_norm(sess, &format!("{DEC_PREFIX}.final_ln"), x)?;
        let head_w = sess.param(&format!("{DEC_PREFIX}.head.w"))?;
        let head_b = sess.param(&format!("{DEC_PREFIX}.head.b"))?;
        let logits = sess.tape.matmul(x, head_w)?;
        sess.tape.add_bias(logits, head_b)
    }
}

fn causal_mask(sess: &mut Session, t: usize) -> Var {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = NEG_INF_MASK;
        }
    }
    let mask = Tensor::new(vec![t, t], data).expect("mask shape");
    sess.constant(mask, "causal.mask")
}

// ── token assembly ──────────────────────────────────────────────────

/// One decoder input: projected audio tokens followed by instruction and
/// target token ids, with the loss mask over positions that predict
/// target tokens.
pub struct TokenBatch {
    pub audio_tokens: Var,
    /// Instruction ++ target ids, embedded decoder-side.
    pub text_ids: Vec<u32>,
    /// Per-position next-token targets (zero where unsupervised).
    pub targets_full: Vec<u32>,
    /// True exactly at positions whose next token is a target token.
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(
        sess: &Session,
        audio_tokens: Var,
        instruction: &[u32],
        target: &[u32],
    ) -> Result<TokenBatch> {
        if target.is_empty() {
            return Err(MoweError::invalid("token batch: empty target sequence"));
        }
        let t_a = sess.tape.value(audio_tokens).rows();
        let mut text_ids = Vec::with_capacity(instruction.len() + target.len());
        text_ids.extend_from_slice(instruction);
        text_ids.extend_from_slice(target);
        let total = t_a + text_ids.len();
        let first_target = t_a + instruction.len();
        let mut targets_full = vec![0u32; total];
        let mut mask = vec![false; total];
        for (y, &tok) in target.iter().enumerate() {
            // position first_target + y − 1 predicts target[y]
            let p = first_target + y - 1;
            targets_full[p] = tok;
            mask[p] = true;
        }
        Ok(TokenBatch {
            audio_tokens,
            text_ids,
            targets_full,
            mask,
        })
    }
}

// ── losses ──────────────────────────────────────────────────────────

/// Mean cross-entropy over the masked target positions.
pub fn loss_next_token(sess: &mut Session, logits: Var, batch: &TokenBatch) -> Result<Var> {
    sess.tape
        .cross_entropy_rows(logits, &batch.targets_full, &batch.mask)
}

/// L = L_next-token + weight·L_MoWE. Without routers the second term is
/// absent.
pub fn loss_total(
    sess: &mut Session,
    next_token: Var,
    mowe: Option<Var>,
    weight: f64,
) -> Result<Var> {
    match mowe {
        None => Ok(next_token),
        Some(m) => {
            let scaled = sess.tape.scale(m, weight);
            sess.tape.add(next_token, scaled)
        }
    }
}
