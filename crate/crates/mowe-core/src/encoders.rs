//! The strong base encoder and the pool of weak encoders.
//!
//! Every encoder is the same tiny shape: a stack of per-timestep
//! linear→GELU blocks, one temporal convolution (kernel 3, stride 1,
//! same-padded) so neighboring frames mix, and a linear projection to the
//! encoder's native width. Weak encoders whose native width differs from
//! the pool's common width are linearly interpolated to it, so the mixture
//! always concatenates like with like. Sequence length is preserved
//! throughout.

use serde::{Deserialize, Serialize};

use crate::error::{MoweError, Result};
use crate::numerics::params::{ParamStore, Session};
use crate::numerics::rng::Rng;
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Base,
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub kind: EncoderKind,
    pub d_in: usize,
    /// Effective output width: d_base for the base encoder, the pool-wide
    /// d_weak for weak encoders.
    pub d_out: usize,
    pub hidden: usize,
    /// Number of linear→GELU blocks (including the input block).
    pub layers: usize,
    /// Width the encoder natively produces; interpolated to `d_out` when
    /// they differ.
    pub d_native: usize,
}

pub const CONV_KERNEL: usize = 3;

impl EncoderSpec {
    pub fn base(d_in: usize, d_out: usize, hidden: usize, layers: usize) -> Self {
        EncoderSpec {
            name: "base".to_string(),
            kind: EncoderKind::Base,
            d_in,
            d_out,
            hidden,
            layers,
            d_native: d_out,
        }
    }

    pub fn weak(k: usize, d_in: usize, d_weak: usize, hidden: usize, layers: usize) -> Self {
        EncoderSpec {
            name: format!("weak{k}"),
            kind: EncoderKind::Weak,
            d_in,
            d_out: d_weak,
            hidden,
            layers,
            d_native: d_weak,
        }
    }

    pub fn with_native(mut self, d_native: usize) -> Self {
        self.d_native = d_native;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.d_in == 0
            || self.d_out == 0
            || self.hidden == 0
            || self.layers == 0
            || self.d_native == 0
        {
            return Err(MoweError::invalid(format!(
                "encoder {}: all dims and layer count must be positive",
                self.name
            )));
        }
        Ok(())
    }

    /// Analytic trainable-parameter count (weights + biases).
    pub fn count_params(&self) -> usize {
        let h = self.hidden;
        let blocks = self.d_in * h + h + (self.layers - 1) * (h * h + h);
        let conv = CONV_KERNEL * h * h + h;
        let out = h * self.d_native + self.d_native;
        blocks + conv + out
    }

    /// Insert this encoder's parameters under `prefix` (e.g. "enc.base").
    pub fn init_params(&self, prefix: &str, store: &mut ParamStore, seed: u64) {
        let h = self.hidden;
        let lin = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
            let mut rng = Rng::new(seed, &format!("init.{name}"));
            let scale = 1.0 / (rows as f64).sqrt();
            store.insert(&format!("{name}.w"), Tensor::randn(vec![rows, cols], scale, &mut rng), true);
            store.insert(&format!("{name}.b"), Tensor::zeros(vec![cols]), true);
        };
        lin(store, format!("{prefix}.in"), self.d_in, h);
        for i in 1..self.layers {
            lin(store, format!("{prefix}.block{i}"), h, h);
        }
        lin(store, format!("{prefix}.conv"), CONV_KERNEL * h, h);
        lin(store, format!("{prefix}.out"), h, self.d_native);
    }

    /// Forward pass: `[S×d_in] -> [S×d_out]`, S preserved.
    pub fn forward(&self, prefix: &str, sess: &mut Session, input: Var) -> Result<Var> {
        let mut x = input;
        for i in 0..self.layers {
            let name = if i == 0 {
                format!("{prefix}.in")
            } else {
                format!("{prefix}.block{i}")
            };
            let w = sess.param(&format!("{name}.w"))?;
            let b = sess.param(&format!("{name}.b"))?;
            let lin = sess.tape.matmul(x, w)?;
            let biased = sess.tape.add_bias(lin, b)?;
            x = sess.tape.gelu(biased);
        }
        let cw = sess.param(&format!("{prefix}.conv.w"))?;
        let cb = sess.param(&format!("{prefix}.conv.b"))?;
        let conv = sess.tape.conv1d(x, cw, cb, CONV_KERNEL, 1, 1, 1)?;
        x = sess.tape.gelu(conv);
        let ow = sess.param(&format!("{prefix}.out.w"))?;
        let ob = sess.param(&format!("{prefix}.out.b"))?;
        let lin = sess.tape.matmul(x, ow)?;
        x = sess.tape.add_bias(lin, ob)?;
        if self.d_native != self.d_out {
            x = sess.tape.interpolate_features(x, self.d_out)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderPool {
    pub base: EncoderSpec,
    pub weak: Vec<EncoderSpec>,
}

/// Per-encoder parameter counts plus the size ratio the pool guarantees.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCounts {
    pub base: usize,
    pub weak: Vec<usize>,
    pub base_to_largest_weak: f64,
}

impl EncoderPool {
    pub fn new(base: EncoderSpec, weak: Vec<EncoderSpec>) -> Result<Self> {
        let pool = EncoderPool { base, weak };
        pool.validate()?;
        Ok(pool)
    }

    /// Default pool: 64-wide base over a 96-wide 3-block trunk, M weak
    /// encoders at 16 wide over a 24-wide 2-block trunk.
    pub fn default_pool(d_in: usize, m: usize) -> Result<Self> {
        let base = EncoderSpec::base(d_in, 64, 96, 3);
        let weak = (0..m)
            .map(|k| EncoderSpec::weak(k, d_in, 16, 24, 2))
            .collect();
        EncoderPool::new(base, weak)
    }

    pub fn m(&self) -> usize {
        self.weak.len()
    }

    pub fn d_weak(&self) -> usize {
        self.weak.first().map(|w| w.d_out).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weak.is_empty() {
            return Err(MoweError::invalid("encoder pool needs at least one weak encoder"));
        }
        self.base.validate()?;
        if self.base.kind != EncoderKind::Base {
            return Err(MoweError::invalid("pool base slot holds a non-base spec"));
        }
        let d_weak = self.weak[0].d_out;
        let base_count = self.base.count_params();
        for (k, w) in self.weak.iter().enumerate() {
            w.validate()?;
            if w.kind != EncoderKind::Weak {
                return Err(MoweError::invalid(format!("pool weak slot {k} holds a non-weak spec")));
            }
            if w.d_in != self.base.d_in {
                return Err(MoweError::invalid(format!(
                    "weak encoder {k} reads {} input dims, base reads {}",
                    w.d_in, self.base.d_in
                )));
            }
            if w.d_out != d_weak {
                return Err(MoweError::invalid(format!(
                    "weak encoder {k} has effective width {}, pool width is {d_weak}",
                    w.d_out
                )));
            }
            let wc = w.count_params();
            if base_count < 10 * wc {
                return Err(MoweError::invalid(format!(
                    "base encoder ({base_count} params) is under 10× weak encoder {k} ({wc} params)"
                )));
            }
        }
        Ok(())
    }

    pub fn weak_prefix(k: usize) -> String {
        format!("enc.weak{k}")
    }

    pub const BASE_PREFIX: &'static str = "enc.base";

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        self.base.init_params(Self::BASE_PREFIX, store, seed);
        for (k, w) in self.weak.iter().enumerate() {
            w.init_params(&Self::weak_prefix(k), store, seed);
        }
    }

    pub fn encode_base(&self, sess: &mut Session, input: Var) -> Result<Var> {
        self.base.forward(Self::BASE_PREFIX, sess, input)
    }

    pub fn encode_weak(&self, sess: &mut Session, k: usize, input: Var) -> Result<Var> {
        let spec = self.weak.get(k).ok_or(MoweError::IndexOutOfRange {
            what: "weak encoder",
            index: k,
            len: self.weak.len(),
        })?;
        spec.forward(&Self::weak_prefix(k), sess, input)
    }

    pub fn count_params(&self) -> ParamCounts {
        let base = self.base.count_params();
        let weak: Vec<usize> = self.weak.iter().map(|w| w.count_params()).collect();
        let largest = weak.iter().copied().max().unwrap_or(1).max(1);
        ParamCounts {
            base,
            weak,
            base_to_largest_weak: base as f64 / largest as f64,
        }
    }
}
