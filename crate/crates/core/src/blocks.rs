//! Shared transformer building blocks: pre-norm multi-head attention and
//! feed-forward residual layers.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::{
    add, attention, concat_cols, layer_norm, matmul, reshape, rope, silu, slice_cols, AttnMask,
    Tensor,
};

pub const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10000.0;

/// Broadcast a bias vector [d] over n rows.
pub fn broadcast_rows(bias: &Tensor, n: usize) -> Tensor {
    let d = bias.len();
    let ones = Tensor::new(vec![1.0; n], &[n, 1], false);
    matmul(&ones, &reshape(bias, &[1, d])).expect("broadcast shapes")
}

/// Affine map of row vectors: x [n, d_in] * w [d_in, d_out] + b.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = matmul(x, w)?;
    let n = y.shape()[0];
    Ok(add(&y, &broadcast_rows(b, n)))
}

/// Pre-norm residual multi-head attention block. Queries come from `x`,
/// keys/values from `kv` (which equals the normalized `x` for
/// self-attention). Optional rotary positions apply to both q and k.
pub struct AttnBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub heads: usize,
}

impl AttnBlock {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> AttnBlock {
        assert_eq!(d_model % heads, 0, "d_model must be divisible by heads");
        AttnBlock {
            wq: ps.init(&format!("{prefix}.wq"), &[d_model, d_model], d_model, rng),
            wk: ps.init(&format!("{prefix}.wk"), &[d_kv, d_model], d_kv, rng),
            wv: ps.init(&format!("{prefix}.wv"), &[d_kv, d_model], d_kv, rng),
            wo: ps.init(&format!("{prefix}.wo"), &[d_model, d_model], d_model, rng),
            ln_gain: ps.init_ones(&format!("{prefix}.ln_gain"), &[d_model]),
            ln_bias: ps.init_zeros(&format!("{prefix}.ln_bias"), &[d_model]),
            heads,
        }
    }

    /// Self-attention over `x` with optional mask and rotary positions.
    pub fn self_forward(
        &self,
        x: &Tensor,
        mask: Option<&AttnMask>,
        positions: Option<&[f64]>,
    ) -> Result<Tensor> {
        let xn = layer_norm(x, &self.ln_gain, &self.ln_bias, LN_EPS)?;
        self.attend(x, &xn, &xn, mask, positions)
    }

    /// Cross-attention: queries from `x` (pre-normed), keys/values from `kv`.
    pub fn cross_forward(&self, x: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let xn = layer_norm(x, &self.ln_gain, &self.ln_bias, LN_EPS)?;
        self.attend(x, &xn, kv, None, None)
    }

    fn attend(
        &self,
        residual: &Tensor,
        q_in: &Tensor,
        kv: &Tensor,
        mask: Option<&AttnMask>,
        positions: Option<&[f64]>,
    ) -> Result<Tensor> {
        let q = matmul(q_in, &self.wq)?;
        let k = matmul(kv, &self.wk)?;
        let v = matmul(kv, &self.wv)?;
        let d_model = self.wq.shape()[1];
        let dh = d_model / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut qh = slice_cols(&q, h * dh, (h + 1) * dh);
            let mut kh = slice_cols(&k, h * dh, (h + 1) * dh);
            if let Some(pos) = positions {
                qh = rope(&qh, pos, ROPE_BASE);
                kh = rope(&kh, pos, ROPE_BASE);
            }
            let vh = slice_cols(&v, h * dh, (h + 1) * dh);
            outs.push(attention(&qh, &kh, &vh, mask)?);
        }
        let merged = concat_cols(&outs);
        Ok(add(residual, &matmul(&merged, &self.wo)?))
    }
}

/// Pre-norm residual feed-forward block with SiLU activation.
pub struct Ffn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl Ffn {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Ffn {
        Ffn {
            w1: ps.init(&format!("{prefix}.w1"), &[d, hidden], d, rng),
            b1: ps.init_zeros(&format!("{prefix}.b1"), &[hidden]),
            w2: ps.init(&format!("{prefix}.w2"), &[hidden, d], hidden, rng),
            b2: ps.init_zeros(&format!("{prefix}.b2"), &[d]),
            ln_gain: ps.init_ones(&format!("{prefix}.ln_gain"), &[d]),
            ln_bias: ps.init_zeros(&format!("{prefix}.ln_bias"), &[d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xn = layer_norm(x, &self.ln_gain, &self.ln_bias, LN_EPS)?;
        let h = silu(&linear(&xn, &self.w1, &self.b1)?);
        Ok(add(x, &linear(&h, &self.w2, &self.b2)?))
    }
}
