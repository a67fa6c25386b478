//! Building blocks: convolutions, deformable convolutions, attention.

use flowsr_tensor::{Graph, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::{Error, Result};

/// Stride-1 convolution with bias and zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        zero_init: bool,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let w = if zero_init {
            Tensor::zeros(&shape)
        } else {
            glorot(rng, &shape, cin * kernel * kernel, cout * kernel * kernel)
        };
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, b.var(self.weight), self.padding, self.dilation)?;
        Ok(g.add_channel_bias(y, b.var(self.bias))?)
    }
}

/// Deformable convolution whose sampling offsets are predicted from its
/// input by a plain convolution with `2·k²` output channels.
///
/// The offset predictor starts at zero, so a fresh layer is an ordinary
/// convolution.
#[derive(Clone, Debug)]
pub struct DeformableConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub offset: Conv,
    pub padding: usize,
    pub dilation: usize,
    pub kernel: usize,
}

impl DeformableConvLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let taps = kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            glorot(rng, &[cout, cin, kernel, kernel], cin * taps, cout * taps),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        let offset = Conv::new(store, rng, &format!("{name}.offset"), cin, 2 * taps, kernel, dilation, true);
        Self { weight, bias, offset, padding: dilation * (kernel - 1) / 2, dilation, kernel }
    }

    /// Pre-activation output for input `x[C_in×H×W]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let off = self.offset.forward(g, b, x)?;
        self.forward_with_offsets(g, b, x, off)
    }

    /// Same as [`forward`](Self::forward) with externally supplied offsets.
    pub fn forward_with_offsets<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var, offsets: Var) -> Result<Var> {
        let y = g.deform_conv2d(x, offsets, b.var(self.weight), self.padding, self.dilation)?;
        Ok(g.add_channel_bias(y, b.var(self.bias))?)
    }
}

/// Multi-head self-attention followed by a residual connection and layer
/// norm: `LN(x + MHA(x))` over tokens `x[n×d]`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub heads: usize,
    pub eps: f64,
}

impl AttentionBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        eps: f64,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} is not divisible by {heads} heads")));
        }
        let mut mat = |n: &str| store.add(format!("{name}.{n}"), glorot(rng, &[d, d], d, d));
        let (wq, wk, wv, wo) = (mat("wq"), mat("wk"), mat("wv"), mat("wo"));
        let gamma = store.add(format!("{name}.ln.gamma"), Tensor::full(&[d], F::one()));
        let beta = store.add(format!("{name}.ln.beta"), Tensor::zeros(&[d]));
        Ok(Self { wq, wk, wv, wo, gamma, beta, heads, eps })
    }

    /// Attention output `z` and the per-head attention matrices.
    pub fn attention<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let d = g.shape(x)[1];
        let dh = d / self.heads;
        let q = g.matmul(x, b.var(self.wq))?;
        let k = g.matmul(x, b.var(self.wk))?;
        let v = g.matmul(x, b.var(self.wv))?;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = g.concat(&outs, 1)?;
        Ok((g.matmul(merged, b.var(self.wo))?, weights))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let (z, _) = self.attention(g, b, x)?;
        let s = g.add(x, z)?;
        Ok(g.layer_norm(s, b.var(self.gamma), b.var(self.beta), F::of(self.eps))?)
    }
}

/// Fixed 2-D sinusoidal table `[C×H×W]`. Channels cycle through
/// `sin(i·ω), cos(i·ω), sin(j·ω), cos(j·ω)` with `ω = 10000^(−4m/C)` for
/// the `m`-th group of four.
pub fn positional_encoding<F: Real>(channels: usize, h: usize, w: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        let m = c / 4;
        let omega = 10000f64.powf(-(4.0 * m as f64) / channels as f64);
        for i in 0..h {
            for j in 0..w {
                let v = match c % 4 {
                    0 => (i as f64 * omega).sin(),
                    1 => (i as f64 * omega).cos(),
                    2 => (j as f64 * omega).sin(),
                    _ => (j as f64 * omega).cos(),
                };
                data.push(F::of(v));
            }
        }
    }
    Tensor::new(vec![channels, h, w], data).expect("shape matches")
}

/// `[C×H×W] → [H·W×C]` token matrix.
pub fn to_tokens<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(g.transpose(flat)?)
}

/// `[H·W×C] → [C×H×W]`
pub fn from_tokens<F: Real>(g: &mut Graph<F>, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(t)[1];
    let tr = g.transpose(t)?;
    Ok(g.reshape(tr, &[c, h, w])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_table_phase_zero_and_distinct() {
        let pe = positional_encoding::<f64>(16, 8, 8);
        let at = |c: usize, i: usize, j: usize| pe.data()[(c * 8 + i) * 8 + j];
        for c in 0..16 {
            let expect = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(at(c, 0, 0), expect);
        }
        assert_eq!(pe, positional_encoding::<f64>(16, 8, 8));
        let vecs: Vec<Vec<f64>> =
            (0..64).map(|p| (0..16).map(|c| at(c, p / 8, p % 8)).collect()).collect();
        for a in 0..64 {
            for b in a + 1..64 {
                assert_ne!(vecs[a], vecs[b], "positions {a} and {b} collide");
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::default();
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        assert!(matches!(AttentionBlock::new(&mut store, &mut rng, "x", 6, 4, 1e-5), Err(Error::Config(_))));
    }
}
