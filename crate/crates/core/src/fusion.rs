//! Decoders, weighted fusion and constraint-preserving upsampling.

use flowsr_tensor::{Graph, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::layers::{from_tokens, to_tokens, AttentionBlock, Conv, DeformableConvLayer};
use crate::model::ModelConfig;
use crate::params::{Bound, ParamId, ParamStore};
use crate::{Error, Result};

/// Private decoders for each scale plus the interactive decoder.
#[derive(Clone, Debug)]
pub struct DecoderSet {
    pub neighborhood: Vec<DeformableConvLayer>,
    pub city: Vec<AttentionBlock>,
    pub interactive: Conv,
}

impl DecoderSet {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let neighborhood = (0..cfg.neighborhood_layers)
            .map(|l| DeformableConvLayer::new(store, rng, &format!("{name}.b.layer{l}"), c, c, cfg.kernel, cfg.dilation))
            .collect();
        let city = vec![AttentionBlock::new(store, rng, &format!("{name}.c.block0"), c, cfg.heads, cfg.ln_eps)?];
        let interactive = Conv::new(store, rng, &format!("{name}.bc"), 2 * c, c, 3, 1, false);
        Ok(Self { neighborhood, city, interactive })
    }

    /// `o^b`: deformable stack with ReLU between layers.
    pub fn decode_neighborhood<F: Real>(&self, g: &mut Graph<F>, b: &Bound, hb: Var) -> Result<Var> {
        let mut y = hb;
        for (k, layer) in self.neighborhood.iter().enumerate() {
            if k > 0 {
                y = g.relu(y);
            }
            y = layer.forward(g, b, y)?;
        }
        Ok(y)
    }

    /// `o^c`: attention blocks over the regions of `h^c`.
    pub fn decode_city<F: Real>(&self, g: &mut Graph<F>, b: &Bound, hc: Var) -> Result<Var> {
        let (h, w) = (g.shape(hc)[1], g.shape(hc)[2]);
        let mut t = to_tokens(g, hc)?;
        for block in &self.city {
            t = block.forward(g, b, t)?;
        }
        from_tokens(g, t, h, w)
    }

    /// `o^bc = conv(concat(h^b, h^c))`
    pub fn decode_interactive<F: Real>(&self, g: &mut Graph<F>, b: &Bound, hb: Var, hc: Var) -> Result<Var> {
        if g.shape(hb)[1..] != g.shape(hc)[1..] {
            return Err(Error::Dimension(format!(
                "interactive decoder: h^b {:?} and h^c {:?} differ spatially",
                g.shape(hb),
                g.shape(hc)
            )));
        }
        let cat = g.concat(&[hb, hc], 0)?;
        self.interactive.forward(g, b, cat)
    }
}

/// Three logits whose softmax weights the decoder outputs.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub logits: ParamId,
}

impl FusionWeights {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str) -> Self {
        Self { logits: store.add(format!("{name}.logits"), Tensor::zeros(&[3])) }
    }

    pub fn weights<F: Real>(&self, g: &mut Graph<F>, b: &Bound) -> Result<Var> {
        Ok(g.softmax(b.var(self.logits), 0)?)
    }

    /// Effective weights for the stored logits.
    pub fn effective<F: Real>(&self, store: &ParamStore<F>) -> [f64; 3] {
        let l: Vec<f64> = store.get(self.logits).data().iter().map(|v| v.as_f64()).collect();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        [e[0] / z, e[1] / z, e[2] / z]
    }
}

/// `r = w₁·o^b + w₂·o^c + w₃·o^bc`
pub fn fuse<F: Real>(g: &mut Graph<F>, weights: Var, ob: Var, oc: Var, obc: Var) -> Result<Var> {
    Ok(g.weighted_sum(weights, &[ob, oc, obc])?)
}

/// Convolution from `C` channels to `S²` allocation logits.
#[derive(Clone, Debug)]
pub struct UpsamplerHead {
    pub conv: Conv,
    pub scale: usize,
}

impl UpsamplerHead {
    /// Weights start at zero so an untrained head allocates uniformly.
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let s2 = cfg.upscale * cfg.upscale;
        Self { conv: Conv::new(store, rng, name, cfg.channels, s2, 3, 1, true), scale: cfg.upscale }
    }

    pub fn logits<F: Real>(&self, g: &mut Graph<F>, b: &Bound, r: Var) -> Result<Var> {
        self.conv.forward(g, b, r)
    }
}

/// Allocates every raw coarse value over its `S×S` subregions with the
/// softmax of its `S²` logits. `logits[S²×H×W]`, `coarse[H×W]` →
/// `[1×SH×SW]`.
pub fn m2_normalize<F: Real>(g: &mut Graph<F>, logits: Var, coarse: Var, s: usize) -> Result<Var> {
    let sl = g.shape(logits).to_vec();
    if sl.len() != 3 || sl[0] != s * s || g.shape(coarse) != &sl[1..] {
        return Err(Error::Dimension(format!(
            "m2_normalize: logits {:?} and coarse {:?} do not match factor {s}",
            sl,
            g.shape(coarse)
        )));
    }
    let a = g.softmax(logits, 0)?;
    let alloc = g.mul_spatial(a, coarse)?;
    Ok(g.pixel_shuffle(alloc, s)?)
}

/// Value-level [`m2_normalize`] on row-major buffers; returns the `SH×SW` map.
pub fn m2_normalize_values<F: Real>(logits: &[F], coarse: &[F], h: usize, w: usize, s: usize) -> Result<Vec<F>> {
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(vec![s * s, h, w], logits.to_vec())?);
    let c = g.constant(Tensor::new(vec![h, w], coarse.to_vec())?);
    let y = m2_normalize(&mut g, l, c, s)?;
    Ok(g.value(y).data().to_vec())
}
