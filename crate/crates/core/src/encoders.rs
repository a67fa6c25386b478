//! Neighborhood (deformable convolution) and city (self-attention) encoders.

use flowsr_tensor::{Graph, Real, Var};
use rand_chacha::ChaCha8Rng;

use crate::layers::{from_tokens, positional_encoding, to_tokens, AttentionBlock, Conv, DeformableConvLayer};
use crate::model::ModelConfig;
use crate::params::{Bound, ParamStore};
use crate::Result;

/// 1×1 channel lift followed by ReLU-activated deformable layers.
#[derive(Clone, Debug)]
pub struct NeighborhoodEncoder {
    pub lift: Conv,
    pub layers: Vec<DeformableConvLayer>,
}

impl NeighborhoodEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let lift = Conv::new(store, rng, &format!("{name}.lift"), 1, c, 1, 1, false);
        let layers = (0..cfg.neighborhood_layers)
            .map(|l| DeformableConvLayer::new(store, rng, &format!("{name}.layer{l}"), c, c, cfg.kernel, cfg.dilation))
            .collect();
        Self { lift, layers }
    }

    /// `x[1×H×W] → h^b[C×H×W]`, elementwise non-negative.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let mut y = self.lift.forward(g, b, x)?;
        for layer in &self.layers {
            let z = layer.forward(g, b, y)?;
            y = g.relu(z);
        }
        Ok(y)
    }
}

/// 1×1 channel lift, fixed positional table, then attention blocks over
/// all `H·W` regions.
#[derive(Clone, Debug)]
pub struct CityEncoder {
    pub lift: Conv,
    pub blocks: Vec<AttentionBlock>,
}

impl CityEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let lift = Conv::new(store, rng, &format!("{name}.lift"), 1, c, 1, 1, false);
        let blocks = (0..cfg.city_blocks)
            .map(|l| AttentionBlock::new(store, rng, &format!("{name}.block{l}"), c, cfg.heads, cfg.ln_eps))
            .collect::<Result<_>>()?;
        Ok(Self { lift, blocks })
    }

    /// Lifted input plus the positional table, `[C×H×W]`.
    pub fn positional<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let y = self.lift.forward(g, b, x)?;
        let s = g.shape(y).to_vec();
        let pe = g.constant(positional_encoding(s[0], s[1], s[2]));
        Ok(g.add(y, pe)?)
    }

    /// `x[1×H×W] → h^c[C×H×W]`
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, x: Var) -> Result<Var> {
        let xp = self.positional(g, b, x)?;
        let (h, w) = (g.shape(xp)[1], g.shape(xp)[2]);
        let mut t = to_tokens(g, xp)?;
        for block in &self.blocks {
            t = block.forward(g, b, t)?;
        }
        from_tokens(g, t, h, w)
    }
}
