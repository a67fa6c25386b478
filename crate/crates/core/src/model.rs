//! The full inference model: encoders, decoders, fusion and upsampler.

use flowsr_tensor::{Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{CityEncoder, NeighborhoodEncoder};
use crate::features::{FeatureMap, Scale};
use crate::fusion::{fuse, m2_normalize, DecoderSet, FusionWeights, UpsamplerHead};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scaler::ScalerParams;
use crate::{Error, Result};

pub const ENCODER_B: &str = "encoder_b";
pub const ENCODER_C: &str = "encoder_c";
pub const DECODERS: &str = "decoders";
pub const FUSION: &str = "fusion";
pub const UPSAMPLER: &str = "upsampler";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub neighborhood_layers: usize,
    pub heads: usize,
    pub city_blocks: usize,
    pub upscale: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            kernel: 3,
            dilation: 1,
            neighborhood_layers: 2,
            heads: 4,
            city_blocks: 2,
            upscale: 2,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.neighborhood_layers == 0 || self.city_blocks == 0 {
            return bad("model channels, neighborhood_layers and city_blocks must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.dilation == 0 {
            return bad("dilation must be positive".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("model width {} is not divisible by {} heads", self.channels, self.heads));
        }
        if !(1..=4).contains(&self.upscale) {
            return bad(format!("upscale factor {} must lie in 1..=4", self.upscale));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

/// Min-max scalers for model inputs and training targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scalers {
    pub coarse: ScalerParams,
    pub fine: ScalerParams,
}

/// Graph handles produced by one forward pass over a single frame.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Raw-unit fine prediction `[1×SH×SW]`.
    pub fine: Var,
    pub hb: Var,
    pub hc: Var,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub encoder_b: NeighborhoodEncoder,
    pub encoder_c: CityEncoder,
    pub decoders: DecoderSet,
    pub fusion: FusionWeights,
    pub upsampler: UpsamplerHead,
    pub scalers: Option<Scalers>,
}

impl<F: Real> Model<F> {
    /// Parameters are drawn from one stream seeded by `seed`, in the order
    /// encoder_b, encoder_c, decoders, fusion, upsampler.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let encoder_b = NeighborhoodEncoder::new(&mut store, &mut rng, ENCODER_B, &cfg);
        let encoder_c = CityEncoder::new(&mut store, &mut rng, ENCODER_C, &cfg)?;
        let decoders = DecoderSet::new(&mut store, &mut rng, DECODERS, &cfg)?;
        let fusion = FusionWeights::new(&mut store, FUSION);
        let upsampler = UpsamplerHead::new(&mut store, &mut rng, UPSAMPLER, &cfg);
        Ok(Self { cfg, store, encoder_b, encoder_c, decoders, fusion, upsampler, scalers: None })
    }

    pub fn with_scalers(mut self, scalers: Scalers) -> Self {
        self.scalers = Some(scalers);
        self
    }

    pub fn ids(&self, prefixes: &[&str]) -> Vec<ParamId> {
        let dotted: Vec<String> = prefixes.iter().map(|p| format!("{p}.")).collect();
        let refs: Vec<&str> = dotted.iter().map(String::as_str).collect();
        self.store.ids_with_prefix(&refs)
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn scalers(&self) -> Result<Scalers> {
        self.scalers.ok_or_else(|| Error::Usage("model scalers are not fitted".into()))
    }

    /// Scaled model input `[1×H×W]` and raw coarse values `[H×W]` as constants.
    pub fn inputs(&self, g: &mut Graph<F>, coarse_raw: &[f64], h: usize, w: usize) -> Result<(Var, Var)> {
        let sc = self.scalers()?.coarse;
        if coarse_raw.len() != h * w {
            return Err(Error::Dimension(format!("coarse frame of {} values is not {h}x{w}", coarse_raw.len())));
        }
        let scaled = coarse_raw.iter().map(|&v| F::of(sc.apply(v))).collect();
        let raw = coarse_raw.iter().map(|&v| F::of(v)).collect();
        let x = g.constant(Tensor::new(vec![1, h, w], scaled)?);
        let r = g.constant(Tensor::new(vec![h, w], raw)?);
        Ok((x, r))
    }

    /// Full pipeline on one coarse frame.
    pub fn forward(&self, g: &mut Graph<F>, b: &Bound, coarse_raw: &[f64], h: usize, w: usize) -> Result<Forward> {
        let (x, raw) = self.inputs(g, coarse_raw, h, w)?;
        let hb = self.encoder_b.forward(g, b, x)?;
        let hc = self.encoder_c.forward(g, b, x)?;
        let ob = self.decoders.decode_neighborhood(g, b, hb)?;
        let oc = self.decoders.decode_city(g, b, hc)?;
        let obc = self.decoders.decode_interactive(g, b, hb, hc)?;
        let wts = self.fusion.weights(g, b)?;
        let r = fuse(g, wts, ob, oc, obc)?;
        let logits = self.upsampler.logits(g, b, r)?;
        let fine = m2_normalize(g, logits, raw, self.cfg.upscale)?;
        Ok(Forward { fine, hb, hc })
    }

    /// Fine map `SH×SW` for one raw coarse frame `H×W`.
    pub fn infer_fine(&self, coarse_raw: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, &[]);
        let f = self.forward(&mut g, &b, coarse_raw, h, w)?;
        Ok(g.value(f.fine).data().iter().map(|v| v.as_f64()).collect())
    }

    fn encode_with(&self, coarse_raw: &[f64], h: usize, w: usize, scale: Scale) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, &[]);
        let (x, _) = self.inputs(&mut g, coarse_raw, h, w)?;
        let y = match scale {
            Scale::Neighborhood => self.encoder_b.forward(&mut g, &b, x)?,
            Scale::City => self.encoder_c.forward(&mut g, &b, x)?,
        };
        to_feature_map(&g, y, scale)
    }

    /// `h^b` for one raw coarse frame.
    pub fn neighborhood_encode(&self, coarse_raw: &[f64], h: usize, w: usize) -> Result<FeatureMap> {
        self.encode_with(coarse_raw, h, w, Scale::Neighborhood)
    }

    /// `h^c` for one raw coarse frame.
    pub fn city_encode(&self, coarse_raw: &[f64], h: usize, w: usize) -> Result<FeatureMap> {
        self.encode_with(coarse_raw, h, w, Scale::City)
    }

    /// Private decoder matching `scale` applied to `h`.
    pub fn decode_private(&self, h: &FeatureMap, scale: Scale) -> Result<FeatureMap> {
        if h.scale != scale {
            return Err(Error::Usage(format!("{:?} decoder applied to a {:?} feature map", scale, h.scale)));
        }
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, &[]);
        let data = h.data.iter().map(|&v| F::of(v)).collect();
        let x = g.constant(Tensor::new(vec![h.channels, h.height, h.width], data)?);
        let y = match scale {
            Scale::Neighborhood => self.decoders.decode_neighborhood(&mut g, &b, x)?,
            Scale::City => self.decoders.decode_city(&mut g, &b, x)?,
        };
        to_feature_map(&g, y, scale)
    }

    /// Overwrites every parameter with uniform noise in `[-amp, amp]`,
    /// including the zero-initialised offset predictors and upsampler.
    pub fn randomize(&mut self, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.all_ids() {
            for v in self.store.get_mut(id).data_mut() {
                *v = F::of(rng.gen_range(-amp..=amp));
            }
        }
    }

    /// Copies parameters under `prefix` from `other`, which must share the
    /// architecture.
    pub fn copy_from(&mut self, other: &Model<F>, prefix: &str) -> Result<()> {
        for id in self.ids(&[prefix]) {
            let name = self.store.name(id).to_string();
            let src = other
                .store
                .find(&name)
                .ok_or_else(|| Error::checkpoint(name.clone(), "missing from source model"))?;
            let t = other.store.get(src).clone();
            if t.shape() != self.store.get(id).shape() {
                return Err(Error::checkpoint(name, "shape differs from source model"));
            }
            *self.store.get_mut(id) = t;
        }
        Ok(())
    }
}

pub(crate) fn to_feature_map<F: Real>(g: &Graph<F>, y: Var, scale: Scale) -> Result<FeatureMap> {
    let s = g.shape(y);
    let (c, h, w) = (s[0], s[1], s[2]);
    FeatureMap::new(c, h, w, scale, g.value(y).data().iter().map(|v| v.as_f64()).collect())
}
