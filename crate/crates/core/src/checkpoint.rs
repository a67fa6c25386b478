//! Checkpoint files.
//!
//! Layout, all little-endian:
//!
//! | field            | type |
//! |------------------|------|
//! | magic `UMSR`     | 4 bytes |
//! | version (= 1)    | u16 |
//! | stage            | u8, 1 / 2 / 3 |
//! | segment count    | u16 |
//! | per segment      | name length u16, UTF-8 name, rank u8, dims u32 × rank, precision u8 (4 or 8), values |

use std::path::Path;

use flowsr_tensor::{Real, Tensor};

use crate::grid::Precision;
use crate::model::{Model, ModelConfig, Scalers};
use crate::scaler::ScalerParams;
use crate::{Error, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"UMSR";
pub const CKPT_VERSION: u16 = 1;
pub const MODEL_CONFIG_SEGMENT: &str = "model.config";
pub const COARSE_SCALER_SEGMENT: &str = "scaler.coarse";
pub const FINE_SCALER_SEGMENT: &str = "scaler.fine";

/// Training stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Neighborhood encoder pretraining.
    I,
    /// City encoder pretraining.
    II,
    /// Supervised fine-tuning or end-to-end training.
    III,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::I => 1,
            Stage::II => 2,
            Stage::III => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            1 => Some(Stage::I),
            2 => Some(Stage::II),
            3 => Some(Stage::III),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    /// Exactly representable in `precision`.
    pub values: Vec<f64>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, precision: Precision, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::checkpoint(name, format!("shape {:?} does not hold {} values", shape, values.len())));
        }
        let values = match precision {
            Precision::F32 => values.into_iter().map(|v| v as f32 as f64).collect(),
            Precision::F64 => values,
        };
        Ok(Self { name, shape, precision, values })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub segments: Vec<Segment>,
}

impl Checkpoint {
    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Architecture recorded alongside the parameters, if any.
    pub fn model_config(&self) -> Result<Option<ModelConfig>> {
        let Some(s) = self.segment(MODEL_CONFIG_SEGMENT) else { return Ok(None) };
        let v = &s.values;
        if v.len() != 8 || v[..7].iter().any(|x| x.fract() != 0.0 || *x < 0.0 || *x > u32::MAX as f64) {
            return Err(Error::checkpoint(MODEL_CONFIG_SEGMENT, "malformed architecture record"));
        }
        let u = |k: usize| v[k] as usize;
        Ok(Some(ModelConfig {
            channels: u(0),
            kernel: u(1),
            dilation: u(2),
            neighborhood_layers: u(3),
            heads: u(4),
            city_blocks: u(5),
            upscale: u(6),
            ln_eps: v[7],
        }))
    }

    pub fn scalers(&self) -> Result<Option<Scalers>> {
        let read = |name: &str| -> Result<Option<ScalerParams>> {
            match self.segment(name) {
                None => Ok(None),
                Some(s) if s.values.len() == 2 && s.values[1] > s.values[0] => {
                    Ok(Some(ScalerParams { min: s.values[0], max: s.values[1] }))
                }
                Some(_) => Err(Error::checkpoint(name.to_string(), "scaler needs min < max")),
            }
        };
        match (read(COARSE_SCALER_SEGMENT)?, read(FINE_SCALER_SEGMENT)?) {
            (Some(coarse), Some(fine)) => Ok(Some(Scalers { coarse, fine })),
            (None, None) => Ok(None),
            _ => Err(Error::checkpoint("scaler", "only one of the two scalers is present")),
        }
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(c.stage.tag());
    out.extend_from_slice(&(c.segments.len() as u16).to_le_bytes());
    for s in &c.segments {
        out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.push(s.shape.len() as u8);
        for &d in &s.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(s.precision.tag());
        match s.precision {
            Precision::F32 => s.values.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::F64 => s.values.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, segment: &str, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::checkpoint(segment, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, seg: &str, what: &str) -> Result<u8> {
        Ok(self.take(1, seg, what)?[0])
    }

    fn u16(&mut self, seg: &str, what: &str) -> Result<u16> {
        let b = self.take(2, seg, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, seg: &str, what: &str) -> Result<u32> {
        let b = self.take(4, seg, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    const HEAD: &str = "header";
    if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::checkpoint(HEAD, "bad magic"));
    }
    let mut cur = Cursor { bytes, at: 4 };
    let version = cur.u16(HEAD, "version")?;
    if version != CKPT_VERSION {
        return Err(Error::checkpoint(HEAD, format!("unsupported version {version}")));
    }
    let tag = cur.u8(HEAD, "stage")?;
    let stage = Stage::from_tag(tag).ok_or_else(|| Error::checkpoint(HEAD, format!("bad stage tag {tag}")))?;
    let count = cur.u16(HEAD, "segment count")?;
    let mut segments: Vec<Segment> = Vec::with_capacity(count as usize);
    for k in 0..count {
        let placeholder = format!("#{k}");
        let len = cur.u16(&placeholder, "name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, &placeholder, "name")?)
            .map_err(|_| Error::checkpoint(placeholder.clone(), "name is not UTF-8"))?
            .to_string();
        if segments.iter().any(|s| s.name == name) {
            return Err(Error::checkpoint(name, "duplicate segment"));
        }
        let rank = cur.u8(&name, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32(&name, "dims")? as usize);
        }
        let ptag = cur.u8(&name, "precision")?;
        let precision = Precision::from_tag(ptag)
            .ok_or_else(|| Error::checkpoint(name.clone(), format!("bad precision tag {ptag}")))?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(precision.bytes()).map(|b| (n, b)));
        let Some((n, nbytes)) = n else {
            return Err(Error::checkpoint(name, format!("shape {:?} overflows", shape)));
        };
        let raw = cur.take(nbytes, &name, &format!("{n} values"))?;
        let values = match precision {
            Precision::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            Precision::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        segments.push(Segment { name, shape, precision, values });
    }
    if cur.at != bytes.len() {
        return Err(Error::checkpoint("trailer", format!("{} trailing bytes", bytes.len() - cur.at)));
    }
    Ok(Checkpoint { stage, segments })
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(c))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

fn precision_of<F: Real>() -> Precision {
    if F::BYTES == 4 {
        Precision::F32
    } else {
        Precision::F64
    }
}

impl<F: Real> Model<F> {
    /// Checkpoint of the parameters under `prefixes` (all when empty), plus
    /// the architecture record and any fitted scalers.
    pub fn to_checkpoint(&self, stage: Stage, prefixes: &[&str]) -> Result<Checkpoint> {
        let ids = if prefixes.is_empty() { self.all_ids() } else { self.ids(prefixes) };
        let c = &self.cfg;
        let arch = [c.channels, c.kernel, c.dilation, c.neighborhood_layers, c.heads, c.city_blocks, c.upscale]
            .iter()
            .map(|&v| v as f64)
            .chain([c.ln_eps])
            .collect();
        let mut segments = vec![Segment::new(MODEL_CONFIG_SEGMENT, vec![8], Precision::F64, arch)?];
        for id in ids {
            let t = self.store.get(id);
            let values = t.data().iter().map(|v| v.as_f64()).collect();
            segments.push(Segment::new(self.store.name(id), t.shape().to_vec(), precision_of::<F>(), values)?);
        }
        if let Some(s) = self.scalers {
            segments.push(Segment::new(COARSE_SCALER_SEGMENT, vec![2], Precision::F64, vec![s.coarse.min, s.coarse.max])?);
            segments.push(Segment::new(FINE_SCALER_SEGMENT, vec![2], Precision::F64, vec![s.fine.min, s.fine.max])?);
        }
        Ok(Checkpoint { stage, segments })
    }

    /// Loads every parameter under `prefixes` (all when empty). Each must be
    /// present with the shape this model expects; parameter segments the
    /// model does not know are rejected. Scalers are taken when present.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, prefixes: &[&str]) -> Result<()> {
        let ids = if prefixes.is_empty() { self.all_ids() } else { self.ids(prefixes) };
        for &id in &ids {
            let name = self.store.name(id).to_string();
            let seg = ckpt.segment(&name).ok_or_else(|| Error::checkpoint(name.clone(), "missing from checkpoint"))?;
            let expected = self.store.get(id).shape().to_vec();
            if seg.shape != expected {
                return Err(Error::checkpoint(
                    name,
                    format!("shape {:?} does not match model shape {:?}", seg.shape, expected),
                ));
            }
        }
        for seg in &ckpt.segments {
            let known = seg.name == MODEL_CONFIG_SEGMENT
                || seg.name == COARSE_SCALER_SEGMENT
                || seg.name == FINE_SCALER_SEGMENT
                || self.store.find(&seg.name).is_some();
            if !known {
                return Err(Error::checkpoint(seg.name.clone(), "not a parameter of this model"));
            }
        }
        for id in ids {
            let seg = ckpt.segment(self.store.name(id)).expect("checked above");
            let data = seg.values.iter().map(|&v| F::of(v)).collect();
            *self.store.get_mut(id) = Tensor::new(seg.shape.clone(), data)?;
        }
        if let Some(s) = ckpt.scalers()? {
            self.scalers = Some(s);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ENCODER_B;

    fn model() -> Model<f32> {
        let s = ScalerParams { min: 0.0, max: 10.0 };
        Model::new(ModelConfig::default(), 3).unwrap().with_scalers(Scalers { coarse: s, fine: s })
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut m = model();
        m.randomize(9, 0.5);
        let c = m.to_checkpoint(Stage::II, &[]).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.stage, Stage::II);
        let mut fresh = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        fresh.load_checkpoint(&back, &[]).unwrap();
        assert_eq!(fresh.store, m.store);
        assert_eq!(fresh.scalers, m.scalers);
        assert_eq!(back.model_config().unwrap(), Some(ModelConfig::default()));
    }

    #[test]
    fn kernel_mismatch_names_encoder_b() {
        let c = model().to_checkpoint(Stage::I, &[ENCODER_B]).unwrap();
        let cfg = ModelConfig { kernel: 5, ..ModelConfig::default() };
        let mut other = Model::<f32>::new(cfg, 0).unwrap();
        let e = other.load_checkpoint(&c, &[ENCODER_B]).unwrap_err();
        assert!(e.to_string().contains("encoder_b"), "{e}");
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode_checkpoint(&model().to_checkpoint(Stage::III, &[]).unwrap());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("bad magic"));
        let mut ver = bytes.clone();
        ver[4] = 7;
        assert!(decode_checkpoint(&ver).unwrap_err().to_string().contains("version"));
        for cut in [5, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            let e = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(e.to_string().contains("truncated"), "{cut}: {e}");
        }
    }
}
