//! Binary grid files and CSV import/export.
//!
//! Layout, all little-endian:
//!
//! | field          | type    |
//! |----------------|---------|
//! | magic `UFLW`   | 4 bytes |
//! | version (= 1)  | u16     |
//! | precision      | u8, 4 or 8 |
//! | granularity    | u8, 0 coarse / 1 fine |
//! | upscale factor | u16     |
//! | T, H, W        | u32 ×3  |
//! | slots per day  | u32     |
//! | values         | T·H·W floats, row-major, frame by frame |

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::grid::{FlowGrid, Granularity, GridMeta, Precision};
use crate::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"UFLW";
pub const GRID_VERSION: u16 = 1;
pub const GRID_HEADER_LEN: usize = 26;

/// Largest grid (in cells) accepted from untrusted input.
pub const MAX_CELLS: usize = 1 << 28;

pub fn encode_grid(g: &FlowGrid) -> Vec<u8> {
    let m = g.meta();
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + g.values().len() * m.precision.bytes());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.push(m.precision.tag());
    out.push(m.granularity.tag());
    out.extend_from_slice(&(m.upscale as u16).to_le_bytes());
    for v in [m.frames, m.height, m.width, m.slots_per_day] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    match m.precision {
        Precision::F32 => g.values().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Precision::F64 => g.values().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_grid(bytes: &[u8]) -> Result<FlowGrid> {
    if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::format("magic", "bad magic"));
    }
    if bytes.len() < GRID_HEADER_LEN {
        return Err(Error::format("header", format!("truncated header: {} of {GRID_HEADER_LEN} bytes", bytes.len())));
    }
    let version = u16_at(bytes, 4);
    if version != GRID_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let precision =
        Precision::from_tag(bytes[6]).ok_or_else(|| Error::format("precision", format!("bad precision tag {}", bytes[6])))?;
    let granularity = Granularity::from_tag(bytes[7])
        .ok_or_else(|| Error::format("granularity", format!("bad granularity tag {}", bytes[7])))?;
    let upscale = u16_at(bytes, 8) as usize;
    if upscale == 0 {
        return Err(Error::format("upscale", "upscale factor must be positive"));
    }
    let frames = u32_at(bytes, 10) as usize;
    let height = u32_at(bytes, 14) as usize;
    let width = u32_at(bytes, 18) as usize;
    let slots_per_day = u32_at(bytes, 22) as usize;
    if height == 0 || width == 0 {
        return Err(Error::format("dims", format!("grid dimensions {height}x{width} must be positive")));
    }
    if slots_per_day == 0 {
        return Err(Error::format("slots_per_day", "must be positive"));
    }
    let cells = frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&v| v <= MAX_CELLS)
        .ok_or_else(|| Error::format("dims", format!("{frames}x{height}x{width} exceeds the size limit")))?;
    let payload = &bytes[GRID_HEADER_LEN..];
    let need = cells * precision.bytes();
    if payload.len() < need {
        return Err(Error::format(
            "payload",
            format!("truncated payload: header declares {cells} values ({need} bytes), found {} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format("payload", format!("{} trailing bytes after values", payload.len() - need)));
    }
    let values: Vec<f64> = match precision {
        Precision::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Precision::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    let meta = GridMeta { frames, height, width, granularity, upscale, slots_per_day, precision };
    FlowGrid::new(meta, values)
}

pub fn save_grid(g: &FlowGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_grid(g))?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<FlowGrid> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_grid(&bytes)
}

/// Labelling applied to grids read from CSV, which only carries values.
#[derive(Clone, Copy, Debug)]
pub struct CsvGridOptions {
    pub granularity: Granularity,
    pub upscale: usize,
    pub slots_per_day: usize,
    pub precision: Precision,
}

/// Reads `t,i,j,value` rows (with header). Dimensions are one past the
/// largest index seen; cells without a row are zero.
pub fn import_csv<R: Read>(reader: R, opts: CsvGridOptions) -> Result<FlowGrid> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["t", "i", "j", "value"] {
        return Err(Error::format("csv header", format!("expected t,i,j,value, got {}", cols.join(","))));
    }
    let mut cells = BTreeMap::new();
    let (mut tmax, mut imax, mut jmax) = (0usize, 0usize, 0usize);
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let idx = |k: usize, name: &'static str| -> Result<usize> {
            rec.get(k)
                .and_then(|s| s.parse::<u32>().ok())
                .map(|v| v as usize)
                .ok_or_else(|| Error::format(name, format!("row {}: bad index", line + 1)))
        };
        let (t, i, j) = (idx(0, "t")?, idx(1, "i")?, idx(2, "j")?);
        let value: f64 = rec
            .get(3)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("value", format!("row {}: bad value", line + 1)))?;
        if !value.is_finite() || value < 0.0 {
            return Err(Error::format("value", format!("row {}: value {value} is negative or non-finite", line + 1)));
        }
        if cells.insert((t, i, j), value).is_some() {
            return Err(Error::format("cell", format!("row {}: duplicate cell ({t},{i},{j})", line + 1)));
        }
        tmax = tmax.max(t);
        imax = imax.max(i);
        jmax = jmax.max(j);
    }
    if cells.is_empty() {
        return Err(Error::format("csv", "no data rows"));
    }
    let (frames, height, width) = (tmax + 1, imax + 1, jmax + 1);
    let total = frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&v| v <= MAX_CELLS)
        .ok_or_else(|| Error::format("dims", format!("{frames}x{height}x{width} exceeds the size limit")))?;
    let mut values = vec![0.0; total];
    for ((t, i, j), v) in cells {
        values[(t * height + i) * width + j] = v;
    }
    let meta = GridMeta {
        frames,
        height,
        width,
        granularity: opts.granularity,
        upscale: opts.upscale,
        slots_per_day: opts.slots_per_day,
        precision: opts.precision,
    };
    FlowGrid::new(meta, values)
}

pub fn export_csv<W: Write>(g: &FlowGrid, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "i", "j", "value"])?;
    for t in 0..g.frames() {
        for i in 0..g.height() {
            for j in 0..g.width() {
                let v = g.frame(t)[i * g.width() + j];
                w.write_record([t.to_string(), i.to_string(), j.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
