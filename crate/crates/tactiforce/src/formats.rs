//! On-disk artifacts.
//!
//! * `TFR1`: float field container for frames, normal maps and depth maps.
//! * `MLP1`: network checkpoint, with a JSON sidecar.
//! * Calibration samples as CSV, curves as JSON, frames as 8-bit PNG.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tactiforce_core::mlp::{DatasetConfig, Dense, MlpParams, TrainConfig};
use tactiforce_core::regress::{CalibSample, PolyCurve};
use tactiforce_core::sim::{DepthMap, GelConfig, NormalMap, TactileFrame};
use tactiforce_core::Grid;

pub const TFR1_MAGIC: &[u8; 4] = b"TFR1";
pub const MLP1_MAGIC: &[u8; 4] = b"MLP1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated {what}: need {need} bytes, have {have}")]
    Truncated { what: &'static str, need: usize, have: usize },
    #[error("{what}: expected {expected} channels, found {found}")]
    Channels { what: &'static str, expected: u32, found: u32 },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("bad encoding: {0}")]
    Encoding(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Png(#[from] png::EncodingError),
}

pub type FormatResult<T> = Result<T, FormatError>;

/// Decoded `TFR1` container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tfr1 {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    /// Row-major, channels interleaved.
    pub samples: Vec<f32>,
}

impl Tfr1 {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.samples.len());
        out.extend_from_slice(TFR1_MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> FormatResult<Self> {
        let mut r = ByteReader::new(bytes, "TFR1");
        r.magic(TFR1_MAGIC)?;
        let (width, height, channels) = (r.u32()?, r.u32()?, r.u32()?);
        let n = width as usize * height as usize * channels as usize;
        let raw = r.take(4 * n)?;
        let samples = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        r.finish()?;
        Ok(Tfr1 {
            width,
            height,
            channels,
            samples,
        })
    }

    fn expect_channels(&self, what: &'static str, expected: u32) -> FormatResult<()> {
        if self.channels == expected {
            Ok(())
        } else {
            Err(FormatError::Channels {
                what,
                expected,
                found: self.channels,
            })
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.height as usize, self.width as usize)
    }

    pub fn from_frame(f: &TactileFrame) -> Self {
        let (h, w) = f.pixels.shape();
        Tfr1 {
            width: w as u32,
            height: h as u32,
            channels: 3,
            samples: f.pixels.iter().flatten().copied().collect(),
        }
    }

    pub fn to_frame(&self, frame_id: u64, timestamp: f64) -> FormatResult<TactileFrame> {
        self.expect_channels("tactile frame", 3)?;
        let (h, w) = self.dims();
        let px = self
            .samples
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(TactileFrame {
            pixels: grid(h, w, px),
            timestamp,
            frame_id,
        })
    }

    pub fn from_normals(n: &NormalMap) -> Self {
        let (h, w) = n.vectors.shape();
        Tfr1 {
            width: w as u32,
            height: h as u32,
            channels: 3,
            samples: n.vectors.iter().flatten().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_normals(&self) -> FormatResult<NormalMap> {
        self.expect_channels("normal map", 3)?;
        let (h, w) = self.dims();
        let v = self
            .samples
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Ok(NormalMap {
            vectors: grid(h, w, v),
        })
    }

    pub fn from_depth(d: &DepthMap) -> Self {
        let (h, w) = d.values.shape();
        Tfr1 {
            width: w as u32,
            height: h as u32,
            channels: 1,
            samples: d.values.iter().map(|&v| v as f32).collect(),
        }
    }

    /// The container does not carry a pitch; the caller supplies it.
    pub fn to_depth(&self, pixel_pitch: f64) -> FormatResult<DepthMap> {
        self.expect_channels("depth map", 1)?;
        let (h, w) = self.dims();
        Ok(DepthMap {
            values: grid(h, w, self.samples.iter().map(|&v| v as f64).collect()),
            pixel_pitch,
        })
    }

    pub fn read(path: &Path) -> FormatResult<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> FormatResult<()> {
        Ok(std::fs::write(path, self.encode())?)
    }
}

fn grid<T>(h: usize, w: usize, v: Vec<T>) -> Grid<T> {
    Grid::from_vec(h, w, v).expect("decoded sample count matches header")
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        ByteReader { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> FormatResult<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if n > have {
            return Err(FormatError::Truncated {
                what: self.what,
                need: self.pos + n,
                have: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 4]) -> FormatResult<()> {
        let found = self.take(4)?;
        if found != m {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(m).into(),
                found: String::from_utf8_lossy(found).into(),
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> FormatResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> FormatResult<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn finish(self) -> FormatResult<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

/// `MLP1`, u32 layer count, then per layer u32 rows, u32 cols, the
/// `rows x cols` weights and `cols` biases as little-endian f64.
pub fn encode_checkpoint(p: &MlpParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * p.param_count() + 8 * p.layers.len());
    out.extend_from_slice(MLP1_MAGIC);
    out.extend_from_slice(&(p.layers.len() as u32).to_le_bytes());
    for l in &p.layers {
        out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> FormatResult<MlpParams> {
    let mut r = ByteReader::new(bytes, "MLP1");
    r.magic(MLP1_MAGIC)?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let (inputs, outputs) = (r.u32()? as usize, r.u32()? as usize);
        let weights = r.f64s(inputs * outputs)?;
        let bias = r.f64s(outputs)?;
        layers.push(Dense {
            inputs,
            outputs,
            weights,
            bias,
        });
    }
    r.finish()?;
    let p = MlpParams { layers };
    p.validate()
        .map_err(|e| FormatError::Checkpoint(e.to_string()))?;
    Ok(p)
}

/// JSON written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub gel: GelConfig,
    /// sha256 of the training samples
    pub dataset_fingerprint: String,
    pub config_fingerprint: String,
    pub metrics: TrainMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub final_loss: f64,
    pub holdout_angular_error_deg: f64,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_checkpoint(path: &Path, p: &MlpParams, meta: &CheckpointMeta) -> FormatResult<()> {
    std::fs::write(path, encode_checkpoint(p))?;
    write_json(&sidecar_path(path), meta)
}

pub fn read_checkpoint(path: &Path) -> FormatResult<MlpParams> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn read_sidecar(checkpoint: &Path) -> FormatResult<CheckpointMeta> {
    read_json(&sidecar_path(checkpoint))
}

/// Hex sha256 of anything serializable, over its compact JSON form.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("fingerprinted values serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn fingerprint_bytes(chunks: impl IntoIterator<Item = impl AsRef<[u8]>>) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(c.as_ref());
    }
    hex::encode(h.finalize())
}

/// Pretty JSON plus a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> FormatResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(w.flush()?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> FormatResult<T> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    Ok(serde_json::from_str(&s)?)
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    depth_mm: f64,
    force_n: f64,
}

pub fn write_samples_csv<W: Write>(w: W, samples: &[CalibSample]) -> FormatResult<()> {
    let mut out = csv::Writer::from_writer(w);
    for s in samples {
        out.serialize(SampleRow {
            depth_mm: s.depth,
            force_n: s.force,
        })?;
    }
    Ok(out.flush()?)
}

pub fn read_samples_csv<R: Read>(r: R) -> FormatResult<Vec<CalibSample>> {
    csv::Reader::from_reader(r)
        .deserialize::<SampleRow>()
        .map(|row| {
            let row = row?;
            Ok(CalibSample {
                depth: row.depth_mm,
                force: row.force_n,
            })
        })
        .collect()
}

/// Curve JSON: the fitted coefficients plus the producing config's hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFile {
    #[serde(flatten)]
    pub curve: PolyCurve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
}

pub fn read_curve(path: &Path) -> FormatResult<PolyCurve> {
    Ok(read_json::<CurveFile>(path)?.curve)
}

/// 8-bit RGB, channels rounded from [0, 1].
pub fn write_png(path: &Path, frame: &TactileFrame) -> FormatResult<()> {
    let (h, w) = frame.pixels.shape();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = frame
        .pixels
        .iter()
        .flatten()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut writer = enc.write_header()?;
    writer.write_image_data(&data)?;
    Ok(writer.finish()?)
}
