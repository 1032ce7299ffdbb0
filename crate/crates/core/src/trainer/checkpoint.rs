//! Binary checkpoint format.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! header   "ADCM" | version u32 | schedule u8 | precond u8 | t_min f64 | t_max f64
//!          | sigma_data f64 | n_layers u32 | (in u32, out u32, activation u8)*
//!          | grid_len u32 | grid_built_at u64 | grid_count u64 | lambda_used f64
//!          | step u64 | adam (step u64, lr f64, beta1 f64, beta2 f64, eps f64)
//!          | ema_decay f64 | header checksum u64
//! payload  params | grid times | adam first moment | adam second moment
//!          | ema shadow | rng (seed [u8; 32], stream u64, word_pos u128)
//!          | payload checksum u64
//! ```
//!
//! Parameters are stored layer by layer, weight before bias. Checksums are
//! 64-bit FNV-1a.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::discretizer::SegmentationGrid;
use crate::error::Result;
use crate::numerics::{Activation, Adam, EmaState, Layer, MlpParams, Tensor};
use crate::schedule::{NoiseSchedule, PrecondKind, Preconditioner, ScheduleKind};

pub const MAGIC: [u8; 4] = *b"ADCM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },

    #[error("checkpoint header checksum mismatch")]
    HeaderChecksum,

    #[error("checkpoint payload checksum mismatch")]
    PayloadChecksum,

    #[error("checkpoint truncated: needed {needed} bytes, file has {found}")]
    Truncated { needed: usize, found: usize },

    #[error("checkpoint has {extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },

    #[error("invalid checkpoint header: {0}")]
    InvalidHeader(String),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Complete resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schedule: NoiseSchedule,
    pub precond: Preconditioner,
    pub params: MlpParams,
    pub adam: Adam,
    pub ema: EmaState,
    pub grid: Option<SegmentationGrid>,
    /// Number of grids built so far.
    pub grid_count: u64,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated {
                needed: end,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        self.array().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        self.array().map(u64::from_le_bytes)
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        self.array().map(u128::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        self.array().map(f64::from_le_bytes)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

fn invalid(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::InvalidHeader(msg.into())
}

fn tensors_with_layout(template: &MlpParams, flat: Vec<f64>) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut off = 0;
    for t in template.tensors() {
        out.push(Tensor::from_parts(
            t.shape().to_vec(),
            flat[off..off + t.len()].to_vec(),
        ));
        off += t.len();
    }
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.u8(self.schedule.kind.tag());
        w.u8(self.precond.kind.tag());
        w.f64(self.schedule.t_min);
        w.f64(self.schedule.t_max);
        w.f64(self.precond.sigma_data);
        let dims = self.params.dims();
        w.u32(dims.len() as u32);
        for (din, dout, act) in dims {
            w.u32(din as u32);
            w.u32(dout as u32);
            w.u8(act.tag());
        }
        let grid_times = self.grid.as_ref().map_or(&[][..], SegmentationGrid::times);
        w.u32(grid_times.len() as u32);
        w.u64(self.grid.as_ref().map_or(0, |g| g.built_at_step));
        w.u64(self.grid_count);
        w.f64(self.grid.as_ref().map_or(f64::NAN, |g| g.lambda_used));
        w.u64(self.step);
        w.u64(self.adam.step_count);
        w.f64(self.adam.learning_rate);
        w.f64(self.adam.beta1);
        w.f64(self.adam.beta2);
        w.f64(self.adam.eps);
        w.f64(self.ema.decay);
        let header_sum = fnv1a(&w.0);
        w.u64(header_sum);

        let payload_start = w.0.len();
        w.f64s(&self.params.to_flat());
        w.f64s(grid_times);
        for t in &self.adam.first_moment {
            w.f64s(t.data());
        }
        for t in &self.adam.second_moment {
            w.f64s(t.data());
        }
        w.f64s(&self.ema.shadow.to_flat());
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.u128(self.rng.get_word_pos());
        let payload_sum = fnv1a(&w.0[payload_start..]);
        w.u64(payload_sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::parse(bytes)?)
    }

    fn parse(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.array()?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let schedule_tag = r.u8()?;
        let precond_tag = r.u8()?;
        let (t_min, t_max, sigma_data) = (r.f64()?, r.f64()?, r.f64()?);
        let n_layers = r.u32()? as usize;
        // Bound the table before allocating from it.
        r.take(
            n_layers
                .checked_mul(9)
                .ok_or_else(|| invalid("layer count overflows"))?,
        )?;
        r.pos -= n_layers * 9;
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            dims.push((r.u32()? as usize, r.u32()? as usize, r.u8()?));
        }
        let grid_len = r.u32()? as usize;
        let grid_built_at = r.u64()?;
        let grid_count = r.u64()?;
        let lambda_used = r.f64()?;
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let (lr, b1, b2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let ema_decay = r.f64()?;
        let header_end = r.pos;
        let stored = r.u64()?;
        if fnv1a(&bytes[..header_end]) != stored {
            return Err(CheckpointError::HeaderChecksum);
        }

        let kind = ScheduleKind::from_tag(schedule_tag).ok_or_else(|| invalid("unknown schedule tag"))?;
        let schedule = NoiseSchedule::new(kind, t_min, t_max).map_err(|e| invalid(e.to_string()))?;
        let pkind = PrecondKind::from_tag(precond_tag).ok_or_else(|| invalid("unknown preconditioner tag"))?;
        let precond = Preconditioner::new(pkind, sigma_data).map_err(|e| invalid(e.to_string()))?;

        let n_params: usize = dims.iter().map(|&(i, o, _)| i * o + o).sum();
        let rng_bytes = 32 + 8 + 16;
        let needed = r.pos + 8 * (4 * n_params + grid_len) + rng_bytes + 8;
        if bytes.len() < needed {
            return Err(CheckpointError::Truncated {
                needed,
                found: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(CheckpointError::TrailingBytes {
                extra: bytes.len() - needed,
            });
        }
        let payload_start = r.pos;
        if fnv1a(&bytes[payload_start..needed - 8])
            != u64::from_le_bytes(bytes[needed - 8..].try_into().expect("8 bytes"))
        {
            return Err(CheckpointError::PayloadChecksum);
        }

        let flat = r.f64s(n_params)?;
        let mut layers = Vec::with_capacity(n_layers);
        let mut off = 0;
        for &(din, dout, tag) in &dims {
            let act = Activation::from_tag(tag).ok_or_else(|| invalid("unknown activation tag"))?;
            let weight =
                Tensor::matrix(dout, din, flat[off..off + din * dout].to_vec()).map_err(|e| invalid(e.to_string()))?;
            off += din * dout;
            let bias = Tensor::vector(flat[off..off + dout].to_vec()).map_err(|e| invalid(e.to_string()))?;
            off += dout;
            layers.push(Layer::new(weight, bias, act).map_err(|e| invalid(e.to_string()))?);
        }
        let params = MlpParams::new(layers).map_err(|e| invalid(e.to_string()))?;

        let times = r.f64s(grid_len)?;
        let grid = if grid_len == 0 {
            None
        } else {
            Some(SegmentationGrid::new(times, grid_built_at, lambda_used).map_err(|e| invalid(e.to_string()))?)
        };
        let m = tensors_with_layout(&params, r.f64s(n_params)?);
        let v = tensors_with_layout(&params, r.f64s(n_params)?);
        let adam = Adam {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            step_count: adam_step,
            first_moment: m,
            second_moment: v,
        };
        let mut shadow = params.clone();
        shadow
            .set_flat(&r.f64s(n_params)?)
            .map_err(|e| invalid(e.to_string()))?;
        let ema = EmaState::new(&shadow, ema_decay).map_err(|e| invalid(e.to_string()))?;

        let seed: [u8; 32] = r.array()?;
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        Ok(Checkpoint {
            schedule,
            precond,
            params,
            adam,
            ema,
            grid,
            grid_count,
            step,
            rng,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// failed write never leaves a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        Ok(result?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
