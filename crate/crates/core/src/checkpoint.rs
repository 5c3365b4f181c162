//! Versioned binary checkpoints with byte-exact round-trips.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "ERNK"
//! format version   u32
//! config length    u64, then that many bytes of TrainConfig JSON
//! selected epoch   u64
//! selected val acc f64
//! rng key          u64
//! rng counter      u64
//! optimizer step   u64
//! tensor count     u64
//! per tensor:      name (u64 length + bytes), shape (u64 rank + u64 dims),
//!                  then three f64 arrays of shape-product length:
//!                  parameters, Adam first moment, Adam second moment
//! ```
//!
//! Tensors are written in the canonical parameter order (block weights and
//! biases interleaved, prototypes last). Floats round-trip bit-for-bit, so
//! save -> load -> save reproduces the file exactly; resumed training sees
//! the same numbers it left behind.

use std::path::Path;

use crate::net::{Dense, ExtractorState, ModelParams, Nonlinearity};
use crate::optim::AdamState;
use crate::prototypes::PrototypeBank;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ERNK";

/// A selected training state plus everything needed to reproduce or resume
/// the run that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: ExtractorState,
    /// Epoch whose validation accuracy won checkpoint selection.
    pub selected_epoch: usize,
    pub selected_val_accuracy: f64,
    /// `(key, counter)` of the trainer's root stream when the state was
    /// captured.
    pub rng_state: (u64, u64),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    fn f64_slice(&mut self, xs: &[f64]) {
        for &x in xs {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.state.params;
        let opt = &self.state.opt;
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(serde_json::to_string(&self.config)?.as_bytes());
        w.u64(self.selected_epoch as u64);
        w.f64(self.selected_val_accuracy);
        w.u64(self.rng_state.0);
        w.u64(self.rng_state.1);
        w.u64(opt.step);
        w.u64(params.tensor_count() as u64);
        for t in 0..params.tensor_count() {
            w.bytes(params.tensor_name(t).as_bytes());
            let shape = params.tensor_shape(t);
            w.u64(shape.len() as u64);
            for d in shape {
                w.u64(d as u64);
            }
            w.f64_slice(params.tensor(t));
            w.f64_slice(&opt.m[t]);
            w.f64_slice(&opt.v[t]);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, supported: CHECKPOINT_VERSION });
        }
        let config_json = r.bytes()?;
        let config: TrainConfig = serde_json::from_slice(config_json)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let selected_epoch = r.u64()? as usize;
        let selected_val_accuracy = r.f64()?;
        let rng_state = (r.u64()?, r.u64()?);
        let step = r.u64()?;
        let tensor_count = r.u64()? as usize;

        let expected_layers = config.extractor.block_dims.len();
        if tensor_count != expected_layers * 2 + 1 {
            return Err(Error::Format(format!(
                "checkpoint has {tensor_count} tensors but the config implies {}",
                expected_layers * 2 + 1
            )));
        }

        let mut layers: Vec<Dense> = Vec::with_capacity(expected_layers);
        let mut m: Vec<Vec<f64>> = Vec::with_capacity(tensor_count);
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(tensor_count);
        let mut prototypes: Option<PrototypeBank> = None;
        let mut pending_weight: Option<(usize, usize, Vec<f64>)> = None;

        for t in 0..tensor_count {
            let name = String::from_utf8_lossy(r.bytes()?).into_owned();
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let data = r.f64_vec(len)?;
            m.push(r.f64_vec(len)?);
            v.push(r.f64_vec(len)?);

            let expected_name = if t == tensor_count - 1 {
                "prototypes".to_string()
            } else if t % 2 == 0 {
                format!("block{}.weight", t / 2)
            } else {
                format!("block{}.bias", t / 2)
            };
            if name != expected_name {
                return Err(Error::Format(format!("tensor {t} is named {name:?}, expected {expected_name:?}")));
            }

            if t == tensor_count - 1 {
                if shape.len() != 3 {
                    return Err(Error::Format(format!("prototypes must have rank 3, got {}", shape.len())));
                }
                prototypes = Some(PrototypeBank::from_flat(shape[0], shape[1], shape[2], data)?);
            } else if t % 2 == 0 {
                if shape.len() != 2 {
                    return Err(Error::Format(format!("{name} must have rank 2, got {}", shape.len())));
                }
                pending_weight = Some((shape[0], shape[1], data));
            } else {
                let (out_dim, in_dim, weight) =
                    pending_weight.take().ok_or_else(|| Error::Format(format!("{name} has no matching weight")))?;
                if shape != [out_dim] {
                    return Err(Error::Format(format!("{name} shape {shape:?} does not match weight rows {out_dim}")));
                }
                layers.push(Dense { in_dim, out_dim, weight, bias: data });
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint payload", buf.len() - r.pos)));
        }

        // Cross-check the rebuilt tensors against the config's architecture.
        let mut in_dim = config.extractor.input_dim;
        for (b, (layer, &want_out)) in layers.iter().zip(&config.extractor.block_dims).enumerate() {
            if layer.in_dim != in_dim || layer.out_dim != want_out {
                return Err(Error::Format(format!(
                    "block {b} is {}x{} but the config says {}x{in_dim}",
                    layer.out_dim, layer.in_dim, want_out
                )));
            }
            in_dim = layer.out_dim;
        }
        let prototypes = prototypes.expect("tensor loop always sets prototypes");
        if prototypes.dim() != in_dim {
            return Err(Error::Format(format!(
                "prototypes have dim {} but the final block is {in_dim}-wide",
                prototypes.dim()
            )));
        }
        if prototypes.per_class() != config.prototypes_per_class {
            return Err(Error::Format(format!(
                "prototypes have {} per class but the config says {}",
                prototypes.per_class(),
                config.prototypes_per_class
            )));
        }

        let nonlinearity: Nonlinearity = config.extractor.nonlinearity;
        let params = ModelParams { layers, prototypes, nonlinearity };
        let opt = AdamState { m, v, step };
        Ok(Checkpoint {
            config,
            state: ExtractorState { params, opt },
            selected_epoch,
            selected_val_accuracy,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path)?;
        Checkpoint::from_bytes(&buf)
    }
}
