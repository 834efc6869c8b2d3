//! Binary training snapshot.
//!
//! Layout (little-endian): `"PIRT"`, `u32` version, config text, model JSON,
//! `u64` epoch, run RNG state, parameter count then `(name, trainable,
//! tensor)` per parameter, optimizer step, then per parameter a presence byte
//! followed by both Adam moments when present. Strings are `u64` length plus
//! UTF-8 bytes; tensors use the tensor-engine encoding.

use std::path::Path;

use pirt_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PirtError, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"PIRT";
const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub model: ModelConfig,
    /// Epochs completed.
    pub epoch: u64,
    pub rng: RngState,
    pub params: Vec<(String, bool, Tensor<f32>)>,
    pub optimizer_step: u64,
    /// First and second Adam moments per parameter, `None` where frozen.
    pub moments: Vec<Option<(Tensor<f32>, Tensor<f32>)>>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

/// Reader over a byte slice that reports absolute offsets.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(PirtError::Format {
                offset: self.pos as u64,
                msg: format!("checkpoint truncated in {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u64(what)?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(PirtError::Format {
                offset: at,
                msg: format!("{what} length {n} runs past the end"),
            });
        }
        String::from_utf8(self.take(n as usize, what)?.to_vec()).map_err(|_| PirtError::Format {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let mut rest = &self.bytes[self.pos..];
        let before = rest.len();
        let t = Tensor::read_from(&mut rest, self.pos as u64)?;
        self.pos += before - rest.len();
        Ok(t)
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        let at = self.pos as u64;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(PirtError::Format {
                offset: at,
                msg: format!("{what} flag byte {b}"),
            }),
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text);
        put_str(&mut out, &serde_json::to_string(&self.model).expect("model config serializes"));
        put_u64(&mut out, self.epoch);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut out, self.params.len() as u64);
        for (name, trainable, value) in &self.params {
            put_str(&mut out, name);
            out.push(*trainable as u8);
            out.extend_from_slice(&value.to_bytes());
        }
        put_u64(&mut out, self.optimizer_step);
        for slot in &self.moments {
            match slot {
                Some((m, v)) => {
                    out.push(1);
                    out.extend_from_slice(&m.to_bytes());
                    out.extend_from_slice(&v.to_bytes());
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return Err(PirtError::Format {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(PirtError::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let config_text = c.string("config")?;
        let at = c.pos as u64;
        let model: ModelConfig = serde_json::from_str(&c.string("model config")?).map_err(|e| PirtError::Format {
            offset: at,
            msg: format!("model config: {e}"),
        })?;
        let epoch = c.u64("epoch")?;
        let seed: [u8; 32] = c.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = c.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(c.take(16, "rng position")?.try_into().expect("16 bytes"));
        let count = c.u64("parameter count")?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = c.string("parameter name")?;
            let trainable = c.flag("trainable")?;
            params.push((name, trainable, c.tensor()?));
        }
        let optimizer_step = c.u64("optimizer step")?;
        let mut moments = Vec::with_capacity(params.len());
        for _ in 0..count {
            moments.push(if c.flag("moment presence")? { Some((c.tensor()?, c.tensor()?)) } else { None });
        }
        if c.pos != bytes.len() {
            return Err(PirtError::Format {
                offset: c.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - c.pos),
            });
        }
        Ok(Checkpoint {
            config_text,
            model,
            epoch,
            rng: RngState { seed, stream, word_pos },
            params,
            optimizer_step,
            moments,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PirtError::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Copies the parameter tensors into a store built for the same model.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (name, trainable, _) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| PirtError::Config(format!("checkpoint parameter {name} is not in the model")))?;
            if store.entry(id).trainable != *trainable {
                return Err(PirtError::Config(format!("parameter {name} differs in trainability")));
            }
        }
        let pairs: Vec<(String, Tensor<f32>)> = self.params.iter().map(|(n, _, t)| (n.clone(), t.clone())).collect();
        store.load_from(&pairs)
    }
}
