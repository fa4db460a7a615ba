//! Checkpoint files.
//!
//! ```text
//! "HCLC" | version u16 | sha256(body) [32] | body length u64 | body
//! ```
//!
//! The body holds, in order: config text, network spec (TOML), backbone
//! tensors, heads (layer index, λ, weight, bias), velocity tensors, the best
//! snapshot (flag + tensors), the dropout and augment RNG states, and the
//! early-stopping progress (TOML). Integers are little-endian, strings and
//! lists are u32-length-prefixed, tensors use the tensor byte format.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Progress, Run, RunView, TrainState};
use crate::error::{Error, Result};
use crate::hcl::{Backbone, HclModel, Head};
use crate::nn::{NetworkSpec, ParamSet};
use crate::rng::{RngState, RngStream, StreamId};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"HCLC";
pub const CHECKPOINT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 32 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Element> {
    /// Opaque configuration text stored alongside the run.
    pub config_text: String,
    pub run: Run<T>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend(u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend(s.as_bytes());
}

fn put_tensors<'a, T: Element>(out: &mut Vec<u8>, ts: impl ExactSizeIterator<Item = &'a Tensor<T>>) {
    put_u32(out, ts.len());
    for t in ts {
        t.encode_into(out);
    }
}

fn put_rng(out: &mut Vec<u8>, s: RngState) {
    out.extend(s.seed.to_le_bytes());
    out.push(s.stream_id as u8);
    out.extend(s.index.to_le_bytes());
    out.extend(s.word_pos.to_le_bytes());
}

pub fn encode_checkpoint<T: Element>(config_text: &str, run: RunView<'_, T>) -> Vec<u8> {
    let model = &run.state.model;
    let mut body = Vec::new();
    put_str(&mut body, config_text);
    put_str(&mut body, &model.spec().to_toml());
    put_tensors(&mut body, model.backbone.params.tensors().collect::<Vec<_>>().into_iter());
    put_u32(&mut body, model.heads().len());
    for (h, &l) in model.heads().iter().zip(model.lambdas()) {
        put_u32(&mut body, h.layer_index);
        body.extend(l.to_le_bytes());
        h.weight.encode_into(&mut body);
        h.bias.encode_into(&mut body);
    }
    put_tensors(&mut body, run.state.velocity.iter());
    match run.best {
        Some(best) => {
            body.push(1);
            put_tensors(&mut body, best.iter());
        }
        None => body.push(0),
    }
    put_rng(&mut body, run.state.dropout_rng.state());
    put_rng(&mut body, run.state.augment_rng.state());
    put_str(
        &mut body,
        &toml::to_string(run.progress).expect("progress serializes"),
    );

    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(Sha256::digest(&body));
    out.extend((body.len() as u64).to_le_bytes());
    out.extend(body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated body"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| bad("string is not UTF-8"))
    }

    fn tensor<T: Element>(&mut self) -> Result<Tensor<T>> {
        let (t, used) = Tensor::decode(&self.buf[self.pos..])?;
        self.pos += used;
        Ok(t)
    }

    fn tensors<T: Element>(&mut self) -> Result<Vec<Tensor<T>>> {
        let n = self.u32()?;
        // Each tensor takes at least a few bytes; refuse absurd counts early.
        if n > self.buf.len() - self.pos {
            return Err(bad("tensor count exceeds body"));
        }
        (0..n).map(|_| self.tensor()).collect()
    }

    fn rng(&mut self) -> Result<RngStream> {
        let seed = u64::from_le_bytes(self.array()?);
        let id = self.array::<1>()?[0];
        let stream_id = StreamId::from_u8(id).ok_or_else(|| bad(format!("unknown rng stream {id}")))?;
        let index = u64::from_le_bytes(self.array()?);
        let word_pos = u128::from_le_bytes(self.array()?);
        RngStream::from_state(RngState {
            seed,
            stream_id,
            index,
            word_pos,
        })
    }
}

fn check_shapes<T: Element>(what: &str, got: &[Tensor<T>], want: &[&Tensor<T>]) -> Result<()> {
    if got.len() != want.len() || got.iter().zip(want).any(|(a, b)| a.shape() != b.shape()) {
        return Err(bad(format!("{what} tensors do not match the model")));
    }
    Ok(())
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let digest = &bytes[6..38];
    let len = u64::from_le_bytes(bytes[38..46].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    if len != body.len() as u64 {
        return Err(bad(format!("body is {} bytes, header says {len}", body.len())));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }

    let mut r = Reader { buf: body, pos: 0 };
    let config_text = r.str()?.to_string();
    let spec = NetworkSpec::from_toml(r.str()?)?;
    let mut params = ParamSet::<T>::zeros(&spec);
    let stored = r.tensors::<T>()?;
    check_shapes("backbone", &stored, &params.tensors().collect::<Vec<_>>())?;
    for (dst, src) in params.tensors_mut().zip(stored) {
        *dst = src;
    }
    let backbone = Backbone::new(spec, params)?;

    let n_heads = r.u32()?;
    if n_heads > backbone.spec.len() {
        return Err(bad("more heads than layers"));
    }
    let mut heads = Vec::with_capacity(n_heads);
    let mut lambdas = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let layer_index = r.u32()?;
        lambdas.push(f64::from_le_bytes(r.array()?));
        heads.push(Head {
            layer_index,
            weight: r.tensor()?,
            bias: r.tensor()?,
        });
    }
    let model = HclModel::from_parts(backbone, heads, lambdas)?;
    let shapes: Vec<&Tensor<T>> = model.tensors().collect();

    let velocity = r.tensors::<T>()?;
    check_shapes("velocity", &velocity, &shapes)?;
    let best = match r.array::<1>()?[0] {
        0 => None,
        1 => {
            let b = r.tensors::<T>()?;
            check_shapes("snapshot", &b, &shapes)?;
            Some(b)
        }
        f => return Err(bad(format!("bad snapshot flag {f}"))),
    };
    let dropout_rng = r.rng()?;
    let augment_rng = r.rng()?;
    let progress: Progress = toml::from_str(r.str()?).map_err(|e| bad(format!("progress: {e}")))?;
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        config_text,
        run: Run {
            state: TrainState {
                model,
                velocity,
                dropout_rng,
                augment_rng,
            },
            progress,
            best,
        },
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint<T: Element>(path: &Path, config_text: &str, run: RunView<'_, T>) -> Result<()> {
    let bytes = encode_checkpoint(config_text, run);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
