//! Binary checkpoint container.
//!
//! ```text
//! "DKDNCKPT"                      8-byte magic
//! u32 version (= 1)
//! u32 header_len, header          UTF-8 key=value lines: network config,
//!                                 iteration, Adam hyper-parameters and step
//! u32 param_count
//! per parameter, in name order:
//!   u32 name_len, name            UTF-8
//!   u32 ndim, u64 × ndim          shape
//!   f64 × numel                   value
//!   f64 × numel                   Adam first moment
//!   f64 × numel                   Adam second moment
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::config::KvConfig;
use crate::error::{io_err, Error, Result};
use crate::network::{check_params, NetConfig};
use crate::tensor::Tensor;
use crate::trainer::AdamState;

const MAGIC: &[u8; 8] = b"DKDNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: NetConfig,
    pub params: ParamStore,
    pub iteration: u64,
    pub adam: AdamState,
}

fn header(ck: &ModelCheckpoint) -> String {
    let mut kv = ck.config.to_kv();
    kv.push("iteration", ck.iteration);
    kv.push("adam_beta1", format!("{:?}", ck.adam.beta1));
    kv.push("adam_beta2", format!("{:?}", ck.adam.beta2));
    kv.push("adam_eps", format!("{:?}", ck.adam.eps));
    kv.push("adam_step", ck.adam.step);
    kv.to_text()
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let h = header(self);
        put_u32(&mut out, h.len())?;
        out.extend_from_slice(h.as_bytes());
        put_u32(&mut out, self.params.len())?;
        for (name, p) in self.params.iter() {
            let (m, v) = self
                .adam
                .moments
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, p.value.ndim())?;
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, &p.value);
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Incompatible(format!("checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| bad("header is not UTF-8"))?;
        let kv = KvConfig::parse(text)?;
        let mut config = NetConfig::default();
        let mut adam_fields = [None; 3];
        let (mut iteration, mut step) = (None, None);
        for (k, v) in &kv.entries {
            let num = || -> Result<f64> { v.parse().map_err(|_| bad(&format!("bad `{k}`"))) };
            match k.as_str() {
                "iteration" => iteration = Some(v.parse().map_err(|_| bad("bad iteration"))?),
                "adam_step" => step = Some(v.parse().map_err(|_| bad("bad adam_step"))?),
                "adam_beta1" => adam_fields[0] = Some(num()?),
                "adam_beta2" => adam_fields[1] = Some(num()?),
                "adam_eps" => adam_fields[2] = Some(num()?),
                _ => {
                    if !config.set(k, v)? {
                        return Err(bad(&format!("unknown header key `{k}`")));
                    }
                }
            }
        }
        let iteration = iteration.ok_or_else(|| bad("missing iteration"))?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut moments = std::collections::BTreeMap::new();
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let value = Tensor::new(&shape, r.f64s(numel)?)?;
            let m = Tensor::new(&shape, r.f64s(numel)?)?;
            let v = Tensor::new(&shape, r.f64s(numel)?)?;
            params.insert(name.clone(), value);
            moments.insert(name, (m, v));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        check_params(&config, &params)?;
        let adam = AdamState {
            beta1: adam_fields[0].ok_or_else(|| bad("missing adam_beta1"))?,
            beta2: adam_fields[1].ok_or_else(|| bad("missing adam_beta2"))?,
            eps: adam_fields[2].ok_or_else(|| bad("missing adam_eps"))?,
            step: step.ok_or_else(|| bad("missing adam_step"))?,
            moments,
        };
        Ok(Self {
            config,
            params,
            iteration,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&bytes).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

fn bad(detail: &str) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.to_string(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
