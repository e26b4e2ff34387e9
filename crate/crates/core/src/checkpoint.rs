//! Model checkpoints.
//!
//! ```text
//! "NICECKPT"  u32 version  u32 n  n bytes of JSON metadata
//!             (arch, quant, epoch, stage, skip_first_last)
//! per layer   tensor weight, tensor bias, u8 has_bn,
//!             [tensor gamma, tensor beta, f64s running_mean, f64s running_var, f64 eps, f64 momentum]
//! clamps      u32 n, opt f64 x n (c_w per layer), u32 n, opt f64 x n (c_a per site)
//! tensor      u32 rank, u32 x rank dims, f64 x product
//! f64s        u32 n, f64 x n
//! opt f64     u8 present, f64
//! ```
//!
//! Integers and floats are little-endian; floats are stored by bit pattern so
//! a load reproduces the saved model exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, BatchNorm, LayerParams, Model};
use crate::quant::QuantSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NICECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub quant: QuantSpec,
    /// Last completed epoch of the run that wrote the checkpoint.
    pub epoch: usize,
    pub stage: usize,
    /// First/last-layer policy of a quantized model; `None` for a
    /// full-precision one.
    pub skip_first_last: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    arch: Arch,
    quant: QuantSpec,
    epoch: usize,
    stage: usize,
    skip_first_last: Option<bool>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            arch: self.model.arch.clone(),
            quant: self.quant,
            epoch: self.epoch,
            stage: self.stage,
            skip_first_last: self.skip_first_last,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend(MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_u32(&mut out, json.len());
        out.extend(json);
        for l in &self.model.layers {
            put_tensor(&mut out, &l.weight);
            put_tensor(&mut out, &l.bias);
            match &l.bn {
                None => out.push(0),
                Some(bn) => {
                    out.push(1);
                    put_tensor(&mut out, &bn.gamma);
                    put_tensor(&mut out, &bn.beta);
                    put_f64s(&mut out, &bn.running_mean);
                    put_f64s(&mut out, &bn.running_var);
                    out.extend(bn.eps.to_le_bytes());
                    out.extend(bn.momentum.to_le_bytes());
                }
            }
        }
        for clamps in [&self.model.weight_clamps, &self.model.act_clamps] {
            put_u32(&mut out, clamps.len());
            for c in clamps {
                out.push(u8::from(c.is_some()));
                out.extend(c.unwrap_or(0.0).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let n = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        meta.arch.validate()?;
        meta.quant.validate()?;

        let mut model = Model::new(meta.arch, 0)?;
        for (i, l) in model.layers.iter_mut().enumerate() {
            let weight = r.tensor()?;
            let bias = r.tensor()?;
            let bn = match r.u8()? {
                0 => None,
                1 => Some(BatchNorm {
                    gamma: r.tensor()?,
                    beta: r.tensor()?,
                    running_mean: r.f64s()?,
                    running_var: r.f64s()?,
                    eps: r.f64()?,
                    momentum: r.f64()?,
                }),
                t => return Err(Error::Format(format!("bad batch-norm flag {t}"))),
            };
            if weight.shape() != l.weight.shape() || bias.shape() != l.bias.shape() {
                return Err(Error::Format(format!("layer {i} parameter shapes do not match the architecture")));
            }
            *l = LayerParams { weight, bias, bn };
        }
        for clamps in [&mut model.weight_clamps, &mut model.act_clamps] {
            let n = r.u32()? as usize;
            if n != clamps.len() {
                return Err(Error::Format(format!("{n} clamps stored, architecture has {}", clamps.len())));
            }
            for c in clamps.iter_mut() {
                let present = r.u8()?;
                let v = r.f64()?;
                *c = (present == 1).then_some(v);
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            model,
            quant: meta.quant,
            epoch: meta.epoch,
            stage: meta.stage,
            skip_first_last: meta.skip_first_last,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    put_u32(out, xs.len());
    for x in xs {
        out.extend(x.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for x in t.data() {
        out.extend(x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Format("tensor larger than the remaining file".into()));
        }
        Tensor::new(&shape, (0..n).map(|_| self.f64()).collect::<Result<_>>()?)
    }
}
