//! Binary form of an [`IntModel`], all integers little-endian:
//!
//! ```text
//! header   "NICEINT\0"  u32 version  u8 task  u32 C H W  u32 node count
//! node     u8 tag, then per tag:
//!   0 input      u8 quantized, [act quant]
//!   1 int layer  str name, u32 input, kind, u8 bits_w bits_b in_bits acc_bits,
//!                f64 in_scale w_scale b_scale acc_scale,
//!                u32 n, i32 x n weight codes, u32 n, i32 x n bias codes,
//!                u8 has_requant, [requant]
//!   2 float      str name, u32 input, kind, u8 relu, u32 n, f64 x n weights,
//!                u32 n, f64 x n biases, u8 has_quant, [act quant]
//!   3 max pool   u32 input, u32 size
//!   4 avg pool   u32 input
//!   5 add        u32 branch, u32 skip, dyadic align, u8 align_shift,
//!                f64 align_real, f64 acc_scale, u8 has_requant, [requant]
//!   6 identity   u32 input
//! kind         u8 0 conv: u32 in out kernel stride padding | 1 linear: u32 in out
//! dyadic       u8 q-1, i8 p
//! act quant    f64 clamp, u8 bits, f64 scale
//! requant      dyadic, f64 exact factor, act quant
//! str          u32 length, UTF-8 bytes
//! ```

use std::path::Path;

use super::{ActQuant, DyadicScale, FloatLayer, InputStage, IntAdd, IntLayer, IntModel, IntNode, Requant};
use crate::error::{Error, Result};
use crate::model::{LayerKind, Task};

pub const MAGIC: &[u8; 8] = b"NICEINT\0";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend(s.as_bytes());
    }
    fn dyadic(&mut self, d: DyadicScale) {
        self.u8((d.q - 1) as u8);
        self.0.push(d.p as i8 as u8);
    }
    fn act(&mut self, q: &ActQuant) {
        self.f64(q.clamp);
        self.u8(q.bits as u8);
        self.f64(q.scale);
    }
    fn requant(&mut self, r: &Option<Requant>) {
        match r {
            None => self.u8(0),
            Some(r) => {
                self.u8(1);
                self.dyadic(r.scale);
                self.f64(r.real);
                self.act(&r.out);
            }
        }
    }
    fn kind(&mut self, k: &LayerKind) {
        match *k {
            LayerKind::Conv { in_ch, out_ch, kernel, stride, padding } => {
                self.u8(0);
                for v in [in_ch, out_ch, kernel, stride, padding] {
                    self.u32(v);
                }
            }
            LayerKind::Linear { in_features, out_features } => {
                self.u8(1);
                self.u32(in_features);
                self.u32(out_features);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("integer model truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("bad flag byte {v} at {}", self.pos - 1))),
        }
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u32()?;
        if n > self.buf.len() {
            return Err(Error::Format(format!("length {n} exceeds file size")));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
    fn dyadic(&mut self) -> Result<DyadicScale> {
        let q = self.u8()? as u32 + 1;
        let p = self.u8()? as i8 as i32;
        DyadicScale::new(q, p).map_err(|e| Error::Format(e.to_string()))
    }
    fn act(&mut self) -> Result<ActQuant> {
        Ok(ActQuant { clamp: self.f64()?, bits: self.u8()? as u32, scale: self.f64()? })
    }
    fn requant(&mut self) -> Result<Option<Requant>> {
        if !self.flag()? {
            return Ok(None);
        }
        Ok(Some(Requant { scale: self.dyadic()?, real: self.f64()?, out: self.act()? }))
    }
    fn kind(&mut self) -> Result<LayerKind> {
        match self.u8()? {
            0 => Ok(LayerKind::Conv {
                in_ch: self.u32()?,
                out_ch: self.u32()?,
                kernel: self.u32()?,
                stride: self.u32()?,
                padding: self.u32()?,
            }),
            1 => Ok(LayerKind::Linear { in_features: self.u32()?, out_features: self.u32()? }),
            t => Err(Error::Format(format!("unknown layer kind {t}"))),
        }
    }
}

pub fn to_bytes(m: &IntModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend(MAGIC);
    w.0.extend(VERSION.to_le_bytes());
    w.u8(match m.task {
        Task::Classification => 0,
        Task::Regression => 1,
    });
    for d in m.input_shape {
        w.u32(d);
    }
    w.u32(m.nodes.len());
    for node in &m.nodes {
        match node {
            IntNode::Input(s) => {
                w.u8(0);
                match s {
                    InputStage::Float => w.u8(0),
                    InputStage::Quantize(q) => {
                        w.u8(1);
                        w.act(q);
                    }
                }
            }
            IntNode::Layer(l) => {
                w.u8(1);
                w.str(&l.name);
                w.u32(l.input);
                w.kind(&l.kind);
                for b in [l.bits_w, l.bits_b, l.in_bits, l.acc_bits] {
                    w.u8(b as u8);
                }
                for s in [l.in_scale, l.w_scale, l.b_scale, l.acc_scale] {
                    w.f64(s);
                }
                for codes in [&l.weight_codes, &l.bias_codes] {
                    w.u32(codes.len());
                    for c in codes.iter() {
                        w.0.extend(c.to_le_bytes());
                    }
                }
                w.requant(&l.requant);
            }
            IntNode::Float(f) => {
                w.u8(2);
                w.str(&f.name);
                w.u32(f.input);
                w.kind(&f.kind);
                w.u8(f.relu as u8);
                for vals in [&f.weight, &f.bias] {
                    w.u32(vals.len());
                    for v in vals.iter() {
                        w.f64(*v);
                    }
                }
                match &f.out_quant {
                    None => w.u8(0),
                    Some(q) => {
                        w.u8(1);
                        w.act(q);
                    }
                }
            }
            IntNode::MaxPool { input, size } => {
                w.u8(3);
                w.u32(*input);
                w.u32(*size);
            }
            IntNode::GlobalAvgPool { input } => {
                w.u8(4);
                w.u32(*input);
            }
            IntNode::Add(a) => {
                w.u8(5);
                w.u32(a.branch);
                w.u32(a.skip);
                w.dyadic(a.align);
                w.u8(a.align_shift as u8);
                w.f64(a.align_real);
                w.f64(a.acc_scale);
                w.requant(&a.requant);
            }
            IntNode::Identity { input } => {
                w.u8(6);
                w.u32(*input);
            }
        }
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<IntModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not an integer model file (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Format(format!("integer model version {version}, expected {VERSION}")));
    }
    let task = match r.u8()? {
        0 => Task::Classification,
        1 => Task::Regression,
        t => return Err(Error::Format(format!("unknown task {t}"))),
    };
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let n = r.len()?;
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let check = |j: usize| {
            if j < i {
                Ok(j)
            } else {
                Err(Error::Format(format!("node {i} reads node {j}")))
            }
        };
        let node = match r.u8()? {
            0 => IntNode::Input(if r.flag()? { InputStage::Quantize(r.act()?) } else { InputStage::Float }),
            1 => {
                let name = r.str()?;
                let input = check(r.u32()?)?;
                let kind = r.kind()?;
                let (bits_w, bits_b, in_bits, acc_bits) = (r.u8()? as u32, r.u8()? as u32, r.u8()? as u32, r.u8()? as u32);
                let (in_scale, w_scale, b_scale, acc_scale) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let nw = r.len()?;
                let weight_codes = (0..nw).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
                let nb = r.len()?;
                let bias_codes = (0..nb).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
                if nb == 0 || nw != kind.weight_shape().iter().product::<usize>() || nb != kind.out_channels() {
                    return Err(Error::Format(format!("layer {name}: code counts do not match its kind")));
                }
                IntNode::Layer(IntLayer {
                    name,
                    input,
                    kind,
                    bits_w,
                    bits_b,
                    in_bits,
                    weight_codes,
                    bias_codes,
                    in_scale,
                    w_scale,
                    b_scale,
                    acc_scale,
                    acc_bits,
                    requant: r.requant()?,
                })
            }
            2 => {
                let name = r.str()?;
                let input = check(r.u32()?)?;
                let kind = r.kind()?;
                let relu = r.flag()?;
                let nw = r.len()?;
                let weight = (0..nw).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let nb = r.len()?;
                let bias = (0..nb).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                if nb == 0 || nw != kind.weight_shape().iter().product::<usize>() || nb != kind.out_channels() {
                    return Err(Error::Format(format!("layer {name}: parameter counts do not match its kind")));
                }
                let out_quant = if r.flag()? { Some(r.act()?) } else { None };
                IntNode::Float(FloatLayer { name, input, kind, weight, bias, relu, out_quant })
            }
            3 => IntNode::MaxPool { input: check(r.u32()?)?, size: r.u32()? },
            4 => IntNode::GlobalAvgPool { input: check(r.u32()?)? },
            5 => IntNode::Add(IntAdd {
                branch: check(r.u32()?)?,
                skip: check(r.u32()?)?,
                align: r.dyadic()?,
                align_shift: r.u8()? as u32,
                align_real: r.f64()?,
                acc_scale: r.f64()?,
                requant: r.requant()?,
            }),
            6 => IntNode::Identity { input: check(r.u32()?)? },
            t => return Err(Error::Format(format!("node {i}: unknown tag {t}"))),
        };
        if (i == 0) != matches!(node, IntNode::Input(_)) {
            return Err(Error::Format("exactly node 0 must be the input".into()));
        }
        nodes.push(node);
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if nodes.is_empty() {
        return Err(Error::Format("integer model has no nodes".into()));
    }
    Ok(IntModel { task, input_shape, nodes })
}

pub fn write_int_model(m: &IntModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(m))?;
    Ok(())
}

pub fn read_int_model(path: &Path) -> Result<IntModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::int_infer::lower;
    use crate::model::{Arch, Model};
    use crate::quant::QuantSpec;
    use proptest::prelude::*;

    fn lowered(seed: u64, skip: bool, c_w: f64, c_a: f64) -> IntModel {
        let mut m = Model::new(Arch::mini_resnet(2), seed).unwrap();
        m.fold_batch_norm();
        m.weight_clamps = vec![Some(c_w); 6];
        m.act_clamps = vec![Some(1.0), Some(c_a), Some(c_a * 0.9), Some(c_a * 1.1), Some(c_a), Some(c_a)];
        lower(&m, &QuantSpec::default(), skip).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trips_bit_exactly(seed in 0u64..1000, c_w in 0.05f64..2.0, c_a in 0.1f64..8.0) {
            let m = lowered(seed, true, c_w, c_a);
            let bytes = to_bytes(&m);
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn q_256_survives() {
        let mut m = lowered(1, true, 0.5, 1.0);
        if let IntNode::Add(a) = &mut m.nodes[5] {
            a.align = DyadicScale { q: 256, p: -9 };
        }
        assert_eq!(from_bytes(&to_bytes(&m)).unwrap(), m);
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = to_bytes(&lowered(1, true, 0.5, 1.0));
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }
}
