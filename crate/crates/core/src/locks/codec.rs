//! Bit-exact key file format.
//!
//! Header: magic, version u16, variant u8, epsilon f32, K u32, scope bitmap
//! (`ceil(K/8)` bytes, LSB first), fingerprint (32 bytes), image C,H,W u16.
//! Then the variant payload and a selection trailer (flag u8, optionally
//! fraction f32 and seed u64). All integers and floats little-endian.

use std::collections::BTreeSet;

use learnlock_tensor::Tensor;

use super::{ConvKey, ConvLayer, ConvNet, Family, LinearKey, LockKey, MixturePart, Selection, Transform};
use crate::bytes::{Reader, Writer};
use crate::dataset::Fingerprint;
use crate::error::{Error, Result};

pub const KEY_MAGIC: [u8; 4] = *b"LLKY";
pub const KEY_VERSION: u16 = 1;

const V_LINEAR: u8 = 0;
const V_CONV: u8 = 1;
const V_MIXTURE: u8 = 2;
const V_GLOBAL: u8 = 3;

/// Bytes before the variant payload for a key over `k` classes.
pub fn header_len(k: usize) -> usize {
    4 + 2 + 1 + 4 + 4 + k.div_ceil(8) + 32 + 6
}

fn family_tag(f: &Family) -> u8 {
    match f {
        Family::Linear(_) => V_LINEAR,
        Family::Conv(_) => V_CONV,
    }
}

fn write_linear(w: &mut Writer, k: &LinearKey) {
    w.f32s(k.w.data());
    w.f32s(k.b.data());
}

fn write_conv(w: &mut Writer, k: &ConvKey) {
    for net in &k.nets {
        w.u8(net.layers.len() as u8);
        for l in &net.layers {
            let s = l.weight.shape();
            w.u16(s[0] as u16);
            w.u16(s[1] as u16);
            w.u8(s[2] as u8);
            w.u8(s[3] as u8);
            w.u8(l.padding as u8);
            w.f32s(l.weight.data());
            w.f32s(l.bias.data());
        }
        w.u32(k.iters as u32);
    }
}

fn write_family(w: &mut Writer, f: &Family) {
    match f {
        Family::Linear(k) => write_linear(w, k),
        Family::Conv(k) => write_conv(w, k),
    }
}

pub fn encode_key(key: &LockKey) -> Result<Vec<u8>> {
    key.validate()?;
    let k = key.num_classes;
    let mut w = Writer::default();
    w.bytes(&KEY_MAGIC);
    w.u16(KEY_VERSION);
    w.u8(match &key.transform {
        Transform::Linear(_) => V_LINEAR,
        Transform::Conv(_) => V_CONV,
        Transform::Mixture(_) => V_MIXTURE,
        Transform::Global(_) => V_GLOBAL,
    });
    w.f32(key.epsilon);
    w.u32(k as u32);
    let mut bitmap = vec![0u8; k.div_ceil(8)];
    for &c in &key.scope {
        bitmap[c / 8] |= 1 << (c % 8);
    }
    w.bytes(&bitmap);
    w.bytes(&key.fingerprint.0);
    for d in key.image_shape {
        w.u16(u16::try_from(d).map_err(|_| Error::Config(format!("image side {d} too large for key format")))?);
    }
    match &key.transform {
        Transform::Linear(l) => write_linear(&mut w, l),
        Transform::Conv(c) => write_conv(&mut w, c),
        Transform::Global(f) => {
            w.u8(family_tag(f));
            write_family(&mut w, f);
        }
        Transform::Mixture(parts) => {
            w.u16(parts.len() as u16);
            for p in parts {
                w.u8(family_tag(&p.family));
                w.u16(p.classes.len() as u16);
                for &c in &p.classes {
                    w.u16(c as u16);
                }
                write_family(&mut w, &p.family);
            }
        }
    }
    match key.selection {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.f32(s.fraction);
            w.u64(s.seed);
        }
    }
    Ok(w.buf)
}

fn read_linear(r: &mut Reader, eps: f32, slots: usize, d: usize) -> Result<LinearKey> {
    let n = slots.checked_mul(d).ok_or_else(|| Error::CorruptKey("slot count overflow".into()))?;
    let wv = r.f32s(n)?;
    let bv = r.f32s(n)?;
    Ok(LinearKey {
        epsilon: eps,
        w: Tensor::new(vec![slots, d], wv)?,
        b: Tensor::new(vec![slots, d], bv)?,
    })
}

fn read_conv(r: &mut Reader, eps: f32, slots: usize) -> Result<ConvKey> {
    let mut nets = Vec::with_capacity(slots);
    let mut iters = None;
    for _ in 0..slots {
        let count = r.u8()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (o, i) = (r.u16()? as usize, r.u16()? as usize);
            let (kh, kw, padding) = (r.u8()? as usize, r.u8()? as usize, r.u8()? as usize);
            let weight = Tensor::new(vec![o, i, kh, kw], r.f32s(o * i * kh * kw)?)?;
            let bias = Tensor::new(vec![o], r.f32s(o)?)?;
            layers.push(ConvLayer { weight, bias, padding });
        }
        let m = r.u32()? as usize;
        if *iters.get_or_insert(m) != m {
            return Err(Error::CorruptKey("fixed-point iteration counts differ between slots".into()));
        }
        nets.push(ConvNet { layers });
    }
    Ok(ConvKey {
        epsilon: eps,
        iters: iters.unwrap_or(0),
        nets,
    })
}

fn read_family(r: &mut Reader, tag: u8, eps: f32, slots: usize, d: usize) -> Result<Family> {
    Ok(match tag {
        V_LINEAR => Family::Linear(read_linear(r, eps, slots, d)?),
        V_CONV => Family::Conv(read_conv(r, eps, slots)?),
        t => return Err(Error::CorruptKey(format!("unknown family tag {t}"))),
    })
}

pub fn decode_key(bytes: &[u8]) -> Result<LockKey> {
    let mut r = Reader::new(bytes);
    r.magic(KEY_MAGIC)?;
    let version = r.u16()?;
    if version != KEY_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let variant = r.u8()?;
    let eps = r.f32()?;
    let k = r.u32()? as usize;
    let bitmap = r.take(k.div_ceil(8))?;
    let scope: BTreeSet<usize> = (0..k).filter(|&c| bitmap[c / 8] & (1 << (c % 8)) != 0).collect();
    let fingerprint = Fingerprint(r.take(32)?.try_into().expect("32 bytes"));
    let image_shape = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
    let d: usize = image_shape.iter().product();
    let transform = match variant {
        V_LINEAR => Transform::Linear(read_linear(&mut r, eps, k, d)?),
        V_CONV => Transform::Conv(read_conv(&mut r, eps, k)?),
        V_GLOBAL => {
            let tag = r.u8()?;
            Transform::Global(read_family(&mut r, tag, eps, 1, d)?)
        }
        V_MIXTURE => {
            let parts = r.u16()? as usize;
            let mut out = Vec::with_capacity(parts);
            for _ in 0..parts {
                let tag = r.u8()?;
                let n = r.u16()? as usize;
                let classes = (0..n).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
                let family = read_family(&mut r, tag, eps, n, d)?;
                out.push(MixturePart { classes, family });
            }
            Transform::Mixture(out)
        }
        v => return Err(Error::CorruptKey(format!("unknown variant {v}"))),
    };
    let selection = match r.u8()? {
        0 => None,
        1 => Some(Selection {
            fraction: r.f32()?,
            seed: r.u64()?,
        }),
        f => return Err(Error::CorruptKey(format!("bad selection flag {f}"))),
    };
    if !r.is_empty() {
        return Err(Error::CorruptKey("trailing bytes after key".into()));
    }
    let key = LockKey {
        num_classes: k,
        image_shape,
        epsilon: eps,
        scope,
        fingerprint,
        transform,
        selection,
    };
    key.validate()?;
    Ok(key)
}
