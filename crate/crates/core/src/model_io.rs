//! Versioned binary model files.
//!
//! Layout: `EAAW`, format version byte, backend tag byte, then the model shape
//! as little-endian `u32`s (`input_dim, classes, vocab, context, embed_dim,
//! n_hidden, hidden...`), then every parameter in declaration order as
//! little-endian `f64`, then a `u64` checksum equal to the sum of all
//! parameter bytes modulo 2^64.

use std::path::Path;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Backend, Model, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EAAW";
pub const VERSION: u8 = 1;

pub fn checksum(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0u64, |s, &b| s.wrapping_add(u64::from(b)))
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let spec = model.spec();
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u8(VERSION);
    w.u8(spec.backend.tag());
    for d in [
        spec.input_dim,
        spec.classes,
        spec.vocab,
        spec.context,
        spec.embed_dim,
        spec.hidden.len(),
    ] {
        w.u32(d)?;
    }
    for &h in &spec.hidden {
        w.u32(h)?;
    }
    let start = w.len();
    for v in model.params().flatten() {
        w.f64(v);
    }
    let mut bytes = w.into_bytes();
    let sum = checksum(&bytes[start..]);
    bytes.extend_from_slice(&sum.to_le_bytes());
    Ok(bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported format version {version}, expected {VERSION}"),
        });
    }
    let at = r.offset();
    let tag = r.u8()?;
    let backend = Backend::from_tag(tag).ok_or_else(|| Error::Format {
        offset: at,
        msg: format!("unknown backend tag {tag}"),
    })?;
    let input_dim = r.u32()?;
    let classes = r.u32()?;
    let vocab = r.u32()?;
    let context = r.u32()?;
    let embed_dim = r.u32()?;
    let n_hidden = r.count(4)?;
    let hidden = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        backend,
        input_dim,
        classes,
        vocab,
        context,
        embed_dim,
        hidden,
    };
    let at = r.offset();
    spec.validate().map_err(|e| Error::Format {
        offset: at,
        msg: format!("invalid spec block: {e}"),
    })?;

    let start = r.offset();
    let mut params = ParamStore::new();
    for (name, shape) in spec.layout() {
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format {
            offset: r.offset(),
            msg: "parameter block too large".into(),
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(&name, Tensor::new(shape, data)?)?;
    }
    let expect = checksum(&bytes[start..r.offset()]);
    let at = r.offset();
    let got = r.u64()?;
    if got != expect {
        return Err(Error::Format {
            offset: at,
            msg: format!("checksum mismatch: stored {got:#x}, computed {expect:#x}"),
        });
    }
    r.finish()?;
    Model::from_params(spec, params)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    codec::write_file(path, &encode(model)?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode(&codec::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let spec = ModelSpec::classifier(2, vec![1], 2);
        let mut p = ParamStore::new();
        p.add(
            "dense0.weight",
            Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap(),
        )
        .unwrap();
        p.add("dense0.bias", Tensor::new(vec![1], vec![0.5]).unwrap())
            .unwrap();
        p.add(
            "out.weight",
            Tensor::new(vec![2, 1], vec![0.0, 0.25]).unwrap(),
        )
        .unwrap();
        p.add("out.bias", Tensor::new(vec![2], vec![-1.0, 3.0]).unwrap())
            .unwrap();
        Model::from_params(spec, p).unwrap()
    }

    #[test]
    fn golden_layout() {
        let mut g: Vec<u8> = b"EAAW".to_vec();
        g.extend([1u8, 0u8]);
        for d in [2u32, 2, 0, 0, 0, 1, 1] {
            g.extend(d.to_le_bytes());
        }
        let vals = [1.0f64, -2.0, 0.5, 0.0, 0.25, -1.0, 3.0];
        let mut sum = 0u64;
        for v in vals {
            for b in v.to_le_bytes() {
                sum += b as u64;
                g.push(b);
            }
        }
        g.extend(sum.to_le_bytes());
        assert_eq!(encode(&tiny()).unwrap(), g);
        assert_eq!(decode(&g).unwrap(), tiny());
    }

    #[test]
    fn rejects_corruption() {
        let good = encode(&tiny()).unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(decode(&b), Err(Error::Format { offset: 4, .. })));
        let mut b = good.clone();
        let n = b.len();
        b[n - 9] ^= 1;
        assert!(matches!(decode(&b), Err(Error::Format { .. })));
        assert!(matches!(
            decode(&good[..good.len() - 3]),
            Err(Error::Format { .. })
        ));
    }
}
