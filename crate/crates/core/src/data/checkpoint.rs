//! MCKP: named-tensor checkpoints.
//!
//! ```text
//! "MCKP" | version u8 = 1 | count u32 LE
//! count x ( name_len u16 LE | UTF-8 name | MTEN record )
//! ```
//! Entries are written in lexicographic name order.

use std::fs;
use std::path::Path;

use super::mten::{decode_at, encode_into, AnyTensor};
use crate::error::{Error, Result};
use crate::params::{Kind, ParamStore};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"MCKP";
pub const VERSION: u8 = 1;

pub fn encode_entries<T: Float>(entries: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&(String, &Tensor<T>)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Contract(format!("duplicate checkpoint entry {}", w[0].0)));
    }
    let count = u32::try_from(sorted.len()).map_err(|_| Error::Contract("too many checkpoint entries".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in sorted {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("entry name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_into(*t, &mut out)?;
    }
    Ok(out)
}

fn fmt_err<R>(offset: usize, msg: impl Into<String>) -> Result<R> {
    Err(Error::Format { offset, msg: msg.into() })
}

/// Entries in file order.
pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    if bytes.len() < 9 {
        return fmt_err(bytes.len(), format!("truncated header: {} of 9 bytes", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return fmt_err(0, format!("bad magic {:?}, expected \"MCKP\"", String::from_utf8_lossy(&bytes[..4])));
    }
    if bytes[4] != VERSION {
        return fmt_err(4, format!("unsupported version {}", bytes[4]));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let mut pos = 9;
    let mut out: Vec<(String, AnyTensor)> = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        if bytes.len() < pos + 2 {
            return fmt_err(bytes.len(), format!("truncated entry {i} name length"));
        }
        let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        pos += 2;
        if bytes.len() < pos + len {
            return fmt_err(bytes.len(), format!("truncated entry {i} name"));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + len])
            .map_err(|_| Error::Format { offset: pos, msg: format!("entry {i} name is not UTF-8") })?
            .to_string();
        if let Some((prev, _)) = out.last() {
            if *prev >= name {
                return fmt_err(pos, format!("entry {name:?} out of order or duplicated after {prev:?}"));
            }
        }
        pos += len;
        let (t, used) = decode_at(&bytes[pos..], pos)?;
        pos += used;
        out.push((name, t));
    }
    if pos != bytes.len() {
        return fmt_err(pos, format!("{} trailing bytes after last entry", bytes.len() - pos));
    }
    Ok(out)
}

/// Saves every parameter and buffer of `store`.
pub fn save_checkpoint<T: Float>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_store(store)?)?;
    Ok(())
}

pub fn encode_store<T: Float>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let entries: Vec<(String, &Tensor<T>)> = store.iter().map(|(n, e)| (n.clone(), &e.tensor)).collect();
    encode_entries(&entries)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, AnyTensor)>> {
    decode_entries(&fs::read(path)?)
}

/// Overwrites every tensor of `store` from a checkpoint. The checkpoint must
/// hold exactly the same names and shapes; the first mismatch is reported.
pub fn load_into<T: Float>(store: &mut ParamStore<T>, entries: Vec<(String, AnyTensor)>) -> Result<()> {
    let expected: Vec<String> = store.names().cloned().collect();
    let mut it = entries.into_iter();
    for name in &expected {
        let Some((got, t)) = it.next() else {
            return Err(Error::Load(format!("checkpoint is missing tensor {name}")));
        };
        if got != *name {
            let which = if got < *name { format!("unexpected tensor {got}") } else { format!("missing tensor {name}") };
            return Err(Error::Load(format!("checkpoint does not match model: {which}")));
        }
        let want = store.get(name)?.shape().to_vec();
        if t.shape() != want {
            return Err(Error::Load(format!(
                "tensor {name} has shape {:?} in checkpoint, model expects {want:?}",
                t.shape()
            )));
        }
        store.set(name, t.cast())?;
    }
    if let Some((extra, _)) = it.next() {
        return Err(Error::Load(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>, store: &mut ParamStore<T>) -> Result<()> {
    load_into(store, read_checkpoint(path)?)
}

/// Store rebuilt from a checkpoint alone; entries named `*.running_mean` or
/// `*.running_var` become buffers.
pub fn store_from_entries<T: Float>(entries: Vec<(String, AnyTensor)>) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (name, t) in entries {
        let kind =
            if name.ends_with(".running_mean") || name.ends_with(".running_var") { Kind::Buffer } else { Kind::Param };
        store.insert(name, t.cast(), kind);
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("b.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2), Kind::Param);
        s.insert("a.bias", Tensor::from_fn(&[3], |i| -(i as f32)), Kind::Param);
        s.insert("a.running_var", Tensor::ones(&[3]), Kind::Buffer);
        s
    }

    #[test]
    fn roundtrip_bitwise_and_sorted() {
        let s = store();
        let bytes = encode_store(&s).unwrap();
        let entries = decode_entries(&bytes).unwrap();
        let names: Vec<_> = entries.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["a.bias", "a.running_var", "b.weight"]);
        let mut fresh = s.clone();
        fresh.set("b.weight", Tensor::zeros(&[2, 3])).unwrap();
        load_into(&mut fresh, entries).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(fresh.iter()) {
            assert!(a.tensor.bitwise_eq(&b.tensor));
        }
        assert_eq!(encode_store(&fresh).unwrap(), bytes);
    }

    #[test]
    fn mismatch_names_first_tensor() {
        let s = store();
        let entries = decode_entries(&encode_store(&s).unwrap()).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.insert("a.bias", Tensor::zeros(&[4]), Kind::Param);
        other.insert("a.running_var", Tensor::zeros(&[3]), Kind::Buffer);
        other.insert("b.weight", Tensor::zeros(&[2, 3]), Kind::Param);
        match load_into(&mut other, entries) {
            Err(Error::Load(m)) => assert!(m.contains("a.bias"), "{m}"),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn corrupt_headers_rejected() {
        let good = encode_store(&store()).unwrap();
        let mut b = good.clone();
        b[1] = b'X';
        assert!(matches!(decode_entries(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(decode_entries(&b), Err(Error::Format { offset: 4, .. })));
        let mut b = good.clone();
        b[5] = 4;
        assert!(matches!(decode_entries(&b), Err(Error::Format { .. })));
        assert!(matches!(decode_entries(&good[..good.len() - 3]), Err(Error::Format { .. })));
        // The embedded record of the first entry starts after 9 + 2 + 6 bytes.
        let mut b = good.clone();
        b[17] = b'Q';
        assert!(matches!(decode_entries(&b), Err(Error::Format { offset: 17, .. })));
    }
}
