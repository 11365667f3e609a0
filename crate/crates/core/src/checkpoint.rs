//! Checkpoint archive: a JSON metadata blob plus named tensors.
//!
//! Layout (all integers little-endian):
//!   magic "DTCK", u32 format version, u32 meta length, meta JSON bytes,
//!   u32 tensor count, then per tensor: u16 name length, name bytes,
//!   u8 kind (0 parameter, 1 buffer), u8 dtype (byte width, 4 or 8),
//!   u32 ndim, ndim x u32 dims, raw payload.
//!
//! Writes are a pure function of (meta, store contents, insertion order),
//! which is what lets determinism tests compare checkpoints byte for byte.
//! Trainable flags are not persisted; loaders re-freeze what they need.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::io::{Cursor, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DTCK";
pub const FORMAT_VERSION: u32 = 1;

fn write_tensor<S: Scalar, W: Write>(
    w: &mut W,
    name: &str,
    kind: u8,
    tensor: &ArrayD<S>,
) -> Result<()> {
    let width = std::mem::size_of::<S>() as u8;
    w.write_u16::<LittleEndian>(name.len() as u16)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(kind)?;
    w.write_u8(width)?;
    w.write_u32::<LittleEndian>(tensor.ndim() as u32)?;
    for &d in tensor.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for v in tensor.iter() {
        let x = (*v).to_f64();
        if width == 4 {
            w.write_all(&(x as f32).to_le_bytes())?;
        } else {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Serializes metadata plus every parameter and buffer, in store order.
pub fn encode_store<S: Scalar>(meta: &serde_json::Value, store: &ParamStore<S>) -> Result<Vec<u8>> {
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| Error::format(e.to_string()))?;
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u32::<LittleEndian>(meta_bytes.len() as u32)?;
    out.write_all(&meta_bytes)?;
    let count = store.iter().count() + store.buffers().count();
    out.write_u32::<LittleEndian>(count as u32)?;
    for (name, p) in store.iter() {
        write_tensor(&mut out, name, 0, p.value.as_ref())?;
    }
    for (name, b) in store.buffers() {
        write_tensor(&mut out, name, 1, b)?;
    }
    Ok(out)
}

pub fn save_store<S: Scalar>(
    path: &Path,
    meta: &serde_json::Value,
    store: &ParamStore<S>,
) -> Result<()> {
    let bytes = encode_store(meta, store)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Inverse of [`encode_store`]. The scalar width must match `S` exactly;
/// there is no silent cast between f32 and f64 checkpoints.
pub fn decode_store<S: Scalar>(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore<S>)> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::format_at(0, "truncated before magic"))?;
    if &magic != MAGIC {
        return Err(Error::format_at(0, "bad magic bytes"));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format_at(4, "truncated version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::format_at(4, format!("unsupported version {version}")));
    }
    let meta_len = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format_at(8, "truncated meta length"))? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    cur.read_exact(&mut meta_bytes)
        .map_err(|_| Error::format_at(cur.position(), "truncated metadata"))?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::format_at(12, format!("metadata not JSON: {e}")))?;
    let count = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format_at(cur.position(), "truncated tensor count"))?;
    let mut store = ParamStore::<S>::new();
    let want_width = std::mem::size_of::<S>() as u8;
    for _ in 0..count {
        let at = cur.position();
        let name_len = cur
            .read_u16::<LittleEndian>()
            .map_err(|_| Error::format_at(at, "truncated tensor name length"))?
            as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)
            .map_err(|_| Error::format_at(at, "truncated tensor name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format_at(at, "tensor name not UTF-8"))?;
        let kind = cur
            .read_u8()
            .map_err(|_| Error::format_at(at, "truncated tensor kind"))?;
        let width = cur
            .read_u8()
            .map_err(|_| Error::format_at(at, "truncated dtype"))?;
        if width != want_width {
            return Err(Error::format_at(
                at,
                format!("dtype width {width} does not match runtime scalar {want_width}"),
            ));
        }
        let ndim = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format_at(at, "truncated rank"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(
                cur.read_u32::<LittleEndian>()
                    .map_err(|_| Error::format_at(at, "truncated dims"))? as usize,
            );
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let v = if width == 4 {
                let mut b = [0u8; 4];
                cur.read_exact(&mut b)
                    .map_err(|_| Error::format_at(at, "truncated payload"))?;
                f32::from_le_bytes(b) as f64
            } else {
                let mut b = [0u8; 8];
                cur.read_exact(&mut b)
                    .map_err(|_| Error::format_at(at, "truncated payload"))?;
                f64::from_le_bytes(b)
            };
            data.push(S::from_f64(v));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::format_at(at, format!("bad tensor shape: {e}")))?;
        match kind {
            0 => store.register(&name, tensor),
            1 => store.register_buffer(&name, tensor),
            other => return Err(Error::format_at(at, format!("unknown tensor kind {other}"))),
        }
    }
    Ok((meta, store))
}

pub fn load_store<S: Scalar>(path: &Path) -> Result<(serde_json::Value, ParamStore<S>)> {
    let bytes = std::fs::read(path)?;
    decode_store(&bytes)
}

/// SHA-256 over the full serialized store with empty metadata; used to
/// assert that frozen models were not touched.
pub fn store_digest<S: Scalar>(store: &ParamStore<S>) -> [u8; 32] {
    let bytes = encode_store(&serde_json::Value::Null, store).expect("in-memory encode");
    let mut h = Sha256::new();
    h.update(&bytes);
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm2d, Conv2d};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore<f32> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Conv2d::new(&mut store, &mut rng, "m.conv", 3, 4, 3, 1, 1, 1, true);
        BatchNorm2d::new(&mut store, "m.bn", 4);
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample_store();
        let meta = serde_json::json!({"kind": "test", "epoch": 3});
        let bytes = encode_store(&meta, &store).unwrap();
        let again = encode_store(&meta, &store).unwrap();
        assert_eq!(bytes, again, "encoding must be deterministic");
        let (meta2, store2) = decode_store::<f32>(&bytes).unwrap();
        assert_eq!(meta, meta2);
        let names1: Vec<_> = store.iter().map(|(n, _)| n.to_string()).collect();
        let names2: Vec<_> = store2.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names1, names2);
        for ((_, a), (_, b)) in store.iter().zip(store2.iter()) {
            assert_eq!(a.value, b.value);
        }
        let bufs1: Vec<_> = store.buffers().collect();
        let bufs2: Vec<_> = store2.buffers().collect();
        assert_eq!(bufs1.len(), bufs2.len());
        for ((n1, a), (n2, b)) in bufs1.iter().zip(bufs2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
        assert_eq!(store_digest(&store), store_digest(&store2));
    }

    #[test]
    fn corrupt_and_mismatched_files_fail_loudly() {
        let store = sample_store();
        let meta = serde_json::json!({});
        let mut bytes = encode_store(&meta, &store).unwrap();
        bytes[0] = b'X';
        match decode_store::<f32>(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, Some(0)),
            other => panic!("expected format error, got {other:?}"),
        }
        let good = encode_store(&meta, &store).unwrap();
        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode_store::<f32>(truncated), Err(Error::Format { .. })));
        // f32 checkpoint must not load into an f64 store.
        assert!(matches!(decode_store::<f64>(&good), Err(Error::Format { .. })));
    }

    #[test]
    fn digest_tracks_content() {
        let mut store = sample_store();
        let d1 = store_digest(&store);
        store.update("m.conv.weight", |w| w[[0, 0, 0, 0]] += 1.0);
        let d2 = store_digest(&store);
        assert_ne!(d1, d2);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dtck");
        let store = sample_store();
        let meta = serde_json::json!({"kind": "teacher"});
        save_store(&path, &meta, &store).unwrap();
        let (meta2, store2) = load_store::<f32>(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(store_digest(&store), store_digest(&store2));
    }
}
