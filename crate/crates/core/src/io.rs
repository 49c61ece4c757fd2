use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

// Volume file: 4-byte magic "M4FV", u8 version (=1), u8 rank (=5),
// five u32 LE dims (B,C,D,H,W), then B*C*D*H*W f32 LE payload values.
pub const VOLUME_MAGIC: [u8; 4] = *b"M4FV";
pub const VOLUME_VERSION: u8 = 1;

// Checkpoint container: magic, version, u64 FNV-1a fingerprint of the config
// text, length-prefixed config text, then length-prefixed-name tensor records.
pub const CKPT_MAGIC: [u8; 4] = *b"M4CK";
pub const CKPT_VERSION: u8 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Encode a tensor body in the volume record layout with its actual rank.
/// Volume files require rank 5; checkpoint records store any rank 1..=5.
fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(&VOLUME_MAGIC);
    out.push(VOLUME_VERSION);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        put_u32(out, d as u32);
    }
    out.reserve(t.len() * 4);
    for &x in t.data() {
        out.extend_from_slice(&(x.dbl() as f32).to_le_bytes());
    }
}

fn decode_tensor<T: Scalar>(cur: &mut Cursor) -> Result<Tensor<T>> {
    let magic = cur.take(4)?;
    if magic != VOLUME_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected M4FV")));
    }
    let ver = cur.u8()?;
    if ver != VOLUME_VERSION {
        return Err(Error::Format(format!("unsupported version {ver}")));
    }
    let rank = cur.u8()? as usize;
    if rank == 0 || rank > 5 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = cur.u32()? as usize;
        if d == 0 {
            return Err(Error::Format("zero dimension in header".into()));
        }
        dims.push(d);
    }
    let n: usize = dims.iter().product();
    let payload = cur.take(n * 4)?;
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        data.push(T::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
    }
    Tensor::new(dims, data)
}

pub fn encode_volume<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() != 5 {
        return Err(Error::shape(format!("volume files are rank 5, got rank {}", t.rank())));
    }
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    Ok(out)
}

pub fn decode_volume<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let t = decode_tensor::<T>(&mut cur)?;
    if t.rank() != 5 {
        return Err(Error::Format(format!("volume files are rank 5, got rank {}", t.rank())));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after payload", bytes.len() - cur.pos)));
    }
    Ok(t)
}

pub fn write_volume<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// In-memory checkpoint: config text plus named tensors in a fixed order.
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.push(CKPT_VERSION);
    let cfg = ck.config_text.as_bytes();
    out.extend_from_slice(&fnv1a64(cfg).to_le_bytes());
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg);
    put_u32(&mut out, ck.tensors.len() as u32);
    for (name, t) in &ck.tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}, expected M4CK")));
    }
    let ver = cur.u8()?;
    if ver != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {ver}")));
    }
    let fp = cur.u64()?;
    let cfg_len = cur.u32()? as usize;
    let cfg_bytes = cur.take(cfg_len)?;
    if fnv1a64(cfg_bytes) != fp {
        return Err(Error::Format("config fingerprint mismatch".into()));
    }
    let config_text = String::from_utf8(cfg_bytes.to_vec())
        .map_err(|e| Error::Format(format!("config text is not UTF-8: {e}")))?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("record name is not UTF-8: {e}")))?;
        tensors.push((name, decode_tensor::<f32>(&mut cur)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after records", bytes.len() - cur.pos)));
    }
    Ok(Checkpoint { config_text, tensors })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Tensor<f32> {
        let dims = vec![2usize, 3, 2, 2, 2];
        let n: usize = dims.iter().product();
        Tensor::new(dims, (0..n).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn volume_bytes_round_trip() {
        let v = sample_volume();
        let bytes = encode_volume(&v).unwrap();
        assert_eq!(&bytes[..4], b"M4FV");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 5);
        let back: Tensor<f32> = decode_volume(&bytes).unwrap();
        assert_eq!(v, back);
        // write-then-read reproduces bytes exactly
        assert_eq!(bytes, encode_volume(&back).unwrap());
    }

    #[test]
    fn header_is_little_endian_dims() {
        let v = sample_volume();
        let bytes = encode_volume(&v).unwrap();
        let dims: Vec<u32> = (0..5)
            .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(dims, vec![2, 3, 2, 2, 2]);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let v = sample_volume();
        let mut bytes = encode_volume(&v).unwrap();
        bytes[0] = b'X';
        assert!(decode_volume::<f32>(&bytes).is_err());

        let mut truncated = encode_volume(&v).unwrap();
        truncated.truncate(truncated.len() - 1);
        assert!(decode_volume::<f32>(&truncated).is_err());

        let mut trailing = encode_volume(&v).unwrap();
        trailing.push(0);
        assert!(decode_volume::<f32>(&trailing).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_fingerprint() {
        let ck = Checkpoint {
            config_text: "variant = \"B\"\nseed = 7\n".into(),
            tensors: vec![
                ("head.w".into(), Tensor::new(vec![4, 8], vec![0.25f32; 32]).unwrap()),
                ("head.b".into(), Tensor::new(vec![4], vec![0.0f32; 4]).unwrap()),
            ],
        };
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config_text, ck.config_text);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensors[0].0, "head.w");
        assert_eq!(back.tensors[0].1.dims(), &[4, 8]);
        assert_eq!(encode_checkpoint(&back), bytes);

        let mut bad = bytes.clone();
        let cfg_start = 4 + 1 + 8 + 4;
        bad[cfg_start] ^= 1;
        assert!(decode_checkpoint(&bad).is_err(), "fingerprint must catch config edits");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.m4fv");
        let v = sample_volume();
        write_volume(&p, &v).unwrap();
        let back: Tensor<f32> = read_volume(&p).unwrap();
        assert_eq!(v, back);
    }
}
