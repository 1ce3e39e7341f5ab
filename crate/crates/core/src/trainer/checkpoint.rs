use std::fs;
use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized training state.
///
/// Layout (little-endian): magic, u32 version, u64 step, u32-prefixed config
/// text, u32 tensor count, then per tensor a u32-prefixed name, u32 rank,
/// u32 dims and f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "non-UTF-8 string"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `path` is only used in error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::format(path, "missing TPCK header"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self { step, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Appends every tensor of `store`, prefixing names with `prefix`.
    pub fn push_store(&mut self, store: &ParamStore<f32>, prefix: &str) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Overwrites every tensor of `store` from `prefix`-ed entries. All of
    /// them must be present with matching shapes.
    pub fn fill_store(&self, store: &mut ParamStore<f32>, prefix: &str) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = self.get(&key).ok_or_else(|| Error::config(format!("checkpoint has no tensor `{key}`")))?;
            store.assign(&name, t).map_err(|e| Error::config(format!("checkpoint tensor `{key}`: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            step: 42,
            config: "lr = 0.0001\n".into(),
            tensors: vec![
                ("a".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2)),
                ("b/c".into(), Tensor::new(vec![1], vec![f32::MIN_POSITIVE]).unwrap()),
                ("s".into(), Tensor::scalar(-0.0)),
            ],
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"TPCK");
        let back = Checkpoint::decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.step, 42);
        assert_eq!(back.get("s").unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn file_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/ck.tpck");
        sample().save(&p).unwrap();
        let first = fs::read(&p).unwrap();
        Checkpoint::load(&p).unwrap().save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let bytes = sample().encode();
        let p = Path::new("ck");
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut], p), Err(Error::Format { .. })));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra, p), Err(Error::Format { .. })));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(Checkpoint::decode(&ver, p), Err(Error::Format { .. })));
    }

    #[test]
    fn store_fill_checks_names_and_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut ck = Checkpoint { step: 0, config: String::new(), tensors: vec![] };
        assert!(ck.fill_store(&mut store.clone(), "p/").is_err());
        ck.tensors.push(("p/w".into(), Tensor::zeros(&[3])));
        assert!(ck.fill_store(&mut store.clone(), "p/").is_err());
        ck.tensors[0].1 = Tensor::full(&[2, 2], 1.5);
        ck.fill_store(&mut store, "p/").unwrap();
        assert_eq!(store.by_name("w").unwrap().data(), &[1.5; 4]);
    }
}
