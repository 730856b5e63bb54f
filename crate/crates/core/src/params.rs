//! Named parameter storage, deterministic initialisation and the checkpoint
//! container.
//!
//! Checkpoint layout (all integers little-endian `u32`):
//!
//! ```text
//! b"WSCKPT\x01\n"
//! meta_len  meta_bytes        UTF-8 "key=value\n" lines, sorted by key
//! n_arrays
//! repeated, sorted by name:
//!   name_len name_bytes ndim dim_0 .. dim_{ndim-1} data (f32 LE, row-major)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"WSCKPT\x01\n";

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    Uniform(f64),
    /// He-normal with the given fan-in.
    Kaiming(usize),
}

struct Inner {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
}

/// Shared handle to a set of named trainable tensors. Cloning is cheap;
/// [`ParamStore::pp`] returns a handle that prefixes every new name.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.lock();
        f.debug_struct("ParamStore")
            .field("prefix", &self.prefix)
            .field("dtype", &inner.dtype)
            .field("params", &inner.vars.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                dtype,
                device: Device::Cpu,
                rng: ChaCha8Rng::seed_from_u64(seed),
                vars: BTreeMap::new(),
                frozen: BTreeSet::new(),
            })),
            prefix: String::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("param store poisoned")
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            inner: Arc::clone(&self.inner),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Creates and registers a parameter. Names must be unique.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.lock();
        if inner.vars.contains_key(&full) {
            return Err(Error::Checkpoint(format!("duplicate parameter name {full}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut inner.rng)).collect()
            }
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| d.sample(&mut inner.rng)).collect()
            }
            Init::Kaiming(fan_in) => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let d = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut inner.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(tensor)
    }

    /// All parameters under this handle's prefix, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let inner = self.lock();
        inner
            .vars
            .iter()
            .filter(|(k, _)| self.owns(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn owns(&self, name: &str) -> bool {
        self.prefix.is_empty() || name == self.prefix || name.starts_with(&format!("{}.", self.prefix))
    }

    pub fn names(&self) -> Vec<String> {
        self.named_vars().into_iter().map(|(k, _)| k).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters under this prefix that are not frozen.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let inner = self.lock();
        inner
            .vars
            .iter()
            .filter(|(k, _)| self.owns(k) && !inner.frozen.contains(*k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn freeze(&self, pred: impl Fn(&str) -> bool) {
        let mut inner = self.lock();
        let names: Vec<String> = inner
            .vars
            .keys()
            .filter(|k| self.owns(k) && pred(k))
            .cloned()
            .collect();
        inner.frozen.extend(names);
    }

    pub fn unfreeze_all(&self) {
        let mut inner = self.lock();
        let prefix_owned: Vec<String> = inner.frozen.iter().filter(|k| self.owns(k)).cloned().collect();
        for k in prefix_owned {
            inner.frozen.remove(&k);
        }
    }

    pub fn is_frozen(&self, full_name: &str) -> bool {
        self.lock().frozen.contains(full_name)
    }

    /// f32 copy of every parameter under this prefix.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.named_vars() {
            out.insert(k, v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, metadata: BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut arrays = BTreeMap::new();
        for (k, v) in self.named_vars() {
            let t = v.as_tensor();
            arrays.insert(
                k,
                Array {
                    shape: t.dims().to_vec(),
                    data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                },
            );
        }
        Ok(Checkpoint { metadata, arrays })
    }

    /// Overwrites every parameter under this prefix with the checkpoint
    /// array of the same name. Missing names and shape mismatches are
    /// collected and reported together; extra checkpoint arrays are ignored.
    pub fn load_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        let vars = self.named_vars();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for (name, var) in &vars {
            match ckpt.arrays.get(name) {
                None => missing.push(name.clone()),
                Some(a) if a.shape != var.dims() => {
                    mismatched.push(format!("{name} (expected {:?}, found {:?})", var.dims(), a.shape))
                }
                Some(_) => {}
            }
        }
        if !missing.is_empty() || !mismatched.is_empty() {
            let mut msg = String::new();
            if !missing.is_empty() {
                msg.push_str(&format!("missing arrays: {}", missing.join(", ")));
            }
            if !mismatched.is_empty() {
                if !msg.is_empty() {
                    msg.push_str("; ");
                }
                msg.push_str(&format!("shape mismatch: {}", mismatched.join(", ")));
            }
            return Err(Error::Checkpoint(msg));
        }
        let dtype = self.dtype();
        for (name, var) in vars {
            let a = &ckpt.arrays[&name];
            let t = Tensor::from_slice(&a.data, a.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named f32 arrays plus a flat text metadata record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    /// Arrays whose names start with `prefix.`, as a new checkpoint.
    pub fn subset(&self, prefix: &str) -> Checkpoint {
        let dotted = format!("{prefix}.");
        Checkpoint {
            metadata: self.metadata.clone(),
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(&dotted))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds the arrays and metadata of `other`, which win on name clashes.
    pub fn merge(&mut self, other: &Checkpoint) {
        for (k, v) in &other.metadata {
            self.metadata.insert(k.clone(), v.clone());
        }
        for (k, v) in &other.arrays {
            self.arrays.insert(k.clone(), v.clone());
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("metadata key '{key}' missing")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry '{k}' contains a reserved character")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        put_u32(&mut buf, meta.len())?;
        buf.extend_from_slice(meta.as_bytes());
        put_u32(&mut buf, self.arrays.len())?;
        for (name, a) in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("array {name} shape does not match data")));
            }
            put_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, a.shape.len())?;
            for &d in &a.shape {
                put_u32(&mut buf, d)?;
            }
            for v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let meta = r.string()?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line '{line}'")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if arrays.insert(name.clone(), Array { shape, data }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last array".into()));
        }
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_same_init() {
        let a = ParamStore::new(3, DType::F32);
        let b = ParamStore::new(3, DType::F32);
        for s in [&a, &b] {
            s.pp("x").get("w", &[4, 3], Init::Normal(1.0)).unwrap();
            s.pp("x").get("b", &[3], Init::Zeros).unwrap();
        }
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
        assert_eq!(a.names(), vec!["x.b".to_string(), "x.w".to_string()]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::new(0, DType::F32);
        s.get("w", &[2], Init::Zeros).unwrap();
        assert!(s.get("w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn load_reports_missing_and_mismatched_names() {
        let s = ParamStore::new(0, DType::F32);
        s.get("a", &[2], Init::Ones).unwrap();
        s.get("b", &[3], Init::Ones).unwrap();
        let mut ckpt = s.to_checkpoint(BTreeMap::new()).unwrap();
        ckpt.arrays.remove("a");
        ckpt.arrays.get_mut("b").unwrap().shape = vec![1, 3];
        let err = s.load_checkpoint(&ckpt).unwrap_err().to_string();
        assert!(err.contains("missing arrays: a"), "{err}");
        assert!(err.contains("shape mismatch: b"), "{err}");
    }

    #[test]
    fn checkpoint_load_sets_values() {
        let s = ParamStore::new(0, DType::F64);
        s.get("w", &[2, 2], Init::Normal(1.0)).unwrap();
        let other = ParamStore::new(1, DType::F64);
        other.get("w", &[2, 2], Init::Normal(1.0)).unwrap();
        s.load_checkpoint(&other.to_checkpoint(BTreeMap::new()).unwrap()).unwrap();
        assert_eq!(s.snapshot().unwrap(), other.snapshot().unwrap());
    }

    #[test]
    fn freezing_filters_trainables() {
        let s = ParamStore::new(0, DType::F32);
        s.pp("enc").get("w", &[1], Init::Zeros).unwrap();
        s.pp("head").get("w", &[1], Init::Zeros).unwrap();
        s.freeze(|n| n.starts_with("enc."));
        assert_eq!(s.trainable_vars().len(), 1);
        assert!(s.is_frozen("enc.w"));
        s.unfreeze_all();
        assert_eq!(s.trainable_vars().len(), 2);
    }

    proptest! {
        #[test]
        fn bytes_roundtrip_is_exact(
            vals in proptest::collection::vec(proptest::num::f32::ANY, 1..40),
            key in "[a-z]{1,8}",
            value in "[ -~&&[^=]]{0,12}",
        ) {
            let mut ckpt = Checkpoint::default();
            ckpt.metadata.insert(key, value);
            ckpt.arrays.insert("p.w".into(), Array { shape: vec![vals.len()], data: vals.clone() });
            ckpt.arrays.insert("p.b".into(), Array { shape: vec![1, 1], data: vec![vals[0]] });
            let bytes = ckpt.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            let bits: Vec<u32> = back.arrays["p.w"].data.iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
        }
    }
}
