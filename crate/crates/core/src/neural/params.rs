use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPCKPT\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
    /// Frozen parameters never receive gradients or optimizer updates.
    pub frozen: bool,
}

impl Param {
    fn new(value: Tensor, frozen: bool) -> Self {
        let [r, c] = value.shape();
        Param {
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            value,
            frozen,
        }
    }
}

/// Named trainable tensors with paired gradient buffers and Adam moments.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    pub(crate) adam_steps: u64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            adam_steps: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Initialisation RNG; draws advance deterministically with registration order.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Registers `name`. Panics on a duplicate name: parameter layouts are static.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.insert_with(name, value, false);
    }

    pub fn insert_frozen(&mut self, name: &str, value: Tensor) {
        self.insert_with(name, value, true);
    }

    fn insert_with(&mut self, name: &str, value: Tensor, frozen: bool) {
        let prev = self.params.insert(name.to_string(), Param::new(value, frozen));
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize) {
        let t = Tensor::glorot(rows, cols, &mut self.rng);
        self.insert(name, t);
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn add_grad(&mut self, name: &str, g: &Tensor) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if !p.frozen {
            p.grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, k: f64) {
        for p in self.params.values_mut() {
            p.grad.scale_assign(k);
        }
    }

    /// Adds every gradient of `other` into this store (summing worker results).
    pub fn merge_grads(&mut self, other: &ParamStore) {
        for (name, p) in &other.params {
            self.add_grad(name, &p.grad);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Writes the named-tensor checkpoint: magic, version, seed, then
    /// `name, frozen flag, shape, little-endian f64 values` per tensor.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.adam_steps.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[p.frozen as u8])?;
            let [r, c] = p.value.shape();
            w.write_all(&(r as u64).to_le_bytes())?;
            w.write_all(&(c as u64).to_le_bytes())?;
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
            Ok(buf)
        }
        if &take::<8>(&mut r)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let seed = u64::from_le_bytes(take(&mut r)?);
        let adam_steps = u64::from_le_bytes(take(&mut r)?);
        let count = u32::from_le_bytes(take(&mut r)?);
        let mut store = ParamStore::new(seed);
        store.adam_steps = adam_steps;
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let frozen = take::<1>(&mut r)?[0] != 0;
            let rows = u64::from_le_bytes(take(&mut r)?) as usize;
            let cols = u64::from_le_bytes(take(&mut r)?) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(take(&mut r)?));
            }
            if store.contains(&name) {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            store.insert_with(&name, Tensor::from_vec(rows, cols, data)?, frozen);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ParamStore::read_from(std::io::BufReader::new(f))
    }

    /// True when both stores hold the same names, shapes, flags and bit patterns.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((a, p), (b, q))| {
                a == b
                    && p.frozen == q.frozen
                    && p.value.shape() == q.value.shape()
                    && p
                        .value
                        .data()
                        .iter()
                        .zip(q.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = ParamStore::new(9);
        s.glorot("a.w", 3, 4);
        s.insert_frozen("end", Tensor::row(&[f64::MIN_POSITIVE, -0.0, 1e300]));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(buf.as_slice()).unwrap();
        assert!(s.bit_equal(&back));
        assert_eq!(back.seed(), 9);
        assert!(back.get("end").unwrap().frozen);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut s = ParamStore::new(1);
        s.glorot("w", 2, 2);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            ParamStore::read_from(buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
        assert!(ParamStore::read_from(&b"nonsense"[..]).is_err());
    }

    #[test]
    fn frozen_params_ignore_gradients() {
        let mut s = ParamStore::new(1);
        s.insert_frozen("f", Tensor::row(&[1.0]));
        s.add_grad("f", &Tensor::row(&[5.0]));
        assert_eq!(s.grad("f").unwrap().data(), &[0.0]);
    }
}
