//! Named parameter storage and the checkpoint file format.
//!
//! Checkpoints are a versioned binary archive: a magic tag, a UTF-8 JSON
//! metadata blob (config snapshot, step counter, validation loss), a header
//! listing (name, dtype, shape, byte offset) per tensor, and a little-endian
//! raw payload. Loading reproduces values bit-identically.

use crate::error::{Error, Result};
use crate::tensor::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MRGCKPT1";

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<F>,
}

/// Ordered map of named tensors; iteration follows insertion order so every
/// consumer sees a stable deterministic sequence.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), index: HashMap::new() }
    }

    /// Inserts a tensor and returns its slot index.
    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<F>) -> usize {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name}: values do not fill shape"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let slot = self.params.len();
        self.index.insert(name.to_string(), slot);
        self.params.push(Param { name: name.to_string(), shape, values });
        slot
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn get(&self, slot: usize) -> &Param<F> {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Param<F> {
        &mut self.params[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Converts element precision, e.g. a trained f32 set to f64 for
    /// gradient checking.
    pub fn convert<G: Real>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(
                &p.name,
                p.shape.clone(),
                p.values.iter().map(|&v| G::from_f64(v.as_f64())).collect(),
            );
        }
        out
    }
}

/// Gaussian sampler used for parameter initialization. Draws in f64 and
/// converts, so f32 and f64 models see the same stream.
pub struct GaussianInit<'a> {
    rng: &'a mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl<'a> GaussianInit<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, std: f64) -> Self {
        GaussianInit { rng, normal: Normal::new(0.0, std).expect("valid std") }
    }

    pub fn sample<F: Real>(&mut self, n: usize) -> Vec<F> {
        (0..n)
            .map(|_| F::from_f64(self.normal.sample(&mut self.rng)))
            .collect()
    }

    pub fn uniform_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// Serialized training state: every named tensor plus a JSON metadata blob.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub tensors: ParamSet<F>,
    pub meta_json: String,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        let mut payload = Vec::new();
        for p in self.tensors.iter() {
            let name = p.name.as_bytes();
            header.extend_from_slice(&(name.len() as u16).to_le_bytes());
            header.extend_from_slice(name);
            header.push(if F::DTYPE == "f32" { 0 } else { 1 });
            header.push(p.shape.len() as u8);
            for &d in &p.shape {
                push_u32(&mut header, d as u32);
            }
            push_u64(&mut header, payload.len() as u64);
            for &v in &p.values {
                v.write_le(&mut payload);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, self.meta_json.len() as u32);
        out.extend_from_slice(self.meta_json.as_bytes());
        push_u32(&mut out, self.tensors.len() as u32);
        out.extend_from_slice(&header);
        push_u64(&mut out, payload.len() as u64);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(bad("truncated file"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(bad("bad magic; not a checkpoint file"));
        }
        let json_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta_json = String::from_utf8(take(&mut pos, json_len)?.to_vec())
            .map_err(|_| bad("metadata is not UTF-8"))?;
        let n_entries = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| bad("tensor name is not UTF-8"))?;
            let dtype = take(&mut pos, 1)?[0];
            let expected = if F::DTYPE == "f32" { 0 } else { 1 };
            if dtype != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has dtype tag {dtype}, expected {expected} for {}",
                    F::DTYPE
                )));
            }
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            entries.push((name, shape, offset));
        }
        let payload_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let payload = take(&mut pos, payload_len)?;

        let mut tensors = ParamSet::new();
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let nbytes = n * F::BYTES;
            if offset + nbytes > payload.len() {
                return Err(Error::Checkpoint(format!("tensor {name} extends past payload")));
            }
            let values = payload[offset..offset + nbytes]
                .chunks_exact(F::BYTES)
                .map(F::read_le)
                .collect();
            tensors.add(&name, shape, values);
        }
        Ok(Checkpoint { tensors, meta_json })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut init = GaussianInit::new(&mut rng, 0.1);
        let mut set: ParamSet<f32> = ParamSet::new();
        set.add("w1", vec![3, 4], init.sample(12));
        set.add("nested.w2", vec![2], init.sample(2));
        let ckpt = Checkpoint { tensors: set, meta_json: r#"{"step":7}"#.to_string() };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta_json, ckpt.meta_json);
        for (a, b) in ckpt.tensors.iter().zip(back.tensors.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn wrong_dtype_rejected() {
        let mut set: ParamSet<f32> = ParamSet::new();
        set.add("w", vec![1], vec![1.0]);
        let ckpt = Checkpoint { tensors: set, meta_json: "{}".into() };
        let err = Checkpoint::<f64>::from_bytes(&ckpt.to_bytes()).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }

    #[test]
    fn param_order_is_insertion_order() {
        let mut set: ParamSet<f64> = ParamSet::new();
        set.add("zz", vec![1], vec![0.0]);
        set.add("aa", vec![1], vec![0.0]);
        let names: Vec<&str> = set.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, vec!["zz", "aa"]);
        assert_eq!(set.slot_of("aa"), Some(1));
    }
}
