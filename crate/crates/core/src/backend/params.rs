//! Named parameter storage, seeded initialization and the `weights.bin` container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CAMW"
//! version u32 = 1
//! count   u32
//! repeated `count` times:
//!   name_len u32, name utf-8 bytes
//!   ndim u32, dims u64 * ndim
//!   data f32 * prod(dims)
//! ```

use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CAMW";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Incremental builder used by the model constructors.
pub struct ParamInit {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), store: ParamStore { entries: Vec::new() } }
    }

    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f32).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.push(name, ArrayD::from_shape_vec(IxDyn(shape), data).expect("param shape"))
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], v: f32) -> usize {
        self.push(name, ArrayD::from_elem(IxDyn(shape), v))
    }

    fn push(&mut self, name: &str, t: Tensor) -> usize {
        self.store.entries.push((name.to_string(), t));
        self.store.entries.len() - 1
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    /// True when every tensor matches `other` bit for bit.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb && a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a weights file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported weights version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Format(e.to_string()))?;
            entries.push((name, t));
        }
        Ok(Self { entries })
    }

    /// Replaces values with `other`'s, requiring identical names and shapes.
    pub fn load_values(&mut self, other: ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Format(format!("weights hold {} tensors, model expects {}", other.entries.len(), self.entries.len())));
        }
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(other.entries) {
            if *na != nb || a.shape() != b.shape() {
                return Err(Error::Format(format!("weights tensor `{nb}` does not match model tensor `{na}`")));
            }
            *a = b;
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
