//! Named parameter store, initialization, and the versioned checkpoint
//! container.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ALGRNETC";
const VERSION: u32 = 1;

/// Insertion-ordered set of named tensors. Layers hold indices into it.
#[derive(Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &ArrayD<f64> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut ArrayD<f64> {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> {
        0..self.values.len()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Bind every parameter onto a tape as a leaf, in insertion order.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&config_hash.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for (name, value) in self.names.iter().zip(&self.values) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Load a checkpoint; the stored config hash must match `config_hash`.
    pub fn load(path: &Path, config_hash: u64) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Input(format!(
                    "checkpoint {} truncated",
                    path.display()
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::Input(format!(
                "{} is not an ALGRNet checkpoint",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let stored_hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        if stored_hash != config_hash {
            return Err(Error::Config(format!(
                "checkpoint config hash {stored_hash:#x} does not match current config {config_hash:#x}"
            )));
        }
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Input("bad parameter name in checkpoint".into()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Input(format!("bad checkpoint tensor: {e}")))?;
            set.insert(&name, arr);
        }
        Ok(set)
    }

    /// Copy values from another set with identical names/shapes.
    pub fn assign_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config(
                "checkpoint parameter names do not match the model".into(),
            ));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(
                    "checkpoint parameter shapes do not match the model".into(),
                ));
            }
            dst.assign(src);
        }
        Ok(())
    }
}

/// Tape bindings for one forward pass, aligned with the param set.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic Xavier-uniform initializer over a single seeded stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn xavier(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    pub fn conv(&mut self, set: &mut ParamSet, name: &str, co: usize, ci: usize, k: usize) -> usize {
        let w = self.xavier(&[co, ci, k, k], ci * k * k, co * k * k);
        set.insert(name, w)
    }

    pub fn dense(&mut self, set: &mut ParamSet, name: &str, i: usize, o: usize) -> usize {
        let w = self.xavier(&[i, o], i, o);
        set.insert(name, w)
    }

    pub fn zeros(&mut self, set: &mut ParamSet, name: &str, shape: &[usize]) -> usize {
        set.insert(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn constant(&mut self, set: &mut ParamSet, name: &str, shape: &[usize], v: f64) -> usize {
        set.insert(name, ArrayD::from_elem(IxDyn(shape), v))
    }
}
