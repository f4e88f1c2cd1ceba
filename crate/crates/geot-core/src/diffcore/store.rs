//! Named parameter groups with gradient accumulators, plus checkpoint I/O.
//!
//! A `ParamStore` holds every trainable array of the model as a flat `f64`
//! group addressed by name. Gradients accumulate (`+=`) across backward
//! passes until `reset_grads`, which lets callers sum gradient
//! contributions from several loss terms or micro-batches.
//!
//! Checkpoints use the binary `GEOTCKPT v1` container: the ASCII header
//! line, a little-endian u32 group count, then per group a u32 name
//! length, the UTF-8 name, a u64 value count, and the values as
//! little-endian f64 bits. Round-tripping is bit-exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8] = b"GEOTCKPT v1\n";

#[derive(Debug, Clone)]
pub struct ParamGroup {
    name: String,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl ParamGroup {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    /// Mutable values alongside the current gradients, for optimizer
    /// updates.
    pub fn values_and_grads(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.values, &self.grads)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of named parameter groups. Iteration order is the
/// insertion order, which fixes checkpoint layout and optimizer traversal.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new group; the name must be unused.
    pub fn add_group(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Param(format!("duplicate parameter group '{name}'")));
        }
        let grads = vec![0.0; values.len()];
        self.groups.push(ParamGroup {
            name,
            values,
            grads,
        });
        Ok(())
    }

    fn find(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamGroup> {
        self.find(name)
            .map(|i| &self.groups[i])
            .ok_or_else(|| Error::Param(format!("unknown parameter group '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamGroup> {
        match self.find(name) {
            Some(i) => Ok(&mut self.groups[i]),
            None => Err(Error::Param(format!("unknown parameter group '{name}'"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.find(name).is_some()
    }

    pub fn groups(&self) -> impl Iterator<Item = &ParamGroup> {
        self.groups.iter()
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = &mut ParamGroup> {
        self.groups.iter_mut()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_params(&self) -> usize {
        self.groups.iter().map(|g| g.values.len()).sum()
    }

    /// Adds `delta` into the gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let group = self.get_mut(name)?;
        if group.grads.len() != delta.len() {
            return Err(Error::Shape(format!(
                "gradient for '{}' has {} values, group has {}",
                name,
                delta.len(),
                group.grads.len()
            )));
        }
        for (g, &d) in group.grads.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Zeroes every gradient accumulator.
    pub fn reset_grads(&mut self) {
        for g in &mut self.groups {
            g.grads.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Name of the first group holding a non-finite value or gradient.
    pub fn first_non_finite(&self) -> Option<&str> {
        for g in &self.groups {
            if g.values.iter().chain(&g.grads).any(|v| !v.is_finite()) {
                return Some(&g.name);
            }
        }
        None
    }

    /// Writes the `GEOTCKPT v1` container (values only, no gradients).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.groups.len() as u32).to_le_bytes())?;
        for g in &self.groups {
            let name = g.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(g.values.len() as u64).to_le_bytes())?;
            for v in &g.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `GEOTCKPT v1` container; gradients start zeroed.
    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; CHECKPOINT_MAGIC.len()];
        read_exact(&mut r, &mut magic, path, "header")?;
        if magic != *CHECKPOINT_MAGIC {
            return Err(Error::Config(format!(
                "{}: not a GEOTCKPT v1 checkpoint (bad or mismatched header)",
                path.display()
            )));
        }
        let n_groups = read_u32(&mut r, path, "group count")? as usize;
        let mut store = ParamStore::new();
        for i in 0..n_groups {
            let name_len = read_u32(&mut r, path, "name length")? as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact(&mut r, &mut name_buf, path, "group name")?;
            let name = String::from_utf8(name_buf).map_err(|_| {
                Error::Config(format!(
                    "{}: group {} name is not valid UTF-8",
                    path.display(),
                    i
                ))
            })?;
            let len = read_u64(&mut r, path, "value count")? as usize;
            let mut values = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                read_exact(&mut r, &mut buf, path, "values")?;
                values.push(f64::from_le_bytes(buf));
            }
            store.add_group(name, values)?;
        }
        Ok(store)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Config(format!("{}: truncated checkpoint ({what})", path.display())))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path, what)?;
    Ok(u64::from_le_bytes(buf))
}
