use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use super::{Gradients, Graph, Tensor};
use crate::error::{Error, Result};

/// Which model branch owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Understanding,
    Generation,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Understanding => "understanding",
            Branch::Generation => "generation",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Branch::Understanding => 0,
            Branch::Generation => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Branch::Understanding),
            1 => Some(Branch::Generation),
            _ => None,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "understanding" | "und" | "u" => Ok(Branch::Understanding),
            "generation" | "gen" | "g" => Ok(Branch::Generation),
            other => Err(Error::Config(format!("unknown branch `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub branch: Branch,
}

/// Hierarchically named parameters, each tagged with its owning branch.
/// Ordered by name so iteration (and therefore optimizer updates and
/// serialization) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamTree {
    pub fn new() -> Self {
        ParamTree::default()
    }

    /// Adds a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, branch: Branch, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            ParamEntry {
                tensor: tensor.with_grad(),
                branch,
            },
        );
        Ok(())
    }

    pub fn insert_randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        branch: Branch,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        self.insert(name, branch, Tensor::randn(shape, std, rng))
    }

    pub fn insert_const(&mut self, name: impl Into<String>, branch: Branch, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, branch, Tensor::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn branch(&self, name: &str) -> Result<Branch> {
        self.entries
            .get(name)
            .map(|e| e.branch)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Overwrites the values of `dst` with those of `src` (shapes must agree).
    pub fn copy_value(&mut self, src: &str, dst: &str) -> Result<()> {
        let data = self.get(src)?.data.clone();
        let t = self.get_mut(dst)?;
        if t.data.len() != data.len() {
            return Err(Error::LengthMismatch {
                what: "parameter copy",
                expected: t.data.len(),
                got: data.len(),
            });
        }
        t.data = data;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.zero_grad();
        }
    }

    /// Sets `requires_grad` per branch: entries whose branch is in `frozen`
    /// become constants. Returns the names left trainable.
    pub fn apply_freeze(&mut self, frozen: &[Branch]) -> Vec<String> {
        let mut trainable = Vec::new();
        for (name, e) in self.entries.iter_mut() {
            let on = !frozen.contains(&e.branch);
            e.tensor.set_requires_grad(on);
            if on {
                trainable.push(name.clone());
            }
        }
        trainable
    }

    /// Adds the gradients of every parameter bound into `graph`.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        for (var, name) in graph.bindings() {
            let Some(g) = grads.wrt(*var) else { continue };
            let t = self.get_mut(name)?;
            if let Some(dst) = t.grad.as_mut() {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    /// Bytes of every value of the given branch, in name order.
    pub fn branch_bytes(&self, branch: Branch) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, e) in &self.entries {
            if e.branch == branch {
                out.extend_from_slice(name.as_bytes());
                for x in &e.tensor.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }
}

/// SHA-256 over names, branch tags, shapes and values, in name order.
pub fn param_hash(params: &ParamTree) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, e) in params.iter() {
        h.update(name.as_bytes());
        h.update([e.branch.code()]);
        for &d in &e.tensor.shape {
            h.update((d as u64).to_le_bytes());
        }
        for x in &e.tensor.data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
