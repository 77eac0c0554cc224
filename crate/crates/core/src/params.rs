//! Named parameter storage shared by generators, critics and the perceptual
//! backbone.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_file::{NamedArray, TensorFile};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        // copy() guarantees the variable owns its storage.
        let var = Var::from_tensor(&t.copy()?)?;
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        Ok(())
    }

    /// Shares the storage of an existing variable.
    pub fn insert_shared(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Independent copy of every variable.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_detached_tensor())?;
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_detached_tensor().to_dtype(dtype)?)?;
        }
        Ok(out)
    }

    /// SHA-256 over `(name, shape, f64 bit patterns)` of the selected entries,
    /// visited in name order.
    pub fn checksum<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<String> {
        let mut selected: Vec<&str> = names.into_iter().collect();
        selected.sort_unstable();
        let mut h = Sha256::new();
        for name in selected {
            let v = self.var(name)?;
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = v
                .as_detached_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for x in vals {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn checksum_all(&self) -> Result<String> {
        self.checksum(self.vars.keys().map(|s| s.as_str()))
    }

    pub fn push_arrays(&self, file: &mut TensorFile, prefix: &str) -> Result<()> {
        for (k, v) in &self.vars {
            file.push(NamedArray::from_tensor(format!("{prefix}{k}"), v.as_tensor())?);
        }
        Ok(())
    }

    /// Overwrites values from `file` arrays named `prefix + name`; every
    /// parameter must be present with a matching shape.
    pub fn load_arrays(&self, file: &TensorFile, prefix: &str) -> Result<()> {
        for (k, v) in &self.vars {
            let a = file.require(&format!("{prefix}{k}"))?;
            if a.shape != v.dims() {
                return Err(Error::Shape(format!(
                    "parameter {k}: checkpoint shape {:?} vs model {:?}",
                    a.shape,
                    v.dims()
                )));
            }
            v.set(&a.to_tensor(v.device(), v.dtype())?)?;
        }
        Ok(())
    }
}
