use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numcore::Array;
use crate::scalar::Scalar;

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable arrays with fixed shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<S> {
    names: Vec<String>,
    values: Vec<Array<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParameterSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array<S>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<S> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array<S>)> {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// `Σ‖θ‖²` over every parameter.
    pub fn sum_sq(&self) -> S {
        self.values.iter().map(Array::sum_sq).sum()
    }

    /// Checkpoint layout (little endian):
    /// `b"RIGNNCKP"`, u32 version, u32 count, then per array
    /// u32 name length, name bytes, u64 rows, u64 cols, `rows*cols` f64 bit patterns.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(value.rows() as u64).to_le_bytes())?;
            w.write_all(&(value.cols() as u64).to_le_bytes())?;
            for &x in value.data() {
                w.write_all(&x.as_f64().to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut set = Self::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let bits = read_u64(&mut r)?;
                data.push(S::lit(f64::from_bits(bits)));
            }
            if set.id(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            set.insert(name, Array::from_vec(rows, cols, data));
        }
        Ok(set)
    }

    /// Replaces every value from `other`, which must have identical names and shapes.
    pub fn load_values_from(&mut self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format(
                "checkpoint parameter names do not match the model".into(),
            ));
        }
        for (i, (mine, theirs)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    self.names[i],
                    mine.shape(),
                    theirs.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RIGNNCKP";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Dense gradients, one array per parameter, aligned with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    grads: Vec<Array<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(params: &ParameterSet<S>) -> Self {
        Self {
            grads: params.values.iter().map(|v| Array::zeros(v.rows(), v.cols())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array<S> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<S> {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: S) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Adds `coef · θ` for every parameter (gradient of `coef/2 · Σ‖θ‖²`).
    pub fn add_l2(&mut self, params: &ParameterSet<S>, coef: S) {
        for (g, v) in self.grads.iter_mut().zip(&params.values) {
            g.axpy(coef, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array<S>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Array::is_finite)
    }
}
