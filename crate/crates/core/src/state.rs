//! Typed arrays and a JSON header: the in-memory form of a training
//! checkpoint. The byte-level encoding lives with the command-line tool.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Adam, ParamMoments};

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::U8(_) => DType::U8,
            ArrayData::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores scalars under their own dtype.
    pub fn from_scalars<S: Scalar>(values: &[S]) -> Self {
        match S::DTYPE {
            DType::F32 => ArrayData::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            _ => ArrayData::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }

    /// Floating-point contents as `S`; exact when the dtype matches.
    pub fn to_scalars<S: Scalar>(&self) -> Result<Vec<S>> {
        match self {
            ArrayData::F32(v) => Ok(v.iter().map(|x| S::lit(*x as f64)).collect()),
            ArrayData::F64(v) => Ok(v.iter().map(|x| S::lit(*x)).collect()),
            _ => Err(Error::Config("expected a floating-point array".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: &[usize], data: ArrayData) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), data }
    }

    pub fn flat(name: impl Into<String>, data: ArrayData) -> Self {
        let n = data.len();
        Self::new(name, &[n], data)
    }
}

/// A header plus named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBundle {
    pub header: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl StateBundle {
    pub fn new<H: Serialize>(header: &H) -> Result<Self> {
        let header = serde_json::to_value(header).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { header, arrays: Vec::new() })
    }

    pub fn header<H: DeserializeOwned>(&self) -> Result<H> {
        serde_json::from_value(self.header.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayData> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| &a.data)
            .ok_or_else(|| Error::Config(format!("missing array `{name}`")))
    }

    pub fn scalars<S: Scalar>(&self, name: &str) -> Result<Vec<S>> {
        self.get(name)?.to_scalars()
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            ArrayData::U8(v) => Ok(v),
            _ => Err(Error::Config(format!("`{name}` is not a byte array"))),
        }
    }

    pub fn words(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            ArrayData::U64(v) => Ok(v),
            _ => Err(Error::Config(format!("`{name}` is not a u64 array"))),
        }
    }

    pub fn f32s(&self, name: &str) -> Result<&[f32]> {
        match self.get(name)? {
            ArrayData::F32(v) => Ok(v),
            _ => Err(Error::Config(format!("`{name}` is not an f32 array"))),
        }
    }
}

/// Appends optimizer moments under `prefix.`; the step count goes in
/// `prefix.step`.
pub fn export_adam<S: Scalar>(adam: &Adam<S>, prefix: &str, out: &mut StateBundle) {
    out.push(NamedArray::flat(format!("{prefix}.step"), ArrayData::U64(vec![adam.step_count()])));
    for (i, m) in adam.moments().iter().enumerate() {
        out.push(NamedArray::flat(format!("{prefix}.m{i}"), ArrayData::from_scalars(&m.first)));
        out.push(NamedArray::flat(format!("{prefix}.v{i}"), ArrayData::from_scalars(&m.second)));
    }
}

pub fn import_adam<S: Scalar>(adam: &mut Adam<S>, prefix: &str, bundle: &StateBundle) -> Result<()> {
    let step = bundle.words(&format!("{prefix}.step"))?.first().copied().unwrap_or(0);
    let mut moments = Vec::new();
    while let (Ok(first), Ok(second)) = (
        bundle.scalars(&format!("{prefix}.m{}", moments.len())),
        bundle.scalars(&format!("{prefix}.v{}", moments.len())),
    ) {
        moments.push(ParamMoments { first, second });
    }
    adam.restore(step, moments);
    Ok(())
}
