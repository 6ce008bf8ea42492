//! Named parameter storage, seeded initialization and safetensors I/O.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Mat>>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.trainable.push(trainable);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Mat> {
        Arc::clone(&self.values[id.0])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(value.dim(), self.values[id.0].dim(), "shape of {}", self.names[id.0]);
        self.values[id.0] = Arc::new(value);
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn save_safetensors(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<Vec<u8>> = self
            .values
            .iter()
            .map(|v| v.iter().flat_map(|x| x.to_le_bytes()).collect())
            .collect();
        let mut views = Vec::with_capacity(self.len());
        for (i, data) in bytes.iter().enumerate() {
            let (r, c) = self.values[i].dim();
            let view = TensorView::new(Dtype::F64, vec![r, c], data)
                .map_err(|e| Error::Internal(format!("tensor view: {e}")))?;
            views.push((self.names[i].clone(), view));
        }
        safetensors::serialize_to_file(views, None, path)
            .map_err(|e| Error::Internal(format!("writing {}: {e}", path.display())))
    }

    /// Overwrites every parameter from a file; names and shapes must match.
    pub fn load_safetensors(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let file = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        for i in 0..self.len() {
            let name = &self.names[i];
            let view = file
                .tensor(name)
                .map_err(|_| Error::Load(format!("{} lacks tensor {name}", path.display())))?;
            let expected = self.values[i].dim();
            let value = view_to_mat(&view)?;
            if value.dim() != expected {
                return Err(Error::Load(format!(
                    "tensor {name} has shape {:?}, model expects {expected:?}",
                    value.dim()
                )));
            }
            self.values[i] = Arc::new(value);
        }
        Ok(())
    }
}

/// Decodes a 1-D or 2-D tensor as a matrix (1-D becomes a single row).
pub(crate) fn view_to_mat(view: &TensorView<'_>) -> Result<Mat> {
    let data = view.data();
    let values: Vec<f64> = match view.dtype() {
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|b| f32::from_bits((u16::from_le_bytes([b[0], b[1]]) as u32) << 16) as f64)
            .collect(),
        other => return Err(Error::Load(format!("unsupported tensor dtype {other:?}"))),
    };
    let shape = match view.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => return Err(Error::Load(format!("unsupported tensor rank {}", other.len()))),
    };
    Mat::from_shape_vec(shape, values).map_err(|e| Error::Load(e.to_string()))
}

/// Seeded initializers.
pub fn normal_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}
