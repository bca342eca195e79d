use crate::error::{Error, Result};
use crate::grid::{Dims, Field, ScalarGrid, VectorGrid};

/// Planar multi-channel array on a lattice; the value type of tape nodes.
///
/// Scalars are one channel on [`Dims::scalar`]. Convolution kernels are
/// `cout * cin` channels on a `k x k` lattice, biases `cout` channels on
/// the scalar lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != channels * dims.len() {
            return Err(Error::shape(format!(
                "tensor with {channels} channels on {:?} cannot hold {} values",
                dims.sizes(),
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            dims,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims.len()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            channels: 1,
            dims: Dims::scalar(),
            data: vec![v],
        }
    }

    pub fn from_field<G: Field>(g: &G) -> Self {
        Tensor {
            channels: g.channels(),
            dims: *g.dims(),
            data: g.data().to_vec(),
        }
    }

    pub fn to_scalar_grid(&self, spacing: Vec<f64>) -> Result<ScalarGrid> {
        if self.channels != 1 {
            return Err(Error::shape("scalar grid from multi-channel tensor"));
        }
        ScalarGrid::new(self.dims, spacing, self.data.clone())
    }

    pub fn to_vector_grid(&self, spacing: Vec<f64>) -> Result<VectorGrid> {
        if self.channels != self.dims.ndim() {
            return Err(Error::shape("vector grid needs one channel per axis"));
        }
        VectorGrid::new(self.dims, spacing, self.data.clone())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub(crate) fn with_data(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
