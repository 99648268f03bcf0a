use std::collections::BTreeMap;

use crate::tensor::{self, ConvParams, Tensor, TensorError};

use super::NetError;

/// A float convolution implementation the network can run on.
pub trait ConvKernel: Send + Sync {
    fn name(&self) -> &'static str;
    fn conv(&self, input: &Tensor, params: &ConvParams) -> Result<Tensor, TensorError>;
}

/// Plane-sweep kernel, parallel over output channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectConv;

impl ConvKernel for DirectConv {
    fn name(&self) -> &'static str {
        "direct"
    }

    fn conv(&self, input: &Tensor, params: &ConvParams) -> Result<Tensor, TensorError> {
        tensor::conv2d(input, params)
    }
}

/// Per-element nested loops; the equivalence oracle for [`DirectConv`].
#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveConv;

impl ConvKernel for NaiveConv {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn conv(&self, input: &Tensor, params: &ConvParams) -> Result<Tensor, TensorError> {
        tensor::conv2d_naive(input, params)
    }
}

type KernelCtor = fn() -> Box<dyn ConvKernel>;

/// Conv kernels selectable by name.
pub struct KernelRegistry {
    kernels: BTreeMap<&'static str, KernelCtor>,
}

impl Default for KernelRegistry {
    fn default() -> Self {
        let mut r = Self {
            kernels: BTreeMap::new(),
        };
        r.register("direct", || Box::new(DirectConv));
        r.register("naive", || Box::new(NaiveConv));
        r
    }
}

impl KernelRegistry {
    pub fn register(&mut self, name: &'static str, ctor: KernelCtor) {
        self.kernels.insert(name, ctor);
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn ConvKernel>, NetError> {
        self.kernels
            .get(name)
            .map(|ctor| ctor())
            .ok_or_else(|| NetError::UnknownKernel(name.to_owned()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.kernels.keys().copied().collect()
    }
}
