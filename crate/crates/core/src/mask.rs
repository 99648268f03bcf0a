use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Row-major 0/1 mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    /// Returns `None` if the length is wrong or any value is not 0/1.
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == height * width && data.iter().all(|&v| v <= 1)).then_some(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = u8::from(value);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Any tensor value `> 0.5` is foreground; the tensor must be `(1, 1, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Option<Self> {
        let [n, c, h, w] = t.shape();
        (n == 1 && c == 1).then(|| Self {
            height: h,
            width: w,
            data: t.data().iter().map(|&v| u8::from(v > 0.5)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| f32::from(v)).collect(),
        )
        .expect("mask dimensions are positive")
    }
}
