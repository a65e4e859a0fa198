use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Activation tensor stored channel-major across the batch: `[C][B][H][W]`.
///
/// With this layout a convolution over a whole batch is one matrix product
/// `W[Cout, Cin*9] @ cols[Cin*9, B*H*W]`, and channel concatenation is an
/// append. Dense activations use `h = w = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            b,
            h,
            w,
            data: vec![T::zero(); c * b * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Columns of the `[C, B*H*W]` matrix view.
    pub fn cols(&self) -> usize {
        self.b * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.b, self.h, self.w) == (other.c, other.b, other.h, other.w)
    }

    pub fn shape_string(&self) -> String {
        format!("[C={}, B={}, H={}, W={}]", self.c, self.b, self.h, self.w)
    }

    /// Build from sample-major `[B][C][H][W]` data.
    pub fn from_nchw(b: usize, c: usize, h: usize, w: usize, data: &[T]) -> Result<Self> {
        let hw = h * w;
        if data.len() != b * c * hw {
            return Err(Error::shape(
                format!("{} values for [B={b}, C={c}, H={h}, W={w}]", b * c * hw),
                data.len(),
            ));
        }
        let mut t = Self::zeros(c, b, h, w);
        for bi in 0..b {
            for ci in 0..c {
                let src = &data[(bi * c + ci) * hw..][..hw];
                t.data[(ci * b + bi) * hw..][..hw].copy_from_slice(src);
            }
        }
        Ok(t)
    }

    /// Sample-major `[B][C][H][W]` copy.
    pub fn to_nchw(&self) -> Vec<T> {
        let hw = self.hw();
        let mut out = vec![T::zero(); self.len()];
        for bi in 0..self.b {
            for ci in 0..self.c {
                out[(bi * self.c + ci) * hw..][..hw].copy_from_slice(&self.data[(ci * self.b + bi) * hw..][..hw]);
            }
        }
        out
    }

    pub fn sample_nchw(&self, bi: usize) -> Vec<T> {
        let hw = self.hw();
        (0..self.c)
            .flat_map(|ci| self.data[(ci * self.b + bi) * hw..][..hw].iter().copied())
            .collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            b: self.b,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
