//! Dense row-major `f64` tensors and the value-level kernels shared by the
//! tape and by gradient-free inference paths.
//!
//! Only ranks 0, 1 and 2 are used. A rank-1 tensor of length `n` is treated
//! as a `1 × n` row wherever a matrix is expected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor added to the norm inside `l2_normalize`; norms at or below it are rejected.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks equally long rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// `(rows, cols)` view; rank-1 tensors are single rows, scalars are 1×1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_kernel(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Matrix product of two rank ≤ 2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Tensor::matrix(m, n, matmul_kernel(a.data(), b.data(), m, k, n))
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = a.dims2();
    Tensor {
        shape: vec![n, m],
        data: transpose_kernel(a.data(), m, n),
        requires_grad: false,
        grad: None,
    }
}

/// `x + b` with `b` (length `cols`) added to every row of `x`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2();
    if bias.numel() != n {
        return Err(Error::Dimension {
            op: "add_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut data = x.data().to_vec();
    for i in 0..m {
        for (o, b) in data[i * n..(i + 1) * n].iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
        requires_grad: false,
        grad: None,
    }
}

/// Row norms used by `l2_normalize`; errors when any norm is at or below [`EPS_NORM`].
pub(crate) fn row_norms(x: &Tensor) -> Result<Vec<f64>> {
    let (m, _) = x.dims2();
    (0..m)
        .map(|i| {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= EPS_NORM {
                Err(Error::DegenerateVector {
                    norm,
                    floor: EPS_NORM,
                })
            } else {
                Ok(norm)
            }
        })
        .collect()
}

/// Scales each row (or the whole vector, for rank 1) to unit Euclidean norm.
///
/// The denominator is `‖v‖ + EPS_NORM`.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norms = row_norms(x)?;
    let (_, n) = x.dims2();
    let mut data = x.data().to_vec();
    for (i, norm) in norms.iter().enumerate() {
        let denom = norm + EPS_NORM;
        for v in &mut data[i * n..(i + 1) * n] {
            *v /= denom;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}
