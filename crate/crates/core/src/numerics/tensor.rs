use std::fmt;

use super::NumericsError;

/// Dense row-major array of `f64`.
///
/// A `Tensor` is a plain value. Gradient tracking lives in [`super::Graph`],
/// which wraps tensors in nodes and records the operations applied to them.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidShape(shape));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive: {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: &[f64]) -> Self {
        assert!(!values.is_empty());
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a 2-D tensor; 1-D tensors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => panic!("expected a 1-D or 2-D tensor, got {:?}", self.shape),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `[k×n]`.
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(g_row, b_row);
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += a_ip * gv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
