use std::fmt::{Debug, Display};

use super::NumericsError;

/// Element type of a [`Tensor`].
///
/// Values are stored at the element precision, but every reduction
/// (dot products, sums, norms, log-sum-exp) accumulates in `f64`.
pub trait Real: Copy + Default + PartialOrd + Debug + Display + Send + Sync + 'static {
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        if dims.contains(&0) {
            return Err(NumericsError::InvalidDims { dims });
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(NumericsError::LengthMismatch {
                dims,
                len: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, T::ZERO)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::filled(dims, T::ONE)
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    /// Builds an `m×n` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![m, n], data)
    }

    pub fn from_f64_slice(dims: &[usize], values: &[f64]) -> Result<Self, NumericsError> {
        Self::new(dims.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.dims.iter().all(|&d| d == 1)
    }

    /// Views the tensor as a matrix: rank 0 is `1×1`, rank 1 is a single row.
    pub fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.dims.as_slice() {
            [] => Some((1, 1)),
            [n] => Some((1, *n)),
            [m, n] => Some((*m, *n)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, n) = self.as_matrix().expect("row access on rank > 2 tensor");
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self, NumericsError> {
        let expected: usize = dims.iter().product();
        if expected != self.data.len() || dims.contains(&0) {
            return Err(NumericsError::LengthMismatch {
                dims,
                len: self.data.len(),
            });
        }
        self.dims = dims;
        Ok(self)
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| T::from_f64(f(v.to_f64()))).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.dims, other.dims);
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| T::from_f64(f(a.to_f64(), b.to_f64())))
                .collect(),
        }
    }

    /// Sum of all elements accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn norm_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn transpose(&self) -> Result<Self, NumericsError> {
        let (m, n) = self.as_matrix().ok_or_else(|| NumericsError::Rank {
            op: "transpose",
            dims: self.dims.clone(),
        })?;
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            dims: vec![n, m],
            data: out,
        })
    }

    /// Stacks rows of several matrices (all with the same column count).
    pub fn vstack(parts: &[&Tensor<T>]) -> Result<Self, NumericsError> {
        let cols = match parts.first().and_then(|p| p.as_matrix()) {
            Some((_, n)) => n,
            None => {
                return Err(NumericsError::InvalidDims { dims: Vec::new() });
            }
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, n) = p.as_matrix().ok_or_else(|| NumericsError::Rank {
                op: "vstack",
                dims: p.dims.clone(),
            })?;
            if n != cols {
                return Err(NumericsError::Shape {
                    op: "vstack",
                    left: vec![rows, cols],
                    right: p.dims.clone(),
                });
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }
}

/// Plain matrix product `a·b` with `f64` accumulation.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let (m, k) = a.as_matrix().filter(|_| a.dims.len() == 2).ok_or_else(|| {
        NumericsError::Rank {
            op: "matmul",
            dims: a.dims.clone(),
        }
    })?;
    let (k2, n) = b.as_matrix().filter(|_| b.dims.len() == 2).ok_or_else(|| {
        NumericsError::Rank {
            op: "matmul",
            dims: b.dims.clone(),
        }
    })?;
    if k != k2 {
        return Err(NumericsError::Shape {
            op: "matmul",
            left: a.dims.clone(),
            right: b.dims.clone(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &aval) in arow.iter().enumerate() {
            let av = aval.to_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += av * bv.to_f64();
            }
        }
        out.extend(acc.iter().map(|&x| T::from_f64(x)));
    }
    Ok(Tensor {
        dims: vec![m, n],
        data: out,
    })
}

/// `aᵀ·b` without materialising the transpose.
pub(crate) fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.dims[0], a.dims[1]);
    let n = b.dims[1];
    debug_assert_eq!(b.dims[0], k);
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &aval) in arow.iter().enumerate() {
            let av = aval.to_f64();
            if av == 0.0 {
                continue;
            }
            let out = &mut acc[i * n..(i + 1) * n];
            for (slot, &bv) in out.iter_mut().zip(brow) {
                *slot += av * bv.to_f64();
            }
        }
    }
    Tensor {
        dims: vec![m, n],
        data: acc.into_iter().map(T::from_f64).collect(),
    }
}

/// `a·bᵀ` without materialising the transpose.
pub(crate) fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.dims[0], a.dims[1]);
    let n = b.dims[0];
    debug_assert_eq!(b.dims[1], k);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let dot: f64 = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x.to_f64() * y.to_f64())
                .sum();
            out.push(T::from_f64(dot));
        }
    }
    Tensor {
        dims: vec![m, n],
        data: out,
    }
}

impl<T: Real> Display for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let eye = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f32>::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::<f32>::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn mismatch_reports_both_dims() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(NumericsError::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn transposed_kernels_agree() {
        let a = Tensor::<f64>::from_f64_slice(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::from_f64_slice(&[3, 2], &[0.5, -1.0, 2.0, 0.0, 1.0, 1.0]).unwrap();
        let tn = matmul_tn(&a, &b);
        assert_eq!(tn, matmul(&a.transpose().unwrap(), &b).unwrap());
        let nt = matmul_nt(&a, &b);
        assert_eq!(nt, matmul(&a, &b.transpose().unwrap()).unwrap());
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }
}
