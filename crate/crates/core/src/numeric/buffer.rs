use std::fmt;

use crate::error::{HicError, Result};

/// Dense row-major array of `f64` values.
///
/// The shape is a list of positive extents and `data.len()` always equals
/// their product. Construction rejects NaN and infinite values.
#[derive(Clone, PartialEq)]
pub struct NdBuffer {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for NdBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NdBuffer{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(HicError::dim("shape must have at least one extent"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(HicError::dim(format!("shape {shape:?} has a zero extent")));
    }
    Ok(shape.iter().product())
}

impl NdBuffer {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(HicError::dim(format!(
                "shape {shape:?} implies {len} values but {} were given",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(HicError::numeric(
                "construct",
                format!("non-finite value {} at flat index {pos}", data[pos]),
            ));
        }
        Ok(NdBuffer { shape, data })
    }

    /// Builds a buffer from values that are already known to be finite.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NdBuffer { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = check_shape(shape).expect("invalid shape");
        assert!(value.is_finite());
        NdBuffer {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Self::new(shape.to_vec(), (0..len).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(HicError::Index(format!(
                "index {index:?} has rank {} but shape is {:?}",
                index.len(),
                self.shape
            )));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(HicError::Index(format!(
                    "index {index:?} out of bounds for shape {:?}",
                    self.shape
                )));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.len() {
            return Err(HicError::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(NdBuffer {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn scalar_value(&self) -> f64 {
        self.data[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Standard matrix product of two rank-2 buffers.
    pub fn matmul(&self, other: &NdBuffer) -> Result<NdBuffer> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(HicError::dim(format!(
                "matmul of {:?} and {:?}: inner extents must match",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        finite_or_err("matmul", vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<NdBuffer> {
        if self.rank() != 2 {
            return Err(HicError::dim(format!(
                "transpose needs a rank-2 buffer, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(NdBuffer::from_parts(vec![c, r], out))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&self) -> NdBuffer {
        let n = *self.shape.last().unwrap();
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        NdBuffer::from_parts(self.shape.clone(), out)
    }

    pub fn add(&self, other: &NdBuffer) -> Result<NdBuffer> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &NdBuffer) -> Result<NdBuffer> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> NdBuffer {
        NdBuffer::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    fn zip_with(&self, op: &str, other: &NdBuffer, f: impl Fn(f64, f64) -> f64) -> Result<NdBuffer> {
        if self.shape != other.shape {
            return Err(HicError::dim(format!(
                "{op} of {:?} and {:?}: shapes must match",
                self.shape, other.shape
            )));
        }
        let out = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finite_or_err(op, self.shape.clone(), out)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

pub(crate) fn finite_or_err(op: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<NdBuffer> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(HicError::numeric(
            op,
            format!("non-finite output at flat index {pos}"),
        ));
    }
    Ok(NdBuffer::from_parts(shape, data))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`. Summation over `k`
/// runs in increasing index order.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(NdBuffer::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(NdBuffer::new(vec![2, 0], vec![]).is_err());
        assert!(matches!(
            NdBuffer::new(vec![2], vec![1.0, f64::NAN]),
            Err(HicError::Numeric { .. })
        ));
        assert!(NdBuffer::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = NdBuffer::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = NdBuffer::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);

        let a = NdBuffer::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = NdBuffer::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = NdBuffer::zeros(&[2, 3]);
        let b = NdBuffer::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let eq = NdBuffer::zeros(&[3]).softmax_lastdim();
        for v in eq.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = NdBuffer::new(vec![2], vec![3f64.ln(), 0.0]).unwrap().softmax_lastdim();
        assert!((s.data()[0] - 0.75).abs() < 1e-15);
        assert!((s.data()[1] - 0.25).abs() < 1e-15);
        let big = NdBuffer::new(vec![2], vec![1000.0, 0.0]).unwrap().softmax_lastdim();
        assert_eq!(big.data()[0], 1.0);
        assert!(big.data()[1] >= 0.0 && big.data()[1] < 1e-300);
    }

    #[test]
    fn transpose_round_trip() {
        let m = NdBuffer::from_fn(&[2, 3], |i| i as f64).unwrap();
        assert_eq!(m.transpose().unwrap().transpose().unwrap(), m);
        assert_eq!(m.transpose().unwrap().get(&[2, 1]).unwrap(), 5.0);
    }
}
