use crate::error::{Error, Result};

/// Dense row-major `f64` tensor. Only rank 1 and rank 2 are used in practice.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dims("tensor construction", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dims("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (rank-1 tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dims("elementwise", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects a subset of rows (gather along dimension 0).
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        for i in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Column means over the rows of a matrix.
    pub fn column_means(&self) -> Vec<f64> {
        let r = self.rows() as f64;
        let mut out = self.column_sums();
        out.iter_mut().for_each(|v| *v /= r);
        out
    }

    /// Population standard deviation of each column.
    pub fn column_stds(&self, means: &[f64]) -> Vec<f64> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for ((o, v), m) in out.iter_mut().zip(self.row(i)).zip(means) {
                *o += (v - m) * (v - m);
            }
        }
        out.iter_mut().for_each(|v| *v = (*v / r as f64).sqrt());
        out
    }
}

/// `out[b, o] = Σ_i x[b, i] · w[i, o] + bias[o]`.
///
/// Every dense forward in the crate goes through this kernel so that masked
/// SuperNet forwards and compact SubNet forwards accumulate in the same order.
pub fn affine_kernel(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.rows() {
        return Err(Error::dims("dense_affine input/weight", x.shape(), w.shape()));
    }
    let (b, i_dim, o_dim) = (x.rows(), w.rows(), w.cols());
    if bias.len() != o_dim {
        return Err(Error::dims("dense_affine weight/bias", w.shape(), bias.shape()));
    }
    let wd = w.data();
    let mut out = vec![0.0; b * o_dim];
    for r in 0..b {
        let xr = x.row(r);
        let acc = &mut out[r * o_dim..(r + 1) * o_dim];
        for (i, &xv) in xr.iter().enumerate().take(i_dim) {
            let wrow = &wd[i * o_dim..(i + 1) * o_dim];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv;
            }
        }
        for (a, &bv) in acc.iter_mut().zip(bias.data()) {
            *a += bv;
        }
    }
    Tensor::matrix(b, o_dim, out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn affine_identity_and_sum() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = affine_kernel(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);

        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let w = Tensor::matrix(2, 1, vec![2.0, 3.0]).unwrap();
        let out = affine_kernel(&x, &w, &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let err = affine_kernel(&x, &w, &Tensor::zeros(&[2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_extremes() {
        let p = softmax(&[0.7, 0.7, 0.7]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, -1000.0]);
        assert_eq!(p[0], 1.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
