use std::fmt;

use crate::error::{Error, Result};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;
/// Floor applied to every division by a norm or sum.
pub const DENOM_FLOOR: f64 = 1e-12;

/// Dense row-major `f64` array.
///
/// A scalar has the empty shape `[]` and a single element.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "array dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "Array::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Array::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Array::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 array; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Array {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Array {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Gathers rows by index into a new array with the same trailing shape.
    pub fn gather_rows(&self, indices: &[usize]) -> Array {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(indices.len());
        } else {
            shape[0] = indices.len();
        }
        Array { shape, data }
    }

    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

fn require_matrix(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::Shape {
            op,
            left: a.shape.clone(),
            right: vec![],
        });
    }
    Ok((a.shape[0], a.shape[1]))
}

/// Matrix product of `[M×K]` and `[K×N]`.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Array {
        shape: vec![m, n],
        data: out,
    })
}

/// In-place stable softmax of a contiguous slice.
pub fn softmax_slice(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}

/// `log softmax` of a slice, computed with the log-sum-exp shift.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    xs.iter().map(|v| v - lse).collect()
}

/// Softmax along `axis`.
pub fn softmax(x: &Array, axis: usize) -> Result<Array> {
    if x.rank() == 0 {
        return Ok(Array::scalar(1.0));
    }
    if axis >= x.rank() {
        return Err(Error::contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = x.clone();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x.data[base + j * inner];
            }
            softmax_slice(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out.data[base + j * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// Row-wise layer normalization followed by the affine `gain`/`bias`.
pub fn layer_norm(x: &Array, gain: &Array, bias: &Array) -> Result<Array> {
    let (_, d) = require_matrix("layer_norm", x)?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    if d < 2 {
        return Err(Error::contract("layer_norm needs at least two features"));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (mean, inv_std) = row_moments(x.row(r));
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gain.data[j] + bias.data[j];
        }
    }
    Ok(out)
}

/// Mean and `1/sqrt(var + eps)` of a row, population variance.
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

pub(crate) fn check_distribution(target: &[f64]) -> Result<()> {
    let total: f64 = target.iter().sum();
    if target.iter().any(|&t| !(t >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "target is not a probability distribution (sum {total})"
        )));
    }
    Ok(())
}

/// `-Σ target_j · log softmax(logits)_j`.
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::Shape {
            op: "soft_cross_entropy",
            left: vec![logits.len()],
            right: vec![target.len()],
        });
    }
    check_distribution(target)?;
    Ok(log_softmax(logits)
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(l, t)| -t * l)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let b = Array::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Array::identity(2), &b).unwrap(), b);

        let a = Array::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Array::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.get(i, p) * b.get(p, j);
                }
                assert_abs_diff_eq!(got.get(i, j), acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Array::zeros(&[2, 3]), &Array::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Array::vector(vec![0.0; 3]), 0).unwrap();
        for v in s.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&Array::vector(vec![1000.0, 1000.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Array::vector(vec![1.0, 2.0, 3.0]), 0).unwrap();
        // e^k / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (g, e) in s.data().iter().zip(expected) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(s.data()[0], 0.09003, epsilon = 1e-5);
        assert_abs_diff_eq!(s.data()[1], 0.24473, epsilon = 1e-5);
        assert_abs_diff_eq!(s.data()[2], 0.66524, epsilon = 1e-5);
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Array::from_rows(&[vec![0.0, 5.0], vec![0.0, 5.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Array::filled(&[3], 1.0);
        let zeros = Array::zeros(&[3]);
        let c = Array::from_rows(&[vec![2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(layer_norm(&c, &ones, &zeros).unwrap().data(), &[0.0; 3]);

        let ones = Array::filled(&[2], 1.0);
        let zeros = Array::zeros(&[2]);
        let x = Array::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &ones, &zeros).unwrap();
        // variance 1, so the epsilon perturbs only the 6th decimal
        assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 8], &mut rng);
        let y = layer_norm(&x, &Array::filled(&[8], 1.0), &Array::zeros(&[8])).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let (_, inv_std) = row_moments(x.row(r));
            let raw_var = 1.0 / (inv_std * inv_std) - LN_EPS;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            // undo the epsilon shrinkage before comparing to unit variance
            assert_abs_diff_eq!(var * (raw_var + LN_EPS) / raw_var, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn soft_cross_entropy_examples() {
        let loss = soft_cross_entropy(&[60.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(loss < 1e-20);
        let loss = soft_cross_entropy(&[2.0; 4], &[0.25; 4]).unwrap();
        assert_abs_diff_eq!(loss, 4f64.ln(), epsilon = 1e-12);
        let loss = soft_cross_entropy(&[1.0; 3], &[0.5, 0.0, 0.5]).unwrap();
        assert_abs_diff_eq!(loss, 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 1.0986, epsilon = 1e-4);
    }

    #[test]
    fn soft_cross_entropy_rejects_bad_target() {
        assert!(matches!(
            soft_cross_entropy(&[0.0, 0.0], &[0.7, 0.7]),
            Err(Error::Contract(_))
        ));
        assert!(soft_cross_entropy(&[0.0, 0.0], &[1.5, -0.5]).is_err());
    }
}
