use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
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

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// `rows x cols` matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Rows and columns when viewed as a matrix; a vector is a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `out[i] = sum_j weight[i][j] * x[j] + bias[i]` for a single input.
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = match weight.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::dim(format!("weight must be 2-D, got {s:?}"))),
    };
    if x.len() != n_in {
        return Err(Error::dim(format!(
            "input has {} features, weight expects {n_in}",
            x.len()
        )));
    }
    if bias.len() != n_out {
        return Err(Error::dim(format!(
            "bias has {} entries, weight has {n_out} rows",
            bias.len()
        )));
    }
    let mut out = vec![0.0; n_out];
    matmul_nt(1, n_in, n_out, x.data(), weight.data(), &mut out, 0.0);
    for (o, b) in out.iter_mut().zip(bias.data()) {
        *o += b;
    }
    Ok(Tensor::vector(out))
}

/// `c = a * b^T + beta * c` where `a` is `m x k` and `b` is `n x k`.
pub(crate) fn matmul_nt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths checked above; strides describe row-major a,
    // b^T and c within those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a * b + beta * c` where `a` is `m x k` and `b` is `k x n`.
pub(crate) fn matmul_nn(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `matmul_nt`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a^T * b + beta * c` where `a` is `k x m` and `b` is `k x n`.
pub(crate) fn matmul_tn(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `matmul_nt`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn dense_identity() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_arithmetic() {
        let x = Tensor::vector(vec![1.0, 1.0]);
        let w = Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap();
        let b = Tensor::vector(vec![-5.0]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn dense_matches_naive_loops() {
        let mut rng = crate::rng::seeded(3);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = dense_forward(
            &Tensor::vector(x.clone()),
            &Tensor::matrix(4, 3, w.clone()).unwrap(),
            &Tensor::vector(b.clone()),
        )
        .unwrap();
        for i in 0..4 {
            let mut acc = b[i];
            for j in 0..3 {
                acc += w[i * 3 + j] * x[j];
            }
            assert!((out.data()[i] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_rejects_mismatch() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let w = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let b = Tensor::vector(vec![0.0; 2]);
        assert!(matches!(
            dense_forward(&x, &w, &b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = crate::rng::seeded(9);
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut nn = vec![0.0; m * n];
        matmul_nn(m, k, n, &a, &b, &mut nn, 0.0);
        // b^T stored row-major as n x k
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut nt = vec![0.0; m * n];
        matmul_nt(m, k, n, &a, &bt, &mut nt, 0.0);
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let mut tn = vec![0.0; m * n];
        matmul_tn(m, k, n, &at, &b, &mut tn, 0.0);
        for i in 0..m * n {
            assert!((nn[i] - nt[i]).abs() < 1e-14);
            assert!((nn[i] - tn[i]).abs() < 1e-14);
        }
    }
}
