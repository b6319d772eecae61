use rand::Rng;
use rand_distr::StandardNormal;

use super::KernelError;

/// Dense row-major `n × c × h × w` tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn full(dims: [usize; 4], value: f64) -> Self {
        Self { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self, KernelError> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(KernelError::ShapeMismatch(format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn randn<R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> Self {
        let n = dims.iter().product();
        Self { dims, data: (0..n).map(|_| rng.sample(StandardNormal)).collect() }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: [usize; 4], bound: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        Self { dims, data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect() }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = self.dims;
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn reshape(mut self, dims: [usize; 4]) -> Result<Self, KernelError> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(KernelError::ShapeMismatch(format!("cannot reshape {:?} to {dims:?}", self.dims)));
        }
        self.dims = dims;
        Ok(self)
    }

    /// Samples `indices` stacked into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let l = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor { dims: [indices.len(), self.dims[1], self.dims[2], self.dims[3]], data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { dims: self.dims, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, KernelError> {
        self.expect_dims(other.dims, "zip")?;
        Ok(Tensor { dims: self.dims, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), KernelError> {
        self.expect_dims(other.dims, "accumulate")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn expect_dims(&self, dims: [usize; 4], what: &str) -> Result<(), KernelError> {
        if self.dims != dims {
            return Err(KernelError::ShapeMismatch(format!("{what}: expected {dims:?}, got {:?}", self.dims)));
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<(), KernelError> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(KernelError::NonFinite(what.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec([1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(0, 1, 0, 2), 8.0);
        assert_eq!(t.gather(&[0, 0]).dims(), [2, 2, 2, 3]);
        assert!(Tensor::from_vec([1, 1, 1, 2], vec![1.0]).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(t.check_finite("x"), Err(KernelError::NonFinite(_))));
    }
}
