use crate::error::{Error, Result};

/// Dense N-dimensional array of f64 values in row-major order.
///
/// Feature maps use the layout (channel, height, width). Spatial masks are
/// rank-2 (height, width) and scalars are a single-element rank-1 tensor.
/// Every constructor and every tape operation rejects non-finite values, so
/// NaN/Inf never propagate silently.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArg(format!("zero extent in dims {dims:?}")));
        }
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::DimMismatch(format!(
                "dims {:?} imply {} values, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        let t = Tensor { dims, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::DimMismatch(format!(
                "item() on tensor with {} elements",
                self.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{context}: element {i} is {v}")));
            }
        }
        Ok(())
    }

    /// Row-major flat index for a rank-3 (c, h, w) tensor.
    #[inline]
    pub fn idx3(&self, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.dims.len(), 3);
        (c * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get3(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx3(c, h, w)]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let i = self.idx3(c, h, w);
        self.data[i] = v;
    }

    /// Row-major flat index for a rank-2 (h, w) tensor.
    #[inline]
    pub fn idx2(&self, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.dims.len(), 2);
        h * self.dims[1] + w
    }

    #[inline]
    pub fn get2(&self, h: usize, w: usize) -> f64 {
        self.data[self.idx2(h, w)]
    }

    #[inline]
    pub fn set2(&mut self, h: usize, w: usize, v: f64) {
        let i = self.idx2(h, w);
        self.data[i] = v;
    }

    /// Largest absolute element-wise difference; tensors must agree in shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "max_abs_diff between {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// True when every entry is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Sum of all entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Arithmetic mean of all entries.
    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DimMismatch(_)));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        let err = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn rank3_indexing_is_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
        assert_eq!(t.get3(0, 0, 0), 0.0);
        assert_eq!(t.get3(0, 0, 3), 3.0);
        assert_eq!(t.get3(0, 1, 0), 4.0);
        assert_eq!(t.get3(1, 0, 0), 12.0);
        assert_eq!(t.get3(1, 2, 3), 23.0);
    }

    #[test]
    fn binary_detection() {
        assert!(Tensor::new(vec![3], vec![0.0, 1.0, 1.0]).unwrap().is_binary());
        assert!(!Tensor::new(vec![2], vec![0.5, 1.0]).unwrap().is_binary());
    }
}
