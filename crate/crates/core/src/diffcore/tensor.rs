use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Shape-tagged dense array of `f64`, row-major, with an optional gradient slot.
///
/// Values sit behind an `Arc` so that registering a parameter on a tape is a
/// pointer copy; the optimizer writes through [`DenseTensor::values_mut`].
#[derive(Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl DenseTensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", values.len()),
            ));
        }
        Ok(DenseTensor {
            shape: shape.to_vec(),
            values: Arc::new(values),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("filled: shape must have positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[], vec![value]).unwrap()
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::new(&[values.len()], values.to_vec()).expect("vector: must be non-empty")
    }

    /// Builds a matrix from equally long rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("matrix", "ragged rows"));
        }
        Self::new(
            &[r, c],
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn shared_values(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    pub(crate) fn from_shared(shape: Vec<usize>, values: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        DenseTensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Mutable access for in-place parameter updates; copies on write if shared.
    pub fn values_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::dim(
                "set_grad",
                format!(
                    "gradient length {} for {} values",
                    grad.len(),
                    self.values.len()
                ),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self::from_shared(shape.to_vec(), self.shared_values()))
    }

    /// Element at a 2-D index.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.values[row * self.shape[1] + col]
    }

    /// Copy of row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> Result<Vec<f64>> {
        if self.rank() != 2 || i >= self.shape[0] {
            return Err(Error::dim("row", format!("row {i} of {:?}", self.shape)));
        }
        let c = self.shape[1];
        Ok(self.values[i * c..(i + 1) * c].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for DenseTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseTensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(DenseTensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(DenseTensor::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = DenseTensor::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.values(), &[2.5]);
    }

    #[test]
    fn write_after_clone_does_not_alias() {
        let a = DenseTensor::vector(&[1.0, 2.0]);
        let mut b = a.clone();
        b.values_mut()[0] = 9.0;
        assert_eq!(a.values(), &[1.0, 2.0]);
        assert_eq!(b.values(), &[9.0, 2.0]);
    }

    #[test]
    fn grad_slot_length_checked() {
        let mut t = DenseTensor::zeros(&[3]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 1.0, 1.0][..]));
    }
}
