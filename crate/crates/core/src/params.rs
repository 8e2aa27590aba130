//! Flat parameter vectors exchanged between clients and the server.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Result};

/// A flat vector of model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        ensure_len(self.len(), other.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        ensure_len(self.len(), other.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn negate(&self) -> ParamVector {
        Self(self.0.iter().map(|v| -v).collect())
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) -> Result<()> {
        ensure_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &ParamVector) -> Result<f64> {
        ensure_len(self.len(), other.len())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn l2_distance(&self, other: &ParamVector) -> Result<f64> {
        self.squared_distance(other).map(f64::sqrt)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;

    #[test]
    fn elementwise_ops() {
        let a = ParamVector::new(vec![1.0, -2.0, 3.0]);
        assert_eq!(a.negate().as_slice(), &[-1.0, 2.0, -3.0]);
        let x = ParamVector::new(vec![1.0, 1.0]);
        let y = ParamVector::new(vec![2.0, 3.0]);
        assert_eq!(x.add(&y).unwrap().as_slice(), &[3.0, 4.0]);
        assert_eq!(y.scale(2.0).as_slice(), &[4.0, 6.0]);
        assert_eq!(a.l2_distance(&a).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let a = ParamVector::zeros(2);
        let b = ParamVector::zeros(3);
        assert!(matches!(a.add(&b), Err(Error::Shape { expected: 2, actual: 3 })));
        assert!(a.l2_distance(&b).is_err());
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(
            a in prop::collection::vec(-1e3f64..1e3, 4),
            b in prop::collection::vec(-1e3f64..1e3, 4),
        ) {
            let (a, b) = (ParamVector::new(a), ParamVector::new(b));
            let dab = a.l2_distance(&b).unwrap();
            prop_assert!(dab >= 0.0);
            prop_assert_eq!(dab, b.l2_distance(&a).unwrap());
            prop_assert_eq!(dab == 0.0, a == b);
        }
    }
}
