//! Flat parameter vectors with layer-boundary metadata.

use std::sync::Arc;

use crate::error::{FlError, Result};

/// One named, contiguous slice of a [`WeightVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Layer partition of `[0, k)`.
pub type Layout = Arc<[LayerSlice]>;

/// A model's weights or an update to them, stored flat.
///
/// The layout partitions the flat vector into contiguous named layers; it is
/// shared between all vectors of the same model so cloning is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
    layout: Layout,
}

impl WeightVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        let mut expected = 0;
        for slice in layout.iter() {
            if slice.offset != expected {
                return Err(FlError::Config(format!(
                    "layout slice `{}` starts at {} but previous slice ended at {}",
                    slice.name, slice.offset, expected
                )));
            }
            expected += slice.len;
        }
        if expected != values.len() {
            return Err(FlError::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    /// Single-layer vector, mostly useful for aggregation math on raw numbers.
    pub fn flat(values: Vec<f64>) -> Self {
        let layout: Layout = Arc::from(vec![LayerSlice {
            name: "flat".to_string(),
            offset: 0,
            len: values.len(),
        }]);
        Self { values, layout }
    }

    pub fn zeros(layout: Layout) -> Self {
        let k = layout.iter().map(|s| s.len).sum();
        Self {
            values: vec![0.0; k],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len(), "length must match layout");
        Self {
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &WeightVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_layout(&self, other: &WeightVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(FlError::DimensionMismatch {
                expected: self.len(),
                got: other.len(),
            })
        }
    }

    pub fn layer(&self, index: usize) -> &[f64] {
        let s = &self.layout[index];
        &self.values[s.offset..s.offset + s.len]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }

    /// Copy rescaled to L2 norm `target`; the computed norm never exceeds it.
    pub fn scaled_to_norm(&self, target: f64) -> Self {
        let mut out = self.clone();
        scale_to_norm(&mut out.values, target);
        out
    }

    pub fn distance_sq(&self, other: &WeightVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn distance(&self, other: &WeightVector) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.with_values(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn add(&self, other: &WeightVector) -> Self {
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &WeightVector) -> Self {
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, factor: f64, other: &WeightVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    /// `a * self + b * other`, element-wise.
    pub fn combine(&self, a: f64, other: &WeightVector, b: f64) -> Self {
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
    }

    /// Element-wise mean, summed in slice order.
    pub fn mean<'a, I>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a WeightVector>,
    {
        let mut iter = vectors.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| FlError::Input("mean of zero vectors".into()))?;
        // shifted sums keep the mean of identical vectors exact
        let mut acc = first.zeros_like();
        let mut count = 1usize;
        for v in iter {
            acc.check_layout(v)?;
            for ((a, b), f) in acc.values.iter_mut().zip(&v.values).zip(&first.values) {
                *a += b - f;
            }
            count += 1;
        }
        let n = count as f64;
        for (a, f) in acc.values.iter_mut().zip(&first.values) {
            *a = f + *a / n;
        }
        Ok(acc)
    }
}

pub(crate) fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescale to L2 norm `target`, shrinking by an ulp at a time until the
/// computed norm is within it. Zero vectors stay zero.
pub(crate) fn scale_to_norm(values: &mut [f64], target: f64) {
    let norm = l2(values);
    if norm == 0.0 {
        return;
    }
    let factor = target / norm;
    values.iter_mut().for_each(|v| *v *= factor);
    while l2(values) > target {
        values.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_must_cover_values() {
        let layout: Layout = Arc::from(vec![
            LayerSlice {
                name: "a".into(),
                offset: 0,
                len: 2,
            },
            LayerSlice {
                name: "b".into(),
                offset: 2,
                len: 1,
            },
        ]);
        assert!(WeightVector::new(vec![1.0, 2.0, 3.0], layout.clone()).is_ok());
        assert!(WeightVector::new(vec![1.0, 2.0], layout).is_err());

        let gap: Layout = Arc::from(vec![LayerSlice {
            name: "a".into(),
            offset: 1,
            len: 2,
        }]);
        assert!(WeightVector::new(vec![1.0, 2.0, 3.0], gap).is_err());
    }

    #[test]
    fn mean_of_two() {
        let m = WeightVector::mean(&[
            WeightVector::flat(vec![1.0, 4.0]),
            WeightVector::flat(vec![3.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(m.values(), &[2.0, 2.0]);
        assert!(WeightVector::mean(std::iter::empty()).is_err());
    }
}
