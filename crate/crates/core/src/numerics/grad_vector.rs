use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps contiguous ranges of a flat vector to named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn single(name: &str, shape: &[usize]) -> Self {
        Self::new(alloc::vec![Segment {
            name: name.into(),
            shape: shape.to_vec(),
        }])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(offset, segment)` pairs in order.
    pub fn offsets(&self) -> impl Iterator<Item = (usize, &Segment)> {
        self.segments.iter().scan(0usize, |off, s| {
            let start = *off;
            *off += s.len();
            Some((start, s))
        })
    }
}

/// Flat gradient with a layout; combinable only with identical layouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradVector {
    layout: Layout,
    values: Vec<f64>,
}

impl GradVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(Error::LayoutMismatch);
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.len();
        Self {
            layout,
            values: alloc::vec![0.0; n],
        }
    }

    pub fn from_tensors(layout: Layout, tensors: &[&Tensor]) -> Result<Self> {
        if tensors.len() != layout.segments().len()
            || tensors
                .iter()
                .zip(layout.segments())
                .any(|(t, s)| t.shape() != s.shape.as_slice())
        {
            return Err(Error::LayoutMismatch);
        }
        let mut values = Vec::with_capacity(layout.len());
        for t in tensors {
            values.extend_from_slice(t.data());
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Splits back into per-segment tensors.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layout
            .offsets()
            .map(|(off, s)| {
                Tensor::from_parts(s.shape.clone(), self.values[off..off + s.len()].to_vec())
            })
            .collect()
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        let (off, s) = self.layout.offsets().nth(i).expect("segment index");
        &self.values[off..off + s.len()]
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc + v * v)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.norm_sq())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (a, b)| acc + a * b))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_layout(other)?;
        Ok(Self {
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn layout() -> Layout {
        Layout::new(vec![
            Segment {
                name: "w".into(),
                shape: vec![2, 2],
            },
            Segment {
                name: "b".into(),
                shape: vec![2],
            },
        ])
    }

    #[test]
    fn segment_lengths_sum_to_len() {
        let l = layout();
        assert_eq!(l.len(), 6);
        let offs: Vec<usize> = l.offsets().map(|(o, _)| o).collect();
        assert_eq!(offs, vec![0, 4]);
        assert!(GradVector::new(l, vec![0.0; 5]).is_err());
    }

    #[test]
    fn layouts_must_match_to_combine() {
        let a = GradVector::zeros(layout());
        let b = GradVector::zeros(Layout::single("x", &[6]));
        assert_eq!(a.add(&b), Err(Error::LayoutMismatch));
    }

    #[test]
    fn tensor_round_trip() {
        let g = GradVector::new(layout(), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let ts = g.to_tensors();
        let refs: Vec<&Tensor> = ts.iter().collect();
        assert_eq!(GradVector::from_tensors(layout(), &refs).unwrap(), g);
        assert_eq!(g.segment(1), &[5., 6.]);
    }
}
