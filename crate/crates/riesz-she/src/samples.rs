//! Empirical sample sets produced by the path simulators.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct SampleMeta {
    /// starting point of the paths
    pub a: Vec<f64>,
    /// horizon in the SDE clock
    pub q_horizon: f64,
    pub n_paths: usize,
    pub n_steps: usize,
}

/// A set of terminal sample vectors in R^m together with its seed lineage.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub m: usize,
    /// row-major (n_points x m)
    pub data: Vec<f64>,
    pub seed: u64,
    pub tags: Vec<u64>,
    pub meta: SampleMeta,
}

impl SampleSet {
    pub fn new(m: usize, data: Vec<f64>, seed: u64, tags: Vec<u64>, meta: SampleMeta) -> Result<Self> {
        if m == 0 || data.len() % m != 0 {
            return Err(Error::Config(format!(
                "sample buffer of length {} is not a multiple of dimension {m}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CheckFailed("sample set contains non-finite values".into()));
        }
        let s = SampleSet { m, data, seed, tags, meta };
        if s.meta.n_paths != 0 && s.meta.n_paths != s.len() {
            return Err(Error::Config(format!(
                "meta says {} paths but buffer holds {}",
                s.meta.n_paths,
                s.len()
            )));
        }
        Ok(s)
    }

    pub fn from_scalar(values: Vec<f64>, seed: u64, tags: Vec<u64>, meta: SampleMeta) -> Result<Self> {
        Self::new(1, values, seed, tags, meta)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    /// Scalar view; panics if m != 1.
    pub fn scalar(&self) -> &[f64] {
        assert_eq!(self.m, 1, "scalar view of a vector-valued sample set");
        &self.data
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        assert!(j < self.m);
        (0..self.len()).map(|i| self.data[i * self.m + j]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut out = vec![0.0; self.m];
        for i in 0..self.len() {
            for (o, v) in out.iter_mut().zip(self.point(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Per-component sample variance (unbiased).
    pub fn variance(&self) -> Vec<f64> {
        let n = self.len();
        if n < 2 {
            return vec![0.0; self.m];
        }
        let mean = self.mean();
        let mut out = vec![0.0; self.m];
        for i in 0..n {
            for j in 0..self.m {
                let dv = self.data[i * self.m + j] - mean[j];
                out[j] += dv * dv;
            }
        }
        out.iter_mut().for_each(|o| *o /= (n - 1) as f64);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_roundtrip() {
        let s = SampleSet::from_scalar(vec![1.0, 2.0, 3.0], 7, vec![1], SampleMeta::default()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.scalar(), &[1.0, 2.0, 3.0]);
        assert!((s.mean()[0] - 2.0).abs() < 1e-15);
        assert!((s.variance()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SampleSet::new(2, vec![1.0, 2.0, 3.0], 0, vec![], SampleMeta::default()).is_err());
        assert!(SampleSet::new(1, vec![f64::NAN], 0, vec![], SampleMeta::default()).is_err());
    }
}
