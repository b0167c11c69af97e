//! Complex FFTs on cubic d-dimensional grids, built from cached 1-d plans
//! applied axis by axis. Forward includes the 1/N^d normalization so that
//! inverse(forward(x)) = x; the inverse is the plain unnormalized synthesis
//! sum with e^{+i} phases.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub struct CubeFft {
    pub d: usize,
    pub n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    line: Vec<Complex64>,
}

impl CubeFft {
    pub fn new(d: usize, n: usize) -> Self {
        assert!(d >= 1 && n >= 2, "degenerate transform shape {n}^{d}");
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        CubeFft {
            d,
            n,
            fwd,
            inv,
            scratch: vec![Complex64::default(); scratch_len],
            line: vec![Complex64::default(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Analysis transform with e^{-i} phases, scaled by 1/N^d.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.pass_all(data, true);
        let scale = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    /// Synthesis transform with e^{+i} phases, unnormalized.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.pass_all(data, false);
    }

    fn pass_all(&mut self, data: &mut [Complex64], forward: bool) {
        assert_eq!(data.len(), self.len(), "buffer does not match the grid");
        let plan = if forward { self.fwd.clone() } else { self.inv.clone() };
        let n = self.n;
        // axis 0 is contiguous: the plan processes back-to-back lines itself
        plan.process_with_scratch(data, &mut self.scratch);
        // higher axes: gather strided lines through a contiguous buffer
        for axis in 1..self.d {
            let stride = n.pow(axis as u32);
            let block = stride * n;
            let n_blocks = data.len() / block;
            for b in 0..n_blocks {
                let base = b * block;
                for off in 0..stride {
                    for k in 0..n {
                        self.line[k] = data[base + off + k * stride];
                    }
                    plan.process_with_scratch(&mut self.line, &mut self.scratch);
                    for k in 0..n {
                        data[base + off + k * stride] = self.line[k];
                    }
                }
            }
        }
    }
}

/// Signed frequency index for position k on an axis of length n.
pub fn signed_freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}
