//! Distributional comparison: Wasserstein-2 between sample sets (exact in one
//! dimension, sliced above), bootstrap confidence intervals, and empirical
//! decorrelation curves over paired field probes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::samples::SampleSet;

pub const SLICED_PROJECTIONS: usize = 128;
pub const BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Method {
    Exact1d,
    Sliced,
}

impl std::fmt::Display for W2Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            W2Method::Exact1d => write!(f, "exact-1d"),
            W2Method::Sliced => write!(f, "sliced"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct W2Report {
    pub distance: f64,
    pub method: W2Method,
    pub n1: usize,
    pub n2: usize,
    /// bootstrap percentile half-width around the point estimate
    pub bootstrap_ci: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Empirical quantile (left-continuous inverse CDF) of a sorted sample.
fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    let idx = ((p * s.len() as f64).floor() as usize).min(s.len() - 1);
    s[idx]
}

/// Squared W2 between two sorted one-dimensional samples: paired quantile
/// coupling for equal counts, otherwise both quantile functions evaluated on
/// the midpoint grid of the larger set.
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        let n = a.len() as f64;
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
    } else {
        let k = a.len().max(b.len());
        let mut acc = 0.0;
        for i in 0..k {
            let p = (i as f64 + 0.5) / k as f64;
            let d = quantile_sorted(a, p) - quantile_sorted(b, p);
            acc += d * d;
        }
        acc / k as f64
    }
}

/// Exact one-dimensional Wasserstein-2 distance between two unordered samples.
pub fn wasserstein2_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Domain("Wasserstein distance of an empty sample".into()));
    }
    Ok(w2_sq_sorted(&sorted(xs), &sorted(ys)).sqrt())
}

fn resample(src: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    (0..src.len()).map(|_| src[rng.gen_range(0..src.len())]).collect()
}

/// Wasserstein-2 between two sample sets of equal dimension, with a bootstrap
/// confidence interval (both sets resampled, percentile half-width).
///
/// Scalar sets use the exact quantile coupling; vector sets the sliced
/// approximation over a fixed number of random directions. Randomness
/// (projections, bootstrap) derives deterministically from the sets' own
/// seed lineage.
pub fn wasserstein2(s1: &SampleSet, s2: &SampleSet) -> Result<W2Report> {
    wasserstein2_with(s1, s2, BOOTSTRAP_RESAMPLES)
}

pub fn wasserstein2_with(s1: &SampleSet, s2: &SampleSet, n_boot: usize) -> Result<W2Report> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::Domain("Wasserstein distance of an empty sample set".into()));
    }
    if s1.m != s2.m {
        return Err(Error::Domain(format!(
            "sample sets have different dimensions {} and {}",
            s1.m, s2.m
        )));
    }
    let master = s1.seed ^ s1.seed.rotate_left(17) ^ s2.seed.rotate_left(31);
    if s1.m == 1 {
        let a = sorted(s1.scalar());
        let b = sorted(s2.scalar());
        let distance = w2_sq_sorted(&a, &b).sqrt();
        let mut boots = Vec::with_capacity(n_boot);
        for bi in 0..n_boot {
            let mut rng = stream(master, &[tag::BOOTSTRAP, bi as u64]);
            let ra = sorted(&resample(s1.scalar(), &mut rng));
            let rb = sorted(&resample(s2.scalar(), &mut rng));
            boots.push(w2_sq_sorted(&ra, &rb).sqrt());
        }
        Ok(W2Report {
            distance,
            method: W2Method::Exact1d,
            n1: s1.len(),
            n2: s2.len(),
            bootstrap_ci: percentile_halfwidth(&mut boots),
        })
    } else {
        let m = s1.m;
        let mut dirs = Vec::with_capacity(SLICED_PROJECTIONS);
        for k in 0..SLICED_PROJECTIONS {
            let mut rng = stream(master, &[tag::PROJECTION, k as u64]);
            loop {
                let v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    dirs.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
                    break;
                }
            }
        }
        let project = |s: &SampleSet, dir: &[f64]| -> Vec<f64> {
            (0..s.len())
                .map(|i| s.point(i).iter().zip(dir).map(|(x, d)| x * d).sum())
                .collect()
        };
        let sliced_sq = |a: &SampleSet, b: &SampleSet| -> f64 {
            let mut acc = 0.0;
            for dir in &dirs {
                acc += w2_sq_sorted(&sorted(&project(a, dir)), &sorted(&project(b, dir)));
            }
            acc / dirs.len() as f64
        };
        let distance = sliced_sq(s1, s2).sqrt();
        // bootstrap over sample indices, projections held fixed
        let mut boots = Vec::with_capacity(n_boot);
        for bi in 0..n_boot {
            let mut rng = stream(master, &[tag::BOOTSTRAP, bi as u64]);
            let idx1: Vec<usize> = (0..s1.len()).map(|_| rng.gen_range(0..s1.len())).collect();
            let idx2: Vec<usize> = (0..s2.len()).map(|_| rng.gen_range(0..s2.len())).collect();
            let mut acc = 0.0;
            for dir in &dirs {
                let p1: Vec<f64> = idx1
                    .iter()
                    .map(|&i| s1.point(i).iter().zip(dir).map(|(x, d)| x * d).sum())
                    .collect();
                let p2: Vec<f64> = idx2
                    .iter()
                    .map(|&i| s2.point(i).iter().zip(dir).map(|(x, d)| x * d).sum())
                    .collect();
                acc += w2_sq_sorted(&sorted(&p1), &sorted(&p2));
            }
            boots.push((acc / dirs.len() as f64).sqrt());
        }
        Ok(W2Report {
            distance,
            method: W2Method::Sliced,
            n1: s1.len(),
            n2: s2.len(),
            bootstrap_ci: percentile_halfwidth(&mut boots),
        })
    }
}

fn percentile_halfwidth(boots: &mut [f64]) -> f64 {
    if boots.len() < 8 {
        return f64::INFINITY;
    }
    boots.sort_by(f64::total_cmp);
    let lo = boots[(0.025 * boots.len() as f64) as usize];
    let hi = boots[((0.975 * boots.len() as f64) as usize).min(boots.len() - 1)];
    (hi - lo) / 2.0
}

/// Scalar Lipschitz test functions applied to field probes before covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    Identity,
    Tanh,
}

impl TestFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TestFunction::Identity => x,
            TestFunction::Tanh => x.tanh(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" | "lip:identity" => Ok(TestFunction::Identity),
            "tanh" | "lip:tanh" => Ok(TestFunction::Tanh),
            other => Err(Error::Config(format!(
                "unknown test function {other:?}; known: identity, lip:tanh"
            ))),
        }
    }
}

/// Paired replica values of the field at two probe points a fixed lag apart.
#[derive(Debug, Clone)]
pub struct LagSamples {
    pub lag: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CovPoint {
    pub lag: f64,
    pub cov: f64,
    /// bootstrap percentile half-width; infinite when replicas are too few
    pub ci_halfwidth: f64,
    pub n: usize,
}

fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}

/// Empirical Cov(f(u(x)), f(u(x + lag))) per lag, with bootstrap confidence
/// intervals over replicas. Few replicas yield a wide interval, not an error.
pub fn decorrelation_curve(records: &[LagSamples], f: TestFunction, seed: u64) -> Result<Vec<CovPoint>> {
    let mut out = Vec::with_capacity(records.len());
    for (ri, rec) in records.iter().enumerate() {
        if rec.x.len() != rec.y.len() {
            return Err(Error::Domain(format!(
                "lag {} has {} left and {} right replicas",
                rec.lag,
                rec.x.len(),
                rec.y.len()
            )));
        }
        if rec.x.len() < 2 {
            return Err(Error::Domain(format!(
                "lag {} needs at least 2 replicas for a covariance",
                rec.lag
            )));
        }
        let fx: Vec<f64> = rec.x.iter().map(|&v| f.eval(v)).collect();
        let fy: Vec<f64> = rec.y.iter().map(|&v| f.eval(v)).collect();
        let cov = covariance(&fx, &fy);
        let n = fx.len();
        let mut boots = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
        for bi in 0..BOOTSTRAP_RESAMPLES {
            let mut rng = stream(seed, &[tag::BOOTSTRAP, ri as u64, bi as u64]);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let bx: Vec<f64> = idx.iter().map(|&i| fx[i]).collect();
            let by: Vec<f64> = idx.iter().map(|&i| fy[i]).collect();
            boots.push(covariance(&bx, &by));
        }
        out.push(CovPoint {
            lag: rec.lag,
            cov,
            ci_halfwidth: percentile_halfwidth(&mut boots),
            n,
        });
    }
    Ok(out)
}
