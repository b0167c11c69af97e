//! Spectral synthesis of white-in-time Gaussian noise whose spatial
//! covariance is the mollified long-range kernel (G_{2 rho} * |x|^-2) on a
//! periodic grid: per-mode amplitudes from the continuum spectral density,
//! Hermitian-symmetrized complex draws, one inverse FFT per component.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{signed_freq, CubeFft};
use crate::kernels;
use crate::spde::FieldState;

/// Hard cap on grid points; complex work buffers stay a few hundred MB below it.
pub const MAX_POINTS: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusGrid {
    pub d: usize,
    pub n: usize,
    pub l: f64,
}

impl TorusGrid {
    pub fn new(d: usize, n: usize, l: f64) -> Result<Self> {
        if !(d == 3 || d == 4) {
            return Err(Error::Config(format!("torus dimension {d} unsupported; use 3 or 4")));
        }
        if n < 8 || n % 2 != 0 {
            return Err(Error::Config(format!("grid needs an even point count >= 8 per axis, got {n}")));
        }
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Config(format!("side length {l} must be positive")));
        }
        let points = (n as u128).pow(d as u32);
        if points > MAX_POINTS as u128 {
            return Err(Error::Config(format!(
                "{n}^{d} = {points} grid points exceed the {MAX_POINTS} budget"
            )));
        }
        Ok(TorusGrid { d, n, l })
    }

    pub fn points(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Grid spacing h = L/N.
    pub fn h(&self) -> f64 {
        self.l / self.n as f64
    }

    /// Axis-0-fastest coordinates of a flat index.
    pub fn coords(&self, flat: usize) -> [usize; 4] {
        let mut c = [0usize; 4];
        let mut rest = flat;
        for ci in c.iter_mut().take(self.d) {
            *ci = rest % self.n;
            rest /= self.n;
        }
        c
    }

    pub fn flat(&self, coords: &[usize]) -> usize {
        let mut idx = 0usize;
        for a in (0..self.d).rev() {
            idx = idx * self.n + (coords[a] % self.n);
        }
        idx
    }

    /// |xi_k|^2 for the mode at a flat spectral index.
    pub fn xi_squared(&self, flat: usize) -> f64 {
        let c = self.coords(flat);
        let base = 2.0 * std::f64::consts::PI / self.l;
        let mut k2 = 0.0;
        for ci in c.iter().take(self.d) {
            let k = signed_freq(*ci, self.n) as f64;
            k2 += k * k;
        }
        base * base * k2
    }

    /// Flat index of the partner mode -k (mod N per axis).
    pub fn conjugate_partner(&self, flat: usize) -> usize {
        let c = self.coords(flat);
        let mut p = [0usize; 4];
        for a in 0..self.d {
            p[a] = (self.n - c[a]) % self.n;
        }
        self.flat(&p[..self.d])
    }

    /// Nearest grid point to a physical position (periodic wrap).
    pub fn nearest_flat(&self, x: &[f64]) -> usize {
        let mut c = [0usize; 4];
        for a in 0..self.d {
            let t = (x[a] / self.h()).round();
            c[a] = t.rem_euclid(self.n as f64) as usize % self.n;
        }
        self.flat(&c[..self.d])
    }

    pub fn xi_squared_table(&self) -> Vec<f64> {
        (0..self.points()).map(|i| self.xi_squared(i)).collect()
    }
}

/// Continuum spectral density of the mollified long-range covariance at a wave
/// vector: c_d |xi|^{2-d} e^{-rho |xi|^2}. Diverges at xi = 0 (long-range
/// correlations); finite grids give the zero mode the integrated mass of its
/// spectral cell instead, see `build_noise_model`.
pub fn spectral_density(xi: &[f64], rho: f64, d: usize) -> Result<f64> {
    let norm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        kernels::check_dimension(d)?;
        return Ok(f64::INFINITY);
    }
    kernels::spectral_density(rho, norm, d)
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub grid: TorusGrid,
    pub rho: f64,
    /// noise vector dimension (independent copies per component)
    pub n_comp: usize,
    /// per-mode sqrt(S(xi_k)/L^d), FFT index order
    pub amplitudes: Vec<f64>,
    partner: Vec<u32>,
}

/// Tabulate per-mode synthesis amplitudes sqrt(S(xi_k)/L^d) for every discrete
/// mode xi_k = 2 pi k / L; the zero mode carries the integrated density of a
/// cell-volume ball at the origin (see `dc_band_mass`).
pub fn build_noise_model(grid: TorusGrid, rho: f64, n_comp: usize) -> Result<NoiseModel> {
    let h = grid.h();
    if rho > 0.0 && rho < 2.0 * h * h {
        log::warn!(
            "rho = {rho} below the 2 h^2 = {} resolution threshold; covariance will alias",
            2.0 * h * h
        );
    }
    build_noise_model_quiet(grid, rho, n_comp)
}

/// Same as `build_noise_model` without the resolution warning; used by the
/// scale cascade, which deliberately leaves sub-grid scales to later stages.
pub(crate) fn build_noise_model_quiet(
    grid: TorusGrid,
    rho: f64,
    n_comp: usize,
) -> Result<NoiseModel> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("mollification scale rho = {rho} must be positive")));
    }
    if n_comp == 0 {
        return Err(Error::Config("noise needs at least one component".into()));
    }
    kernels::check_dimension(grid.d)?;
    let np = grid.points();
    let vol = grid.l.powi(grid.d as i32);
    let dc_sq = dc_band_mass(rho, grid.l, grid.d);
    let mut amplitudes = Vec::with_capacity(np);
    let mut partner = Vec::with_capacity(np);
    for idx in 0..np {
        let xi2 = grid.xi_squared(idx);
        let amp = if xi2 == 0.0 {
            dc_sq.sqrt()
        } else {
            (kernels::spectral_density(rho, xi2.sqrt(), grid.d)? / vol).sqrt()
        };
        amplitudes.push(amp);
        partner.push(grid.conjugate_partner(idx) as u32);
    }
    Ok(NoiseModel { grid, rho, n_comp, amplitudes, partner })
}

/// Squared zero-mode amplitude: the spectral mass of the ball at the origin
/// whose volume matches one lattice cell, (2 pi)^{-d} times the density
/// integrated over |xi| < xi_b with V_d xi_b^d = (2 pi / L)^d. The radial
/// integral closes to (1 - e^{-rho xi_b^2}) / (2 (d - 2) rho) in d = 3 and
/// d = 4 alike.
fn dc_band_mass(rho: f64, l: f64, d: usize) -> f64 {
    let xi0 = 2.0 * std::f64::consts::PI / l;
    let ball_frac = match d {
        3 => (3.0 / (4.0 * std::f64::consts::PI)).powf(1.0 / 3.0),
        _ => (2.0 / std::f64::consts::PI.powi(2)).powf(0.25),
    };
    let xi_b = ball_frac * xi0;
    -(-rho * xi_b * xi_b).exp_m1() / (2.0 * (d as f64 - 2.0) * rho)
}

impl NoiseModel {
    /// Synthesized stationary covariance at a physical lag, by direct mode sum.
    pub fn covariance_at(&self, lag: &[f64]) -> f64 {
        let base = 2.0 * std::f64::consts::PI / self.grid.l;
        let n = self.grid.n;
        let mut total = 0.0;
        for (idx, amp) in self.amplitudes.iter().enumerate() {
            let c = self.grid.coords(idx);
            let mut phase = 0.0;
            for a in 0..self.grid.d {
                phase += signed_freq(c[a], n) as f64 * lag[a];
            }
            total += amp * amp * (base * phase).cos();
        }
        total
    }

    /// Full covariance table C(x_j) on the grid (inverse transform of the
    /// squared amplitudes).
    pub fn covariance_table(&self, fft: &mut CubeFft) -> Vec<f64> {
        let mut buf: Vec<Complex64> = self
            .amplitudes
            .iter()
            .map(|a| Complex64::new(a * a, 0.0))
            .collect();
        fft.inverse(&mut buf);
        buf.iter().map(|v| v.re).collect()
    }
}

/// Truncated periodization of the mollified kernel: sum of R^rho(lag + L m)
/// over integer images with |m| <= m_max. In d = 3 the full sum diverges in
/// its mean (DC) part, so compare lag differences, not raw values.
pub fn periodized_riesz(rho: f64, lag: &[f64], l: f64, m_max: i64, d: usize) -> Result<f64> {
    kernels::check_dimension(d)?;
    let mut total = 0.0;
    let mut m = vec![-m_max; d];
    loop {
        let m2: i64 = m.iter().map(|v| v * v).sum();
        if m2 <= m_max * m_max {
            let mut r2 = 0.0;
            for a in 0..d {
                let x = lag[a] + l * m[a] as f64;
                r2 += x * x;
            }
            total += kernels::riesz_mollified_radial(rho, r2.sqrt(), d)?;
        }
        // odometer over the image lattice
        let mut axis = 0;
        loop {
            if axis == d {
                return Ok(total);
            }
            m[axis] += 1;
            if m[axis] <= m_max {
                break;
            }
            m[axis] = -m_max;
            axis += 1;
        }
    }
}

/// One white-in-time increment: a mean-zero Gaussian field with covariance
/// dt * C(x - x') * Id per component, synthesized by Hermitian-symmetrized
/// complex draws and one inverse FFT per component.
pub fn sample_increment(
    model: &NoiseModel,
    dt: f64,
    fft: &mut CubeFft,
    rng: &mut ChaCha8Rng,
) -> Result<FieldState> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("increment step dt = {dt} must be positive")));
    }
    let grid = model.grid;
    if fft.d != grid.d || fft.n != grid.n {
        return Err(Error::Config("FFT workspace does not match the grid".into()));
    }
    let np = grid.points();
    let sdt = dt.sqrt();
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut values = vec![0.0; model.n_comp * np];
    let mut buf = vec![Complex64::default(); np];
    for comp in 0..model.n_comp {
        for (b, amp) in buf.iter_mut().zip(&model.amplitudes) {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let s = amp * inv_sqrt2;
            *b = Complex64::new(re * s, im * s);
        }
        // project onto Hermitian symmetry, preserving per-mode variance
        for idx in 0..np {
            let p = model.partner[idx] as usize;
            match p.cmp(&idx) {
                std::cmp::Ordering::Greater => {
                    let a = buf[idx];
                    let b = buf[p];
                    buf[idx] = (a + b.conj()) * inv_sqrt2;
                    buf[p] = buf[idx].conj();
                }
                std::cmp::Ordering::Equal => {
                    buf[idx] = Complex64::new(buf[idx].re * std::f64::consts::SQRT_2, 0.0);
                }
                std::cmp::Ordering::Less => {}
            }
        }
        fft.inverse(&mut buf);
        let mut re_norm = 0.0;
        let mut im_norm = 0.0;
        let out = &mut values[comp * np..(comp + 1) * np];
        for (o, v) in out.iter_mut().zip(&buf) {
            *o = v.re * sdt;
            re_norm += v.re * v.re;
            im_norm += v.im * v.im;
        }
        if im_norm.sqrt() > 1e-12 * re_norm.sqrt().max(1e-300) {
            return Err(Error::CheckFailed(format!(
                "synthesized field has imaginary residue {} of norm {}",
                im_norm.sqrt(),
                re_norm.sqrt()
            )));
        }
    }
    FieldState::from_values(grid, values, 0.0, model.rho, model.n_comp)
}
