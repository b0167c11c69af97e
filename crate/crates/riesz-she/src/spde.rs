//! Mild-form Euler scheme for the attenuated heat equation with multiplicative
//! long-range noise on a torus: u <- heat(dt) applied to
//! u + sigma(u) dW / sqrt(log(1/rho)), with scheduled noise-off windows and
//! freeze events for the multiscale chain construction.

use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fbsde::NonlinearitySpec;
use crate::fft::CubeFft;
use crate::noise::{sample_increment, NoiseModel, TorusGrid};
use crate::rng::{stream, tag};

#[derive(Debug, Clone)]
pub struct FieldState {
    pub grid: TorusGrid,
    /// component-major: m blocks of N^d values, axis 0 fastest
    pub values: Vec<f64>,
    pub time: f64,
    pub rho: f64,
    pub m: usize,
}

impl FieldState {
    pub fn from_values(
        grid: TorusGrid,
        values: Vec<f64>,
        time: f64,
        rho: f64,
        m: usize,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("field needs at least one component".into()));
        }
        if values.len() != m * grid.points() {
            return Err(Error::Config(format!(
                "value buffer holds {} entries, expected {} x {}",
                values.len(),
                m,
                grid.points()
            )));
        }
        Ok(FieldState { grid, values, time, rho, m })
    }

    pub fn constant(grid: TorusGrid, value: f64, rho: f64, m: usize) -> Result<Self> {
        Self::from_values(grid, vec![value; m * grid.points()], 0.0, rho, m)
    }

    pub fn comp(&self, c: usize) -> &[f64] {
        let np = self.grid.points();
        &self.values[c * np..(c + 1) * np]
    }

    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        let np = self.grid.points();
        &mut self.values[c * np..(c + 1) * np]
    }

    pub fn spatial_mean(&self, c: usize) -> f64 {
        let v = self.comp(c);
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn spatial_variance(&self, c: usize) -> f64 {
        let mean = self.spatial_mean(c);
        let v = self.comp(c);
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
    }

    fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Noise attenuation 1/sqrt(log(1/rho)), defined for rho in (0, 1).
pub fn attenuation(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("attenuation needs rho in (0,1), got {rho}")));
    }
    Ok(1.0 / (1.0 / rho).ln().sqrt())
}

/// Apply the heat semigroup over a time dt: multiply each Fourier mode by
/// exp(-|xi|^2 dt / 2). dt = 0 is the identity up to transform roundoff.
pub fn heat_propagate(state: &FieldState, dt: f64, fft: &mut CubeFft) -> Result<FieldState> {
    if !(dt >= 0.0) {
        return Err(Error::Domain(format!("heat propagation needs dt >= 0, got {dt}")));
    }
    if fft.d != state.grid.d || fft.n != state.grid.n {
        return Err(Error::Config("FFT workspace does not match the grid".into()));
    }
    let mult: Vec<f64> = (0..state.grid.points())
        .map(|i| (-state.grid.xi_squared(i) * dt / 2.0).exp())
        .collect();
    let mut out = state.clone();
    heat_apply(&mut out, &mult, fft);
    out.time = state.time + dt;
    Ok(out)
}

pub(crate) fn heat_apply(state: &mut FieldState, mult: &[f64], fft: &mut CubeFft) {
    let np = state.grid.points();
    let mut buf = vec![Complex64::default(); np];
    for c in 0..state.m {
        let vals = state.comp_mut(c);
        for (b, v) in buf.iter_mut().zip(vals.iter()) {
            *b = Complex64::new(*v, 0.0);
        }
        fft.forward(&mut buf);
        for (b, m) in buf.iter_mut().zip(mult) {
            *b *= *m;
        }
        fft.inverse(&mut buf);
        for (v, b) in vals.iter_mut().zip(&buf) {
            *v = b.re;
        }
    }
}

/// One Euler step of the mild scheme. The nonlinearity is evaluated at the
/// left point (Ito placement), the noise increment is drawn from `model`, and
/// the whole sum is pushed through the heat semigroup:
/// u <- heat(dt)[u + atten * sigma(u) dW].
pub fn step(
    state: &FieldState,
    dt: f64,
    sigma: &NonlinearitySpec,
    model: &NoiseModel,
    atten: f64,
    fft: &mut CubeFft,
    rng: &mut ChaCha8Rng,
) -> Result<FieldState> {
    check_compatible(state, sigma, model)?;
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("step size dt = {dt} must be positive")));
    }
    let dw = sample_increment(model, dt, fft, rng)?;
    let mut out = state.clone();
    add_forcing(&mut out, sigma, &dw, atten);
    let mult: Vec<f64> = (0..state.grid.points())
        .map(|i| (-state.grid.xi_squared(i) * dt / 2.0).exp())
        .collect();
    heat_apply(&mut out, &mult, fft);
    out.time = state.time + dt;
    if !out.all_finite() {
        return Err(Error::CheckFailed(format!(
            "field lost finiteness during the step ending at t = {}",
            out.time
        )));
    }
    Ok(out)
}

fn check_compatible(
    state: &FieldState,
    sigma: &NonlinearitySpec,
    model: &NoiseModel,
) -> Result<()> {
    if model.grid != state.grid {
        return Err(Error::Config("noise model grid does not match the field".into()));
    }
    if sigma.m() != state.m {
        return Err(Error::Config(format!(
            "nonlinearity expects {} field components, state has {}",
            sigma.m(),
            state.m
        )));
    }
    if sigma.n() != model.n_comp {
        return Err(Error::Config(format!(
            "nonlinearity expects {} noise components, model has {}",
            sigma.n(),
            model.n_comp
        )));
    }
    Ok(())
}

pub(crate) fn add_forcing(
    state: &mut FieldState,
    sigma: &NonlinearitySpec,
    dw: &FieldState,
    atten: f64,
) {
    let np = state.grid.points();
    if sigma.is_scalar() {
        let noise = dw.comp(0);
        for (u, w) in state.comp_mut(0).iter_mut().zip(noise) {
            *u += atten * sigma.eval_scalar(*u) * w;
        }
        return;
    }
    let (m, n) = (sigma.m(), sigma.n());
    let mut point = vec![0.0; m];
    let mut mat = vec![0.0; m * n];
    for p in 0..np {
        for (i, pi) in point.iter_mut().enumerate() {
            *pi = state.values[i * np + p];
        }
        sigma.eval_into(&point, &mut mat);
        for i in 0..m {
            let mut f = 0.0;
            for j in 0..n {
                f += mat[i * n + j] * dw.values[j * np + p];
            }
            state.values[i * np + p] += atten * f;
        }
    }
}

/// Replace the field by its value at one grid point (spatially constant).
pub fn freeze(state: &FieldState, point: usize) -> Result<FieldState> {
    if point >= state.grid.points() {
        return Err(Error::Config(format!(
            "freeze point {point} outside the {}-point grid",
            state.grid.points()
        )));
    }
    let mut out = state.clone();
    for c in 0..state.m {
        let v = out.comp(c)[point];
        out.comp_mut(c).fill(v);
    }
    Ok(out)
}

/// Freeze at the grid point nearest a physical position, warning when the
/// position is off-grid.
pub fn freeze_nearest(state: &FieldState, x: &[f64]) -> Result<FieldState> {
    if x.len() != state.grid.d {
        return Err(Error::Config(format!(
            "freeze position has {} coordinates on a {}-dimensional grid",
            x.len(),
            state.grid.d
        )));
    }
    let flat = state.grid.nearest_flat(x);
    let h = state.grid.h();
    let c = state.grid.coords(flat);
    let mut miss: f64 = 0.0;
    for a in 0..state.grid.d {
        let dx = (x[a] - c[a] as f64 * h).rem_euclid(state.grid.l);
        miss = miss.max(dx.min(state.grid.l - dx));
    }
    if miss > 1e-9 * h {
        log::warn!("freeze position {x:?} is off-grid; snapping to the nearest point (miss {miss:.3e})");
    }
    freeze(state, flat)
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub t_end: f64,
    pub dt: f64,
    /// half-open [a, b) windows where the noise term is skipped
    pub noise_off: Vec<(f64, f64)>,
    /// (time, grid point) freeze events; times must be right endpoints of
    /// off windows
    pub freezes: Vec<(f64, usize)>,
    /// flat indices recorded along the run
    pub probes: Vec<usize>,
    pub record_every: usize,
}

impl Schedule {
    pub fn new(
        t_end: f64,
        dt: f64,
        noise_off: Vec<(f64, f64)>,
        freezes: Vec<(f64, usize)>,
        probes: Vec<usize>,
        record_every: usize,
    ) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::Config(format!("horizon t_end = {t_end} must be positive")));
        }
        if !(dt > 0.0 && dt <= t_end) {
            return Err(Error::Config(format!("step dt = {dt} must lie in (0, t_end]")));
        }
        let steps = t_end / dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
            return Err(Error::Config(format!(
                "t_end = {t_end} is not a whole number of dt = {dt} steps"
            )));
        }
        if record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        let tol = 1e-9 * t_end.max(1.0);
        let mut prev_end = f64::NEG_INFINITY;
        for &(a, b) in &noise_off {
            if !(a < b) || a < -tol || b > t_end + tol {
                return Err(Error::Config(format!(
                    "off window [{a}, {b}) must sit inside [0, {t_end})"
                )));
            }
            if a < prev_end - tol {
                return Err(Error::Config(
                    "off windows must be sorted and pairwise disjoint".into(),
                ));
            }
            prev_end = b;
        }
        for &(tf, _) in &freezes {
            let at_endpoint = noise_off.iter().any(|&(_, b)| (tf - b).abs() <= tol);
            if !at_endpoint {
                return Err(Error::Config(format!(
                    "freeze at t = {tf} is not the right endpoint of any off window"
                )));
            }
        }
        Ok(Schedule { t_end, dt, noise_off, freezes, probes, record_every })
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    fn noise_off_at(&self, t_mid: f64) -> bool {
        self.noise_off.iter().any(|&(a, b)| t_mid > a && t_mid < b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSample {
    pub step: usize,
    pub t: f64,
    pub probe: usize,
    pub comp: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub final_state: FieldState,
    pub records: Vec<ProbeSample>,
}

/// Run the scheme from `u0` to the horizon. Noise increments for step k are
/// drawn from the stream keyed by (seed, replica, k), so two runs with the
/// same key see identical noise regardless of schedule differences, and the
/// whole trajectory is reproducible bit for bit.
pub fn simulate(
    u0: &FieldState,
    sched: &Schedule,
    sigma: &NonlinearitySpec,
    model: &NoiseModel,
    seed: u64,
    replica: u64,
) -> Result<Trajectory> {
    check_compatible(u0, sigma, model)?;
    if (u0.rho - model.rho).abs() > 1e-12 * model.rho {
        return Err(Error::Config(format!(
            "field carries rho = {} but the noise model was built for rho = {}",
            u0.rho, model.rho
        )));
    }
    for &p in &sched.probes {
        if p >= u0.grid.points() {
            return Err(Error::Config(format!("probe index {p} outside the grid")));
        }
    }
    let n_steps = sched.n_steps();
    let tol = 1e-9 * sched.t_end.max(1.0);
    let mut freeze_at = vec![Vec::new(); n_steps + 1];
    for &(tf, x) in &sched.freezes {
        if x >= u0.grid.points() {
            return Err(Error::Config(format!("freeze point {x} outside the grid")));
        }
        let k = (tf / sched.dt).round() as usize;
        if k > n_steps || (tf - k as f64 * sched.dt).abs() > tol {
            return Err(Error::Config(format!(
                "freeze time {tf} does not land on the step lattice (dt = {})",
                sched.dt
            )));
        }
        freeze_at[k].push(x);
    }
    let mut fft = CubeFft::new(u0.grid.d, u0.grid.n);
    let atten = attenuation(model.rho)?;
    let mult: Vec<f64> = (0..u0.grid.points())
        .map(|i| (-u0.grid.xi_squared(i) * sched.dt / 2.0).exp())
        .collect();
    let mut state = u0.clone();
    state.time = 0.0;
    let mut records = Vec::new();
    let mut record = |state: &FieldState, k: usize| {
        for &p in &sched.probes {
            for c in 0..state.m {
                records.push(ProbeSample {
                    step: k,
                    t: state.time,
                    probe: p,
                    comp: c,
                    value: state.comp(c)[p],
                });
            }
        }
    };
    record(&state, 0);
    for k in 0..n_steps {
        let t_mid = (k as f64 + 0.5) * sched.dt;
        if sched.noise_off_at(t_mid) {
            heat_apply(&mut state, &mult, &mut fft);
            state.time = (k + 1) as f64 * sched.dt;
        } else {
            let mut rng = stream(seed, &[tag::NOISE, replica, k as u64]);
            state = step(&state, sched.dt, sigma, model, atten, &mut fft, &mut rng)?;
            state.time = (k + 1) as f64 * sched.dt;
        }
        for &x in &freeze_at[k + 1] {
            state = freeze(&state, x)?;
        }
        if (k + 1) % sched.record_every == 0 || k + 1 == n_steps {
            record(&state, k + 1);
        }
    }
    if !state.all_finite() {
        return Err(Error::CheckFailed("trajectory lost finiteness".into()));
    }
    Ok(Trajectory { final_state: state, records })
}

/// Exact single-point variance of the scheme for a constant (additive)
/// nonlinearity sigma = c: per-mode recursion
/// P <- exp(-|xi|^2 dt) (P + atten^2 c^2 dt amp^2) over steps where
/// `source_on` holds, heat-only decay elsewhere. Returns sum over modes,
/// which is Var(u(x)) at every x.
pub fn additive_variance_recursion(
    model: &NoiseModel,
    c: f64,
    atten: f64,
    dt: f64,
    n_steps: usize,
    source_on: impl Fn(usize) -> bool,
) -> f64 {
    let np = model.grid.points();
    let decay: Vec<f64> = (0..np).map(|i| (-model.grid.xi_squared(i) * dt).exp()).collect();
    let drive = atten * atten * c * c * dt;
    let mut p = vec![0.0_f64; np];
    for k in 0..n_steps {
        let on = source_on(k);
        for (i, pi) in p.iter_mut().enumerate() {
            let src = if on { drive * model.amplitudes[i] * model.amplitudes[i] } else { 0.0 };
            *pi = decay[i] * (*pi + src);
        }
    }
    p.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::build_noise_model;
    use approx::assert_abs_diff_eq;

    fn small_grid() -> TorusGrid {
        TorusGrid::new(3, 16, 4.0).unwrap()
    }

    fn ripple(grid: TorusGrid, rho: f64) -> FieldState {
        let np = grid.points();
        let mut vals = Vec::with_capacity(np);
        let base = 2.0 * std::f64::consts::PI / grid.l;
        for i in 0..np {
            let c = grid.coords(i);
            let x = c[0] as f64 * grid.h();
            let y = c[1] as f64 * grid.h();
            vals.push(1.0 + (base * x).cos() * 0.5 + (2.0 * base * y).sin() * 0.25);
        }
        FieldState::from_values(grid, vals, 0.0, rho, 1).unwrap()
    }

    #[test]
    fn heat_with_zero_time_is_the_identity() {
        let s = ripple(small_grid(), 0.1);
        let mut fft = CubeFft::new(3, 16);
        let out = heat_propagate(&s, 0.0, &mut fft).unwrap();
        for (a, b) in s.values.iter().zip(&out.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn heat_preserves_the_spatial_mean_and_decays_one_mode_exactly() {
        let grid = small_grid();
        let s = ripple(grid, 0.1);
        let mut fft = CubeFft::new(3, 16);
        let t = 0.3;
        let out = heat_propagate(&s, t, &mut fft).unwrap();
        assert_abs_diff_eq!(out.spatial_mean(0), s.spatial_mean(0), epsilon = 1e-12);
        // the cos(xi x) part decays by exp(-xi^2 t/2), the sin(2 xi y) part
        // by exp(-4 xi^2 t / 2)
        let base = 2.0 * std::f64::consts::PI / grid.l;
        let d1 = (-base * base * t / 2.0).exp();
        let d2 = (-4.0 * base * base * t / 2.0).exp();
        for i in 0..grid.points() {
            let c = grid.coords(i);
            let x = c[0] as f64 * grid.h();
            let y = c[1] as f64 * grid.h();
            let want = 1.0 + (base * x).cos() * 0.5 * d1 + (2.0 * base * y).sin() * 0.25 * d2;
            assert_abs_diff_eq!(out.values[i], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn heat_is_a_semigroup() {
        let s = ripple(small_grid(), 0.1);
        let mut fft = CubeFft::new(3, 16);
        let two = heat_propagate(&heat_propagate(&s, 0.2, &mut fft).unwrap(), 0.35, &mut fft)
            .unwrap();
        let one = heat_propagate(&s, 0.55, &mut fft).unwrap();
        for (a, b) in two.values.iter().zip(&one.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_nonlinearity_reduces_the_step_to_pure_heat() {
        let grid = small_grid();
        let rho = 0.2;
        let s = ripple(grid, rho);
        let model = build_noise_model(grid, rho, 1).unwrap();
        let mut fft = CubeFft::new(3, 16);
        let sigma = NonlinearitySpec::constant_scalar(0.0);
        let mut rng = stream(3, &[tag::NOISE, 0]);
        let stepped = step(&s, 0.05, &sigma, &model, attenuation(rho).unwrap(), &mut fft, &mut rng)
            .unwrap();
        let heated = heat_propagate(&s, 0.05, &mut fft).unwrap();
        assert_eq!(stepped.values, heated.values);
    }

    #[test]
    fn additive_variance_matches_the_exact_mode_recursion() {
        let grid = TorusGrid::new(3, 32, 4.0).unwrap();
        let rho = 0.05;
        let c = 1.3;
        let dt = rho / 4.0;
        let n_steps = 20; // t = 0.25
        let model = build_noise_model(grid, rho, 1).unwrap();
        let atten = attenuation(rho).unwrap();
        let exact = additive_variance_recursion(&model, c, atten, dt, n_steps, |_| true);
        let sched = Schedule::new(
            n_steps as f64 * dt,
            dt,
            vec![],
            vec![],
            vec![],
            usize::MAX >> 1,
        )
        .unwrap();
        let sigma = NonlinearitySpec::constant_scalar(c);
        let u0 = FieldState::constant(grid, 0.0, rho, 1).unwrap();
        let reps = 150;
        let mut pooled = 0.0;
        for r in 0..reps {
            let traj = simulate(&u0, &sched, &sigma, &model, 42, r).unwrap();
            let v = traj.final_state.comp(0);
            pooled += v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        }
        let emp = pooled / reps as f64;
        assert!(
            (emp - exact).abs() / exact < 0.05,
            "empirical variance {emp} vs exact recursion {exact}"
        );
        // the gap to the continuum prediction
        // c^2 log((t+rho)/rho) / (2(d-2) log(1/rho)) is volume truncation of
        // the long-range correlations; it shrinks as the torus grows
        let t = n_steps as f64 * dt;
        let cont = c * c * ((t + rho) / rho).ln() / (2.0 * (3.0 - 2.0) * (1.0 / rho).ln());
        let mut gaps = Vec::new();
        for (n, l) in [(32usize, 4.0), (64, 8.0), (128, 16.0)] {
            let g = TorusGrid::new(3, n, l).unwrap();
            let m = build_noise_model(g, rho, 1).unwrap();
            let e = additive_variance_recursion(&m, c, atten, dt, n_steps, |_| true);
            gaps.push((e / cont - 1.0).abs());
        }
        assert!(
            gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] < 0.07,
            "continuum gaps {gaps:?} do not shrink with volume"
        );
    }

    #[test]
    fn multiplicative_runs_preserve_the_unit_mean() {
        let grid = small_grid();
        let rho = 0.15;
        let model = build_noise_model(grid, rho, 1).unwrap();
        let sigma = NonlinearitySpec::linear(1.0);
        let dt = 0.0375;
        let sched = Schedule::new(0.3, dt, vec![], vec![], vec![], usize::MAX >> 1).unwrap();
        let u0 = FieldState::constant(grid, 1.0, rho, 1).unwrap();
        let reps = 100;
        let mut means = Vec::with_capacity(reps as usize);
        for r in 0..reps {
            let traj = simulate(&u0, &sched, &sigma, &model, 7, r).unwrap();
            means.push(traj.final_state.spatial_mean(0));
        }
        let mean = means.iter().sum::<f64>() / reps as f64;
        let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!(
            (mean - 1.0).abs() < 4.0 * se + 1e-9,
            "mean {mean} strays from 1 beyond 4 se = {se}"
        );
    }

    #[test]
    fn simulation_is_deterministic_in_seed_and_replica() {
        let grid = small_grid();
        let rho = 0.2;
        let model = build_noise_model(grid, rho, 1).unwrap();
        let sigma = NonlinearitySpec::sqrt_quadratic(1.0, 1.0).unwrap();
        let sched = Schedule::new(0.2, 0.05, vec![], vec![], vec![0, 5], 2).unwrap();
        let u0 = FieldState::constant(grid, 1.0, rho, 1).unwrap();
        let a = simulate(&u0, &sched, &sigma, &model, 11, 3).unwrap();
        let b = simulate(&u0, &sched, &sigma, &model, 11, 3).unwrap();
        assert_eq!(a.final_state.values, b.final_state.values);
        assert_eq!(a.records, b.records);
        let c = simulate(&u0, &sched, &sigma, &model, 11, 4).unwrap();
        assert_ne!(a.final_state.values, c.final_state.values);
    }

    #[test]
    fn whole_horizon_off_window_reduces_to_heat_flow() {
        let grid = small_grid();
        let rho = 0.2;
        let model = build_noise_model(grid, rho, 1).unwrap();
        let sigma = NonlinearitySpec::linear(2.0);
        let sched =
            Schedule::new(0.2, 0.05, vec![(0.0, 0.2)], vec![], vec![], usize::MAX >> 1).unwrap();
        let u0 = ripple(grid, rho);
        let traj = simulate(&u0, &sched, &sigma, &model, 9, 0).unwrap();
        let mut fft = CubeFft::new(3, 16);
        let heated = heat_propagate(&u0, 0.2, &mut fft).unwrap();
        for (a, b) in traj.final_state.values.iter().zip(&heated.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn off_window_energy_follows_the_log_window_shape() {
        // additive noise: the on/off difference is exactly the window's own
        // contribution, with variance known in closed form up to grid effects
        let grid = TorusGrid::new(3, 32, 4.0).unwrap();
        let rho = 0.05;
        let dt = rho / 4.0;
        let t_end = 0.2;
        let n_steps = 16;
        let model = build_noise_model(grid, rho, 1).unwrap();
        let atten = attenuation(rho).unwrap();
        let windows = [(0.05, 0.0875), (0.05, 0.125), (0.05, 0.1875)];
        let la2 = atten * atten;
        let mut dominated = Vec::new();
        let mut log_ratios = Vec::new();
        for &(a, b) in &windows {
            let exact = additive_variance_recursion(&model, 1.0, atten, dt, n_steps, |k| {
                let mid = (k as f64 + 0.5) * dt;
                mid > a && mid < b
            });
            let log_term = ((t_end - a + rho) / (t_end - b + rho)).ln();
            // upper-bound shape (with its additive constant) dominates
            dominated.push(exact / ((log_term + 1.0) / (1.0 / rho).ln()));
            // and the closed-form log part is sharp up to grid effects
            log_ratios.push(exact / (la2 * log_term / 2.0));
        }
        assert!(
            dominated.iter().all(|&r| r < 0.5),
            "window energy is not dominated by the shape bound: {dominated:?}"
        );
        let (lo, hi) = log_ratios
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(l, h), &r| (l.min(r), h.max(r)));
        assert!(
            lo > 0.6 && hi < 1.1 && hi / lo < 1.15,
            "window-energy to log-part ratios {log_ratios:?} are not uniform"
        );
        // Monte Carlo spot check of the middle window against the recursion
        let (a, b) = windows[1];
        let on = Schedule::new(t_end, dt, vec![], vec![], vec![], usize::MAX >> 1).unwrap();
        let off =
            Schedule::new(t_end, dt, vec![(a, b)], vec![], vec![], usize::MAX >> 1).unwrap();
        let sigma = NonlinearitySpec::constant_scalar(1.0);
        let u0 = FieldState::constant(grid, 0.0, rho, 1).unwrap();
        let want = additive_variance_recursion(&model, 1.0, atten, dt, n_steps, |k| {
            let mid = (k as f64 + 0.5) * dt;
            mid > a && mid < b
        });
        let reps = 96;
        let mut pooled = 0.0;
        for r in 0..reps {
            let t_on = simulate(&u0, &on, &sigma, &model, 13, r).unwrap();
            let t_off = simulate(&u0, &off, &sigma, &model, 13, r).unwrap();
            let d: f64 = t_on
                .final_state
                .comp(0)
                .iter()
                .zip(t_off.final_state.comp(0))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            pooled += d / grid.points() as f64;
        }
        let emp = pooled / reps as f64;
        assert!(
            (emp - want).abs() / want < 0.1,
            "window difference variance {emp} vs exact {want}"
        );
    }

    #[test]
    fn freeze_flattens_and_is_idempotent() {
        let grid = small_grid();
        let s = ripple(grid, 0.1);
        let center = grid.flat(&[8, 8, 8]);
        let f = freeze(&s, center).unwrap();
        assert_eq!(f.spatial_variance(0), 0.0);
        assert_abs_diff_eq!(f.values[0], s.values[center], epsilon = 0.0);
        let ff = freeze(&f, grid.flat(&[1, 2, 3])).unwrap();
        assert_eq!(ff.values, f.values);
        // freezing a constant field changes nothing
        let c = FieldState::constant(grid, 2.5, 0.1, 1).unwrap();
        assert_eq!(freeze(&c, 7).unwrap().values, c.values);
        // off-grid positions snap to the nearest point
        let g = freeze_nearest(&s, &[2.01, 2.0, 2.0]).unwrap();
        assert_eq!(g.values[0], s.values[center]);
        assert!(freeze(&s, grid.points()).is_err());
    }

    #[test]
    fn freeze_disturbance_grows_with_distance_from_the_anchor() {
        // freeze vs no-freeze under shared noise: the gap at the anchor stays
        // smallest and grows monotonically with |x - X| at probe distances
        let grid = TorusGrid::new(3, 32, 4.0).unwrap();
        let rho = 0.1;
        let dt = 0.025;
        let t_end = 0.2;
        let model = build_noise_model(grid, rho, 1).unwrap();
        let sigma = NonlinearitySpec::linear(1.0);
        let center = [16usize, 16, 16];
        let anchor = grid.flat(&center);
        let off = vec![(0.05, 0.1)];
        let base = Schedule::new(t_end, dt, off.clone(), vec![], vec![], usize::MAX >> 1).unwrap();
        let frozen =
            Schedule::new(t_end, dt, off, vec![(0.1, anchor)], vec![], usize::MAX >> 1).unwrap();
        let u0 = FieldState::constant(grid, 1.0, rho, 1).unwrap();
        let dists = [0usize, 4, 12];
        let mut gaps = [0.0_f64; 3];
        let reps = 96;
        for r in 0..reps {
            let a = simulate(&u0, &base, &sigma, &model, 21, r).unwrap();
            let b = simulate(&u0, &frozen, &sigma, &model, 21, r).unwrap();
            for (gi, &dist) in gaps.iter_mut().zip(&dists) {
                let p = grid.flat(&[16 + dist, 16, 16]);
                let d = a.final_state.comp(0)[p] - b.final_state.comp(0)[p];
                *gi += d * d;
            }
        }
        assert!(
            gaps[0] < gaps[1] && gaps[1] < gaps[2],
            "freeze disturbance {gaps:?} is not monotone in distance"
        );
    }

    #[test]
    fn second_moments_stay_bounded_for_lipschitz_nonlinearities() {
        // calibrated constant: sup_x E[u_t(x)^2] <= C (1 + |u0|^2) across a
        // small rho sweep for sigma(u) = sqrt(1 + u^2)
        let grid = small_grid();
        let sigma = NonlinearitySpec::sqrt_quadratic(1.0, 1.0).unwrap();
        for rho in [0.05, 0.1] {
            let model = build_noise_model(grid, rho, 1).unwrap();
            let sched = Schedule::new(0.25, rho / 4.0, vec![], vec![], vec![], usize::MAX >> 1)
                .unwrap();
            let u0 = FieldState::constant(grid, 1.0, rho, 1).unwrap();
            let reps = 48;
            let mut second = 0.0;
            for r in 0..reps {
                let traj = simulate(&u0, &sched, &sigma, &model, 31, r).unwrap();
                let v = traj.final_state.comp(0);
                second += v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
            }
            second /= reps as f64;
            let bound = 2.5 * (1.0 + 1.0);
            assert!(
                second < bound,
                "rho {rho}: second moment {second} exceeds the calibrated bound {bound}"
            );
        }
    }

    #[test]
    fn schedules_reject_malformed_inputs() {
        assert!(Schedule::new(0.0, 0.1, vec![], vec![], vec![], 1).is_err());
        assert!(Schedule::new(1.0, 0.3, vec![], vec![], vec![], 1).is_err()); // not a divisor
        assert!(Schedule::new(1.0, 0.1, vec![(0.5, 0.4)], vec![], vec![], 1).is_err());
        assert!(Schedule::new(1.0, 0.1, vec![(0.0, 0.5), (0.4, 0.9)], vec![], vec![], 1).is_err());
        assert!(Schedule::new(1.0, 0.1, vec![(0.0, 1.5)], vec![], vec![], 1).is_err());
        assert!(Schedule::new(1.0, 0.1, vec![(0.2, 0.4)], vec![(0.3, 0)], vec![], 1).is_err());
        assert!(Schedule::new(1.0, 0.1, vec![(0.2, 0.4)], vec![(0.4, 0)], vec![], 1).is_ok());
        assert!(Schedule::new(1.0, 0.1, vec![], vec![], vec![], 0).is_err());
    }

    #[test]
    fn incompatible_pairings_are_rejected() {
        let grid = small_grid();
        let rho = 0.2;
        let model = build_noise_model(grid, rho, 2).unwrap();
        let u0 = FieldState::constant(grid, 0.0, rho, 1).unwrap();
        let sigma = NonlinearitySpec::linear(1.0); // expects 1 noise component
        let sched = Schedule::new(0.1, 0.05, vec![], vec![], vec![], 1).unwrap();
        assert!(simulate(&u0, &sched, &sigma, &model, 1, 0).is_err());
        // rho mismatch between field and model
        let model1 = build_noise_model(grid, 0.1, 1).unwrap();
        assert!(simulate(&u0, &sched, &sigma, &model1, 1, 0).is_err());
    }
}
