//! Spectral models driven from the boundary: a string on (0, 2pi) with a
//! pinned left end and a flux-forced right end, plus a heat rod variant on
//! (0, 1) with flux forcing at the right end. Both models expose exact
//! per-mode propagators (free and constant-forced), the boundary flux lift
//! with its cached mode projections, and the impulse injection used by the
//! jump-adapted solver. Specs are immutable after construction and safe to
//! share across threads; every state update returns a new value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::gk15;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("boundary actuation misses mode {mode}: coefficient {coeff}")]
    DeadMode { mode: usize, coeff: f64 },
}

/// Sign convention of the zeroth-order term in the wave system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StiffnessForm {
    /// Extra restoring stiffness: mode frequencies sqrt(lambda_n + alpha),
    /// bounded rotations, conserved modified energy. Default.
    Restoring,
    /// Softening term of the opposite sign: modes with lambda_n < alpha
    /// grow hyperbolically. Selectable for comparison runs.
    Softening,
}

/// Position/velocity mode coefficients of the wave state.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl SpectralState {
    pub fn zero(n: usize) -> Self {
        Self { a: vec![0.0; n], b: vec![0.0; n] }
    }

    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self, OperatorError> {
        if a.len() != b.len() {
            return Err(OperatorError::InvalidSpec(format!(
                "coefficient lengths differ: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn n_modes(&self) -> usize {
        self.a.len()
    }

    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        assert_eq!(self.a.len(), other.a.len(), "mode counts must match");
        for i in 0..self.a.len() {
            self.a[i] += c * other.a[i];
            self.b[i] += c * other.b[i];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|x| x.is_finite())
    }
}

/// Exact flow over dt of the single-mode system a' = b + f, b' = -w2 a - f
/// with constant forcing f. Covers rotation (w2 > 0), drift (w2 = 0), and
/// hyperbolic (w2 < 0) regimes.
fn mode_step(w2: f64, a0: f64, b0: f64, dt: f64, f: f64) -> (f64, f64) {
    if w2 > 0.0 {
        let om = w2.sqrt();
        let (pa, pb) = if f == 0.0 { (0.0, 0.0) } else { (-f / w2, -f) };
        let (s, c) = (om * dt).sin_cos();
        let (da, db) = (a0 - pa, b0 - pb);
        (pa + da * c + db * s / om, pb - da * om * s + db * c)
    } else if w2 == 0.0 {
        (a0 + (b0 + f) * dt - 0.5 * f * dt * dt, b0 - f * dt)
    } else {
        let mu = (-w2).sqrt();
        let (pa, pb) = if f == 0.0 { (0.0, 0.0) } else { (-f / w2, -f) };
        let (s, c) = ((mu * dt).sinh(), (mu * dt).cosh());
        let (da, db) = (a0 - pa, b0 - pb);
        (pa + da * c + db * s * mu.recip(), pb + da * mu * s + db * c)
    }
}

/// Fixed non-adaptive composite quadrature: 273 Gauss-Kronrod 15-point
/// panels, about 4096 evaluations, cached by the callers.
fn composite_integral(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    const PANELS: usize = 273;
    let h = (b - a) / PANELS as f64;
    let mut total = 0.0;
    for i in 0..PANELS {
        let lo = a + h * i as f64;
        let (value, _) = gk15(&f, lo, lo + h);
        total += value;
    }
    total
}

/// Row of the eigen/coefficient audit table.
#[derive(Debug, Clone, Serialize)]
pub struct EigenRow {
    pub mode: usize,
    pub wavenumber: f64,
    pub lambda: f64,
    pub omega2: f64,
    pub d: f64,
}

/// Truncated spectral model of the boundary-forced string: pinned at 0,
/// flux-forced at 2pi, zeroth-order term alpha with a selectable sign.
#[derive(Debug, Clone)]
pub struct WaveModelSpec {
    length: f64,
    n_modes: usize,
    alpha: f64,
    stiffness: StiffnessForm,
    lambda_shift: f64,
    wavenumbers: Vec<f64>,
    lambdas: Vec<f64>,
    omega2: Vec<f64>,
    d: Vec<f64>,
    injection_norm2: f64,
    m_bound: f64,
}

impl WaveModelSpec {
    pub fn new(
        n_modes: usize,
        alpha: f64,
        stiffness: StiffnessForm,
    ) -> Result<Self, OperatorError> {
        if n_modes == 0 {
            return Err(OperatorError::InvalidSpec("need at least one mode".into()));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(OperatorError::InvalidSpec(format!(
                "zeroth-order coefficient must be finite and nonnegative, got {alpha}"
            )));
        }
        let length = 2.0 * std::f64::consts::PI;
        let wavenumbers: Vec<f64> =
            (1..=n_modes).map(|n| (2.0 * n as f64 - 1.0) / 4.0).collect();
        let lambdas: Vec<f64> = wavenumbers.iter().map(|k| k * k).collect();
        let omega2: Vec<f64> = lambdas
            .iter()
            .map(|l| match stiffness {
                StiffnessForm::Restoring => l + alpha,
                StiffnessForm::Softening => l - alpha,
            })
            .collect();

        // Flux lift with unit right-end slope: cosh(x)/sinh(length), the
        // lambda_shift = 1 solution of D'' = D with D'(0) = 0. Projections
        // onto the eigenbasis are computed once by composite quadrature.
        let sinh_l = length.sinh();
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut d = Vec::with_capacity(n_modes);
        for (i, &k) in wavenumbers.iter().enumerate() {
            let f = move |x: f64| x.cosh() / sinh_l * (k * x).sin() / sqrt_pi;
            let dn = composite_integral(&f, 0.0, length);
            if dn.abs() < 1e-12 {
                return Err(OperatorError::DeadMode { mode: i + 1, coeff: dn });
            }
            d.push(dn);
        }
        let injection_norm2 =
            lambdas.iter().zip(&d).map(|(l, dn)| (1.0 + l) * dn * dn).sum();

        let lambda_min = lambdas[0];
        let m_bound = match stiffness {
            StiffnessForm::Restoring => 1.0 + alpha / lambda_min,
            StiffnessForm::Softening => {
                if alpha < lambda_min {
                    lambda_min / (lambda_min - alpha)
                } else {
                    f64::INFINITY
                }
            }
        };

        Ok(Self {
            length,
            n_modes,
            alpha,
            stiffness,
            lambda_shift: 1.0,
            wavenumbers,
            lambdas,
            omega2,
            d,
            injection_norm2,
            m_bound,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn stiffness(&self) -> StiffnessForm {
        self.stiffness
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn lambda_shift(&self) -> f64 {
        self.lambda_shift
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    pub fn d_coeffs(&self) -> &[f64] {
        &self.d
    }

    /// Squared energy norm of the unit-impulse injection.
    pub fn injection_norm2(&self) -> f64 {
        self.injection_norm2
    }

    /// Growth factor M of the energy bound: energy(t)^2 <= M * energy(0)^2
    /// for the free flow. Infinite in the softening regime once alpha
    /// reaches the lowest mode.
    pub fn m_bound(&self) -> f64 {
        self.m_bound
    }

    /// Mode shape, orthonormal in L2(0, 2pi).
    pub fn eigenfunction(&self, mode: usize, x: f64) -> f64 {
        (self.wavenumbers[mode] * x).sin() / std::f64::consts::PI.sqrt()
    }

    pub fn eigenfunction_deriv(&self, mode: usize, x: f64) -> f64 {
        let k = self.wavenumbers[mode];
        k * (k * x).cos() / std::f64::consts::PI.sqrt()
    }

    pub fn neumann_map(&self, amplitude: f64) -> NeumannMap<'_> {
        NeumannMap { amplitude, spec: self }
    }

    /// Free flow over dt, exact per mode.
    pub fn semigroup_apply(&self, state: &SpectralState, dt: f64) -> SpectralState {
        self.forced_apply(state, dt, 0.0)
    }

    /// Flow over dt with a constant boundary control amplitude v entering
    /// through the same injection channel as the noise, exact per mode.
    pub fn forced_apply(&self, state: &SpectralState, dt: f64, v: f64) -> SpectralState {
        assert_eq!(state.n_modes(), self.n_modes, "state size must match the spec");
        debug_assert!(dt >= 0.0);
        let mut out = SpectralState::zero(self.n_modes);
        for i in 0..self.n_modes {
            let f = if v == 0.0 { 0.0 } else { self.d[i] * v };
            let (a, b) = mode_step(self.omega2[i], state.a[i], state.b[i], dt, f);
            out.a[i] = a;
            out.b[i] = b;
        }
        out
    }

    /// State increment injected by one boundary impulse of signed size s:
    /// position modes gain d_n s, velocity modes lose d_n s.
    pub fn boundary_increment(&self, s: f64) -> SpectralState {
        SpectralState {
            a: self.d.iter().map(|dn| dn * s).collect(),
            b: self.d.iter().map(|dn| -dn * s).collect(),
        }
    }

    /// Energy norm: sqrt(sum lambda_n a_n^2 + sum b_n^2).
    pub fn energy(&self, state: &SpectralState) -> f64 {
        assert_eq!(state.n_modes(), self.n_modes);
        let mut sum = 0.0;
        for i in 0..self.n_modes {
            sum += self.lambdas[i] * state.a[i] * state.a[i] + state.b[i] * state.b[i];
        }
        sum.sqrt()
    }

    /// Quadratic first integral of the free flow (per-mode omega2 a^2 + b^2
    /// summed); conserved exactly by the dynamics for either stiffness form.
    pub fn conserved_quadratic(&self, state: &SpectralState) -> f64 {
        assert_eq!(state.n_modes(), self.n_modes);
        let mut sum = 0.0;
        for i in 0..self.n_modes {
            sum += self.omega2[i] * state.a[i] * state.a[i] + state.b[i] * state.b[i];
        }
        sum
    }

    /// L2 norm of the displacement component.
    pub fn u_l2(&self, state: &SpectralState) -> f64 {
        state.a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn eigen_rows(&self) -> Vec<EigenRow> {
        (0..self.n_modes)
            .map(|i| EigenRow {
                mode: i + 1,
                wavenumber: self.wavenumbers[i],
                lambda: self.lambdas[i],
                omega2: self.omega2[i],
                d: self.d[i],
            })
            .collect()
    }
}

/// Flux lift profile scaled to a given right-end slope.
#[derive(Debug, Clone, Copy)]
pub struct NeumannMap<'a> {
    amplitude: f64,
    spec: &'a WaveModelSpec,
}

impl NeumannMap<'_> {
    pub fn value(&self, x: f64) -> f64 {
        self.amplitude * x.cosh() / self.spec.length.sinh()
    }

    pub fn deriv(&self, x: f64) -> f64 {
        self.amplitude * x.sinh() / self.spec.length.sinh()
    }

    pub fn coeffs(&self) -> Vec<f64> {
        self.spec.d.iter().map(|dn| dn * self.amplitude).collect()
    }
}

/// Mode amplitudes of the heat rod state.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatState {
    pub a: Vec<f64>,
}

impl HeatState {
    pub fn zero(n: usize) -> Self {
        Self { a: vec![0.0; n] }
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().all(|x| x.is_finite())
    }
}

/// Heat rod on (0, 1), insulated at 0 and flux-forced at 1: cosine modes
/// including the constant mode, pure-decay semigroup.
#[derive(Debug, Clone)]
pub struct HeatModelSpec {
    length: f64,
    n_modes: usize,
    lambdas: Vec<f64>,
    d: Vec<f64>,
    injection_norm2: f64,
}

impl HeatModelSpec {
    pub fn new(n_modes: usize) -> Result<Self, OperatorError> {
        if n_modes == 0 {
            return Err(OperatorError::InvalidSpec("need at least one mode".into()));
        }
        let length = 1.0f64;
        let lambdas: Vec<f64> = (0..n_modes)
            .map(|n| {
                let w = n as f64 * std::f64::consts::PI;
                w * w
            })
            .collect();
        let sinh_l = length.sinh();
        let mut d = Vec::with_capacity(n_modes);
        for n in 0..n_modes {
            let f = move |x: f64| {
                let shape = if n == 0 {
                    1.0
                } else {
                    std::f64::consts::SQRT_2 * (n as f64 * std::f64::consts::PI * x).cos()
                };
                x.cosh() / sinh_l * shape
            };
            let dn = composite_integral(&f, 0.0, length);
            if dn.abs() < 1e-12 {
                return Err(OperatorError::DeadMode { mode: n, coeff: dn });
            }
            d.push(dn);
        }
        let injection_norm2 = lambdas
            .iter()
            .zip(&d)
            .map(|(l, dn)| {
                let g = (1.0 + l) * dn;
                g * g
            })
            .sum();
        Ok(Self { length, n_modes, lambdas, d, injection_norm2 })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn d_coeffs(&self) -> &[f64] {
        &self.d
    }

    pub fn injection_norm2(&self) -> f64 {
        self.injection_norm2
    }

    /// Mode shape, orthonormal in L2(0, 1); mode 0 is the constant.
    pub fn eigenfunction(&self, mode: usize, x: f64) -> f64 {
        if mode == 0 {
            1.0
        } else {
            std::f64::consts::SQRT_2 * (mode as f64 * std::f64::consts::PI * x).cos()
        }
    }

    pub fn semigroup_apply(&self, state: &HeatState, dt: f64) -> HeatState {
        self.forced_apply(state, dt, 0.0)
    }

    /// Flow over dt with constant control amplitude v through the boundary
    /// channel, exact per mode.
    pub fn forced_apply(&self, state: &HeatState, dt: f64, v: f64) -> HeatState {
        assert_eq!(state.a.len(), self.n_modes, "state size must match the spec");
        debug_assert!(dt >= 0.0);
        let mut out = HeatState::zero(self.n_modes);
        for i in 0..self.n_modes {
            let l = self.lambdas[i];
            let g = if v == 0.0 { 0.0 } else { -(1.0 + l) * self.d[i] * v };
            out.a[i] = if l == 0.0 {
                state.a[i] + g * dt
            } else if g == 0.0 {
                state.a[i] * (-l * dt).exp()
            } else {
                let p = g / l;
                p + (state.a[i] - p) * (-l * dt).exp()
            };
        }
        out
    }

    /// State increment injected by one boundary impulse of signed size s.
    pub fn boundary_increment(&self, s: f64) -> HeatState {
        HeatState {
            a: self
                .lambdas
                .iter()
                .zip(&self.d)
                .map(|(l, dn)| -(1.0 + l) * dn * s)
                .collect(),
        }
    }

    /// L2 norm, which is also the energy norm for this model.
    pub fn energy(&self, state: &HeatState) -> f64 {
        state.a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn eigen_rows(&self) -> Vec<EigenRow> {
        (0..self.n_modes)
            .map(|i| EigenRow {
                mode: i,
                wavenumber: i as f64 * std::f64::consts::PI,
                lambda: self.lambdas[i],
                omega2: self.lambdas[i],
                d: self.d[i],
            })
            .collect()
    }
}

/// Common surface the jump solver needs from a spectral model. Specs are
/// shared read-only across replica threads.
pub trait SpectralModel: Sync {
    type State: Clone + Send + Sync;

    fn zero_state(&self) -> Self::State;
    fn free_step(&self, state: &Self::State, dt: f64) -> Self::State;
    fn forced_step(&self, state: &Self::State, dt: f64, v: f64) -> Self::State;
    /// State after one boundary impulse of signed size s.
    fn kicked(&self, state: &Self::State, s: f64) -> Self::State;
    fn energy(&self, state: &Self::State) -> f64;
    /// L2 norm of the displacement component (argument of the multiplier).
    fn u_l2(&self, state: &Self::State) -> f64;
    fn state_is_finite(&self, state: &Self::State) -> bool;
    /// (M, omega) of the energy bound energy(t)^2 <= e^{-omega t} M |x|^2 + ...
    fn bound_constants(&self) -> (f64, f64);
    fn injection_norm2(&self) -> f64;
    /// Whether paths of this model are right-continuous with left limits in
    /// the state space; models without this property are excluded from
    /// state-dependent multiplier runs.
    fn cadlag_paths(&self) -> bool;
    /// Length of the flattened coefficient vector.
    fn state_dim(&self) -> usize;
    /// Flattens a state into `out` (displacement block first).
    fn write_state(&self, state: &Self::State, out: &mut [f64]);
    /// Rebuilds a state from flattened coefficients.
    fn read_state(&self, coeffs: &[f64]) -> Self::State;
    /// Mode index addressed by a flattened coefficient position.
    fn mode_of_coefficient(&self, i: usize) -> usize;
}

impl SpectralModel for WaveModelSpec {
    type State = SpectralState;

    fn zero_state(&self) -> SpectralState {
        SpectralState::zero(self.n_modes)
    }

    fn free_step(&self, state: &SpectralState, dt: f64) -> SpectralState {
        self.semigroup_apply(state, dt)
    }

    fn forced_step(&self, state: &SpectralState, dt: f64, v: f64) -> SpectralState {
        self.forced_apply(state, dt, v)
    }

    fn kicked(&self, state: &SpectralState, s: f64) -> SpectralState {
        let mut out = state.clone();
        for i in 0..self.n_modes {
            out.a[i] += self.d[i] * s;
            out.b[i] -= self.d[i] * s;
        }
        out
    }

    fn energy(&self, state: &SpectralState) -> f64 {
        WaveModelSpec::energy(self, state)
    }

    fn u_l2(&self, state: &SpectralState) -> f64 {
        WaveModelSpec::u_l2(self, state)
    }

    fn state_is_finite(&self, state: &SpectralState) -> bool {
        state.is_finite()
    }

    fn bound_constants(&self) -> (f64, f64) {
        (self.m_bound, 0.0)
    }

    fn injection_norm2(&self) -> f64 {
        self.injection_norm2
    }

    fn cadlag_paths(&self) -> bool {
        true
    }

    fn state_dim(&self) -> usize {
        2 * self.n_modes
    }

    fn write_state(&self, state: &SpectralState, out: &mut [f64]) {
        let n = self.n_modes;
        assert_eq!(out.len(), 2 * n, "coefficient buffer size mismatch");
        out[..n].copy_from_slice(&state.a);
        out[n..].copy_from_slice(&state.b);
    }

    fn read_state(&self, coeffs: &[f64]) -> SpectralState {
        let n = self.n_modes;
        assert_eq!(coeffs.len(), 2 * n, "coefficient buffer size mismatch");
        SpectralState { a: coeffs[..n].to_vec(), b: coeffs[n..].to_vec() }
    }

    fn mode_of_coefficient(&self, i: usize) -> usize {
        i % self.n_modes
    }
}

impl SpectralModel for HeatModelSpec {
    type State = HeatState;

    fn zero_state(&self) -> HeatState {
        HeatState::zero(self.n_modes)
    }

    fn free_step(&self, state: &HeatState, dt: f64) -> HeatState {
        self.semigroup_apply(state, dt)
    }

    fn forced_step(&self, state: &HeatState, dt: f64, v: f64) -> HeatState {
        self.forced_apply(state, dt, v)
    }

    fn kicked(&self, state: &HeatState, s: f64) -> HeatState {
        let mut out = state.clone();
        for i in 0..self.n_modes {
            out.a[i] -= (1.0 + self.lambdas[i]) * self.d[i] * s;
        }
        out
    }

    fn energy(&self, state: &HeatState) -> f64 {
        HeatModelSpec::energy(self, state)
    }

    fn u_l2(&self, state: &HeatState) -> f64 {
        HeatModelSpec::energy(self, state)
    }

    fn state_is_finite(&self, state: &HeatState) -> bool {
        state.is_finite()
    }

    fn bound_constants(&self) -> (f64, f64) {
        (1.0, 0.0)
    }

    fn injection_norm2(&self) -> f64 {
        self.injection_norm2
    }

    fn cadlag_paths(&self) -> bool {
        false
    }

    fn state_dim(&self) -> usize {
        self.n_modes
    }

    fn write_state(&self, state: &HeatState, out: &mut [f64]) {
        assert_eq!(out.len(), self.n_modes, "coefficient buffer size mismatch");
        out.copy_from_slice(&state.a);
    }

    fn read_state(&self, coeffs: &[f64]) -> HeatState {
        assert_eq!(coeffs.len(), self.n_modes, "coefficient buffer size mismatch");
        HeatState { a: coeffs.to_vec() }
    }

    fn mode_of_coefficient(&self, i: usize) -> usize {
        i
    }
}
