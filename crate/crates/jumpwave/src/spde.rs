//! Jump-adapted exact-flow solver for the boundary-driven system: exact
//! per-mode propagation between events, impulse injection at events scaled
//! by the state-dependent multiplier, and an optional deterministic control
//! through the same boundary channel. No time-stepping error anywhere; all
//! discretization lives in mode truncation and the mark band.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::control::ControlGrid;
use crate::levy::{
    sample_stream, second_moment, EventStream, LevyError, MarkBand, TailTransform,
};
use crate::numeric::{derive_seed, mean_and_stderr};
use crate::operators::{OperatorError, SpectralModel};

#[derive(Debug, Error)]
pub enum SpdeError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("state energy became non-finite or exceeded the guard at t = {t} (energy {energy})")]
    EnergyOverflow { t: f64, energy: f64 },
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// Multiplier form applied to the boundary noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Constant(f64),
    /// log(2 + |u|_{L2}), optionally capped.
    LogForm,
}

/// Noise multiplier: bounded below, at most linear growth, optionally
/// capped for bounded-multiplier runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSpec {
    mode: SigmaMode,
    lower: f64,
    growth: f64,
    cap: Option<f64>,
}

impl SigmaSpec {
    pub fn constant(c0: f64) -> Result<Self, SpdeError> {
        if !(c0 > 0.0) || !c0.is_finite() {
            return Err(SpdeError::InvalidConfig(format!(
                "constant multiplier must be positive and finite, got {c0}"
            )));
        }
        Ok(Self { mode: SigmaMode::Constant(c0), lower: c0, growth: c0, cap: Some(c0) })
    }

    /// log(2 + |u|): lower bound log 2, growth constant 1, unbounded.
    pub fn log_form() -> Self {
        Self { mode: SigmaMode::LogForm, lower: std::f64::consts::LN_2, growth: 1.0, cap: None }
    }

    /// log form truncated at a cap (bounded-multiplier runs).
    pub fn log_form_capped(cap: f64) -> Result<Self, SpdeError> {
        if !(cap >= std::f64::consts::LN_2) || !cap.is_finite() {
            return Err(SpdeError::InvalidConfig(format!(
                "cap must be finite and at least log 2, got {cap}"
            )));
        }
        Ok(Self { mode: SigmaMode::LogForm, lower: std::f64::consts::LN_2, growth: 1.0, cap: Some(cap) })
    }

    /// Multiplier value for a displacement norm.
    pub fn eval_norm(&self, u_l2: f64) -> f64 {
        match self.mode {
            SigmaMode::Constant(c0) => c0,
            SigmaMode::LogForm => {
                let s = (2.0 + u_l2).ln();
                self.cap.map_or(s, |k| s.min(k))
            }
        }
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower
    }

    pub fn growth_constant(&self) -> f64 {
        self.growth
    }

    /// Uniform upper bound, when one exists.
    pub fn upper_bound(&self) -> Option<f64> {
        self.cap
    }

    /// The fixed multiplier value when the form is state-independent.
    pub fn constant_value(&self) -> Option<f64> {
        match self.mode {
            SigmaMode::Constant(c0) => Some(c0),
            SigmaMode::LogForm => None,
        }
    }

    pub fn is_state_dependent(&self) -> bool {
        matches!(self.mode, SigmaMode::LogForm)
    }
}

/// Multiplier evaluated at a state.
pub fn sigma_eval<M: SpectralModel>(sigma: &SigmaSpec, model: &M, state: &M::State) -> f64 {
    sigma.eval_norm(model.u_l2(state))
}

/// Immutable description of the driven system: model, jump transform, mark
/// band, and multiplier. Shareable across replica threads.
pub struct SdeSystem<'a, M: SpectralModel> {
    pub model: &'a M,
    pub tt: &'a TailTransform,
    pub band: MarkBand,
    pub sigma: &'a SigmaSpec,
}

impl<'a, M: SpectralModel> SdeSystem<'a, M> {
    pub fn new(
        model: &'a M,
        tt: &'a TailTransform,
        band: MarkBand,
        sigma: &'a SigmaSpec,
    ) -> Result<Self, SpdeError> {
        if sigma.is_state_dependent() && !model.cadlag_paths() {
            return Err(SpdeError::InvalidConfig(
                "state-dependent multipliers need right-continuous paths; \
                 this model is excluded from such runs"
                    .into(),
            ));
        }
        Ok(Self { model, tt, band, sigma })
    }
}

/// One realized trajectory: observables at every breakpoint (initial time,
/// control knots, events, observation times, horizon), the event stream
/// that drove it, and the terminal state. Observable values at an event
/// time are the post-impulse (right-continuous) values.
#[derive(Debug, Clone)]
pub struct PathSample<S> {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub u_norm: Vec<f64>,
    pub sigma_values: Vec<f64>,
    pub stream: EventStream,
    pub final_state: S,
}

/// CSV-ready observable row.
#[derive(Debug, Clone, Serialize)]
pub struct ObservableRow {
    pub t: f64,
    pub energy: f64,
    pub u_l2: f64,
}

impl<S> PathSample<S> {
    pub fn observable_rows(&self) -> Vec<ObservableRow> {
        self.times
            .iter()
            .zip(&self.energy)
            .zip(&self.u_norm)
            .map(|((&t, &energy), &u_l2)| ObservableRow { t, energy, u_l2 })
            .collect()
    }

    /// Recorded squared energy at a breakpoint time (latest entry at t).
    pub fn energy_sq_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|x| *x <= t);
        let idx = i.max(1) - 1;
        self.energy[idx] * self.energy[idx]
    }
}

const ENERGY_GUARD: f64 = 1e150;

/// Simulates one path on a freshly sampled stream. Deterministic per seed.
pub fn simulate<M: SpectralModel>(
    sys: &SdeSystem<'_, M>,
    x0: &M::State,
    horizon: f64,
    control: Option<&ControlGrid>,
    observe: &[f64],
    seed: u64,
) -> Result<PathSample<M::State>, SpdeError> {
    let stream = sample_stream(sys.band, horizon, seed)?;
    simulate_with_stream(sys, x0, horizon, control, observe, stream)
}

/// Simulates one path along a given event stream (consumed into the sample).
pub fn simulate_with_stream<M: SpectralModel>(
    sys: &SdeSystem<'_, M>,
    x0: &M::State,
    horizon: f64,
    control: Option<&ControlGrid>,
    observe: &[f64],
    stream: EventStream,
) -> Result<PathSample<M::State>, SpdeError> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(SpdeError::InvalidConfig(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    if (stream.horizon - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(SpdeError::InvalidConfig(format!(
            "stream horizon {} does not match the run horizon {horizon}",
            stream.horizon
        )));
    }
    if !sys.model.state_is_finite(x0) {
        return Err(SpdeError::InvalidConfig("initial state is not finite".into()));
    }

    // Breakpoints: control cell edges (including the grid's end, where the
    // control drops to zero), observation times, event times, and the
    // horizon. Between consecutive breakpoints the control is constant, so
    // the exact constant-forced flow applies.
    let mut points: Vec<(f64, Option<usize>)> = Vec::new();
    if let Some(grid) = control {
        points.extend(grid.interior_knots().filter(|t| *t < horizon).map(|t| (t, None)));
        if grid.horizon() < horizon {
            points.push((grid.horizon(), None));
        }
    }
    points.extend(observe.iter().filter(|t| **t > 0.0 && **t < horizon).map(|&t| (t, None)));
    points.extend(
        stream
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.t <= horizon)
            .map(|(i, e)| (e.t, Some(i))),
    );
    points.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n_points = points.len() + 2;
    let mut times = Vec::with_capacity(n_points);
    let mut energy = Vec::with_capacity(n_points);
    let mut u_norm = Vec::with_capacity(n_points);
    let mut sigma_values = Vec::with_capacity(n_points);

    let mut state = x0.clone();
    let mut t_prev = 0.0f64;
    let record = |t: f64,
                      state: &M::State,
                      times: &mut Vec<f64>,
                      energy: &mut Vec<f64>,
                      u_norm: &mut Vec<f64>,
                      sigma_values: &mut Vec<f64>|
     -> Result<(), SpdeError> {
        let e = sys.model.energy(state);
        if !e.is_finite() || e > ENERGY_GUARD {
            return Err(SpdeError::EnergyOverflow { t, energy: e });
        }
        times.push(t);
        energy.push(e);
        u_norm.push(sys.model.u_l2(state));
        sigma_values.push(sigma_eval(sys.sigma, sys.model, state));
        Ok(())
    };
    record(0.0, &state, &mut times, &mut energy, &mut u_norm, &mut sigma_values)?;

    for (t, event_idx) in points {
        let dt = t - t_prev;
        if dt > 0.0 {
            let v = control.map_or(0.0, |g| g.value_at(t_prev));
            state = sys.model.forced_step(&state, dt, v);
        }
        if let Some(i) = event_idx {
            let e = &stream.events[i];
            let impulse =
                sigma_eval(sys.sigma, sys.model, &state) * sys.tt.positive(e.z) * e.sign;
            state = sys.model.kicked(&state, impulse);
        }
        record(t, &state, &mut times, &mut energy, &mut u_norm, &mut sigma_values)?;
        t_prev = t;
    }
    if horizon > t_prev {
        let v = control.map_or(0.0, |g| g.value_at(t_prev));
        state = sys.model.forced_step(&state, horizon - t_prev, v);
    }
    record(horizon, &state, &mut times, &mut energy, &mut u_norm, &mut sigma_values)?;

    Ok(PathSample { times, energy, u_norm, sigma_values, stream, final_state: state })
}

/// Squared-energy moment estimates with the assembled closed-form bound.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub times: Vec<f64>,
    pub mean_sq: Vec<f64>,
    pub stderr: Vec<f64>,
    pub bound: Vec<f64>,
    pub pass: bool,
}

/// Monte-Carlo estimate of the squared energy at the given times, compared
/// against the a priori bound M e^{-omega t} |x0|^2 + M K^2 |J|^2 SM t.
/// Requires a capped jump size, a convergent second moment, and a bounded
/// multiplier, so every bound ingredient is finite.
pub fn moment_estimate<M: SpectralModel>(
    sys: &SdeSystem<'_, M>,
    x0: &M::State,
    times: &[f64],
    n: usize,
    seed: u64,
) -> Result<MomentReport, SpdeError> {
    if times.is_empty() || n < 2 {
        return Err(SpdeError::InvalidConfig("need observation times and n >= 2".into()));
    }
    let horizon = times.iter().fold(0.0f64, |m, t| m.max(*t));
    if !(horizon > 0.0) {
        return Err(SpdeError::InvalidConfig("need a positive largest time".into()));
    }
    let spec = &sys.tt.spec;
    if spec.jump_cap.is_none() {
        return Err(SpdeError::InvalidConfig(
            "moment estimates need a finite jump cap".into(),
        ));
    }
    let sm = second_moment(sys.tt, sys.band);
    if sm.full_measure_diverges {
        return Err(SpdeError::InvalidConfig(
            "second moment of the uncapped measure diverges".into(),
        ));
    }
    let floor = spec.mark_floor();
    if sys.band.lo < floor - 1e-12 {
        return Err(SpdeError::InvalidConfig(format!(
            "band lower edge {} admits jumps above the cap (mark floor {floor})",
            sys.band.lo
        )));
    }
    let k_sigma = sys.sigma.upper_bound().ok_or_else(|| {
        SpdeError::InvalidConfig("moment bound needs a bounded multiplier".into())
    })?;
    let (m_bound, omega) = sys.model.bound_constants();
    if !m_bound.is_finite() {
        return Err(SpdeError::InvalidConfig(
            "the growth constant is infinite for this model configuration".into(),
        ));
    }

    let e0_sq = {
        let e = sys.model.energy(x0);
        e * e
    };
    let noise_rate = k_sigma * k_sigma * sys.model.injection_norm2() * sm.banded;
    let bound: Vec<f64> = times
        .iter()
        .map(|t| m_bound * ((-omega * t).exp() * e0_sq + noise_rate * t))
        .collect();

    let samples: Result<Vec<Vec<f64>>, SpdeError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let path = simulate(sys, x0, horizon, None, times, derive_seed(seed, i as u64))?;
            Ok(times.iter().map(|&t| path.energy_sq_at(t)).collect())
        })
        .collect();
    let samples = samples?;

    let mut mean_sq = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    for j in 0..times.len() {
        let col: Vec<f64> = samples.iter().map(|row| row[j]).collect();
        let (m, se) = mean_and_stderr(&col);
        mean_sq.push(m);
        stderr.push(se);
    }
    let pass = mean_sq
        .iter()
        .zip(&stderr)
        .zip(&bound)
        .all(|((m, se), b)| *m <= b + 3.0 * se);

    Ok(MomentReport { times: times.to_vec(), mean_sq, stderr, bound, pass })
}
