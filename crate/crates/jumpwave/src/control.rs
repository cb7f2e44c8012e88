//! Piecewise-constant scalar boundary controls on a uniform time grid,
//! controllability Gramians of the grid-parameterized input map, and
//! minimum-norm steering. The input map is assembled from exact per-mode
//! step responses, so the control loop carries no time-discretization
//! error: feasibility and residuals are limited only by conditioning.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operators::SpectralModel;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid control grid: {0}")]
    InvalidGrid(String),
    #[error("invalid steering problem: {0}")]
    InvalidSteering(String),
    #[error("gramian factorization failed despite the regularization floor")]
    FactorizationFailed,
    #[error(
        "gramian condition {condition:.3e} is beyond the solvable threshold; \
         weakest direction concentrates on mode(s) {modes:?}"
    )]
    NearUnreachableModes { modes: Vec<usize>, condition: f64 },
    #[error(
        "achieved residual {achieved:.3e} exceeds the requested tolerance {requested:.3e} \
         at the regularization floor"
    )]
    ResidualAboveTolerance { achieved: f64, requested: f64 },
    #[error("horizon {horizon} is not an integer multiple of the cell width {step}")]
    StepMismatch { horizon: f64, step: f64 },
}

/// Scalar control that is constant on each cell [k*step, (k+1)*step) of a
/// uniform grid starting at t = 0; zero outside the covered horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    step: f64,
    values: Vec<f64>,
}

impl ControlGrid {
    pub fn new(step: f64, values: Vec<f64>) -> Result<Self, ControlError> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(ControlError::InvalidGrid(format!("step must be positive, got {step}")));
        }
        if values.is_empty() {
            return Err(ControlError::InvalidGrid("needs at least one cell".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ControlError::InvalidGrid("non-finite cell value".into()));
        }
        Ok(Self { step, values })
    }

    pub fn zeros(cells: usize, step: f64) -> Result<Self, ControlError> {
        Self::new(step, vec![0.0; cells])
    }

    pub fn constant(value: f64, cells: usize, step: f64) -> Result<Self, ControlError> {
        Self::new(step, vec![value; cells])
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> f64 {
        self.step * self.values.len() as f64
    }

    /// Right-continuous evaluation; zero outside [0, horizon).
    pub fn value_at(&self, t: f64) -> f64 {
        if t < 0.0 || t >= self.horizon() {
            return 0.0;
        }
        let idx = ((t / self.step) as usize).min(self.values.len() - 1);
        self.values[idx]
    }

    /// Left-limit evaluation: the value governing an event at time t, i.e.
    /// the cell whose half-open interval has t strictly inside or at its
    /// right endpoint. Zero at t <= 0 and beyond the horizon.
    pub fn left_value(&self, t: f64) -> f64 {
        if t <= 0.0 || t > self.horizon() {
            return 0.0;
        }
        let x = t / self.step;
        let cell = x.floor();
        let idx = if x == cell { cell as usize - 1 } else { cell as usize };
        self.values[idx.min(self.values.len() - 1)]
    }

    /// Interior grid knots (cell boundaries strictly inside (0, horizon)).
    pub fn interior_knots(&self) -> impl Iterator<Item = f64> + '_ {
        (1..self.values.len()).map(move |k| self.step * k as f64)
    }

    /// Squared L2 norm of the control: sum of v_k^2 * step.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v * self.step).sum::<f64>()
    }

    /// Zero-pads the grid out to `cells` cells (feasible-set nesting).
    pub fn zero_extended(&self, cells: usize) -> Self {
        let mut values = self.values.clone();
        values.resize(values.len().max(cells), 0.0);
        Self { step: self.step, values }
    }
}

/// One (time, value) row of a control grid, for CSV export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub t: f64,
    pub v: f64,
}

impl ControlGrid {
    /// Rows (cell start time, cell value) for tabular export.
    pub fn rows(&self) -> Vec<ControlRow> {
        self.values
            .iter()
            .enumerate()
            .map(|(k, &v)| ControlRow { t: self.step * k as f64, v })
            .collect()
    }
}

/// State reached at time `grid.horizon()` from `x0` under the grid control
/// and no noise. Exact per cell: each forced step solves the mode ODEs in
/// closed form, so the only error is floating-point roundoff.
pub fn input_map<M: SpectralModel>(model: &M, x0: &M::State, grid: &ControlGrid) -> M::State {
    let mut state = x0.clone();
    for &v in grid.values() {
        state = model.forced_step(&state, grid.step(), v);
    }
    state
}

/// Columns of the grid-to-state map: column j is the terminal state produced
/// by a unit control on cell j alone, flattened to coefficients. The unit
/// cell response is computed once and flowed forward by the free semigroup.
fn input_matrix<M: SpectralModel>(model: &M, horizon: f64, cells: usize) -> DMatrix<f64> {
    let dim = model.state_dim();
    let dt = horizon / cells as f64;
    let unit = model.forced_step(&model.zero_state(), dt, 1.0);
    let mut phi = DMatrix::zeros(dim, cells);
    let mut buf = vec![0.0; dim];
    for j in 0..cells {
        let remaining = horizon - dt * (j + 1) as f64;
        let flowed = model.free_step(&unit, remaining.max(0.0));
        model.write_state(&flowed, &mut buf);
        for (i, &x) in buf.iter().enumerate() {
            phi[(i, j)] = x;
        }
    }
    phi
}

/// Condition-number ceiling past which steering answers are numerically
/// meaningless and the weakest direction is reported instead.
const CONDITION_LIMIT: f64 = 1e14;

/// Cholesky-backed factorization of the grid controllability Gramian
/// W = Phi Phi^T / dt, with a relative Tikhonov floor so the factorization
/// never fails outright on rank-deficient horizons.
pub struct GramianFactorization {
    phi: DMatrix<f64>,
    w_raw: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    dt: f64,
    floor: f64,
    condition: f64,
    min_eigenvalue: f64,
    weakest_direction: DVector<f64>,
}

impl GramianFactorization {
    /// Assembles Phi and W for steering `model` over `horizon` with `cells`
    /// control cells, and factors W + floor*I.
    pub fn build<M: SpectralModel>(
        model: &M,
        horizon: f64,
        cells: usize,
    ) -> Result<Self, ControlError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ControlError::InvalidSteering(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if cells == 0 {
            return Err(ControlError::InvalidSteering("need at least one control cell".into()));
        }
        let dim = model.state_dim();
        if cells < dim {
            return Err(ControlError::InvalidSteering(format!(
                "{cells} control cells cannot span a {dim}-dimensional state space"
            )));
        }
        let dt = horizon / cells as f64;
        let phi = input_matrix(model, horizon, cells);
        let w_raw = &phi * phi.transpose() / dt;
        let eigen = w_raw.clone().symmetric_eigen();
        let (mut min_i, mut max_i) = (0, 0);
        for (i, &lam) in eigen.eigenvalues.iter().enumerate() {
            if lam < eigen.eigenvalues[min_i] {
                min_i = i;
            }
            if lam > eigen.eigenvalues[max_i] {
                max_i = i;
            }
        }
        let min_eigenvalue = eigen.eigenvalues[min_i];
        let max_eigenvalue = eigen.eigenvalues[max_i];
        let condition = if min_eigenvalue > 0.0 {
            max_eigenvalue / min_eigenvalue
        } else {
            f64::INFINITY
        };
        let weakest_direction = eigen.eigenvectors.column(min_i).into_owned();
        let floor = 1e-12 * w_raw.trace() / dim as f64;
        let regularized = &w_raw + DMatrix::identity(dim, dim) * floor;
        let chol = Cholesky::new(regularized).ok_or(ControlError::FactorizationFailed)?;
        Ok(Self { phi, w_raw, chol, dt, floor, condition, min_eigenvalue, weakest_direction })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    /// Modes carrying the weakest Gramian direction: every mode whose
    /// eigenvector weight is at least half the largest weight.
    pub fn weakest_modes<M: SpectralModel>(&self, model: &M) -> Vec<usize> {
        let max_w = self.weakest_direction.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut modes: Vec<usize> = self
            .weakest_direction
            .iter()
            .enumerate()
            .filter(|(_, x)| x.abs() >= 0.5 * max_w)
            .map(|(i, _)| model.mode_of_coefficient(i))
            .collect();
        modes.sort_unstable();
        modes.dedup();
        modes
    }

    fn near_unreachable_error<M: SpectralModel>(&self, model: &M) -> ControlError {
        ControlError::NearUnreachableModes {
            modes: self.weakest_modes(model),
            condition: self.condition,
        }
    }

    /// Minimum-energy grid control solving Phi v = y in the adjoint
    /// parameterization v = Phi^T p / dt with (W + (floor + extra_ridge) I) p = y.
    /// The unridged solve runs two refinement sweeps against the raw Gramian,
    /// so the Tikhonov floor never biases an exact-steering answer.
    fn solve(&self, y: &DVector<f64>, extra_ridge: f64) -> Result<DVector<f64>, ControlError> {
        let p = if extra_ridge == 0.0 {
            let mut p = self.chol.solve(y);
            for _ in 0..2 {
                let r = y - &self.w_raw * &p;
                p += self.chol.solve(&r);
            }
            p
        } else {
            let dim = self.w_raw.nrows();
            let m = &self.w_raw + DMatrix::identity(dim, dim) * (self.floor + extra_ridge);
            Cholesky::new(m).ok_or(ControlError::FactorizationFailed)?.solve(y)
        };
        Ok(self.phi.transpose() * p / self.dt)
    }
}

/// Outcome of a steering solve: the control, where it actually lands,
/// and the conditioning context behind the numbers.
#[derive(Debug)]
pub struct SteeringResult<S> {
    pub grid: ControlGrid,
    pub predicted: S,
    pub residual: f64,
    pub energy: f64,
    pub condition: f64,
    pub floor: f64,
}

fn to_vector<M: SpectralModel>(model: &M, state: &M::State) -> DVector<f64> {
    let mut buf = vec![0.0; model.state_dim()];
    model.write_state(state, &mut buf);
    DVector::from_vec(buf)
}

fn finish_steering<M: SpectralModel>(
    model: &M,
    gram: &GramianFactorization,
    x0: &M::State,
    target: &M::State,
    values: Vec<f64>,
) -> Result<SteeringResult<M::State>, ControlError> {
    let grid = ControlGrid::new(gram.dt, values)?;
    let predicted = input_map(model, x0, &grid);
    let residual = (to_vector(model, &predicted) - to_vector(model, target)).norm();
    let energy = grid.energy();
    Ok(SteeringResult {
        grid,
        predicted,
        residual,
        energy,
        condition: gram.condition,
        floor: gram.floor,
    })
}

pub(crate) fn min_norm_core<M: SpectralModel>(
    model: &M,
    gram: &GramianFactorization,
    x0: &M::State,
    target: &M::State,
    horizon: f64,
    cells: usize,
) -> Result<SteeringResult<M::State>, ControlError> {
    let y = to_vector(model, target) - to_vector(model, &model.free_step(x0, horizon));
    if y.norm() == 0.0 {
        return finish_steering(model, gram, x0, target, vec![0.0; cells]);
    }
    let v = gram.solve(&y, 0.0)?;
    finish_steering(model, gram, x0, target, v.iter().copied().collect())
}

/// Best steering toward `target` whose control energy stays within `budget`.
/// When the exact minimum-norm answer already fits, this is it; otherwise the
/// Tikhonov ridge grows until the energy drops inside the budget and the
/// returned row carries the honest residual of that capped control. Near
/// singular horizons this trades unreachable exactness for a bounded control
/// instead of spraying energy through the regularization floor.
pub(crate) fn min_norm_within_budget<M: SpectralModel>(
    model: &M,
    gram: &GramianFactorization,
    x0: &M::State,
    target: &M::State,
    horizon: f64,
    cells: usize,
    budget: f64,
) -> Result<SteeringResult<M::State>, ControlError> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(ControlError::InvalidSteering(format!(
            "energy budget must be positive and finite, got {budget}"
        )));
    }
    let y = to_vector(model, target) - to_vector(model, &model.free_step(x0, horizon));
    if y.norm() == 0.0 {
        return finish_steering(model, gram, x0, target, vec![0.0; cells]);
    }
    let energy_of = |v: &DVector<f64>| v.iter().map(|x| x * x).sum::<f64>() * gram.dt();

    let v0 = gram.solve(&y, 0.0)?;
    if energy_of(&v0) <= budget {
        return finish_steering(model, gram, x0, target, v0.iter().copied().collect());
    }

    // Grow the ridge until the energy fits, then bisect in log scale keeping
    // the smallest ridge still inside the budget: least damping, best landing.
    let mut lo = 0.0;
    let mut ridge = gram.floor().max(f64::MIN_POSITIVE);
    let mut inside = None;
    for _ in 0..80 {
        let v = gram.solve(&y, ridge)?;
        if energy_of(&v) <= budget {
            inside = Some((ridge, v));
            break;
        }
        lo = ridge;
        ridge *= 10.0;
    }
    let Some((mut hi, mut hi_v)) = inside else {
        return Err(ControlError::InvalidSteering(format!(
            "no ridge brings the control energy under the budget {budget:.3e}"
        )));
    };
    for _ in 0..60 {
        let mid = if lo == 0.0 { hi / 10.0 } else { (lo * hi).sqrt() };
        if !(mid > lo && mid < hi) {
            break;
        }
        let v = gram.solve(&y, mid)?;
        if energy_of(&v) <= budget {
            hi = mid;
            hi_v = v;
        } else {
            lo = mid;
        }
    }
    finish_steering(model, gram, x0, target, hi_v.iter().copied().collect())
}

/// Minimum-energy control steering `x0` to `target` at time `horizon` using
/// `cells` uniform cells. Fails when the Gramian condition number says the
/// answer would be noise.
pub fn min_norm_control<M: SpectralModel>(
    model: &M,
    x0: &M::State,
    target: &M::State,
    horizon: f64,
    cells: usize,
) -> Result<SteeringResult<M::State>, ControlError> {
    let gram = GramianFactorization::build(model, horizon, cells)?;
    if gram.condition > CONDITION_LIMIT {
        return Err(gram.near_unreachable_error(model));
    }
    min_norm_core(model, &gram, x0, target, horizon, cells)
}

/// Null controls for `x0` at each horizon in `times`, all built on the same
/// cell width so shorter-horizon controls embed into longer ones by zero
/// extension and the minimal energies cannot increase.
///
/// Horizons below the resolvability threshold of the mode frequencies are
/// answered through the regularization floor instead of being rejected: the
/// returned row then carries a large energy, an honest nonzero residual, and
/// an infinite condition estimate. The energy trend across horizons is the
/// object of interest here, not exact steering at every single entry.
pub fn vanishing_energy_sequence<M: SpectralModel>(
    model: &M,
    x0: &M::State,
    times: &[f64],
    cell_width: f64,
) -> Result<Vec<SteeringResult<M::State>>, ControlError> {
    if !(cell_width > 0.0) || !cell_width.is_finite() {
        return Err(ControlError::InvalidSteering(format!(
            "cell width must be positive and finite, got {cell_width}"
        )));
    }
    let target = model.zero_state();
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let ratio = t / cell_width;
        let cells = ratio.round();
        if cells < 1.0 || (ratio - cells).abs() > 1e-9 * ratio.max(1.0) {
            return Err(ControlError::StepMismatch { horizon: t, step: cell_width });
        }
        let cells = cells as usize;
        let gram = GramianFactorization::build(model, t, cells)?;
        out.push(min_norm_core(model, &gram, x0, &target, t, cells)?);
    }
    Ok(out)
}

/// Steering outcome for the approximate problem: land within `eps` of the
/// target while spending as little energy as the tolerance allows.
#[derive(Debug)]
pub struct ApproxNullResult<S> {
    pub grid: ControlGrid,
    pub predicted: S,
    pub residual: f64,
    pub energy: f64,
    pub ridge: f64,
}

/// Smallest-energy control putting `x0` within `eps` of zero at `horizon`
/// (Euclidean norm on spectral coefficients). Realized by growing a Tikhonov
/// ridge as far as the tolerance permits: larger ridge, smaller energy,
/// larger residual.
pub fn approx_null_control<M: SpectralModel>(
    model: &M,
    x0: &M::State,
    horizon: f64,
    cells: usize,
    eps: f64,
) -> Result<ApproxNullResult<M::State>, ControlError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(ControlError::InvalidSteering(format!(
            "tolerance must be positive and finite, got {eps}"
        )));
    }
    let gram = GramianFactorization::build(model, horizon, cells)?;
    let y = -to_vector(model, &model.free_step(x0, horizon));

    let finish = |values: Vec<f64>, ridge: f64| -> Result<ApproxNullResult<M::State>, ControlError> {
        let grid = ControlGrid::new(gram.dt(), values)?;
        let predicted = input_map(model, x0, &grid);
        let residual = to_vector(model, &predicted).norm();
        let energy = grid.energy();
        Ok(ApproxNullResult { grid, predicted, residual, energy, ridge })
    };

    if y.norm() <= eps {
        return finish(vec![0.0; cells], 0.0);
    }

    let residual_at = |ridge: f64| -> Result<(Vec<f64>, f64), ControlError> {
        let v: Vec<f64> = gram.solve(&y, ridge)?.iter().copied().collect();
        let grid = ControlGrid::new(gram.dt(), v.clone())?;
        let reached = to_vector(model, &input_map(model, x0, &grid)).norm();
        Ok((v, reached))
    };

    let (v0, r0) = residual_at(0.0)?;
    if r0 > eps {
        return Err(ControlError::ResidualAboveTolerance { achieved: r0, requested: eps });
    }

    // Grow the ridge until the residual overshoots eps, then bisect in log
    // scale keeping the largest ridge still inside tolerance.
    let mut lo = 0.0;
    let mut lo_v = v0;
    let mut ridge = gram.floor().max(f64::MIN_POSITIVE);
    let mut hi = None;
    for _ in 0..80 {
        let (v, r) = residual_at(ridge)?;
        if r <= eps {
            lo = ridge;
            lo_v = v;
            ridge *= 10.0;
        } else {
            hi = Some(ridge);
            break;
        }
    }
    let Some(mut hi) = hi else {
        return finish(lo_v, lo);
    };
    for _ in 0..60 {
        let mid = if lo == 0.0 { hi / 10.0 } else { (lo * hi).sqrt() };
        if !(mid > lo && mid < hi) {
            break;
        }
        let (v, r) = residual_at(mid)?;
        if r <= eps {
            lo = mid;
            lo_v = v;
        } else {
            hi = mid;
        }
    }
    finish(lo_v, lo)
}
