//! Statistical probes for the long-run behavior of the driven models:
//! ball-hitting frequencies with binomial confidence bounds, time-averaged
//! empirical laws with a second-moment tightness proxy, bounded-Lipschitz
//! distances under a shrinking-scale pseudometric family, and a coupled
//! two-point diagnostic measuring how the laws launched from nearby states
//! merge along growing horizons.
//!
//! All probes fan out over replicas with read-only shared specs and
//! deterministic per-replica seeds, so results are independent of thread
//! scheduling. Empirical samples are stored in norm coordinates: coefficient
//! vectors scaled so that euclidean length equals the state norm, which lets
//! every downstream estimator work with plain euclidean geometry.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::control::{min_norm_within_budget, ControlError, ControlGrid, GramianFactorization};
use crate::girsanov::{
    transformed_terminal, EscortTable, GirsanovError, LevelMap, PerturbProfile,
};
use crate::levy::{sample_stream, LevyError};
use crate::numeric::{derive_seed, mean_and_stderr, wilson_lower, WILSON_Z_95};
use crate::operators::SpectralModel;
use crate::spde::{simulate, SdeSystem, SpdeError};

#[derive(Debug, Error)]
pub enum ErgodicsError {
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error("empirical measure is malformed: {0}")]
    InvalidMeasure(String),
    #[error("pseudometric family is malformed: {0}")]
    InvalidFamily(String),
    #[error(
        "second-moment estimate {estimate:.3e} at horizon {horizon} crossed the \
         configured ceiling {ceiling:.3e}; the run looks unstable"
    )]
    MomentCeiling { horizon: f64, estimate: f64, ceiling: f64 },
    #[error(
        "transformation intensity {intensity:.3e} at level {level} is outside the \
         escort table range (max {limit:.3e}); reduce the displacement scale or \
         extend the table"
    )]
    IntensityOutOfRange { level: usize, intensity: f64, limit: f64 },
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error(transparent)]
    Spde(#[from] SpdeError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Girsanov(#[from] GirsanovError),
}

/// Compensated summation; keeps weight normalization exact to a few ulps
/// regardless of sample count.
fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for x in xs {
        let y = x - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Flattens states into norm coordinates: each coefficient is scaled by the
/// norm of its unit coefficient vector, so euclidean length equals the state
/// norm. Exact for models whose norm is diagonal in the coefficients, which
/// both shipped models satisfy.
#[derive(Debug, Clone)]
pub struct NormCoords {
    weights: Vec<f64>,
}

impl NormCoords {
    pub fn probe<M: SpectralModel>(model: &M) -> Self {
        let dim = model.state_dim();
        let mut weights = vec![0.0; dim];
        let mut buf = vec![0.0; dim];
        for j in 0..dim {
            buf.fill(0.0);
            buf[j] = 1.0;
            weights[j] = model.energy(&model.read_state(&buf));
        }
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn flatten<M: SpectralModel>(&self, model: &M, state: &M::State) -> Vec<f64> {
        let mut buf = vec![0.0; self.weights.len()];
        model.write_state(state, &mut buf);
        for (x, w) in buf.iter_mut().zip(&self.weights) {
            *x *= w;
        }
        buf
    }

    /// Inverse of `flatten`. Zero-weight coordinates (invisible to the norm)
    /// are reconstructed as zero.
    pub fn unflatten<M: SpectralModel>(&self, model: &M, coords: &[f64]) -> M::State {
        let mut buf = vec![0.0; self.weights.len()];
        for ((out, &c), &w) in buf.iter_mut().zip(coords).zip(&self.weights) {
            *out = if w > 0.0 { c / w } else { 0.0 };
        }
        model.read_state(&buf)
    }
}

/// Weighted sample cloud standing in for a law on the state space. Samples
/// are norm-coordinate vectors of equal dimension; weights are nonnegative
/// and normalized to unit mass at construction.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalMeasure {
    samples: Vec<Vec<f64>>,
    weights: Vec<f64>,
    provenance: String,
}

impl EmpiricalMeasure {
    pub fn uniform(
        samples: Vec<Vec<f64>>,
        provenance: impl Into<String>,
    ) -> Result<Self, ErgodicsError> {
        let n = samples.len();
        Self::weighted(samples, vec![1.0; n], provenance)
    }

    pub fn weighted(
        samples: Vec<Vec<f64>>,
        raw_weights: Vec<f64>,
        provenance: impl Into<String>,
    ) -> Result<Self, ErgodicsError> {
        if samples.is_empty() {
            return Err(ErgodicsError::InvalidMeasure("needs at least one sample".into()));
        }
        if raw_weights.len() != samples.len() {
            return Err(ErgodicsError::InvalidMeasure(format!(
                "{} samples but {} weights",
                samples.len(),
                raw_weights.len()
            )));
        }
        let dim = samples[0].len();
        if dim == 0 {
            return Err(ErgodicsError::InvalidMeasure("samples must have a coordinate".into()));
        }
        if samples.iter().any(|s| s.len() != dim) {
            return Err(ErgodicsError::InvalidMeasure("samples of mixed dimension".into()));
        }
        if samples.iter().flatten().any(|x| !x.is_finite()) {
            return Err(ErgodicsError::InvalidMeasure("non-finite sample coordinate".into()));
        }
        if raw_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ErgodicsError::InvalidMeasure(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total = kahan_sum(raw_weights.iter().copied());
        if !(total > 0.0) {
            return Err(ErgodicsError::InvalidMeasure("weights sum to zero".into()));
        }
        let weights: Vec<f64> = raw_weights.iter().map(|w| w / total).collect();
        let check = kahan_sum(weights.iter().copied());
        if (check - 1.0).abs() > 1e-12 {
            return Err(ErgodicsError::InvalidMeasure(format!(
                "normalized weights sum to {check}, off unit mass by more than 1e-12"
            )));
        }
        Ok(Self { samples, weights, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Weighted expectation of a scalar observable.
    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.samples.iter().zip(&self.weights).map(|(s, w)| w * f(s)).sum()
    }

    /// Weighted coordinate mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (s, w) in self.samples.iter().zip(&self.weights) {
            for (o, x) in out.iter_mut().zip(s) {
                *o += w * x;
            }
        }
        out
    }

    pub fn mean_norm(&self) -> f64 {
        self.expect(|s| euclid(s))
    }

    pub fn mean_norm_sq(&self) -> f64 {
        self.expect(|s| s.iter().map(|x| x * x).sum())
    }
}

fn euclid(s: &[f64]) -> f64 {
    s.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Shrinking-scale pseudometric family: level n carries a comparison scale
/// a_n (strictly decreasing) and an observation horizon t_n (strictly
/// increasing). The level-n distance saturates at 1, so each level sees only
/// differences near its own scale; as the scale shrinks the family
/// approaches the discrete metric.
#[derive(Debug, Clone, Serialize)]
pub struct PseudometricFamily {
    scales: Vec<f64>,
    times: Vec<f64>,
}

impl PseudometricFamily {
    pub fn new(scales: Vec<f64>, times: Vec<f64>) -> Result<Self, ErgodicsError> {
        if scales.is_empty() || scales.len() != times.len() {
            return Err(ErgodicsError::InvalidFamily(format!(
                "needs matching nonempty sequences, got {} scales and {} times",
                scales.len(),
                times.len()
            )));
        }
        if scales.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(ErgodicsError::InvalidFamily("scales must be positive and finite".into()));
        }
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(ErgodicsError::InvalidFamily("times must be positive and finite".into()));
        }
        if scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ErgodicsError::InvalidFamily("scales must be strictly decreasing".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ErgodicsError::InvalidFamily("times must be strictly increasing".into()));
        }
        Ok(Self { scales, times })
    }

    /// Default window: a_n = n^(-1/2) against t_n = n * 2 pi, matching the
    /// energy decay rate of the vanishing-energy control sequence.
    pub fn default_window(levels: usize) -> Result<Self, ErgodicsError> {
        if levels == 0 {
            return Err(ErgodicsError::InvalidFamily("needs at least one level".into()));
        }
        let scales = (1..=levels).map(|n| 1.0 / (n as f64).sqrt()).collect();
        let times = (1..=levels).map(|n| n as f64 * std::f64::consts::TAU).collect();
        Self::new(scales, times)
    }

    pub fn levels(&self) -> usize {
        self.scales.len()
    }

    /// Comparison scale at a zero-based level.
    pub fn scale(&self, level: usize) -> f64 {
        self.scales[level]
    }

    /// Observation horizon at a zero-based level.
    pub fn time(&self, level: usize) -> f64 {
        self.times[level]
    }

    /// Level distance between norm-coordinate vectors: euclidean gap over
    /// the level scale, saturated at one.
    pub fn distance(&self, level: usize, y: &[f64], z: &[f64]) -> f64 {
        assert_eq!(y.len(), z.len(), "pseudometric arguments must share a dimension");
        let gap = y
            .iter()
            .zip(z)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        (gap / self.scales[level]).min(1.0)
    }
}

/// Ball-hitting frequency with its 95% Wilson interval. `kappa_lower` is the
/// interval's lower endpoint: a conservative positivity certificate for the
/// hitting probability. Zero hits cannot certify positivity, so the report
/// is marked inconclusive and carries the rule-of-three ceiling 3/N instead.
#[derive(Debug, Clone, Serialize)]
pub struct IrreducibilityReport {
    pub p_hat: f64,
    pub lower: f64,
    pub upper: f64,
    pub kappa_lower: f64,
    pub hits: u64,
    pub trials: u64,
    pub delta: f64,
    pub horizon: f64,
    pub conclusive: bool,
    pub zero_hit_ceiling: Option<f64>,
    pub pass: bool,
    pub seed: u64,
}

/// Monte-Carlo estimate of the probability that a path launched at `x0`
/// sits inside the ball of radius `delta` at time `horizon`.
pub fn irreducibility_probe<M: SpectralModel>(
    sys: &SdeSystem<'_, M>,
    x0: &M::State,
    delta: f64,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<IrreducibilityReport, ErgodicsError> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(ErgodicsError::InvalidConfig(format!(
            "ball radius must be positive and finite, got {delta}"
        )));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(ErgodicsError::InvalidConfig(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    if n < 1000 {
        return Err(ErgodicsError::InvalidConfig(format!(
            "the Wilson bound needs at least 1000 replicas, got {n}"
        )));
    }
    let flags: Result<Vec<bool>, SpdeError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let path = simulate(sys, x0, horizon, None, &[], derive_seed(seed, i as u64))?;
            Ok(sys.model.energy(&path.final_state) <= delta)
        })
        .collect();
    let hits = flags?.iter().filter(|h| **h).count() as u64;
    let trials = n as u64;
    // At zero hits the Wilson lower bound is analytically zero; pin it there
    // so rounding dust cannot turn an unwitnessed probability into a pass.
    let lower = if hits == 0 { 0.0 } else { wilson_lower(hits, trials, WILSON_Z_95) };
    let upper = 1.0 - wilson_lower(trials - hits, trials, WILSON_Z_95);
    Ok(IrreducibilityReport {
        p_hat: hits as f64 / trials as f64,
        lower,
        upper,
        kappa_lower: lower,
        hits,
        trials,
        delta,
        horizon,
        conclusive: hits > 0,
        zero_hit_ceiling: (hits == 0).then_some(3.0 / trials as f64),
        pass: lower > 0.0,
        seed,
    })
}

/// Second-moment summary attached to one time-averaged law.
#[derive(Debug, Clone, Serialize)]
pub struct KbRow {
    pub horizon: f64,
    pub mean_norm: f64,
    pub mean_sq: f64,
    pub stderr_sq: f64,
}

/// Time-averaged empirical laws over a horizon grid, with the second-moment
/// proxy used to argue tightness of the family.
#[derive(Debug)]
pub struct KbAverages {
    pub measures: Vec<EmpiricalMeasure>,
    pub rows: Vec<KbRow>,
    pub seed: u64,
}

/// Samples the time-averaged law over [burn_in, T] for each horizon T: one
/// path per replica, observed at a stratified uniform time, so the cloud is
/// an unbiased draw from the averaged law. Requires capped jumps, keeping
/// the second moment finite; estimates crossing `ceiling` abort the run.
pub fn kb_average<M: SpectralModel>(
    sys: &SdeSystem<'_, M>,
    x0: &M::State,
    horizons: &[f64],
    burn_in: f64,
    n: usize,
    ceiling: f64,
    seed: u64,
) -> Result<KbAverages, ErgodicsError> {
    if sys.tt.spec.jump_cap.is_none() {
        return Err(ErgodicsError::InvalidConfig(
            "time-averaged laws need capped jumps for a finite second moment; set jump_cap"
                .into(),
        ));
    }
    if horizons.is_empty() {
        return Err(ErgodicsError::InvalidConfig("needs at least one horizon".into()));
    }
    if !(burn_in >= 0.0) || !burn_in.is_finite() {
        return Err(ErgodicsError::InvalidConfig(format!(
            "burn-in must be nonnegative and finite, got {burn_in}"
        )));
    }
    if horizons.iter().any(|t| !(t.is_finite() && *t > burn_in)) {
        return Err(ErgodicsError::InvalidConfig(
            "every horizon must be finite and beyond the burn-in".into(),
        ));
    }
    if n < 2 {
        return Err(ErgodicsError::InvalidConfig(format!("needs at least 2 replicas, got {n}")));
    }
    if !(ceiling > 0.0) {
        return Err(ErgodicsError::InvalidConfig(format!(
            "moment ceiling must be positive, got {ceiling}"
        )));
    }
    let coords = NormCoords::probe(sys.model);
    let mut measures = Vec::with_capacity(horizons.len());
    let mut rows = Vec::with_capacity(horizons.len());
    for (ti, &t_cap) in horizons.iter().enumerate() {
        // Stratified observation times keep the cloud an exact draw from the
        // time-averaged law while halving its variance; drawn sequentially so
        // results do not depend on worker scheduling.
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, u64::MAX - ti as u64));
        let offsets: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let span = t_cap - burn_in;
        let samples: Result<Vec<Vec<f64>>, ErgodicsError> = (0..n)
            .into_par_iter()
            .map(|i| {
                let tau = burn_in + span * (i as f64 + offsets[i]) / n as f64;
                if tau <= 0.0 {
                    return Ok(coords.flatten(sys.model, x0));
                }
                let path =
                    simulate(sys, x0, tau, None, &[], derive_seed(seed, (ti * n + i) as u64))?;
                Ok(coords.flatten(sys.model, &path.final_state))
            })
            .collect();
        let samples = samples?;
        let sq: Vec<f64> = samples.iter().map(|s| s.iter().map(|x| x * x).sum()).collect();
        let (mean_sq, stderr_sq) = mean_and_stderr(&sq);
        if mean_sq > ceiling {
            return Err(ErgodicsError::MomentCeiling {
                horizon: t_cap,
                estimate: mean_sq,
                ceiling,
            });
        }
        let mean_norm = samples.iter().map(|s| euclid(s)).sum::<f64>() / n as f64;
        let provenance = format!(
            "time-averaged law: horizon={t_cap} burn_in={burn_in} replicas={n} seed={seed}"
        );
        measures.push(EmpiricalMeasure::uniform(samples, provenance)?);
        rows.push(KbRow { horizon: t_cap, mean_norm, mean_sq, stderr_sq });
    }
    Ok(KbAverages { measures, rows, seed })
}

const BL_OFFSETS: usize = 65;

/// Largest weighted-mean gap of one clamp family over the offset sweep.
/// Feature values are 1-Lipschitz projections, so each clamp is
/// 1-Lipschitz for the saturated level distance.
fn clamp_family_gap(vals1: &[f64], w1: &[f64], vals2: &[f64], w2: &[f64], scale: f64) -> f64 {
    let lo = vals1.iter().chain(vals2).copied().fold(f64::INFINITY, f64::min);
    let hi = vals1.iter().chain(vals2).copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo - scale) {
        return 0.0;
    }
    let start = lo - scale;
    let step = (hi - start) / (BL_OFFSETS - 1) as f64;
    let mut best = 0.0f64;
    for m in 0..BL_OFFSETS {
        let c = start + step * m as f64;
        let mean = |vals: &[f64], w: &[f64]| -> f64 {
            vals.iter().zip(w).map(|(v, w)| w * ((v - c) / scale).clamp(0.0, 1.0)).sum()
        };
        best = best.max((mean(vals1, w1) - mean(vals2, w2)).abs());
    }
    best
}

/// Lower-bound estimate of the dual distance between two sample clouds over
/// test functions that are 1-Lipschitz for the saturated level distance
/// (euclidean gap over `scale`, capped at one). The dictionary sweeps
/// clamps of three 1-Lipschitz feature types: every coordinate projection,
/// the radial functional, and the projection along the clouds' mean split;
/// each clamp is swept over a fixed offset grid. A richer function class
/// could only report more, so trends in the estimate are trends in the true
/// distance; identical clouds evaluate to exactly zero.
pub fn bl_distance(
    mu1: &EmpiricalMeasure,
    mu2: &EmpiricalMeasure,
    scale: f64,
) -> Result<f64, ErgodicsError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(ErgodicsError::InvalidConfig(format!(
            "comparison scale must be positive and finite, got {scale}"
        )));
    }
    if mu1.dim() != mu2.dim() {
        return Err(ErgodicsError::InvalidMeasure(format!(
            "dimension mismatch: {} vs {}",
            mu1.dim(),
            mu2.dim()
        )));
    }
    let dim = mu1.dim();
    let collect = |mu: &EmpiricalMeasure, f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
        mu.samples().iter().map(|s| f(s)).collect()
    };
    let mut best = 0.0f64;
    let mut consider = |f: &dyn Fn(&[f64]) -> f64| {
        let v1 = collect(mu1, f);
        let v2 = collect(mu2, f);
        let gap = clamp_family_gap(&v1, mu1.weights(), &v2, mu2.weights(), scale);
        if gap > best {
            best = gap;
        }
    };
    for j in 0..dim {
        consider(&move |s: &[f64]| s[j]);
    }
    consider(&euclid);
    let m1 = mu1.mean();
    let m2 = mu2.mean();
    let split: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| b - a).collect();
    let split_norm = euclid(&split);
    if split_norm > 0.0 {
        let dir: Vec<f64> = split.iter().map(|x| x / split_norm).collect();
        consider(&move |s: &[f64]| s.iter().zip(&dir).map(|(a, b)| a * b).sum());
    }
    Ok(best)
}

/// One cell of the coupled smoothing diagnostic: two certificates bounding
/// the level distance between the terminal laws launched from the base
/// state and from the displaced state. Each is the mean saturated level
/// distance across a realized pathwise coupling plus the mean absolute
/// deviation of the coupling weight from one. `coupled` pairs the displaced
/// path with the mark-transformed path whose intensity steers the
/// displacement away, so it tracks the steering quality; `naive` pairs it
/// with the plain path under the same events (weight one), so it reads the
/// raw displacement over the shrinking level scale.
#[derive(Debug, Clone, Serialize)]
pub struct AsfRow {
    /// One-based level in the pseudometric family.
    pub level: usize,
    pub horizon: f64,
    pub scale: f64,
    pub eps: f64,
    pub coupled: f64,
    pub naive: f64,
    pub control_energy: f64,
    pub control_residual: f64,
    /// Mean absolute deviation of the coupling weight from unit mass.
    pub weight_spread: f64,
}

#[derive(Debug)]
pub struct AsfTable {
    pub rows: Vec<AsfRow>,
    pub replicas: usize,
    pub seed: u64,
}

/// Coupled smoothing diagnostic. For each family level the displacement `h`
/// is steered through the grid control solving the level horizon, and each
/// epsilon scales that control linearly. Per replica one event stream over
/// the deepest horizon drives three paths at every level through its
/// restriction: the displaced path from x + eps*h, the mark-transformed
/// path from x whose intensity mimics the steering control and whose
/// density weight corrects the law, and an untransformed path from x. The
/// row reports the level-distance certificate through each pairing: the
/// coupled figure decays with the steering energy and weight spread, the
/// naive common-noise figure grows with the displacement over the level
/// scale. Nested streams make rows at different levels common-randomness
/// comparisons.
///
/// Each level's steering is capped at the level energy budget (the squared
/// scale), so horizons too short to resolve the displacement yield a bounded
/// control with an honest residual that degrades the coupled certificate
/// rather than an unbounded answer; intensities beyond the escort table
/// range abort with an explicit remedy.
#[allow(clippy::too_many_arguments)]
pub fn asf_diagnostic<M: SpectralModel>(
    sys: &SdeSystem<'_, M>,
    profile: &PerturbProfile,
    table: &EscortTable,
    x: &M::State,
    h: &M::State,
    eps_grid: &[f64],
    family: &PseudometricFamily,
    cell_width: f64,
    n: usize,
    seed: u64,
) -> Result<AsfTable, ErgodicsError> {
    if eps_grid.is_empty() || eps_grid.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(ErgodicsError::InvalidConfig(
            "displacement scales must be a nonempty list of nonnegative finite values".into(),
        ));
    }
    if !(cell_width > 0.0) || !cell_width.is_finite() {
        return Err(ErgodicsError::InvalidConfig(format!(
            "control cell width must be positive and finite, got {cell_width}"
        )));
    }
    if n < 2 {
        return Err(ErgodicsError::InvalidConfig(format!("needs at least 2 replicas, got {n}")));
    }
    let c0 = sys.sigma.constant_value().ok_or_else(|| {
        ErgodicsError::InvalidConfig(
            "the measure-change coupling needs a constant multiplier; state-dependent \
             forms admit no exact piecewise-constant intensity"
                .into(),
        )
    })?;
    if profile.tail_transform().spec != sys.tt.spec {
        return Err(ErgodicsError::InvalidConfig(
            "profile and system use different jump transforms".into(),
        ));
    }
    let model = sys.model;
    let coords = NormCoords::probe(model);
    let x_coeffs = {
        let mut buf = vec![0.0; model.state_dim()];
        model.write_state(x, &mut buf);
        buf
    };
    let h_coeffs = {
        let mut buf = vec![0.0; model.state_dim()];
        model.write_state(h, &mut buf);
        buf
    };

    // One stream per replica over the deepest horizon; levels see its
    // restriction. Level-to-level comparisons are then paired on common
    // randomness, so the trend across levels is not blurred by independent
    // resampling noise.
    let t_max = family.time(family.levels() - 1);
    let streams: Result<Vec<_>, ErgodicsError> = (0..n)
        .into_par_iter()
        .map(|i| Ok(sample_stream(sys.band, t_max, derive_seed(seed, i as u64))?))
        .collect();
    let streams = streams?;

    let mut rows = Vec::with_capacity(family.levels() * eps_grid.len());
    for level_idx in 0..family.levels() {
        let horizon = family.time(level_idx);
        let scale = family.scale(level_idx);
        let ratio = horizon / cell_width;
        let cells = ratio.round();
        if (ratio - cells).abs() > 1e-9 * ratio.max(1.0) || cells < 1.0 {
            return Err(ControlError::StepMismatch { horizon, step: cell_width }.into());
        }
        let cells = cells as usize;
        // The control steers 0 to the free-flowed displacement, so adding it
        // to the base path reproduces the displaced path exactly; scaling is
        // linear in eps. Its energy is capped at the level budget (squared
        // scale): a steering miss then degrades the coupled distance honestly
        // instead of the control blowing past the escort table.
        let target = model.free_step(h, horizon);
        let gram = GramianFactorization::build(model, horizon, cells)?;
        let steer = min_norm_within_budget(
            model,
            &gram,
            &model.zero_state(),
            &target,
            horizon,
            cells,
            scale * scale,
        )?;
        let plain_grid = ControlGrid::zeros(cells, cell_width)?;

        for &eps in eps_grid {
            let intensity_vals: Vec<f64> =
                steer.grid.values().iter().map(|v| -eps * v / c0).collect();
            let level = level_idx + 1;
            let max_intensity =
                intensity_vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if max_intensity > table.w_max() {
                return Err(ErgodicsError::IntensityOutOfRange {
                    level,
                    intensity: max_intensity,
                    limit: table.w_max(),
                });
            }
            // Displaced marks must stay inside the band, else the
            // transformed stream is no longer band-distributed. An empty
            // band carries no events, so there is nothing to displace.
            if !sys.band.is_empty() {
                let mut seen = HashSet::new();
                for &v in &intensity_vals {
                    if v == 0.0 || !seen.insert(v.abs().to_bits()) {
                        continue;
                    }
                    let k = table.kappa(profile, v.abs())?;
                    if let Some((s_lo, s_hi)) = profile.support(k) {
                        if s_lo < sys.band.lo || s_hi > sys.band.hi {
                            return Err(ErgodicsError::InvalidConfig(format!(
                                "perturbation support ({s_lo:.6}, {s_hi:.6}) at level \
                                 {k:.6} escapes the mark band ({}, {}]; widen the band \
                                 or reduce the displacement scale",
                                sys.band.lo, sys.band.hi
                            )));
                        }
                    }
                }
            }
            let intensity = ControlGrid::new(cell_width, intensity_vals)?;
            let shared = LevelMap::build(profile, table, sys.band, intensity.values())?;
            let displaced: Vec<f64> =
                x_coeffs.iter().zip(&h_coeffs).map(|(a, b)| a + eps * b).collect();
            let y0 = model.read_state(&displaced);

            type Draw = (Vec<f64>, Vec<f64>, f64, Vec<f64>);
            let draws: Result<Vec<Draw>, ErgodicsError> = streams
                .par_iter()
                .map(|full| {
                    let stream = full.truncated(horizon)?;
                    // All three paths run through the transformed walker on
                    // the same cell partition, so at zero intensity they are
                    // bitwise identical rather than merely close.
                    let (displaced_path, _) = transformed_terminal(
                        model, sys.tt, c0, profile, table, &shared, &plain_grid, &y0, &stream,
                    )?;
                    let (transformed, weight) = transformed_terminal(
                        model, sys.tt, c0, profile, table, &shared, &intensity, x, &stream,
                    )?;
                    let (plain, _) = transformed_terminal(
                        model, sys.tt, c0, profile, table, &shared, &plain_grid, x, &stream,
                    )?;
                    Ok((
                        coords.flatten(model, &displaced_path),
                        coords.flatten(model, &transformed),
                        weight,
                        coords.flatten(model, &plain),
                    ))
                })
                .collect();
            let draws = draws?;
            // Both figures bound the same law distance through a realized
            // coupling: mean saturated level distance across the paired
            // terminals, plus the mean weight deviation where the pairing
            // needs a density correction. Pairing is exact, so both vanish
            // identically at zero displacement.
            let inv = 1.0 / n as f64;
            let mut coupled_gap = 0.0;
            let mut naive_gap = 0.0;
            let mut weight_spread = 0.0;
            for (d, t, g, p) in &draws {
                coupled_gap += family.distance(level_idx, d, t);
                naive_gap += family.distance(level_idx, d, p);
                weight_spread += (1.0 - g).abs();
            }
            rows.push(AsfRow {
                level,
                horizon,
                scale,
                eps,
                coupled: (coupled_gap + weight_spread) * inv,
                naive: naive_gap * inv,
                control_energy: eps * eps * steer.energy,
                control_residual: eps * steer.residual,
                weight_spread: weight_spread * inv,
            });
        }
    }
    Ok(AsfTable { rows, replicas: n, seed })
}
