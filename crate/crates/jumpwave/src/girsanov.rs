//! Mark-perturbation machinery: a compactly supported bump family h(K, z),
//! the aggregate displacement w(K) it induces through the jump transform,
//! the inverse level map kappa, the induced mark transformation theta, and
//! the exponential density process that ties the transformed dynamics back
//! to the reference measure.
//!
//! Shape of h(K, .): a power-law height on a level-dependent window,
//! joined to zero on both sides by C^1 cubic blends over buffer regions.
//! Buffer widths default to a quarter of the window width, clamped so the
//! profile stays positive and the support stays away from the origin.
//! Below level K = 1 the construction switches branch; candidate branches
//! are probed in a fixed order at construction and the first one with an
//! increasing, vanishing-at-zero aggregate and safe slopes is kept. The
//! selected branch is part of the profile and is echoed into run manifests.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControlGrid;
use crate::levy::{sample_stream, EventStream, LevyError, MarkBand, TailTransform};
use crate::numeric::{derive_seed, integrate, mean_and_stderr, CubicBlend, NumericError};
use crate::operators::SpectralModel;
use crate::spde::{simulate, SdeSystem, SpdeError};

#[derive(Debug, Error)]
pub enum GirsanovError {
    #[error("height exponent is singular at alpha = 5/3 (got alpha = {0})")]
    SingularExponent(f64),
    #[error("profile construction failed: {0}")]
    ProfileConstruction(String),
    #[error("no small-level branch passes validation: {0}")]
    NoViableSmallBranch(String),
    #[error(
        "aggregate displacement is not strictly increasing on the {branch} branch \
         between K = {k_lo} (w = {w_lo}) and K = {k_hi} (w = {w_hi})"
    )]
    NotMonotone { branch: &'static str, k_lo: f64, w_lo: f64, k_hi: f64, w_hi: f64 },
    #[error("intensity {v} exceeds the covered range (max {v_max}); extend the table")]
    KappaRange { v: f64, v_max: f64 },
    #[error("kappa requires a nonnegative intensity, got {0}")]
    NegativeIntensity(f64),
    #[error("marks must be nonzero")]
    ZeroMark,
    #[error(
        "jump factor {factor} at t = {t} (mark {z}, level {level}) is not positive; \
         the profile slope is too steep for this intensity"
    )]
    JumpFactorNonPositive { t: f64, z: f64, level: f64, factor: f64 },
    #[error("invalid sigma path: {0}")]
    InvalidSigmaPath(String),
    #[error("time horizons differ: stream {stream}, control {control}")]
    MismatchedHorizon { stream: f64, control: f64 },
    #[error("stream band ({0}, {1}] does not match the level map band ({2}, {3}]")]
    BandMismatch(f64, f64, f64, f64),
    #[error("invalid check configuration: {0}")]
    InvalidCheck(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error(transparent)]
    Spde(#[from] SpdeError),
}

/// Construction used for levels K < 1, chosen automatically at profile
/// construction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SmallBranch {
    /// Window right edge at r1*(1 + K^(-alpha/2)); widens as K shrinks.
    WideningWindow,
    /// Window right edge at r1*(1 + K^(alpha/2)); shrinks as K shrinks.
    ShrinkingWindow,
    /// Fixed window (r1, 2 r1) with the whole profile scaled by K.
    ScaledHeight,
}

impl SmallBranch {
    pub fn name(&self) -> &'static str {
        match self {
            SmallBranch::WideningWindow => "widening-window",
            SmallBranch::ShrinkingWindow => "shrinking-window",
            SmallBranch::ScaledHeight => "scaled-height",
        }
    }
}

const SMALL_CANDIDATES: [SmallBranch; 3] =
    [SmallBranch::WideningWindow, SmallBranch::ShrinkingWindow, SmallBranch::ScaledHeight];

/// Window height coef * z^exp with closed-form slope.
#[derive(Debug, Clone, Copy)]
struct HeightPiece {
    coef: f64,
    exp: f64,
}

impl HeightPiece {
    fn value(&self, z: f64) -> f64 {
        if self.exp == 0.0 {
            self.coef
        } else if self.exp == 1.0 {
            self.coef * z
        } else {
            self.coef * z.powf(self.exp)
        }
    }

    fn slope(&self, z: f64) -> f64 {
        if self.exp == 0.0 {
            0.0
        } else if self.exp == 1.0 {
            self.coef
        } else {
            self.coef * self.exp * z.powf(self.exp - 1.0)
        }
    }
}

/// Piecewise profile at one level: zero, ascending blend, window height,
/// descending blend, zero. C^1 across all junctions.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    lo: f64,
    hi: f64,
    left: CubicBlend,
    right: CubicBlend,
    height: HeightPiece,
}

/// Buffer widths: a quarter of the window width, with the left buffer kept
/// above lo/2 from the origin and both clamped so the cubic blends stay
/// positive; the right buffer is stretched to keep the descent slope mild.
fn auto_widths(lo: f64, hi: f64, f: &HeightPiece) -> (f64, f64) {
    let base = 0.25 * (hi - lo);
    let y_l = f.value(lo);
    let m_l = f.slope(lo);
    let y_r = f.value(hi);
    let m_r = f.slope(hi);
    let mut b_l = base.min(0.5 * lo);
    if m_l > 0.0 {
        b_l = b_l.min(2.9 * y_l / m_l);
    }
    let mut b_r = base.max(3.4 * y_r);
    if m_r < 0.0 {
        b_r = b_r.min(2.9 * y_r / (-m_r));
    }
    (b_l, b_r)
}

impl Geometry {
    fn with_widths(lo: f64, hi: f64, height: HeightPiece, b_l: f64, b_r: f64) -> Self {
        let y_l = height.value(lo);
        let m_l = height.slope(lo);
        let y_r = height.value(hi);
        let m_r = height.slope(hi);
        Self {
            lo,
            hi,
            left: CubicBlend { x0: lo - b_l, x1: lo, y0: 0.0, y1: y_l, m0: 0.0, m1: m_l },
            right: CubicBlend { x0: hi, x1: hi + b_r, y0: y_r, y1: 0.0, m0: m_r, m1: 0.0 },
            height,
        }
    }

    fn auto(lo: f64, hi: f64, height: HeightPiece) -> Self {
        let (b_l, b_r) = auto_widths(lo, hi, &height);
        Self::with_widths(lo, hi, height, b_l, b_r)
    }

    fn support(&self) -> (f64, f64) {
        (self.left.x0, self.right.x1)
    }

    fn value(&self, z: f64) -> f64 {
        if z <= self.left.x0 || z >= self.right.x1 {
            0.0
        } else if z < self.lo {
            self.left.value(z)
        } else if z <= self.hi {
            self.height.value(z)
        } else {
            self.right.value(z)
        }
    }

    fn slope(&self, z: f64) -> f64 {
        if z <= self.left.x0 || z >= self.right.x1 {
            0.0
        } else if z < self.lo {
            self.left.slope(z)
        } else if z <= self.hi {
            self.height.slope(z)
        } else {
            self.right.slope(z)
        }
    }
}

/// One-parameter bump profile family together with the constants fixed at
/// construction: height exponents, window placement exponent, the small-level
/// branch, and the continuity constant matching the two regimes at K = 1.
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct PerturbProfile {
    tt: TailTransform,
    alpha: f64,
    beta1: f64,
    nu: f64,
    r1: f64,
    c_cont: f64,
    small: SmallBranch,
    small_widths: (f64, f64),
}

/// Grid of levels probed when validating a small-level branch candidate.
const PROBE_LEVELS: [f64; 8] = [0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0];

impl PerturbProfile {
    pub fn new(tt: TailTransform) -> Result<Self, GirsanovError> {
        let alpha = tt.spec.alpha;
        let denom = alpha * (3.0 * alpha - 5.0);
        if denom.abs() < 1e-9 {
            return Err(GirsanovError::SingularExponent(alpha));
        }
        let beta1 = (3.0 - 2.0 * alpha) / denom;
        let nu = 5.0 * alpha - 3.0 * alpha * alpha;
        let r1 = tt.r1;

        let mut profile = Self {
            tt,
            alpha,
            beta1,
            nu,
            r1,
            c_cont: 0.0,
            small: SmallBranch::ScaledHeight,
            small_widths: (0.0, 0.0),
        };

        // Continuity constant: the K < 1 height C*z on the window (r1, 2 r1)
        // must reproduce the principal aggregate at K = 1. The aggregate is
        // zero at C = 0 and grows without bound, so a sign change exists.
        let w_at_one = w_quad(&profile.tt, &profile.principal_geometry(1.0))?;
        let small_at_one = |c: f64| Geometry::auto(r1, 2.0 * r1, HeightPiece { coef: c, exp: 1.0 });
        let mut c_hi = 1.0;
        let mut grew = 0;
        while w_quad(&profile.tt, &small_at_one(c_hi))? < w_at_one {
            c_hi *= 2.0;
            grew += 1;
            if grew > 60 {
                return Err(GirsanovError::ProfileConstruction(
                    "continuity constant bracket did not close".into(),
                ));
            }
        }
        let mut c_lo = 0.0;
        while c_hi - c_lo > 1e-12 * c_hi.max(1.0) {
            let mid = 0.5 * (c_lo + c_hi);
            if w_quad(&profile.tt, &small_at_one(mid))? < w_at_one {
                c_lo = mid;
            } else {
                c_hi = mid;
            }
        }
        profile.c_cont = 0.5 * (c_lo + c_hi);
        let frozen = small_at_one(profile.c_cont);
        profile.small_widths = (frozen.lo - frozen.left.x0, frozen.right.x1 - frozen.hi);

        // Branch selection: first candidate whose aggregate is strictly
        // increasing, vanishes at zero level, and keeps 1 + slope positive.
        let mut reasons = Vec::new();
        let mut selected = None;
        for cand in SMALL_CANDIDATES {
            match profile.probe_small_branch(cand, w_at_one)? {
                None => {
                    selected = Some(cand);
                    break;
                }
                Some(reason) => reasons.push(format!("{}: {}", cand.name(), reason)),
            }
        }
        profile.small = selected
            .ok_or_else(|| GirsanovError::NoViableSmallBranch(reasons.join("; ")))?;
        Ok(profile)
    }

    fn principal_geometry(&self, k: f64) -> Geometry {
        let lo = self.r1 * k.powf(self.nu);
        Geometry::auto(lo, 2.0 * lo, HeightPiece { coef: k, exp: -self.beta1 })
    }

    fn small_geometry_as(&self, branch: SmallBranch, k: f64) -> Geometry {
        let r1 = self.r1;
        match branch {
            SmallBranch::WideningWindow => {
                let hi = r1 * (1.0 + k.powf(-0.5 * self.alpha));
                Geometry::auto(r1, hi, HeightPiece { coef: self.c_cont, exp: 1.0 })
            }
            SmallBranch::ShrinkingWindow => {
                let hi = r1 * (1.0 + k.powf(0.5 * self.alpha));
                Geometry::auto(r1, hi, HeightPiece { coef: self.c_cont, exp: 1.0 })
            }
            SmallBranch::ScaledHeight => Geometry::with_widths(
                r1,
                2.0 * r1,
                HeightPiece { coef: self.c_cont * k, exp: 1.0 },
                self.small_widths.0,
                self.small_widths.1,
            ),
        }
    }

    /// Ok(None) when the candidate passes; Ok(Some(reason)) otherwise.
    fn probe_small_branch(
        &self,
        branch: SmallBranch,
        w_at_one: f64,
    ) -> Result<Option<String>, GirsanovError> {
        let mut prev = 0.0;
        let mut first = f64::NAN;
        for (i, &k) in PROBE_LEVELS.iter().enumerate() {
            let geom = self.small_geometry_as(branch, k);
            let min_factor = min_jump_factor(&geom);
            if min_factor <= 0.05 {
                return Ok(Some(format!(
                    "jump factor floor {min_factor:.3} at K = {k} is unsafe"
                )));
            }
            let w = w_quad(&self.tt, &geom)?;
            if i == 0 {
                first = w;
            } else if w <= prev {
                return Ok(Some(format!(
                    "aggregate not increasing: w({k}) = {w} after {prev}"
                )));
            }
            prev = w;
        }
        if first > 0.1 * w_at_one {
            return Ok(Some(format!(
                "aggregate does not vanish toward zero level: w({}) = {first} vs w(1) = {w_at_one}",
                PROBE_LEVELS[0]
            )));
        }
        Ok(None)
    }

    fn geometry(&self, k: f64) -> Option<Geometry> {
        if k <= 0.0 {
            None
        } else if k >= 1.0 {
            Some(self.principal_geometry(k))
        } else {
            Some(self.small_geometry_as(self.small, k))
        }
    }

    /// Profile value at level k and mark magnitude z > 0.
    pub fn h(&self, k: f64, z: f64) -> f64 {
        debug_assert!(z > 0.0);
        self.geometry(k).map_or(0.0, |g| g.value(z))
    }

    /// Mark-derivative of the profile at level k.
    pub fn h_dz(&self, k: f64, z: f64) -> f64 {
        debug_assert!(z > 0.0);
        self.geometry(k).map_or(0.0, |g| g.slope(z))
    }

    /// Support interval of h(k, .), if the profile is nontrivial.
    pub fn support(&self, k: f64) -> Option<(f64, f64)> {
        self.geometry(k).map(|g| g.support())
    }

    /// Aggregate displacement w(k): integral of c(z) - c(z + h(k, z)) over
    /// the positive half-axis (the integrand vanishes off the support).
    pub fn w_of_k(&self, k: f64) -> Result<f64, GirsanovError> {
        if k < 0.0 {
            return Err(GirsanovError::NegativeIntensity(k));
        }
        match self.geometry(k) {
            None => Ok(0.0),
            Some(g) => w_quad(&self.tt, &g),
        }
    }

    /// Integral of |h_dz(k, .)| over the support (quadratic-energy gauge).
    pub fn abs_slope_mass(&self, k: f64) -> Result<f64, GirsanovError> {
        match self.geometry(k) {
            None => Ok(0.0),
            Some(g) => {
                let f = |z: f64| g.slope(z).abs();
                let (s_lo, s_hi) = g.support();
                let a = integrate(&f, s_lo, g.lo, 1e-9)?;
                let b = integrate(&f, g.lo, g.hi, 1e-9)?;
                let c = integrate(&f, g.hi, s_hi, 1e-9)?;
                Ok(a + b + c)
            }
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    pub fn continuity_constant(&self) -> f64 {
        self.c_cont
    }

    pub fn small_branch(&self) -> SmallBranch {
        self.small
    }

    pub fn tail_transform(&self) -> &TailTransform {
        &self.tt
    }
}

/// Smallest 1 + slope over a sampling of the profile's three pieces.
fn min_jump_factor(g: &Geometry) -> f64 {
    let mut min = f64::INFINITY;
    let pieces = [(g.left.x0, g.left.x1), (g.lo, g.hi), (g.right.x0, g.right.x1)];
    for (a, b) in pieces {
        for i in 0..64 {
            let z = a + (b - a) * (i as f64 + 0.5) / 64.0;
            min = min.min(1.0 + g.slope(z));
        }
    }
    min
}

/// Quadrature of c(z) - c(z + h(z)) over the support, split at the window
/// edges so each piece is smooth.
fn w_quad(tt: &TailTransform, g: &Geometry) -> Result<f64, GirsanovError> {
    let f = |z: f64| tt.positive(z) - tt.positive(z + g.value(z));
    let (s_lo, s_hi) = g.support();
    let a = integrate(&f, s_lo, g.lo, 1e-10)?;
    let b = integrate(&f, g.lo, g.hi, 1e-10)?;
    let c = integrate(&f, g.hi, s_hi, 1e-10)?;
    Ok(a + b + c)
}

/// Monotone lookup table for the aggregate displacement, used to bracket
/// kappa inversions. Values are validated strictly increasing at
/// construction; lookups bisect against live quadrature, so the table is a
/// bracketing device, not an interpolant. Immutable and shareable.
#[derive(Debug, Clone)]
pub struct EscortTable {
    ks: Vec<f64>,
    ws: Vec<f64>,
}

impl EscortTable {
    /// Table over levels (0, k_max] on a geometric grid with n points.
    pub fn build(profile: &PerturbProfile, k_max: f64, n: usize) -> Result<Self, GirsanovError> {
        if !(k_max > 0.0) || !k_max.is_finite() || n < 8 {
            return Err(GirsanovError::ProfileConstruction(format!(
                "table needs finite k_max > 0 and n >= 8, got ({k_max}, {n})"
            )));
        }
        let k_min = k_max * 1e-5;
        let ratio = (k_max / k_min).powf(1.0 / (n as f64 - 1.0));
        let mut ks = vec![0.0];
        let mut k = k_min;
        for i in 0..n {
            ks.push(if i + 1 == n { k_max } else { k });
            k *= ratio;
        }
        let mut ws = Vec::with_capacity(ks.len());
        for &k in &ks {
            ws.push(profile.w_of_k(k)?);
        }
        for i in 1..ws.len() {
            if ws[i] <= ws[i - 1] {
                let branch = if ks[i] < 1.0 { profile.small_branch().name() } else { "principal" };
                return Err(GirsanovError::NotMonotone {
                    branch,
                    k_lo: ks[i - 1],
                    w_lo: ws[i - 1],
                    k_hi: ks[i],
                    w_hi: ws[i],
                });
            }
        }
        Ok(Self { ks, ws })
    }

    /// Table whose range covers intensities up to v_max, found by doubling
    /// the top level until the aggregate reaches it.
    pub fn covering(
        profile: &PerturbProfile,
        v_max: f64,
        n: usize,
    ) -> Result<Self, GirsanovError> {
        if !(v_max > 0.0) || !v_max.is_finite() {
            return Err(GirsanovError::ProfileConstruction(format!(
                "coverage target must be positive and finite, got {v_max}"
            )));
        }
        let mut k_hi = 1.0;
        for _ in 0..64 {
            if profile.w_of_k(k_hi)? >= v_max {
                return Self::build(profile, k_hi, n);
            }
            k_hi *= 2.0;
        }
        Err(GirsanovError::ProfileConstruction(format!(
            "aggregate never reached {v_max} while doubling the level"
        )))
    }

    pub fn k_max(&self) -> f64 {
        *self.ks.last().expect("table is never empty")
    }

    pub fn w_max(&self) -> f64 {
        *self.ws.last().expect("table is never empty")
    }

    /// Inverse of the aggregate displacement: the level K with w(K) = v,
    /// bracketed by the table and refined by bisection against quadrature.
    pub fn kappa(&self, profile: &PerturbProfile, v: f64) -> Result<f64, GirsanovError> {
        if v < 0.0 || !v.is_finite() {
            return Err(GirsanovError::NegativeIntensity(v));
        }
        if v == 0.0 {
            return Ok(0.0);
        }
        if v > self.w_max() {
            return Err(GirsanovError::KappaRange { v, v_max: self.w_max() });
        }
        let i = self.ws.partition_point(|w| *w < v);
        debug_assert!(i >= 1 && i < self.ws.len());
        let (mut lo, mut hi) = (self.ks[i - 1], self.ks[i]);
        for _ in 0..120 {
            if hi - lo <= 1e-10 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if profile.w_of_k(mid)? < v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Transformed signed mark at a known level: marks whose sign matches the
/// intensity are displaced away from the origin by the profile; opposite
/// marks are untouched.
pub fn theta_at_level(profile: &PerturbProfile, k: f64, v: f64, m: f64) -> f64 {
    if m == 0.0 || v == 0.0 || m.signum() != v.signum() {
        return m;
    }
    m + profile.h(k, m.abs()).copysign(m)
}

/// Transformed signed mark for intensity v: resolves the level through the
/// table and displaces the matching half-axis.
pub fn theta(
    profile: &PerturbProfile,
    table: &EscortTable,
    v: f64,
    m: f64,
) -> Result<f64, GirsanovError> {
    if m == 0.0 {
        return Err(GirsanovError::ZeroMark);
    }
    if v == 0.0 {
        return Ok(m);
    }
    let k = table.kappa(profile, v.abs())?;
    Ok(theta_at_level(profile, k, v, m))
}

/// Residual of the defining identity: quadrature of c - c∘theta(v, .) over
/// the signed mark space minus v. Zero (to quadrature tolerance) for every
/// intensity in the table range.
pub fn theta_identity_residual(
    profile: &PerturbProfile,
    table: &EscortTable,
    v: f64,
) -> Result<f64, GirsanovError> {
    if v == 0.0 {
        return Ok(0.0);
    }
    let k = table.kappa(profile, v.abs())?;
    let g = profile.geometry(k).expect("positive intensity has a geometry");
    let tt = &profile.tt;
    // Only the half-axis matching sgn(v) contributes; parameterize it by the
    // mark magnitude and account for the orientation of the signed mark.
    let f = |z: f64| {
        let m = z.copysign(v);
        let tm = theta_at_level(profile, k, v, m);
        let c_m = tt.positive(m.abs()).copysign(m);
        let c_tm = tt.positive(tm.abs()).copysign(tm);
        c_m - c_tm
    };
    let (s_lo, s_hi) = g.support();
    let a = integrate(&f, s_lo, g.lo, 1e-9)?;
    let b = integrate(&f, g.lo, g.hi, 1e-9)?;
    let c = integrate(&f, g.hi, s_hi, 1e-9)?;
    Ok(a + b + c - v)
}

/// Piecewise-constant, right-continuous positive path of multiplier values
/// (the noise coefficient sampled along a trajectory).
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPath {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl SigmaPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self, GirsanovError> {
        if times.is_empty() || times[0] != 0.0 {
            return Err(GirsanovError::InvalidSigmaPath("times must start at 0".into()));
        }
        if times.len() != values.len() {
            return Err(GirsanovError::InvalidSigmaPath("times/values length mismatch".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
            return Err(GirsanovError::InvalidSigmaPath(
                "times must be finite and strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GirsanovError::InvalidSigmaPath("values must be positive".into()));
        }
        Ok(Self { times, values })
    }

    pub fn constant(value: f64) -> Result<Self, GirsanovError> {
        Self::new(vec![0.0], vec![value])
    }

    /// Left-limit value governing an event at time t.
    pub fn left_value(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|x| *x < t);
        self.values[i.max(1) - 1]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Level data resolved for one intensity magnitude: the level, the one-sided
/// compensator rate over the band, and the profile geometry at that level.
#[derive(Debug, Clone, Copy)]
struct Level {
    k: f64,
    rate: f64,
    geom: Option<Geometry>,
}

const ZERO_LEVEL: Level = Level { k: 0.0, rate: 0.0, geom: None };

/// Precomputed level data shared across replicas (read-only); intensities
/// not present are resolved on the fly into a per-path scratch map.
#[derive(Debug, Clone)]
pub struct LevelMap {
    band: MarkBand,
    map: HashMap<u64, Level>,
}

impl LevelMap {
    pub fn build(
        profile: &PerturbProfile,
        table: &EscortTable,
        band: MarkBand,
        intensities: &[f64],
    ) -> Result<Self, GirsanovError> {
        let mut map = HashMap::new();
        for &v in intensities {
            let v_abs = v.abs();
            if v_abs == 0.0 {
                continue;
            }
            map.entry(v_abs.to_bits())
                .or_insert(Self::level_for(profile, table, band, v_abs)?);
        }
        Ok(Self { band, map })
    }

    pub fn band(&self) -> MarkBand {
        self.band
    }

    fn level_for(
        profile: &PerturbProfile,
        table: &EscortTable,
        band: MarkBand,
        v_abs: f64,
    ) -> Result<Level, GirsanovError> {
        let k = table.kappa(profile, v_abs)?;
        let geom = profile.geometry(k);
        // One-sided integral of the slope over the band telescopes to a
        // difference of profile values; zero when the support sits inside.
        let rate = geom.map_or(0.0, |g| g.value(band.hi) - g.value(band.lo));
        Ok(Level { k, rate, geom })
    }

    fn lookup(
        &self,
        scratch: &mut HashMap<u64, Level>,
        profile: &PerturbProfile,
        table: &EscortTable,
        v_abs: f64,
    ) -> Result<Level, GirsanovError> {
        if v_abs == 0.0 {
            return Ok(ZERO_LEVEL);
        }
        let bits = v_abs.to_bits();
        if let Some(l) = self.map.get(&bits) {
            return Ok(*l);
        }
        if let Some(l) = scratch.get(&bits) {
            return Ok(*l);
        }
        let l = Self::level_for(profile, table, self.band, v_abs)?;
        scratch.insert(bits, l);
        Ok(l)
    }
}

/// Exponential density realization along one stream: values at the path's
/// breakpoints plus the per-segment compensator rates needed to evaluate it
/// at arbitrary times.
#[derive(Debug, Clone)]
pub struct DensityPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    seg_rates: Vec<f64>,
    pub compensator_log: f64,
}

impl DensityPath {
    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("density path has at least the origin")
    }

    pub fn value_at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        let i = self.times.partition_point(|x| *x <= t);
        if i >= self.times.len() {
            return self.terminal();
        }
        let idx = i - 1;
        self.values[idx] * (-self.seg_rates[idx] * (t - self.times[idx])).exp()
    }
}

/// Core walk shared by the path and terminal evaluators: multiplies jump
/// factors on sign-matching events and the exponential compensator between
/// breakpoints. The sink sees (time, value, rate of the segment just ended).
fn fold_density(
    stream: &EventStream,
    control: &ControlGrid,
    sigma: &SigmaPath,
    profile: &PerturbProfile,
    table: &EscortTable,
    shared: &LevelMap,
    mut sink: impl FnMut(f64, f64, f64),
) -> Result<(f64, f64), GirsanovError> {
    if stream.band != shared.band() {
        return Err(GirsanovError::BandMismatch(
            stream.band.lo,
            stream.band.hi,
            shared.band.lo,
            shared.band.hi,
        ));
    }
    let t_end = stream.horizon;
    if (control.horizon() - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(GirsanovError::MismatchedHorizon {
            stream: t_end,
            control: control.horizon(),
        });
    }
    if let Some(last) = sigma.times().last() {
        if *last > t_end + 1e-12 {
            return Err(GirsanovError::InvalidSigmaPath(format!(
                "knot {last} beyond the horizon {t_end}"
            )));
        }
    }

    let mut points: Vec<(f64, Option<&crate::levy::Event>)> = control
        .interior_knots()
        .filter(|t| *t < t_end)
        .map(|t| (t, None))
        .chain(sigma.times().iter().skip(1).map(|&t| (t, None)))
        .chain(stream.events.iter().filter(|e| e.t <= t_end).map(|e| (e.t, Some(e))))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut scratch: HashMap<u64, Level> = HashMap::new();
    let mut g = 1.0f64;
    let mut comp_log = 0.0f64;
    let mut t_prev = 0.0f64;
    sink(0.0, 1.0, 0.0);
    for (t, event) in points {
        // Values governing the segment (t_prev, t]: left limits at t.
        let vs = control.left_value(t) / sigma.left_value(t);
        let level = shared.lookup(&mut scratch, profile, table, vs.abs())?;
        let dt = t - t_prev;
        if dt > 0.0 {
            g *= (-level.rate * dt).exp();
            comp_log -= level.rate * dt;
        }
        if let Some(e) = event {
            if vs != 0.0 && e.sign == vs.signum() {
                let geom = level.geom.expect("nonzero intensity carries a geometry");
                let factor = 1.0 + geom.slope(e.z);
                if !(factor > 0.0) {
                    return Err(GirsanovError::JumpFactorNonPositive {
                        t,
                        z: e.z,
                        level: level.k,
                        factor,
                    });
                }
                g *= factor;
            }
        }
        sink(t, g, level.rate);
        t_prev = t;
    }
    let vs = control.left_value(t_end) / sigma.left_value(t_end);
    let level = shared.lookup(&mut scratch, profile, table, vs.abs())?;
    if t_end > t_prev {
        g *= (-level.rate * (t_end - t_prev)).exp();
        comp_log -= level.rate * (t_end - t_prev);
    }
    sink(t_end, g, level.rate);
    Ok((g, comp_log))
}

/// Full density realization with breakpoint values.
pub fn density_path(
    stream: &EventStream,
    control: &ControlGrid,
    sigma: &SigmaPath,
    profile: &PerturbProfile,
    table: &EscortTable,
    shared: &LevelMap,
) -> Result<DensityPath, GirsanovError> {
    let mut times = Vec::with_capacity(stream.events.len() + 2);
    let mut values = Vec::with_capacity(stream.events.len() + 2);
    let mut seg_rates = Vec::with_capacity(stream.events.len() + 1);
    let (_, compensator_log) =
        fold_density(stream, control, sigma, profile, table, shared, |t, g, rate| {
            if !times.is_empty() {
                seg_rates.push(rate);
            }
            times.push(t);
            values.push(g);
        })?;
    Ok(DensityPath { times, values, seg_rates, compensator_log })
}

/// Terminal density value and accumulated compensator log without storing
/// the path (replica-scale evaluation).
pub fn density_terminal(
    stream: &EventStream,
    control: &ControlGrid,
    sigma: &SigmaPath,
    profile: &PerturbProfile,
    table: &EscortTable,
    shared: &LevelMap,
) -> Result<(f64, f64), GirsanovError> {
    fold_density(stream, control, sigma, profile, table, shared, |_, _, _| {})
}

/// Monte-Carlo mean and standard error of the terminal density over n
/// independent streams (martingale diagnostic; the mean is 1 in law).
#[allow(clippy::too_many_arguments)]
pub fn mean_terminal_density(
    profile: &PerturbProfile,
    table: &EscortTable,
    shared: &LevelMap,
    control: &ControlGrid,
    sigma: &SigmaPath,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64), GirsanovError> {
    let xs: Result<Vec<f64>, GirsanovError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let stream = sample_stream(shared.band(), horizon, derive_seed(seed, i as u64))?;
            let (g, _) = density_terminal(&stream, control, sigma, profile, table, shared)?;
            Ok(g)
        })
        .collect();
    Ok(mean_and_stderr(&xs?))
}

/// Verification record serialized into reports.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub identity: String,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub pass: bool,
}

/// Compares the Monte-Carlo Laplace functional of the compensated jump sum
/// against its closed-form exponent (by quadrature over the band). The band
/// is symmetric, so the compensator drift vanishes and the exponent reduces
/// to an even integrand.
pub fn laplace_check(
    tt: &TailTransform,
    band: MarkBand,
    lambda: f64,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<CheckReport, GirsanovError> {
    if band.is_empty() || band.lo <= 0.0 {
        return Err(GirsanovError::InvalidCheck(format!(
            "band ({}, {}] must be nonempty and bounded away from 0",
            band.lo, band.hi
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() || !(t > 0.0) || n < 2 {
        return Err(GirsanovError::InvalidCheck(format!(
            "need lambda >= 0, t > 0, n >= 2; got ({lambda}, {t}, {n})"
        )));
    }
    // cosh(x) - 1 written as 2 sinh^2(x/2) to avoid cancellation.
    let even_part = |z: f64| {
        let s = (0.5 * lambda * tt.positive(z)).sinh();
        2.0 * s * s
    };
    let exponent = 2.0 * integrate(&even_part, band.lo, band.hi, 1e-12)?;
    let rhs = (t * exponent).exp();
    let xs: Result<Vec<f64>, GirsanovError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let stream = sample_stream(band, t, derive_seed(seed, i as u64))?;
            let xi: f64 = stream.events.iter().map(|e| e.sign * tt.positive(e.z)).sum();
            Ok((-lambda * xi).exp())
        })
        .collect();
    let (lhs, stderr) = mean_and_stderr(&xs?);
    let pass = (lhs - rhs).abs() <= 3.0 * stderr;
    Ok(CheckReport { identity: "laplace-transform".into(), lhs, rhs, stderr, n, seed, pass })
}

/// Bounded test functional evaluated at a terminal state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "form")]
pub enum TestFunctional {
    /// Constant 1; reduces the two-sided check to the unit-mean identity.
    One,
    /// Indicator of the closed energy ball of the given radius.
    EnergyBall { radius: f64 },
}

impl TestFunctional {
    pub fn eval<M: SpectralModel>(&self, model: &M, state: &M::State) -> f64 {
        match self {
            Self::One => 1.0,
            Self::EnergyBall { radius } => {
                if model.energy(state) <= *radius {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::One => "one".into(),
            Self::EnergyBall { radius } => format!("energy-ball({radius})"),
        }
    }
}

/// One trajectory driven by the transformed marks, with its density value:
/// between events the state follows the free flow; at an event whose sign
/// matches the left-limit transformation intensity the mark is displaced by
/// the profile before entering the jump transform, and the density picks up
/// the displacement's Jacobian. `intensity` is the transformation intensity
/// grid, already scaled by the constant multiplier.
#[allow(clippy::too_many_arguments)]
pub(crate) fn transformed_terminal<M: SpectralModel>(
    model: &M,
    tt: &TailTransform,
    sigma_const: f64,
    profile: &PerturbProfile,
    table: &EscortTable,
    shared: &LevelMap,
    intensity: &ControlGrid,
    x0: &M::State,
    stream: &EventStream,
) -> Result<(M::State, f64), GirsanovError> {
    let t_end = stream.horizon;
    let mut points: Vec<(f64, Option<&crate::levy::Event>)> = intensity
        .interior_knots()
        .filter(|t| *t < t_end)
        .map(|t| (t, None))
        .chain(stream.events.iter().filter(|e| e.t <= t_end).map(|e| (e.t, Some(e))))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut scratch: HashMap<u64, Level> = HashMap::new();
    let mut state = x0.clone();
    let mut g = 1.0f64;
    let mut t_prev = 0.0f64;
    for (t, event) in points {
        let vs = intensity.left_value(t);
        let level = shared.lookup(&mut scratch, profile, table, vs.abs())?;
        let dt = t - t_prev;
        if dt > 0.0 {
            state = model.free_step(&state, dt);
            g *= (-level.rate * dt).exp();
        }
        if let Some(e) = event {
            let mark = if vs != 0.0 && e.sign == vs.signum() {
                let geom = level.geom.expect("nonzero intensity carries a geometry");
                let factor = 1.0 + geom.slope(e.z);
                if !(factor > 0.0) {
                    return Err(GirsanovError::JumpFactorNonPositive {
                        t,
                        z: e.z,
                        level: level.k,
                        factor,
                    });
                }
                g *= factor;
                e.z + geom.value(e.z)
            } else {
                e.z
            };
            state = model.kicked(&state, sigma_const * tt.positive(mark) * e.sign);
        }
        t_prev = t;
    }
    if t_end > t_prev {
        let vs = intensity.left_value(t_end);
        let level = shared.lookup(&mut scratch, profile, table, vs.abs())?;
        state = model.free_step(&state, t_end - t_prev);
        g *= (-level.rate * (t_end - t_prev)).exp();
    }
    Ok((state, g))
}

/// Two-sided measure-change verification: estimates E[G(T) phi(Y(T))] over
/// transformed-mark trajectories Y and E[phi(X(T))] over reference
/// trajectories X on independent replica sets, passing when the difference
/// sits inside the combined 3-sigma interval. The transformation intensity
/// is chosen so that Y tracks the boundary control `v` on average while G
/// carries the matching density; phi is bounded by construction.
#[allow(clippy::too_many_arguments)]
pub fn girsanov_check<M: SpectralModel>(
    sys: &SdeSystem<'_, M>,
    profile: &PerturbProfile,
    table: &EscortTable,
    x0: &M::State,
    horizon: f64,
    v: &ControlGrid,
    phi: TestFunctional,
    n: usize,
    seed: u64,
) -> Result<CheckReport, GirsanovError> {
    if !(horizon > 0.0) || !horizon.is_finite() || n < 2 {
        return Err(GirsanovError::InvalidCheck(format!(
            "need a positive finite horizon and n >= 2, got ({horizon}, {n})"
        )));
    }
    if (v.horizon() - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(GirsanovError::MismatchedHorizon { stream: horizon, control: v.horizon() });
    }
    let c0 = sys.sigma.constant_value().ok_or_else(|| {
        GirsanovError::InvalidCheck(
            "the coupled check needs a constant multiplier; state-dependent forms \
             admit no exact piecewise-constant intensity"
                .into(),
        )
    })?;
    if profile.tail_transform().spec != sys.tt.spec {
        return Err(GirsanovError::InvalidCheck(
            "profile and system use different jump transforms".into(),
        ));
    }
    if let TestFunctional::EnergyBall { radius } = phi {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(GirsanovError::InvalidCheck(format!(
                "ball radius must be finite and nonnegative, got {radius}"
            )));
        }
    }
    // Mark displacement shrinks sign-matched jumps, so tracking +v means
    // shrinking the opposing kicks: the transformation runs on -v/sigma.
    let intensity = ControlGrid::new(v.step(), v.values().iter().map(|x| -x / c0).collect())
        .expect("mirrored grid stays valid");
    // Displaced marks must stay inside the band, else the transformed
    // stream is no longer band-distributed and the identity breaks.
    for &u in intensity.values() {
        if u == 0.0 {
            continue;
        }
        let k = table.kappa(profile, u.abs())?;
        if let Some((s_lo, s_hi)) = profile.support(k) {
            if s_lo < sys.band.lo || s_hi > sys.band.hi {
                return Err(GirsanovError::InvalidCheck(format!(
                    "perturbation support ({s_lo:.6}, {s_hi:.6}) at level {k:.6} escapes \
                     the mark band ({}, {}]",
                    sys.band.lo, sys.band.hi
                )));
            }
        }
    }
    let shared = LevelMap::build(profile, table, sys.band, intensity.values())?;

    let lhs_vals: Result<Vec<f64>, GirsanovError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let stream = sample_stream(sys.band, horizon, derive_seed(seed, (n + i) as u64))?;
            let (state, g) = transformed_terminal(
                sys.model, sys.tt, c0, profile, table, &shared, &intensity, x0, &stream,
            )?;
            Ok(g * phi.eval(sys.model, &state))
        })
        .collect();
    let rhs_vals: Result<Vec<f64>, GirsanovError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let path = simulate(sys, x0, horizon, None, &[], derive_seed(seed, i as u64))?;
            Ok(phi.eval(sys.model, &path.final_state))
        })
        .collect();
    let (lhs, se_l) = mean_and_stderr(&lhs_vals?);
    let (rhs, se_r) = mean_and_stderr(&rhs_vals?);
    let stderr = se_l.hypot(se_r);
    let pass = (lhs - rhs).abs() <= 3.0 * stderr;
    Ok(CheckReport {
        identity: format!("measure-change[{}]", phi.label()),
        lhs,
        rhs,
        stderr,
        n,
        seed,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::{Event, LevyDensitySpec};
    use approx::assert_abs_diff_eq;

    fn transform_15() -> TailTransform {
        TailTransform::new(LevyDensitySpec::new(1.5, 1.5, 1.0, None).unwrap())
    }

    fn profile_15() -> PerturbProfile {
        PerturbProfile::new(transform_15()).unwrap()
    }

    fn profile_for(alpha: f64) -> PerturbProfile {
        let spec = LevyDensitySpec::new(alpha, alpha, 1.0, None).unwrap();
        PerturbProfile::new(TailTransform::new(spec)).unwrap()
    }

    #[test]
    fn exponents_match_closed_forms() {
        let p = profile_15();
        assert_abs_diff_eq!(p.beta1(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.nu(), 0.75, epsilon = 1e-14);
        let p = profile_for(1.2);
        assert_abs_diff_eq!(p.beta1(), -0.35714285714285715, epsilon = 1e-13);
        assert_abs_diff_eq!(p.nu(), 1.68, epsilon = 1e-13);
        let p = profile_for(1.9);
        assert_abs_diff_eq!(p.beta1(), -0.6015037593984962, epsilon = 1e-13);
        assert_abs_diff_eq!(p.nu(), -1.33, epsilon = 1e-12);
        let p = profile_for(2.0);
        assert_abs_diff_eq!(p.beta1(), -0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(p.nu(), -2.0, epsilon = 1e-14);
    }

    #[test]
    fn rejects_singular_exponent() {
        let spec = LevyDensitySpec::new(5.0 / 3.0, 1.5, 1.0, None).unwrap();
        match PerturbProfile::new(TailTransform::new(spec)) {
            Err(GirsanovError::SingularExponent(_)) => {}
            other => panic!("expected singular exponent rejection, got {other:?}"),
        }
    }

    #[test]
    fn profile_is_compact_nonnegative_and_continuous() {
        let p = profile_15();
        for k in [0.3, 1.0, 2.0, 6.0] {
            let (s_lo, s_hi) = p.support(k).unwrap();
            assert!(s_lo > 0.0);
            assert_eq!(p.h(k, s_lo * 0.9), 0.0);
            assert_eq!(p.h(k, s_hi * 1.1), 0.0);
            for i in 0..=400 {
                let z = s_lo + (s_hi - s_lo) * i as f64 / 400.0;
                if z <= 0.0 {
                    continue;
                }
                assert!(p.h(k, z) >= 0.0, "h({k}, {z}) = {}", p.h(k, z));
            }
            // continuity across the support edges and window junctions
            for z in [s_lo, s_hi] {
                let eps = 1e-9 * z.max(1.0);
                assert!((p.h(k, z + eps) - p.h(k, z - eps)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn slope_matches_finite_differences() {
        for p in [profile_15(), profile_for(1.9)] {
            for k in [0.4, 2.5] {
                let (s_lo, s_hi) = p.support(k).unwrap();
                let eps = 1e-6;
                for i in 1..40 {
                    let z = s_lo + (s_hi - s_lo) * i as f64 / 40.0;
                    let fd = (p.h(k, z + eps) - p.h(k, z - eps)) / (2.0 * eps);
                    assert!(
                        (p.h_dz(k, z) - fd).abs() <= 1e-5,
                        "alpha {} k {k} z {z}: slope {} fd {fd}",
                        p.alpha(),
                        p.h_dz(k, z)
                    );
                }
            }
        }
    }

    #[test]
    fn aggregate_is_increasing_vanishing_and_continuous() {
        let p = profile_15();
        assert_eq!(p.w_of_k(0.0).unwrap(), 0.0);
        assert_eq!(p.small_branch(), SmallBranch::ScaledHeight);
        let grid =
            [0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.999, 1.0, 1.3, 2.0, 3.5, 5.0, 8.0];
        let mut prev = 0.0;
        for k in grid {
            let w = p.w_of_k(k).unwrap();
            assert!(w > prev, "w({k}) = {w} after {prev}");
            prev = w;
        }
        // continuity across the branch switch at K = 1
        let below = p.w_of_k(1.0 - 1e-7).unwrap();
        let at = p.w_of_k(1.0).unwrap();
        assert!((below - at).abs() < 1e-5, "w jumps across K = 1: {below} vs {at}");
    }

    #[test]
    fn escort_table_inverts_the_aggregate() {
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.2, 49).unwrap();
        assert_eq!(table.kappa(&p, 0.0).unwrap(), 0.0);
        for k in [0.25, 1.0, 4.0] {
            let v = p.w_of_k(k).unwrap();
            let back = table.kappa(&p, v).unwrap();
            assert!((back - k).abs() <= 1e-8, "kappa(w({k})) = {back}");
        }
        for v in [0.05, 0.3, 1.0] {
            let k = table.kappa(&p, v).unwrap();
            let w = p.w_of_k(k).unwrap();
            assert!((w - v).abs() <= 1e-8, "w(kappa({v})) = {w}");
        }
        let k1 = table.kappa(&p, 0.05).unwrap();
        let k2 = table.kappa(&p, 0.1).unwrap();
        let k3 = table.kappa(&p, 0.2).unwrap();
        assert!(k1 < k2 && k2 < k3);
        match table.kappa(&p, 10.0 * table.w_max()) {
            Err(GirsanovError::KappaRange { .. }) => {}
            other => panic!("expected range error, got {other:?}"),
        }
        assert!(table.kappa(&p, -0.1).is_err());
    }

    #[test]
    fn theta_identity_and_symmetry() {
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.2, 49).unwrap();
        // identity map at zero intensity
        assert_eq!(theta(&p, &table, 0.0, 1.7).unwrap(), 1.7);
        assert!(theta(&p, &table, 0.3, 0.0).is_err());
        // defining identity at v = 0.3
        let r = theta_identity_residual(&p, &table, 0.3).unwrap();
        assert!(r.abs() <= 1e-6, "residual {r}");
        // identity across a signed grid
        for i in 0..=20 {
            let v = -1.0 + 0.1 * i as f64;
            if v == 0.0 {
                continue;
            }
            let r = theta_identity_residual(&p, &table, v).unwrap();
            assert!(r.abs() <= 1e-5, "residual at v = {v}: {r}");
        }
        // odd symmetry and inert opposite-sign marks
        for (v, m) in [(0.4, 1.6), (0.7, 2.3), (0.2, 0.9)] {
            let plus = theta(&p, &table, v, m).unwrap();
            let minus = theta(&p, &table, -v, -m).unwrap();
            assert_abs_diff_eq!(minus, -plus, epsilon = 1e-12);
            assert!(plus > m, "matching marks displace outward");
            assert_eq!(theta(&p, &table, v, -m).unwrap(), -m);
            assert_eq!(theta(&p, &table, -v, m).unwrap(), m);
        }
    }

    fn density_fixture() -> (PerturbProfile, EscortTable, MarkBand) {
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.2, 49).unwrap();
        let band = MarkBand::new(0.5, 12.0).unwrap();
        (p, table, band)
    }

    #[test]
    fn zero_control_gives_unit_density() {
        let (p, table, band) = density_fixture();
        let shared = LevelMap::build(&p, &table, band, &[0.0]).unwrap();
        let stream = sample_stream(band, 1.0, 42).unwrap();
        let control = ControlGrid::zeros(4, 0.25).unwrap();
        let sigma = SigmaPath::constant(1.0).unwrap();
        let path = density_path(&stream, &control, &sigma, &p, &table, &shared).unwrap();
        assert!(path.values.iter().all(|g| *g == 1.0));
        assert_eq!(path.compensator_log, 0.0);
        assert_eq!(path.value_at(0.63), 1.0);
    }

    #[test]
    fn single_event_density_matches_profile_slope() {
        let (p, table, band) = density_fixture();
        let v = 0.12;
        let shared = LevelMap::build(&p, &table, band, &[v]).unwrap();
        let k = table.kappa(&p, v).unwrap();
        let (s_lo, s_hi) = p.support(k).unwrap();
        assert!(s_lo > band.lo && s_hi < band.hi, "support within the band");
        let z = 0.5 * (s_lo + s_hi);
        let control = ControlGrid::constant(v, 2, 0.5).unwrap();
        let sigma = SigmaPath::constant(1.0).unwrap();
        let mk = |sign: f64| EventStream {
            horizon: 1.0,
            band,
            events: vec![Event { t: 0.4, z, sign }],
            seed: 0,
        };
        // matching sign multiplies in the jump factor; opposite sign is inert
        let (g_plus, comp) =
            density_terminal(&mk(1.0), &control, &sigma, &p, &table, &shared).unwrap();
        assert_abs_diff_eq!(g_plus, 1.0 + p.h_dz(k, z), epsilon = 1e-12);
        assert_eq!(comp, 0.0, "support inside the band has zero net rate");
        let (g_minus, _) =
            density_terminal(&mk(-1.0), &control, &sigma, &p, &table, &shared).unwrap();
        assert_eq!(g_minus, 1.0);
    }

    #[test]
    fn terminal_density_has_unit_mean() {
        let (p, table, band) = density_fixture();
        let v = 0.12;
        let control = ControlGrid::constant(v, 4, 0.25).unwrap();
        let sigma = SigmaPath::constant(1.0).unwrap();
        let shared = LevelMap::build(&p, &table, band, &[v]).unwrap();
        let (mean, se) =
            mean_terminal_density(&p, &table, &shared, &control, &sigma, 1.0, 4000, 7).unwrap();
        assert!((mean - 1.0).abs() <= 4.0 * se, "mean {mean}, se {se}");
        assert!(se < 0.05);
    }

    #[test]
    fn martingale_holds_at_intermediate_times() {
        let (p, table, band) = density_fixture();
        let v = 0.12;
        let control = ControlGrid::constant(v, 4, 0.25).unwrap();
        let sigma = SigmaPath::constant(1.0).unwrap();
        let shared = LevelMap::build(&p, &table, band, &[v]).unwrap();
        let n = 3000;
        let mut at_quarter = Vec::with_capacity(n);
        let mut at_half = Vec::with_capacity(n);
        for i in 0..n {
            let stream = sample_stream(band, 1.0, derive_seed(11, i as u64)).unwrap();
            let path = density_path(&stream, &control, &sigma, &p, &table, &shared).unwrap();
            at_quarter.push(path.value_at(0.25));
            at_half.push(path.value_at(0.5));
        }
        for (label, xs) in [("T/4", &at_quarter), ("T/2", &at_half)] {
            let (mean, se) = mean_and_stderr(xs);
            assert!((mean - 1.0).abs() <= 4.0 * se, "{label}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn density_validates_inputs() {
        let (p, table, band) = density_fixture();
        let shared = LevelMap::build(&p, &table, band, &[0.1]).unwrap();
        let sigma = SigmaPath::constant(1.0).unwrap();
        let stream = sample_stream(band, 1.0, 3).unwrap();
        // horizon mismatch
        let short = ControlGrid::zeros(2, 0.25).unwrap();
        assert!(matches!(
            density_path(&stream, &short, &sigma, &p, &table, &shared),
            Err(GirsanovError::MismatchedHorizon { .. })
        ));
        // band mismatch
        let other = LevelMap::build(&p, &table, MarkBand::new(0.25, 12.0).unwrap(), &[0.1])
            .unwrap();
        let control = ControlGrid::zeros(4, 0.25).unwrap();
        assert!(matches!(
            density_path(&stream, &control, &sigma, &p, &table, &other),
            Err(GirsanovError::BandMismatch(..))
        ));
        // sigma path validation
        assert!(SigmaPath::new(vec![0.0, 1.0], vec![1.0, -2.0]).is_err());
        assert!(SigmaPath::new(vec![0.5], vec![1.0]).is_err());
        assert!(SigmaPath::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn laplace_functional_small_lambda_and_zero() {
        let tt = transform_15();
        let band = MarkBand::new(1.0, 100.0).unwrap();
        // lambda = 0 degenerates to 1 on both sides with zero spread
        let zero = laplace_check(&tt, band, 0.0, 1.0, 100, 5).unwrap();
        assert_eq!(zero.lhs, 1.0);
        assert_eq!(zero.rhs, 1.0);
        assert!(zero.pass);
        // small-lambda expansion of the exponent against the second moment
        let lambda = 0.01;
        let rep = laplace_check(&tt, band, lambda, 1.0, 100, 5).unwrap();
        let sm = crate::levy::second_moment(&tt, band).banded;
        let taylor = (1.0f64 * lambda * lambda / 2.0 * sm).exp();
        assert!((rep.rhs - taylor).abs() <= 1e-6, "rhs {} taylor {taylor}", rep.rhs);
    }

    #[test]
    fn laplace_mc_matches_quadrature() {
        let tt = transform_15();
        let band = MarkBand::new(1.0, 100.0).unwrap();
        let rep = laplace_check(&tt, band, 0.5, 1.0, 20_000, 99).unwrap();
        assert!(
            (rep.lhs - rep.rhs).abs() <= 4.0 * rep.stderr,
            "lhs {} rhs {} se {}",
            rep.lhs,
            rep.rhs,
            rep.stderr
        );
    }

    #[test]
    fn aggregate_growth_keeps_its_power_law_floor() {
        // Fitted once over K in [1, 10] and frozen; guards the aggregate
        // against silent geometry regressions.
        for (alpha, floor) in [(1.2, 0.60), (1.5, 0.42), (1.9, 0.40)] {
            let p = profile_for(alpha);
            for i in 0..=18 {
                let k = 1.0 + 0.5 * i as f64;
                let ratio = p.w_of_k(k).unwrap() / k.powf(alpha - 1.0);
                assert!(ratio >= floor, "alpha {alpha}, K = {k}: ratio {ratio} < {floor}");
            }
        }
    }

    #[test]
    fn slope_mass_stays_within_fitted_quadratic_gauge() {
        // Max of abs_slope_mass(kappa(v)) / v^2 over this grid, fitted once
        // and frozen (the ratio grows as v -> 0, so the gauge is tied to the
        // grid it was fitted on).
        let fitted = 82.586483718811;
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.05, 49).unwrap();
        for i in 1..=21 {
            let v = 0.05 * i as f64;
            let k = table.kappa(&p, v).unwrap();
            let ratio = p.abs_slope_mass(k).unwrap() / (v * v);
            assert!(
                ratio <= fitted * (1.0 + 1e-3),
                "v = {v}: ratio {ratio} above fitted gauge {fitted}"
            );
        }
    }

    #[test]
    fn report_serializes_with_capital_n() {
        let rep = CheckReport {
            identity: "probe".into(),
            lhs: 1.0,
            rhs: 1.0,
            stderr: 0.0,
            n: 7,
            seed: 1,
            pass: true,
        };
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"N\":7"), "{json}");
    }

    use crate::operators::{SpectralState, StiffnessForm, WaveModelSpec};
    use crate::spde::SigmaSpec;

    fn coupled_fixture() -> (WaveModelSpec, TailTransform, SigmaSpec, MarkBand) {
        let w = WaveModelSpec::new(4, 0.0, StiffnessForm::Restoring).unwrap();
        let sigma = SigmaSpec::constant(1.0).unwrap();
        let band = MarkBand::new(0.5, 12.0).unwrap();
        (w, transform_15(), sigma, band)
    }

    #[test]
    fn coupled_check_reduces_to_unit_mean_for_constant_phi() {
        let (w, tt, sigma, band) = coupled_fixture();
        let sys = SdeSystem::new(&w, &tt, band, &sigma).unwrap();
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.2, 49).unwrap();
        let v = ControlGrid::constant(0.12, 4, 0.25).unwrap();
        let x0 = SpectralState::zero(4);
        let report =
            girsanov_check(&sys, &p, &table, &x0, 1.0, &v, TestFunctional::One, 3000, 41)
                .unwrap();
        // constant phi makes the reference side exact and the check a pure
        // unit-mean test on the density
        assert_eq!(report.rhs, 1.0);
        assert!(report.lhs > 0.0);
        assert!(report.pass, "lhs {} stderr {}", report.lhs, report.stderr);
    }

    #[test]
    fn coupled_check_agrees_without_transformation() {
        let (w, tt, sigma, band) = coupled_fixture();
        let sys = SdeSystem::new(&w, &tt, band, &sigma).unwrap();
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.2, 49).unwrap();
        let v = ControlGrid::zeros(4, 0.25).unwrap();
        let phi = TestFunctional::EnergyBall { radius: 1.5 };
        let report = girsanov_check(&sys, &p, &table, &x0_zero(), 1.0, &v, phi, 4000, 7).unwrap();
        // both sides estimate the same hitting probability on independent
        // streams; the probability must be nondegenerate for the test to
        // mean anything
        assert!(report.lhs > 0.05 && report.lhs < 0.95, "lhs {}", report.lhs);
        assert!(report.rhs > 0.05 && report.rhs < 0.95, "rhs {}", report.rhs);
        assert!(report.pass, "lhs {} rhs {} stderr {}", report.lhs, report.rhs, report.stderr);
    }

    fn x0_zero() -> SpectralState {
        SpectralState::zero(4)
    }

    #[test]
    fn coupled_check_passes_with_genuine_transformation() {
        let (w, tt, sigma, band) = coupled_fixture();
        let sys = SdeSystem::new(&w, &tt, band, &sigma).unwrap();
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.2, 49).unwrap();
        let v = ControlGrid::constant(0.12, 4, 0.25).unwrap();
        let phi = TestFunctional::EnergyBall { radius: 1.5 };
        let report =
            girsanov_check(&sys, &p, &table, &x0_zero(), 1.0, &v, phi, 20_000, 11).unwrap();
        assert!(report.stderr > 0.0);
        assert!(report.lhs > 0.05 && report.lhs < 0.95, "lhs {}", report.lhs);
        assert!(report.rhs > 0.05 && report.rhs < 0.95, "rhs {}", report.rhs);
        assert!(report.pass, "lhs {} rhs {} stderr {}", report.lhs, report.rhs, report.stderr);
    }

    #[test]
    fn transformed_path_tracks_the_control_on_average() {
        let (w, tt, _, band) = coupled_fixture();
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.2, 49).unwrap();
        let v_val = 0.3;
        let intensity = ControlGrid::constant(-v_val, 4, 0.25).unwrap();
        let shared = LevelMap::build(&p, &table, band, intensity.values()).unwrap();
        let x0 = x0_zero();
        let n = 12_000;
        let mut a0 = Vec::with_capacity(n);
        for i in 0..n {
            let stream = sample_stream(band, 1.0, derive_seed(99, i as u64)).unwrap();
            let (state, g) = transformed_terminal(
                &w, &tt, 1.0, &p, &table, &shared, &intensity, &x0, &stream,
            )
            .unwrap();
            assert!(g > 0.0);
            a0.push(state.a[0]);
        }
        let (mean, se) = mean_and_stderr(&a0);
        // the transformed stream must reproduce the controlled zero-noise
        // trajectory in the mean
        let mut target = x0_zero();
        for _ in 0..4 {
            target = w.forced_apply(&target, 0.25, v_val);
        }
        assert!(target.a[0].abs() > 6.0 * se, "no power: target {} se {se}", target.a[0]);
        assert!(
            (mean - target.a[0]).abs() <= 4.0 * se,
            "mean {mean} target {} se {se}",
            target.a[0]
        );
    }

    #[test]
    fn transformed_walk_density_matches_the_fold() {
        let (w, tt, _, band) = coupled_fixture();
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.2, 49).unwrap();
        let intensity = ControlGrid::constant(-0.12, 4, 0.25).unwrap();
        let shared = LevelMap::build(&p, &table, band, intensity.values()).unwrap();
        let sigma = SigmaPath::constant(1.0).unwrap();
        let x0 = x0_zero();
        for seed in [3, 4, 5] {
            let stream = sample_stream(band, 1.0, seed).unwrap();
            let (_, g_walk) = transformed_terminal(
                &w, &tt, 1.0, &p, &table, &shared, &intensity, &x0, &stream,
            )
            .unwrap();
            let (g_fold, _) =
                density_terminal(&stream, &intensity, &sigma, &p, &table, &shared).unwrap();
            assert_eq!(g_walk, g_fold);
        }
    }

    #[test]
    fn coupled_check_validates_inputs() {
        let (w, tt, sigma, band) = coupled_fixture();
        let p = profile_15();
        let table = EscortTable::covering(&p, 1.2, 49).unwrap();
        let v = ControlGrid::constant(0.12, 4, 0.25).unwrap();
        let phi = TestFunctional::One;
        let x0 = x0_zero();

        // state-dependent multiplier
        let log_sigma = SigmaSpec::log_form();
        let sys = SdeSystem::new(&w, &tt, band, &log_sigma).unwrap();
        assert!(matches!(
            girsanov_check(&sys, &p, &table, &x0, 1.0, &v, phi, 10, 1),
            Err(GirsanovError::InvalidCheck(_))
        ));

        let sys = SdeSystem::new(&w, &tt, band, &sigma).unwrap();
        // horizon mismatch
        let short = ControlGrid::constant(0.12, 3, 0.25).unwrap();
        assert!(matches!(
            girsanov_check(&sys, &p, &table, &x0, 1.0, &short, phi, 10, 1),
            Err(GirsanovError::MismatchedHorizon { .. })
        ));
        // too few replicas
        assert!(matches!(
            girsanov_check(&sys, &p, &table, &x0, 1.0, &v, phi, 1, 1),
            Err(GirsanovError::InvalidCheck(_))
        ));
        // degenerate ball radius
        let bad_phi = TestFunctional::EnergyBall { radius: f64::NAN };
        assert!(matches!(
            girsanov_check(&sys, &p, &table, &x0, 1.0, &v, bad_phi, 10, 1),
            Err(GirsanovError::InvalidCheck(_))
        ));
        // perturbation support escapes a narrow band
        let narrow = MarkBand::new(1.5, 12.0).unwrap();
        let sys_narrow = SdeSystem::new(&w, &tt, narrow, &sigma).unwrap();
        assert!(matches!(
            girsanov_check(&sys_narrow, &p, &table, &x0, 1.0, &v, phi, 10, 1),
            Err(GirsanovError::InvalidCheck(_))
        ));
        // profile built over a different jump transform
        let other = profile_for(1.2);
        let other_table = EscortTable::covering(&other, 1.2, 49).unwrap();
        assert!(matches!(
            girsanov_check(&sys, &other, &other_table, &x0, 1.0, &v, phi, 10, 1),
            Err(GirsanovError::InvalidCheck(_))
        ));
    }

    #[test]
    fn test_functional_forms_serialize_and_evaluate() {
        let (w, _, _, _) = coupled_fixture();
        let ball = TestFunctional::EnergyBall { radius: 0.5 };
        assert_eq!(ball.eval(&w, &SpectralState::zero(4)), 1.0);
        let mut far = SpectralState::zero(4);
        far.b[0] = 2.0;
        assert_eq!(ball.eval(&w, &far), 0.0);
        assert_eq!(TestFunctional::One.eval(&w, &far), 1.0);
        let json = serde_json::to_string(&ball).unwrap();
        assert!(json.contains("energy-ball"), "{json}");
        let back: TestFunctional = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ball);
    }
}
