//! Heavy-tailed jump density, inverse tail transform, and exact
//! finite-activity sampling of the driving random measure.
//!
//! Jumps are represented through marks: a mark z > 0 drawn uniformly from a
//! band (z_min, z_max] maps to the signed jump value sign * c(z), where c is
//! the decreasing inverse of the density's tail mass. Small marks are large
//! jumps, so a mark floor caps the jump magnitude and a mark ceiling drops
//! the smallest jumps (finite activity).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LevyError {
    #[error("invalid density spec: {0}")]
    InvalidSpec(String),
    #[error("tail mass requires a positive jump size, got {0}")]
    NonPositiveJumpSize(f64),
    #[error("the tail transform has no value at mark 0 (no atom at the origin)")]
    ZeroMark,
    #[error("stream horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
}

/// Symmetric power-law jump density k(r) = K0 * |r|^(-alpha-1), r != 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevyDensitySpec {
    /// Tail index, in (1, 2].
    pub alpha: f64,
    /// Density scale, > 0.
    pub k0: f64,
    /// Tail-regime threshold, > 0 (jump-size units).
    pub r0: f64,
    /// Optional maximum jump magnitude (> r0) for finite-second-moment runs.
    pub jump_cap: Option<f64>,
}

impl LevyDensitySpec {
    pub fn new(alpha: f64, k0: f64, r0: f64, jump_cap: Option<f64>) -> Result<Self, LevyError> {
        if !(alpha > 1.0 && alpha <= 2.0) {
            return Err(LevyError::InvalidSpec(format!("alpha must lie in (1, 2], got {alpha}")));
        }
        if !(k0 > 0.0) {
            return Err(LevyError::InvalidSpec(format!("k0 must be positive, got {k0}")));
        }
        if !(r0 > 0.0) {
            return Err(LevyError::InvalidSpec(format!("r0 must be positive, got {r0}")));
        }
        if let Some(cap) = jump_cap {
            if !(cap > r0) {
                return Err(LevyError::InvalidSpec(format!(
                    "jump_cap must exceed r0 = {r0}, got {cap}"
                )));
            }
        }
        Ok(Self { alpha, k0, r0, jump_cap })
    }

    /// Density value k(r); symmetric in r.
    pub fn density(&self, r: f64) -> f64 {
        assert!(r != 0.0, "density has no atom at 0");
        self.k0 * r.abs().powf(-self.alpha - 1.0)
    }

    /// Mass of jumps of magnitude exceeding `rho`; respects `jump_cap`.
    pub fn tail_mass(&self, rho: f64) -> Result<f64, LevyError> {
        if !(rho > 0.0) {
            return Err(LevyError::NonPositiveJumpSize(rho));
        }
        let raw = (self.k0 / self.alpha) * rho.powf(-self.alpha);
        Ok(match self.jump_cap {
            Some(cap) if rho >= cap => 0.0,
            Some(cap) => raw - (self.k0 / self.alpha) * cap.powf(-self.alpha),
            None => raw,
        })
    }

    /// Mark floor induced by `jump_cap`: marks below it correspond to jumps
    /// larger than the cap and are excluded from capped bands.
    pub fn mark_floor(&self) -> f64 {
        match self.jump_cap {
            Some(cap) => (self.k0 / self.alpha) * cap.powf(-self.alpha),
            None => 0.0,
        }
    }
}

/// Decreasing inverse c of the uncapped tail mass, with odd extension to
/// negative marks: c(z) = delta0 * z^(-1/alpha) for z > 0, c(-z) = -c(z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailTransform {
    pub delta0: f64,
    pub r1: f64,
    pub spec: LevyDensitySpec,
}

impl TailTransform {
    pub fn new(spec: LevyDensitySpec) -> Self {
        let ratio = spec.k0 / spec.alpha;
        Self {
            delta0: ratio.powf(1.0 / spec.alpha),
            r1: ratio * spec.r0.powf(-spec.alpha),
            spec,
        }
    }

    /// Signed transform value; errors at the excluded origin.
    pub fn c_transform(&self, r: f64) -> Result<f64, LevyError> {
        if r == 0.0 {
            return Err(LevyError::ZeroMark);
        }
        Ok(self.positive(r.abs()).copysign(r))
    }

    /// Transform value for a known-positive mark (hot path).
    #[inline]
    pub fn positive(&self, z: f64) -> f64 {
        debug_assert!(z > 0.0);
        self.delta0 * z.powf(-1.0 / self.spec.alpha)
    }
}

/// Half-open mark band (lo, hi]; empty when lo >= hi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkBand {
    pub lo: f64,
    pub hi: f64,
}

impl MarkBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self, LevyError> {
        if !(lo >= 0.0) || !hi.is_finite() {
            return Err(LevyError::InvalidSpec(format!(
                "mark band needs 0 <= lo and finite hi, got ({lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo).max(0.0)
    }
}

/// One jump event: time, positive mark, and sign of the jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub z: f64,
    pub sign: f64,
}

/// A finite-activity realization of the driving random measure on a
/// two-sided symmetric mark band, time-sorted; the single source of
/// randomness per path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub horizon: f64,
    pub band: MarkBand,
    pub events: Vec<Event>,
    pub seed: u64,
}

impl EventStream {
    /// Restriction to a shorter window. The driving measure restricted to
    /// (0, horizon] is again the banded measure on that window, so nested
    /// horizons share every event below the cut: pathwise common randomness
    /// for comparisons across observation times.
    pub fn truncated(&self, horizon: f64) -> Result<EventStream, LevyError> {
        if !(horizon > 0.0) {
            return Err(LevyError::NonPositiveHorizon(horizon));
        }
        let horizon = horizon.min(self.horizon);
        Ok(EventStream {
            horizon,
            band: self.band,
            events: self.events.iter().filter(|e| e.t <= horizon).copied().collect(),
            seed: self.seed,
        })
    }
}

/// Samples a stream on (0, horizon]: Poisson count with mean
/// 2 * band.width() * horizon (both sign bands), i.i.d. uniform times and
/// marks, fair signs; fully deterministic given the seed.
pub fn sample_stream(band: MarkBand, horizon: f64, seed: u64) -> Result<EventStream, LevyError> {
    if !(horizon > 0.0) {
        return Err(LevyError::NonPositiveHorizon(horizon));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    if !band.is_empty() {
        let mean = 2.0 * band.width() * horizon;
        let count = Poisson::new(mean)
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0);
        events.reserve(count);
        for _ in 0..count {
            let t = horizon * (1.0 - rng.gen::<f64>());
            let z = band.lo + band.width() * (1.0 - rng.gen::<f64>());
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            events.push(Event { t, z, sign });
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        // Coincident times are resolved by re-drawing the later one.
        loop {
            let mut collided = false;
            for i in 1..events.len() {
                if events[i].t == events[i - 1].t {
                    events[i].t = horizon * (1.0 - rng.gen::<f64>());
                    collided = true;
                }
            }
            if !collided {
                break;
            }
            events.sort_by(|a, b| a.t.total_cmp(&b.t));
        }
    }
    Ok(EventStream { horizon, band, events, seed })
}

/// Banded second moment of the jump values, with a divergence flag for the
/// untruncated measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecondMoment {
    /// 2 * int over (lo, hi] of c(z)^2 dz; infinite when lo = 0.
    pub banded: f64,
    /// Whether the full-measure integral of squared jump values diverges
    /// (always, unless a jump cap bounds the jump magnitude and alpha < 2).
    pub full_measure_diverges: bool,
}

pub fn second_moment(tt: &TailTransform, band: MarkBand) -> SecondMoment {
    let alpha = tt.spec.alpha;
    let full_measure_diverges = tt.spec.jump_cap.is_none() || alpha == 2.0;
    if band.is_empty() {
        return SecondMoment { banded: 0.0, full_measure_diverges };
    }
    let d2 = tt.delta0 * tt.delta0;
    let banded = if alpha == 2.0 {
        if band.lo == 0.0 {
            f64::INFINITY
        } else {
            2.0 * d2 * (band.hi / band.lo).ln()
        }
    } else {
        // exponent 1 - 2/alpha < 0 on (1, 2)
        let e = 1.0 - 2.0 / alpha;
        if band.lo == 0.0 {
            f64::INFINITY
        } else {
            2.0 * d2 * (band.hi.powf(e) - band.lo.powf(e)) / e
        }
    };
    SecondMoment { banded, full_measure_diverges }
}

/// Audit row for CSV export of a stream.
#[derive(Debug, Serialize)]
pub struct StreamRow {
    pub t: f64,
    pub z: f64,
    pub sign: f64,
    pub jump_value: f64,
}

pub fn stream_rows(stream: &EventStream, tt: &TailTransform) -> Vec<StreamRow> {
    stream
        .events
        .iter()
        .map(|e| StreamRow { t: e.t, z: e.z, sign: e.sign, jump_value: e.sign * tt.positive(e.z) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec_15() -> LevyDensitySpec {
        LevyDensitySpec::new(1.5, 1.5, 1.0, None).unwrap()
    }

    #[test]
    fn rejects_out_of_range_parameters() {
        assert!(LevyDensitySpec::new(1.0, 1.0, 1.0, None).is_err());
        assert!(LevyDensitySpec::new(2.5, 1.0, 1.0, None).is_err());
        assert!(LevyDensitySpec::new(1.5, 0.0, 1.0, None).is_err());
        assert!(LevyDensitySpec::new(1.5, 1.0, -1.0, None).is_err());
        assert!(LevyDensitySpec::new(1.5, 1.0, 1.0, Some(0.5)).is_err());
        assert!(LevyDensitySpec::new(1.5, 1.0, 1.0, Some(2.0)).is_ok());
    }

    #[test]
    fn density_is_symmetric() {
        let s = spec_15();
        assert_abs_diff_eq!(s.density(2.0), s.density(-2.0), epsilon = 1e-15);
    }

    #[test]
    fn tail_mass_closed_form() {
        // int_1^inf 1.5 s^(-2.5) ds = 1
        assert_abs_diff_eq!(spec_15().tail_mass(1.0).unwrap(), 1.0, epsilon = 1e-14);
        // alpha = 2, K0 = 2: mass = rho^(-2)
        let s2 = LevyDensitySpec::new(2.0, 2.0, 1.0, None).unwrap();
        assert_abs_diff_eq!(s2.tail_mass(2.0).unwrap(), 0.25, epsilon = 1e-14);
        // vanishing tail
        assert!(spec_15().tail_mass(1e12).unwrap() < 1e-15);
        assert!(spec_15().tail_mass(0.0).is_err());
        assert!(spec_15().tail_mass(-1.0).is_err());
    }

    #[test]
    fn tail_mass_respects_cap() {
        let s = LevyDensitySpec::new(1.5, 1.5, 1.0, Some(4.0)).unwrap();
        let uncapped = spec_15().tail_mass(2.0).unwrap();
        let capped = s.tail_mass(2.0).unwrap();
        assert_abs_diff_eq!(capped, uncapped - s.mark_floor(), epsilon = 1e-14);
        assert_eq!(s.tail_mass(5.0).unwrap(), 0.0);
    }

    #[test]
    fn transform_closed_form_and_oddness() {
        let tt = TailTransform::new(spec_15());
        assert_abs_diff_eq!(tt.delta0, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(tt.r1, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(tt.c_transform(8.0).unwrap(), 0.25, epsilon = 1e-14);
        let r = 3.7;
        assert_abs_diff_eq!(
            tt.c_transform(-r).unwrap(),
            -tt.c_transform(r).unwrap(),
            epsilon = 1e-15
        );
        assert!(tt.c_transform(0.0).is_err());
    }

    #[test]
    fn inverse_pair_on_log_grid() {
        let spec = spec_15();
        let tt = TailTransform::new(spec);
        // c(tail_mass(rho)) = rho over [r0/10, 100 r0], relative 1e-10
        for i in 0..=40 {
            let rho = 0.1 * 1000f64.powf(i as f64 / 40.0);
            let m = spec.tail_mass(rho).unwrap();
            let back = tt.c_transform(m).unwrap();
            assert!((back - rho).abs() <= 1e-10 * rho, "rho = {rho}: {back}");
        }
        let rho = 2.5;
        let back = tt.c_transform(spec.tail_mass(rho).unwrap()).unwrap();
        assert_abs_diff_eq!(back, rho, epsilon = 1e-12);
    }

    #[test]
    fn second_moment_closed_form() {
        let tt = TailTransform::new(spec_15());
        let sm = second_moment(&tt, MarkBand::new(1.0, 8.0).unwrap());
        assert_abs_diff_eq!(sm.banded, 3.0, epsilon = 1e-12);
        assert!(sm.full_measure_diverges);

        let empty = second_moment(&tt, MarkBand::new(2.0, 2.0).unwrap());
        assert_eq!(empty.banded, 0.0);

        // widening the band never decreases the value
        let narrow = second_moment(&tt, MarkBand::new(1.5, 6.0).unwrap());
        assert!(sm.banded >= narrow.banded);

        // capped spec with alpha < 2 has a finite full-measure moment
        let capped = LevyDensitySpec::new(1.5, 1.5, 1.0, Some(4.0)).unwrap();
        let ttc = TailTransform::new(capped);
        assert!(!second_moment(&ttc, MarkBand::new(1.0, 8.0).unwrap()).full_measure_diverges);

        // mark floor 0 means unbounded jumps: banded value diverges
        let open = second_moment(&tt, MarkBand::new(0.0, 8.0).unwrap());
        assert!(open.banded.is_infinite());
    }

    #[test]
    fn empty_band_gives_empty_stream() {
        let s = sample_stream(MarkBand::new(0.0, 0.0).unwrap(), 1.0, 7).unwrap();
        assert!(s.events.is_empty());
    }

    #[test]
    fn streams_are_deterministic() {
        let band = MarkBand::new(0.0, 10.0).unwrap();
        let a = sample_stream(band, 2.0, 42).unwrap();
        let b = sample_stream(band, 2.0, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_stream(band, 2.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stream_times_sorted_and_in_range() {
        let band = MarkBand::new(0.5, 10.0).unwrap();
        let s = sample_stream(band, 3.0, 11).unwrap();
        assert!(!s.events.is_empty());
        for w in s.events.windows(2) {
            assert!(w[0].t < w[1].t);
        }
        for e in &s.events {
            assert!(e.t > 0.0 && e.t <= 3.0);
            assert!(e.z > 0.5 && e.z <= 10.0);
            assert!(e.sign == 1.0 || e.sign == -1.0);
        }
    }

    #[test]
    fn count_statistics_match_poisson() {
        let band = MarkBand::new(0.0, 10.0).unwrap();
        let horizon = 1.0;
        let n = 10_000usize;
        let counts: Vec<f64> = (0..n)
            .map(|k| sample_stream(band, horizon, k as u64).unwrap().events.len() as f64)
            .collect();
        let mean_expected = 2.0 * band.width() * horizon;
        let m = counts.iter().sum::<f64>() / n as f64;
        let var = counts.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / (n as f64 - 1.0);
        let se_mean = (mean_expected / n as f64).sqrt();
        assert!((m - mean_expected).abs() <= 4.0 * se_mean, "mean {m}");
        // Poisson variance equals the mean; SE of sample variance ~ sqrt(2/n)*mean
        let se_var = mean_expected * (2.0 / n as f64).sqrt() * 1.5;
        assert!((var - mean_expected).abs() <= 4.0 * se_var, "var {var}");
    }

    #[test]
    fn signed_jump_values_are_symmetric() {
        let tt = TailTransform::new(spec_15());
        let band = MarkBand::new(1.0, 50.0).unwrap();
        let mut vals = Vec::new();
        let mut seed = 0u64;
        while vals.len() < 100_000 {
            let s = sample_stream(band, 10.0, seed).unwrap();
            vals.extend(s.events.iter().map(|e| e.sign * tt.positive(e.z)));
            seed += 1;
        }
        let (mean, se) = crate::numeric::mean_and_stderr(&vals);
        assert!(mean.abs() <= 4.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn stream_rows_carry_jump_values() {
        let tt = TailTransform::new(spec_15());
        let s = sample_stream(MarkBand::new(1.0, 4.0).unwrap(), 1.0, 3).unwrap();
        let rows = stream_rows(&s, &tt);
        assert_eq!(rows.len(), s.events.len());
        for (r, e) in rows.iter().zip(&s.events) {
            assert_abs_diff_eq!(r.jump_value, e.sign * tt.positive(e.z), epsilon = 1e-15);
        }
    }
}
