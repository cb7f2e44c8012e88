//! Shared numerical kernels: adaptive quadrature, cubic Hermite blending,
//! and small statistics helpers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("quadrature did not reach tolerance {tol:e} after {segments} segments")]
    QuadratureStalled { tol: f64, segments: usize },
}

// 15-point Kronrod abscissae on [0, 1] side (symmetric), with the embedded
// 7-point Gauss rule on the odd indices.
const GK_NODES: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.000000000000000,
];
const GK_WEIGHTS_K: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const GK_WEIGHTS_G: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

/// One Gauss-Kronrod 7-15 evaluation on [a, b]; returns the Kronrod value and
/// the |Kronrod - Gauss| error estimate.
pub(crate) fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut kronrod = 0.0;
    let mut gauss = 0.0;
    for (i, &x) in GK_NODES.iter().enumerate() {
        let fsum = if x == 0.0 {
            f(mid)
        } else {
            f(mid - half * x) + f(mid + half * x)
        };
        kronrod += GK_WEIGHTS_K[i] * fsum;
        if i % 2 == 1 {
            gauss += GK_WEIGHTS_G[i / 2] * fsum;
        }
    }
    (kronrod * half, (kronrod - gauss).abs() * half.abs())
}

/// Adaptive quadrature of `f` over [a, b] to absolute tolerance `abs_tol`,
/// by bisecting the segment with the largest error estimate.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, abs_tol: f64) -> Result<f64, NumericError> {
    if a == b {
        return Ok(0.0);
    }
    const MAX_SEGMENTS: usize = 4000;
    let mut segments = {
        let (val, err) = gk15(f, a, b);
        vec![(a, b, val, err)]
    };
    loop {
        let total_err: f64 = segments.iter().map(|s| s.3).sum();
        if total_err <= abs_tol {
            return Ok(segments.iter().map(|s| s.2).sum());
        }
        if segments.len() >= MAX_SEGMENTS {
            return Err(NumericError::QuadratureStalled { tol: abs_tol, segments: segments.len() });
        }
        let worst = segments
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap();
        let (lo, hi, _, _) = segments.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // Interval at floating-point resolution; accept its estimate.
            let (val, _) = gk15(f, lo, hi);
            segments.push((lo, hi, val, 0.0));
            continue;
        }
        let (v1, e1) = gk15(f, lo, mid);
        let (v2, e2) = gk15(f, mid, hi);
        segments.push((lo, mid, v1, e1));
        segments.push((mid, hi, v2, e2));
    }
}

/// Cubic Hermite segment through (x0, y0) with slope m0 and (x1, y1) with
/// slope m1; C^1 when chained with matching endpoint data.
#[derive(Debug, Clone, Copy)]
pub struct CubicBlend {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub m0: f64,
    pub m1: f64,
}

impl CubicBlend {
    pub fn value(&self, x: f64) -> f64 {
        let dx = self.x1 - self.x0;
        let t = (x - self.x0) / dx;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.y0 + h10 * dx * self.m0 + h01 * self.y1 + h11 * dx * self.m1
    }

    pub fn slope(&self, x: f64) -> f64 {
        let dx = self.x1 - self.x0;
        let t = (x - self.x0) / dx;
        let t2 = t * t;
        let d00 = (6.0 * t2 - 6.0 * t) / dx;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = (-6.0 * t2 + 6.0 * t) / dx;
        let d11 = 3.0 * t2 - 2.0 * t;
        d00 * self.y0 + d10 * self.m0 + d01 * self.y1 + d11 * self.m1
    }
}

/// SplitMix64 step-and-mix: maps (master seed, replica index) to a
/// well-separated stream seed, so parallel replicas stay reproducible under
/// any scheduling order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two-sided 95% normal quantile used by the Wilson intervals.
pub const WILSON_Z_95: f64 = 1.959963984540054;

/// Wilson score lower confidence bound for a binomial proportion.
pub fn wilson_lower(hits: u64, trials: u64, z: f64) -> f64 {
    assert!(trials > 0, "wilson_lower needs at least one trial");
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = p + z2 / (2.0 * n);
    let margin = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - margin) / denom).max(0.0)
}

/// Sample mean and its standard error.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    assert!(n > 1.0, "need at least two samples");
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
