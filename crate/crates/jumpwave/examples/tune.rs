//! Scratch tuning runs behind the default experiment parameters. Not part of
//! the test suite; run with --release.

use jumpwave::ergodics::{asf_diagnostic, irreducibility_probe, kb_average, PseudometricFamily};
use jumpwave::girsanov::{EscortTable, PerturbProfile};
use jumpwave::levy::{LevyDensitySpec, MarkBand, TailTransform};
use jumpwave::operators::{SpectralModel, StiffnessForm, WaveModelSpec};
use jumpwave::spde::{SdeSystem, SigmaSpec};

fn unit_energy_state(model: &WaveModelSpec) -> <WaveModelSpec as SpectralModel>::State {
    let dim = model.state_dim();
    let mut coeffs = vec![0.0; dim];
    for (i, c) in coeffs.iter_mut().enumerate().take(6) {
        *c = 1.0 / (1.0 + i as f64);
    }
    let state = model.read_state(&coeffs);
    let norm = model.energy(&state);
    for c in &mut coeffs {
        *c /= norm;
    }
    model.read_state(&coeffs)
}

fn main() {
    let t = std::f64::consts::TAU;
    let spec = LevyDensitySpec::new(1.5, 1.0, 1.0, Some(1.5)).unwrap();
    let tt = TailTransform::new(spec);
    let band = MarkBand::new(spec.mark_floor(), 8.0).unwrap();
    println!("mark floor {:.4}, band ({:.4}, {:.1}]", spec.mark_floor(), band.lo, band.hi);

    // Frozen hitting config: confirm at acceptance scale.
    {
        let model = WaveModelSpec::new(2, 0.5, StiffnessForm::Restoring).unwrap();
        let x = unit_energy_state(&model);
        let sigma = SigmaSpec::constant(0.2).unwrap();
        let sys = SdeSystem::new(&model, &tt, band, &sigma).unwrap();
        let start = std::time::Instant::now();
        let rep = irreducibility_probe(&sys, &x, 0.5, 2.0 * t, 10_000, 7).unwrap();
        println!(
            "hitting modes 2 sigma 0.2 N 1e4 ({:.1}s): p_hat {:.4} lower {:.4e} hits {}",
            start.elapsed().as_secs_f64(),
            rep.p_hat,
            rep.lower,
            rep.hits
        );
    }

    // Smoothing certificates over six levels at the 16-mode default, sweeping
    // the multiplier; trend wants naive(6) above coupled(6) with margin.
    let model = WaveModelSpec::new(16, 0.0, StiffnessForm::Restoring).unwrap();
    let x = unit_energy_state(&model);
    let profile = PerturbProfile::new(tt).unwrap();
    let table = EscortTable::covering(&profile, 1.5, 61).unwrap();
    let scales: Vec<f64> = (1..=6).map(|n| 1.1 / (n as f64).sqrt()).collect();
    let times: Vec<f64> = (1..=6).map(|n| n as f64 * t).collect();
    let fam = PseudometricFamily::new(scales, times).unwrap();
    let mut h_coeffs = vec![0.0; model.state_dim()];
    h_coeffs[0] = 1.0;
    let h_raw = model.read_state(&h_coeffs);
    h_coeffs[0] = 1.0 / model.energy(&h_raw);
    let h = model.read_state(&h_coeffs);
    for sigma_c in [0.45, 0.6, 0.8] {
        let sigma = SigmaSpec::constant(sigma_c).unwrap();
        let sys = SdeSystem::new(&model, &tt, band, &sigma).unwrap();
        let start = std::time::Instant::now();
        match asf_diagnostic(&sys, &profile, &table, &x, &h, &[0.05, 0.1], &fam, t / 48.0, 2000, 21)
        {
            Ok(out) => {
                println!("asf sigma {sigma_c} replicas 2000 ({:.1}s):", start.elapsed().as_secs_f64());
                for row in &out.rows {
                    println!(
                        "  level {} eps {:.2}: coupled {:.4} naive {:.4} energy {:.3e} resid {:.3e} spread {:.3e}",
                        row.level,
                        row.eps,
                        row.coupled,
                        row.naive,
                        row.control_energy,
                        row.control_residual,
                        row.weight_spread
                    );
                }
                for &eps in &[0.05, 0.1] {
                    let col: Vec<f64> = out
                        .rows
                        .iter()
                        .filter(|r| r.eps == eps)
                        .map(|r| r.coupled)
                        .collect();
                    let mono = col.windows(2).all(|w| w[1] <= w[0]);
                    let steps: Vec<String> =
                        col.windows(2).map(|w| format!("{:+.4}", w[1] - w[0])).collect();
                    println!("  eps {eps}: non-increasing {mono} steps [{}]", steps.join(", "));
                }
            }
            Err(e) => println!("asf sigma {sigma_c}: {e}"),
        }
    }

    // Support-chain ingredients at the frozen hitting config: cloud ball
    // frequencies at a deep observation time and hitting bounds from
    // boundary-energy centers.
    {
        let model = WaveModelSpec::new(2, 0.5, StiffnessForm::Restoring).unwrap();
        let x = unit_energy_state(&model);
        let sigma = SigmaSpec::constant(0.2).unwrap();
        let sys = SdeSystem::new(&model, &tt, band, &sigma).unwrap();
        let euclid = |s: &[f64]| s.iter().map(|a| a * a).sum::<f64>().sqrt();
        let start = std::time::Instant::now();
        let kb = kb_average(&sys, &x, &[12.0 * t], 0.0, 2000, 100.0, 31).unwrap();
        let m = kb.measures[0].samples().len() as f64;
        let freq = |r: f64| {
            kb.measures[0].samples().iter().filter(|s| euclid(s) <= r).count() as f64 / m
        };
        println!(
            "kb cloud modes 2 sigma 0.2 t 75.4 n 2000 ({:.1}s): freq<=0.5 {:.4} <=1.0 {:.4} <=1.5 {:.4}",
            start.elapsed().as_secs_f64(),
            freq(0.5),
            freq(1.0),
            freq(1.5)
        );
        for cap in [1.0f64, 1.5] {
            let mut bdry = vec![0.0; model.state_dim()];
            model.write_state(&x, &mut bdry);
            for c in &mut bdry {
                *c *= cap;
            }
            let center = model.read_state(&bdry);
            for delta in [0.5f64, 1.0] {
                let rep = irreducibility_probe(&sys, &center, delta, 2.0 * t, 4000, 13).unwrap();
                println!(
                    "  boundary center energy {cap} delta {delta}: p_hat {:.4} lower {:.4e}",
                    rep.p_hat, rep.lower
                );
            }
        }
    }
}
