// Scratch calibration driver for the inversion benchmarks (not part of the
// published API surface; used to pin acceptance-test constants).

use heatid::grid::{build_grid, l2_norm, ScalarField};
use heatid::operators::{
    apply_big_f, estimate_step_gamma, AdmissibleBox, ParamPair, ProblemSetup,
};
use heatid::phantom::add_noise;
use heatid::regularizer::{run_inversion, InversionConfig};
use std::f64::consts::PI;
use std::sync::Arc;

static mut WIDTH: f64 = 0.15;

fn bump(x: f64) -> f64 {
    let w = unsafe { WIDTH };
    (-((x - 0.5) / w).powi(2)).exp()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let phi_amp: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let t_final: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let rho: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    unsafe { WIDTH = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.15) };

    let g = build_grid(1, &[1.0], &[101], t_final, 200).unwrap();
    let a = ScalarField::constant(&g, 1.0).unwrap();
    let phi = ScalarField::from_fn(&g, |x, _| phi_amp * (PI * x).sin()).unwrap();
    let bounds = AdmissibleBox::new(0.1, 10.0).unwrap();
    let truth = ParamPair::new(
        ScalarField::from_fn(&g, |x, _| 1.0 + 0.5 * bump(x)).unwrap(),
        ScalarField::from_fn(&g, |x, _| 2.0 * bump(x)).unwrap(),
        bounds,
    )
    .unwrap();

    let mut setup = ProblemSetup::new(
        Arc::clone(&g),
        a,
        phi,
        ScalarField::zeros(&g),
        0.0,
    )
    .unwrap();
    let g_clean = apply_big_f(&truth, &setup).unwrap();
    let g_norm = l2_norm(&g_clean);
    println!("phi_amp={phi_amp} T={t_final} rho={rho} ||g||={g_norm:.4}");

    let c_init: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.3);
    let init = ParamPair::new(
        ScalarField::constant(&g, c_init).unwrap(),
        ScalarField::zeros(&g),
        bounds,
    )
    .unwrap();

    let est = {
        setup.g_data = g_clean.clone();
        estimate_step_gamma(&init, &setup, 40).unwrap()
    };
    println!(
        "gamma={:.3} ||F'||={:.5} conservative={:.3}",
        est.gamma, est.norm_f_prime, est.conservative_gamma
    );

    // Signal decomposition: residual from the c-bump alone, f-bump alone, both.
    let c_only = ParamPair::new(truth.c.clone(), init.f.clone(), bounds).unwrap();
    let f_only = ParamPair::new(init.c.clone(), truth.f.clone(), bounds).unwrap();
    let base = apply_big_f(&init, &setup).unwrap();
    let sig_c = l2_norm(&apply_big_f(&c_only, &setup).unwrap().sub(&base).unwrap());
    let sig_f = l2_norm(&apply_big_f(&f_only, &setup).unwrap().sub(&base).unwrap());
    let sig_net = l2_norm(&g_clean.sub(&base).unwrap());
    println!(
        "signals: c-only={sig_c:.5} f-only={sig_f:.5} net={sig_net:.5} taudelta(1%)={:.5}",
        3.15 * 0.01 * g_norm
    );

    for noise_rel in [0.04, 0.02, 0.01] {
        let mut errs_c = Vec::new();
        let mut errs_f = Vec::new();
        let mut kstars = Vec::new();
        for seed in 1..=5u64 {
            let delta = noise_rel * g_norm;
            let g_noisy = add_noise(&g_clean, delta, seed).unwrap();
            setup.g_data = g_noisy;
            setup.delta = delta;
            let config = InversionConfig::from_rules(est.gamma, delta, rho, 0.2).unwrap();
            let result = run_inversion(&setup, &config, &init, Some(&truth)).unwrap();
            let last = result.records.last().unwrap();
            // f-error monotone fraction over pre-stop cycles
            let mut ok = 0;
            let mut total = 0;
            for w in result.records.windows(2) {
                if let (Some(e1), Some(e0)) = (w[1].err_f, w[0].err_f) {
                    total += 1;
                    if e1 <= e0 * (1.0 + 1e-12) {
                        ok += 1;
                    }
                }
            }
            // handle k=0 record (err present but landweber None)
            errs_c.push(last.err_c.unwrap());
            errs_f.push(last.err_f.unwrap());
            kstars.push(result.k_stop);
            if seed == 1 {
                println!(
                    "  noise={noise_rel} seed={seed} k*={} stop={:?} err_c={:.4} err_f={:.4} f-mono {}/{}",
                    result.k_stop,
                    result.stop_reason,
                    last.err_c.unwrap(),
                    last.err_f.unwrap(),
                    ok,
                    total
                );
            }
        }
        let med = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        println!(
            "  noise={noise_rel}: median err_c={:.4} err_f={:.4} k*: {:?}",
            med(&mut errs_c),
            med(&mut errs_f),
            kstars
        );
    }
    // Criterion-6 style checks at 1% noise, seed 1.
    {
        let delta = 0.01 * g_norm;
        setup.g_data = add_noise(&g_clean, delta, 1).unwrap();
        setup.delta = delta;
        let config = InversionConfig::from_rules(est.gamma, delta, rho, 0.2).unwrap();
        let result = run_inversion(&setup, &config, &init, Some(&truth)).unwrap();
        let tau_delta = result.tau_delta;
        let kstar = result.k_stop as f64;
        let sum_lw: f64 = result
            .records
            .iter()
            .filter_map(|r| r.residual_landweber)
            .map(|v| v * v)
            .sum();
        let chain_ok = result.records.iter().skip(1).all(|r| {
            heatid::regularizer::chain_holds(r.residual_unified, r.residual_landweber.unwrap())
        });
        println!(
            "kfinite: k*(taudelta)^2={:.6e} <= sum_lw^2={:.6e} : {}  chain_ok={} backtracked_alphas={:?}",
            kstar * tau_delta * tau_delta,
            sum_lw,
            kstar * tau_delta * tau_delta <= sum_lw,
            chain_ok,
            result.records.iter().rev().take(3).filter_map(|r| r.alpha_used).collect::<Vec<_>>()
        );
    }
    // Noise-free summability over k_max = 500.
    {
        setup.g_data = g_clean.clone();
        setup.delta = 0.0;
        let mut config = InversionConfig::from_rules(est.gamma, 0.0, rho, 0.2).unwrap();
        config.k_max = 500;
        let result = run_inversion(&setup, &config, &init, Some(&truth)).unwrap();
        let squares: Vec<f64> = result
            .records
            .iter()
            .map(|r| r.residual_unified * r.residual_unified)
            .collect();
        let total: f64 = squares.iter().sum();
        let last = squares.last().unwrap();
        println!(
            "noise-free: stop={:?} k={} total={:.6e} last={:.6e} last/total={:.3e}",
            result.stop_reason,
            result.k_stop,
            total,
            last,
            last / total
        );
    }
    let err0_c = l2_norm(&init.c.sub(&truth.c).unwrap());
    let err0_f = l2_norm(&init.f.sub(&truth.f).unwrap());
    println!("init errors: err_c={err0_c:.4} err_f={err0_f:.4}");
}
