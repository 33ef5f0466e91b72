// Scratch calibration driver for the 2D thermography benchmark.

use heatid::grid::{build_grid, l2_norm, ScalarField};
use heatid::operators::{
    apply_big_f, estimate_step_gamma, AdmissibleBox, ParamPair, ProblemSetup,
};
use heatid::phantom::{add_noise, make_tumor_phantom, pennes_to_model, PennesParams, TumorSpec};
use heatid::regularizer::{run_inversion, InversionConfig};
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let phi_amp: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let t_final: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.15);
    let omega_bg: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let qm_bg: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let rho: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let m_steps: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(64);
    let gamma_scale: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let cg_maxit: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(25);

    let n = 49;
    let g = build_grid(2, &[1.0, 1.0], &[n, n], t_final, m_steps).unwrap();
    let bg = PennesParams::uniform(&g, omega_bg, qm_bg, 0.0, 1.0).unwrap();
    let spec = TumorSpec {
        center: (0.55, 0.45),
        radius: 0.15,
        perfusion_contrast: 3.0,
        metabolic_contrast: 2.0,
        smoothing_width: 0.05,
    };
    let f_floor: f64 = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(f64::NEG_INFINITY);
    let bounds = if f_floor.is_finite() {
        AdmissibleBox::new(0.05, 60.0)
            .unwrap()
            .with_f_bounds(f_floor, f64::INFINITY)
            .unwrap()
    } else {
        AdmissibleBox::new(0.05, 60.0).unwrap()
    };
    let phantom = make_tumor_phantom(&spec, &bg, &g, bounds).unwrap();
    let truth = &phantom.truth;

    // phi_shape = 0: product of sines; > 0: plateau ramp with that threshold.
    let phi_shape: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let phi = ScalarField::from_fn(&g, |x, y| {
        let s = (PI * x).sin() * (PI * y).sin();
        if phi_shape > 0.0 {
            phi_amp * (s / phi_shape).min(1.0)
        } else {
            phi_amp * s
        }
    })
    .unwrap()
    .with_zero_boundary();
    let mut setup = ProblemSetup::new(
        Arc::clone(&g),
        phantom.reduction.a.clone(),
        phi,
        ScalarField::zeros(&g),
        0.0,
    )
    .unwrap();
    let g_clean = apply_big_f(truth, &setup).unwrap();
    let g_norm = l2_norm(&g_clean);

    let red_bg = pennes_to_model(&bg, &g).unwrap();
    let init = ParamPair::new(red_bg.c.clone(), red_bg.f.clone(), bounds).unwrap();
    let base = apply_big_f(&init, &setup).unwrap();
    let c_only = ParamPair::new(truth.c.clone(), init.f.clone(), bounds).unwrap();
    let f_only = ParamPair::new(init.c.clone(), truth.f.clone(), bounds).unwrap();
    let sig_c = l2_norm(&apply_big_f(&c_only, &setup).unwrap().sub(&base).unwrap());
    let sig_f = l2_norm(&apply_big_f(&f_only, &setup).unwrap().sub(&base).unwrap());
    let sig_net = l2_norm(&g_clean.sub(&base).unwrap());
    let taudelta = 3.15 * 0.01 * g_norm;
    println!(
        "amp={phi_amp} T={t_final} wbg={omega_bg} qbg={qm_bg} rho={rho} M={m_steps} ||g||={g_norm:.4} c-sig={sig_c:.5} f-sig={sig_f:.5} net={sig_net:.5} taudelta={taudelta:.5} runway={:.2}",
        sig_net / taudelta
    );

    setup.g_data = g_clean.clone();
    let est = estimate_step_gamma(&init, &setup, 30).unwrap();
    println!("gamma={:.2} ||F'||={:.5}", est.gamma, est.norm_f_prime);

    let start = Instant::now();
    let delta = 0.01 * g_norm;
    let seed: u64 = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(1);
    setup.g_data = add_noise(&g_clean, delta, seed).unwrap();
    setup.delta = delta;
    let eta_assumed: f64 = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let mut config =
        InversionConfig::from_rules(est.gamma * gamma_scale, delta, rho, eta_assumed).unwrap();
    config.inner_cg_maxit = cg_maxit;
    let result = run_inversion(&setup, &config, &init, Some(truth)).unwrap();
    let last = result.records.last().unwrap();

    // Localization metrics.
    let c_rec = &result.pair.c;
    let c_bg_val = omega_bg;
    let mut wsum = 0.0;
    let mut xsum = 0.0;
    let mut ysum = 0.0;
    let mut cmax: f64 = 0.0;
    for (idx, &v) in c_rec.values().iter().enumerate() {
        let excess = (v - c_bg_val).max(0.0);
        let (x, y) = g.coords(idx);
        let w = g.quad_weight(idx) * excess;
        wsum += w;
        xsum += w * x;
        ysum += w * y;
        cmax = cmax.max(v);
    }
    let (cx, cy) = (xsum / wsum, ysum / wsum);
    let dist = ((cx - 0.55f64).powi(2) + (cy - 0.45f64).powi(2)).sqrt();
    let cells = dist / g.hx();
    println!(
        "k*={} stop={:?} err_c={:.4} err_f={:.4} centroid=({cx:.4},{cy:.4}) dist={cells:.2} cells contrast={:.3} wall={:.1}s",
        result.k_stop,
        result.stop_reason,
        last.err_c.unwrap(),
        last.err_f.unwrap(),
        cmax / c_bg_val,
        start.elapsed().as_secs_f64()
    );
}
