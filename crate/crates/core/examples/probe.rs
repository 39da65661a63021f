use ingarch_cpd::pqmle::{fit, Window};
use ingarch_cpd::retrospective::{scan_statistic, RetroConfig};
use ingarch_cpd::*;
use std::time::Instant;

fn main() {
    let spec = ModelSpec::negbin(1, 1, 1.0).unwrap();
    let theta0 = IngarchParams::new(0.4, vec![0.15], vec![0.2]).unwrap();
    let series = simulate(&spec, &theta0, 1000, 500, 99).unwrap();

    let t0 = Instant::now();
    let full = fit(
        &series,
        &spec,
        Window::new(1, 1000).unwrap(),
        1,
        None,
        &FitOptions::default(),
    )
    .unwrap();
    println!(
        "full-window fit: {:?} iters={} conv={} theta={:?}",
        t0.elapsed(),
        full.iterations,
        full.converged,
        full.theta_hat.to_vec()
    );

    let t0 = Instant::now();
    let mut init = Some(full.theta_hat.clone());
    let mut total_iters = 0usize;
    for k in 500..600 {
        let r = fit(
            &series,
            &spec,
            Window::new(1, k).unwrap(),
            1,
            init.as_ref(),
            &FitOptions::default(),
        )
        .unwrap();
        total_iters += r.iterations;
        init = Some(r.theta_hat);
    }
    println!(
        "100 warm left fits: {:?}, avg iters {:.1}",
        t0.elapsed(),
        total_iters as f64 / 100.0
    );

    let t0 = Instant::now();
    let prof = scan_statistic(&series, &spec, &RetroConfig::default()).unwrap();
    println!(
        "one scan n=1000: {:?} (stat {:.3}, {} splits, {} nonconv)",
        t0.elapsed(),
        prof.statistic,
        prof.profile.len(),
        prof.nonconverged_ks.len()
    );
}
