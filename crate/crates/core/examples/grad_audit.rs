//! Runs the gradient audit: finite differences for every op and a full
//! denoiser block, plus the dead-parameter scan.

use std::time::Instant;

use scenecomp::audit::{grad_audit, GRAD_TOL};

fn main() -> scenecomp::Result<()> {
    let start = Instant::now();
    let report = grad_audit(20)?;
    for (name, err) in report.ops.iter().chain(&report.block) {
        let flag = if *err < GRAD_TOL { "ok  " } else { "FAIL" };
        println!("{flag} {name:32} {err:.2e}");
    }
    println!("parameters checked: {}", report.params_checked);
    for name in &report.dead_params {
        println!("FAIL zero gradient: {name}");
    }
    println!(
        "{} in {:.1}s",
        if report.passed() { "passed" } else { "FAILED" },
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
