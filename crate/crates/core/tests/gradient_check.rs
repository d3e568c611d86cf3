//! Reverse-mode gradients against central finite differences in f64.

mod oracles;

const SEEDS: u64 = 20;

#[test]
fn every_op_matches_finite_differences() {
    let start = std::time::Instant::now();
    let errors = oracles::per_op_errors(SEEDS);
    for (name, worst) in &errors {
        eprintln!("{name}: max relative error {worst:.2e}");
    }
    let bad: Vec<_> = errors.iter().filter(|(_, e)| *e >= 1e-4).collect();
    assert!(bad.is_empty(), "ops above 1e-4: {bad:?}");
    eprintln!("{} ops in {:?}", errors.len(), start.elapsed());
}

#[test]
fn composed_model() {
    let start = std::time::Instant::now();
    let (worst, checked) = oracles::composed_error(SEEDS);
    let elapsed = start.elapsed();
    eprintln!("composed model: {checked} gradients, max relative error {worst:.2e} in {elapsed:?}");
    assert!(worst < 1e-3, "max relative error {worst:e}");
    assert!(elapsed.as_secs_f64() < 60.0, "gradient check took {elapsed:?}");
}
