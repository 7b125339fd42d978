use qroute::harness::{emit_csv, run_experiment, ExperimentConfig};

#[test]
fn mini_sweep_matches_golden_file() {
    let config = ExperimentConfig::parse(include_str!("data/mini_sweep.toml")).unwrap();
    let csv = emit_csv(&run_experiment(&config).unwrap());
    assert_eq!(csv, include_str!("data/mini_sweep.csv"));
}
