use reservoir_core::config::{AppConfig, Period, Strategy};
use reservoir_core::harness::{sweep, Experiment, SweepSpec};
use reservoir_core::hydrology::{load_trace, HydrologyTrace};
use reservoir_core::reservoir::Trajectory;

fn small_config() -> AppConfig {
    let mut cfg = AppConfig::default_config();
    cfg.sweep.validation_days = 90;
    cfg
}

#[test]
fn single_cell_sweep_matches_a_direct_run() {
    let exp = Experiment::new(small_config()).unwrap();
    let spec = SweepSpec {
        strategies: vec![Strategy::Ddp],
        alphas: vec![0.5],
        empc_alphas: vec![],
        horizons: vec![],
        period: Period::Validation,
    };
    let res = sweep(&exp, &spec).unwrap();
    let (_, traj) = exp.run_ddp(0.5, &exp.validation).unwrap();
    let direct = exp.score(&traj).unwrap();
    assert_eq!(res.report(Strategy::Ddp, 0.5, None), Some(direct));
}

#[test]
fn sweep_rejects_weights_outside_the_unit_interval() {
    let exp = Experiment::new(small_config()).unwrap();
    let spec = SweepSpec {
        strategies: vec![Strategy::Ddp],
        alphas: vec![1.2],
        empc_alphas: vec![],
        horizons: vec![],
        period: Period::Validation,
    };
    assert!(sweep(&exp, &spec).is_err());
}

#[test]
fn config_round_trips_through_json() {
    let cfg = AppConfig::default_config();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(AppConfig::from_json_str(&text).unwrap(), cfg);
}

#[test]
fn config_errors_name_the_field() {
    let mut v = serde_json::to_value(AppConfig::default_config()).unwrap();
    v["reservoir"]["s_min"] = serde_json::json!("lots");
    let err = AppConfig::from_json_str(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("reservoir.s_min"), "{err}");
}

#[test]
fn traces_and_trajectories_round_trip_through_csv() {
    let exp = Experiment::new(small_config()).unwrap();
    let trace = exp.validation.clone();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let back: HydrologyTrace = load_trace(buf.as_slice()).unwrap();
    assert_eq!(back, trace);

    let (_, traj) = exp.run_ddp(0.05, &trace).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let back = Trajectory::read_csv(buf.as_slice(), traj.start_day, traj.seconds_per_step).unwrap();
    assert_eq!(back, traj);
}
