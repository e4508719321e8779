//! Configuration parsing and file-format round trips.

use std::path::{Path, PathBuf};

use proptest::prelude::*;

use safeguard::config::{ConfigError, ErrorModelConfig, RunConfig, VelocityStep};
use safeguard::formats::{
    bundle_from_json, bundle_to_json, params_json, read_flow_grid, read_params, read_simlog, write_flow_grid,
    write_simlog, CacheDoc, CacheKey,
};
use safeguard::sim::{run_scenario, Controller};
use safeguard_core::backup_flow::flow_with_sensitivity;
use safeguard_core::{FilterContext, SegwayParams, State};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig { duration: 0.4, ..RunConfig::default() };
    cfg.synthesis.certification_samples = 50;
    cfg.synthesis.lipschitz_samples = 200;
    cfg
}

fn context(cfg: &RunConfig) -> FilterContext {
    FilterContext::synthesize(&SegwayParams::nominal(), &cfg.safe_set(), &cfg.synthesis_settings()).unwrap()
}

#[test]
fn shipped_scenarios_parse_to_the_intended_settings() {
    let a = RunConfig::load(&scenarios().join("scenario_a.json")).unwrap();
    assert_eq!(a.controller, Controller::BsQp);
    assert_eq!(a.error_model, ErrorModelConfig::ConstantBias { bias: [-0.4, 0.0, 0.0, 0.0] });
    assert_eq!(a.v_desired, vec![VelocityStep { t: 0.0, v: 1.0 }]);
    assert_eq!(a.duration, 8.0);
    assert_eq!(a.initial_state, [0.0; 4]);

    let b = RunConfig::load(&scenarios().join("scenario_b.json")).unwrap();
    assert_eq!(b.controller, Controller::MrBsOp);
    assert_eq!(b.epsilon, 0.4);
    assert_eq!(b.error_model, a.error_model);

    let params = read_params(&b.resolve(b.params_file.as_ref().unwrap())).unwrap();
    assert_eq!(params, SegwayParams::nominal());
}

#[test]
fn parse_errors_carry_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"duration\": 8,\n  \"duration_s\": 3\n}").unwrap();
    match RunConfig::load(&path) {
        Err(ConfigError::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("duration_s"));
        }
        other => panic!("unexpected {other:?}"),
    }
    std::fs::write(&path, "{\"duration\": \"long\"}").unwrap();
    assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse { .. })));
}

#[test]
fn params_file_needs_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    std::fs::write(&path, params_json(&SegwayParams::frictionless())).unwrap();
    assert_eq!(read_params(&path).unwrap(), SegwayParams::frictionless());
    std::fs::write(&path, r#"{"body_mass": 45.0}"#).unwrap();
    assert!(read_params(&path).is_err());
}

fn valid_config() -> impl Strategy<Value = RunConfig> {
    (
        prop_oneof![Just(Controller::CbfQp), Just(Controller::BsQp), Just(Controller::MrBsOp), Just(Controller::None)],
        prop_oneof![
            Just(ErrorModelConfig::Identity),
            (-0.5f64..0.5).prop_map(|b| ErrorModelConfig::ConstantBias { bias: [b, 0.0, 0.0, 0.0] }),
            (0.0f64..0.5, any::<u64>()).prop_map(|(radius, seed)| ErrorModelConfig::BoundedUniform { radius, seed }),
        ],
        0.0f64..1.0,
        prop::collection::vec(-2.0f64..2.0, 1..4),
        0.1f64..20.0,
        prop_oneof![Just(100.0), Just(250.0), Just(500.0)],
        prop::array::uniform4(-0.5f64..0.5),
        any::<u64>(),
        1.0f64..5.0,
        0.5f64..10.0,
    )
        .prop_map(|(controller, error_model, extra_eps, speeds, duration, rate, x0, seed, x_max, gamma)| {
            let bound = match error_model {
                ErrorModelConfig::Identity => 0.0,
                ErrorModelConfig::ConstantBias { bias } => bias[0].abs(),
                ErrorModelConfig::BoundedUniform { radius, .. } => radius,
            };
            let mut cfg = RunConfig {
                controller,
                error_model,
                epsilon: bound + extra_eps,
                v_desired: speeds.iter().enumerate().map(|(i, v)| VelocityStep { t: i as f64, v: *v }).collect(),
                duration,
                control_rate: rate,
                initial_state: x0,
                seed,
                x_max,
                ..RunConfig::default()
            };
            cfg.synthesis.gamma = gamma;
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn config_round_trips(cfg in valid_config()) {
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, cfg.to_json()).unwrap();
        let back = RunConfig::load(&path).unwrap();
        prop_assert_eq!(RunConfig { base_dir: cfg.base_dir.clone(), ..back }, cfg);
    }
}

#[test]
fn simlog_round_trips_bitwise() {
    let cfg = small_config();
    let ctx = context(&cfg);
    let run = run_scenario(&cfg.scenario(), &ctx).unwrap();
    let mut bytes = Vec::new();
    write_simlog(&run.log, &mut bytes).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert!(text.starts_with(
        "t,x_true,v_true,pitch_true,pitchrate_true,x_est,v_est,pitch_est,pitchrate_est,u_des,u_applied,slack,status,h_true,h_est,hB_true,margin_tau0,margin_tau1,margin_tau2,margin_tau3,margin_B\n"
    ));
    assert_eq!(read_simlog(bytes.as_slice()).unwrap(), run.log);
}

#[test]
fn flow_grid_round_trips() {
    let cfg = small_config();
    let ctx = context(&cfg);
    let x = State::new(0.2, 0.1, 0.01, 0.0);
    let grid = flow_with_sensitivity(&ctx.params, &ctx.policy, &ctx.backup_set, &x, &ctx.flow).unwrap();
    let mut bytes = Vec::new();
    write_flow_grid(&grid, &mut bytes).unwrap();
    let rows = read_flow_grid(bytes.as_slice()).unwrap();
    assert_eq!(rows.len(), grid.taus.len());
    for ((tau, s, sens), k) in rows.iter().zip(0..) {
        assert_eq!(*tau, grid.taus[k]);
        assert_eq!(*s, grid.states[k]);
        assert_eq!(*sens, grid.sensitivities[k]);
    }
}

#[test]
fn bundle_and_cache_round_trip() {
    let cfg = small_config();
    let ctx = context(&cfg);
    let json = bundle_to_json(&ctx.bundle);
    let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["tau0", "tau1", "tau2", "tau3", "B", "alpha", "h"]);
    assert_eq!(bundle_from_json(&json).unwrap(), ctx.bundle);

    let key = CacheKey {
        params: SegwayParams::nominal().into(),
        x_max: cfg.x_max,
        error_axes: cfg.synthesis_settings().error_axes,
        synthesis: cfg.synthesis.clone(),
    };
    let doc = CacheDoc::from_context(&ctx, key);
    let back: CacheDoc = serde_json::from_str(&doc.to_json()).unwrap();
    assert_eq!(back, doc);
    assert_eq!(back.to_context(cfg.epsilon).unwrap(), ctx);
}
