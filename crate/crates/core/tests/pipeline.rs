use std::path::Path;
use std::process::Command;

use klmpc::bilinear::{identify, IdentifyOptions, InputBounds};
use klmpc::config::ExperimentConfig;
use klmpc::edmd::generate_snapshots;
use klmpc::pipeline::{Pipeline, CLF, MODEL, REPORT, SIMULATION, SNAPSHOTS};
use klmpc::{Dictionary, Error, Plant};
use nalgebra::DVector;
use serde_json::{json, Value};

fn small_config(controller: &str) -> Value {
    json!({
        "name": "small",
        "seed": 11,
        "plant": "van_der_pol",
        "data": {"trajectories": 8, "sampler": {"kind": "circle", "radius": 1.0}, "dt": 0.01, "steps": 300},
        "dictionary": {"max_degree": 3},
        "clf": {"synthesis": {"gamma": 2.0, "c_low": 0.1, "c_high": 10.0, "max_iters": 500}},
        "controller": {
            "kind": {"kind": controller}, "horizon": 10, "w": {"kind": "identity", "scale": 1.0},
            "r": 1.0, "u_min": -5.0, "u_max": 5.0, "explicit": {"kind": "sontag"}
        },
        "simulation": {
            "x0": {"kind": "disk", "radius": 0.5}, "runs": 2,
            "options": {"horizon": 1.0, "strict_box": false}, "open_loop": true
        }
    })
}

fn write_config(dir: &Path, value: &Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn pipeline(dir: &Path, value: Value) -> Pipeline {
    let config: ExperimentConfig = serde_json::from_value(value).unwrap();
    Pipeline::new(config, Some(dir.join("out"))).unwrap()
}

fn klmpc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_klmpc")).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), small_config("sontag"));
    let report = p.run().unwrap();
    for name in [SNAPSHOTS, MODEL, CLF, SIMULATION, REPORT, "run_00.csv", "run_01.csv", "open_loop_01.csv"] {
        assert!(p.out_dir().join(name).exists(), "{name}");
    }
    assert_eq!(report.model.dim, 10);
    assert_eq!(report.runs.len(), 2);
    assert_eq!(report.open_loop.unwrap().runs.len(), 2);
    let header = std::fs::read_to_string(p.out_dir().join("run_00.csv")).unwrap();
    assert!(header.starts_with("t,x_1,x_2,xhat_1,xhat_2,u,V,mode\n"));
}

#[test]
fn identify_without_snapshots_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), small_config("sontag"));
    assert!(matches!(p.identify(), Err(Error::MissingArtifact(_))));

    let config = write_config(dir.path(), &small_config("sontag"));
    let out = dir.path().join("cli");
    let o = klmpc(&["identify", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let record: Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(record["stage"], "identify");
    assert_eq!(record["kind"], "missing_artifact");
}

#[test]
fn inverted_bounds_fail_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = small_config("lmpc");
    value["controller"]["u_min"] = json!(5.0);
    value["controller"]["u_max"] = json!(-5.0);
    let config = write_config(dir.path(), &value);
    let out = dir.path().join("out");
    let o = klmpc(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn unknown_keys_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = small_config("lmpc");
    value["simulation"]["extra"] = json!(1);
    let config = write_config(dir.path(), &value);
    let o = klmpc(&["gen-data", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn open_loop_simulation_needs_no_clf() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), small_config("open_loop"));
    p.gen_data().unwrap();
    p.identify().unwrap();
    let sim = p.simulate().unwrap();
    assert_eq!(sim.closed_loop.len(), 2);
    assert!(sim.open_loop.is_empty());
    assert!(!p.out_dir().join(CLF).exists());
    let report = p.report().unwrap();
    assert!(report.clf.is_none());
}

#[test]
fn simulate_with_lmpc_needs_a_clf() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), small_config("lmpc"));
    p.gen_data().unwrap();
    p.identify().unwrap();
    assert!(matches!(p.simulate(), Err(Error::MissingArtifact(_))));
}

#[test]
fn rerunning_a_stage_reproduces_its_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), small_config("sontag"));
    p.run().unwrap();
    let read = |name: &str| std::fs::read(p.out_dir().join(name)).unwrap();
    let before: Vec<Vec<u8>> = [SNAPSHOTS, MODEL, CLF, "run_00.csv", REPORT].iter().map(|n| read(n)).collect();
    for name in [SNAPSHOTS, MODEL, CLF, "run_00.csv", REPORT] {
        std::fs::remove_file(p.out_dir().join(name)).unwrap();
    }
    p.gen_data().unwrap();
    p.identify().unwrap();
    p.synthesize_clf().unwrap();
    p.simulate().unwrap();
    p.report().unwrap();
    let after: Vec<Vec<u8>> = [SNAPSHOTS, MODEL, CLF, "run_00.csv", REPORT].iter().map(|n| read(n)).collect();
    assert!(before == after);
}

#[test]
fn corrupt_model_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config("sontag"));
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(MODEL), "{\"spectrum\": 3}").unwrap();
    let o = klmpc(&["synthesize-clf", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synthesize_clf_on_a_prepared_two_state_model() {
    // ẋ = −x + u with dictionary {1, x}: the constant coordinate is fixed and
    // the free block is Λ = −1, B = 0, so λ_max(2PΛ) − γ tr(PB) = −2P is
    // minimized at P = c_high; the constant coordinate gets c_low.
    let plant = Plant::linear(nalgebra::DMatrix::from_element(1, 1, -1.0), nalgebra::DMatrix::from_element(1, 1, 1.0));
    let ics: Vec<DVector<f64>> = [-1.0, 0.5, 1.0].iter().map(|&v| DVector::from_vec(vec![v])).collect();
    let data = generate_snapshots(&plant, &ics, 0.01, 100).unwrap();
    let options = IdentifyOptions {
        ridge: 0.0,
        input_bounds: vec![InputBounds::new(-5.0, 5.0)],
        center_at_origin: true,
    };
    let model = identify(&data, &Dictionary::new(1, 1), &options).unwrap();
    assert_eq!(model.dim(), 2);

    let dir = tempfile::tempdir().unwrap();
    let mut value = small_config("sontag");
    value["clf"]["synthesis"] = json!({"gamma": 2.0, "c_low": 1.0, "c_high": 2.0});
    let config = write_config(dir.path(), &value);
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    model.save(&out.join(MODEL)).unwrap();
    let o = klmpc(&["synthesize-clf", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let clf = klmpc::Clf::load(&out.join(CLF)).unwrap();
    let constant = model.constant_modes()[0];
    let free = 1 - constant;
    assert!((clf.p[(free, free)] - 2.0).abs() <= 1e-4, "{}", clf.p);
    assert_eq!(clf.p[(constant, constant)], 1.0);
    assert_eq!(clf.p[(0, 1)], 0.0);
    assert!(clf.r_hat().unwrap() < clf.r().unwrap());
}
