use super::*;
use crate::polytope::{polytope_to_json, standard_simplex, unit_square};
use std::fs;

fn write_polytope(dir: &std::path::Path, p: &DelzantPolytope) -> PathBuf {
    let path = dir.join(format!("{}.json", p.name));
    fs::write(&path, polytope_to_json(p)).unwrap();
    path
}

fn interval_path(dir: &std::path::Path) -> PathBuf {
    write_polytope(dir, &crate::polytope::interval(0.0, 1.0))
}

fn run(cmd: Command, cfg: &RunConfig) -> (Result<()>, String) {
    let mut buf = Vec::new();
    let res = dispatch(cmd, cfg, &mut buf);
    (res, String::from_utf8(buf).unwrap())
}

#[test]
fn check_reports_valid_polytopes() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_polytope(dir.path(), &unit_square());
    let cfg = RunConfig {
        polytope: Some(path),
        ..Default::default()
    };
    let (res, text) = run(Command::Check, &cfg);
    assert!(res.is_ok());
    assert!(text.contains("Delzant: valid, 4 vertices"), "{text}");
}

#[test]
fn check_reports_violations_with_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"name":"bad","dim":2,"facets":[
            {"normal":[1,0],"offset":0},
            {"normal":[0,1],"offset":0},
            {"normal":[-1,-2],"offset":2}]}"#,
    )
    .unwrap();
    let cfg = RunConfig {
        polytope: Some(path),
        ..Default::default()
    };
    let (res, text) = run(Command::Check, &cfg);
    let err = res.unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(text.contains("Delzant: invalid"), "{text}");
    assert!(text.contains("not unimodular"), "{text}");
}

#[test]
fn theta_prints_the_interval_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        polytope: Some(interval_path(dir.path())),
        ..Default::default()
    };
    let (res, text) = run(Command::Theta, &cfg);
    assert!(res.is_ok());
    assert!(text.contains("constant = 4.0000000000000000e0"), "{text}");
    assert!(text.contains("residual over the affine basis: 0.000e0"), "{text}");
}

#[test]
fn flow_from_guillemin_terminates_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = RunConfig {
        polytope: Some(interval_path(dir.path())),
        h: Some(1.0 / 32.0),
        out: Some(out.clone()),
        ..Default::default()
    };
    let (res, text) = run(Command::Flow, &cfg);
    assert!(res.is_ok(), "{text}");
    assert!(text.contains("terminated: Tolerance"), "{text}");
    assert!(out.join("trace.csv").exists());
    assert!(out.join("final.ckpt").exists());
}

#[test]
fn checkpoint_reload_matches_the_trace_energy() {
    let dir = tempfile::tempdir().unwrap();
    let ppath = interval_path(dir.path());
    let out = dir.path().join("run");
    let cfg = RunConfig {
        polytope: Some(ppath.clone()),
        h: Some(1.0 / 32.0),
        bump: Some(0.05),
        tol: Some(1e-12),
        max_steps: Some(40),
        out: Some(out.clone()),
        checkpoint_every: Some(10),
        ..Default::default()
    };
    let (res, _) = run(Command::Flow, &cfg);
    assert!(res.is_ok());
    assert!(out.join("ckpt_00000010.ckpt").exists());

    // reload the final state; its energy must match the last trace row
    let p = Arc::new(load_polytope(&ppath).unwrap());
    let (u, _t) =
        SymplecticPotential::read_checkpoint(&out.join("final.ckpt"), p.clone()).unwrap();
    let theta = stability::extremal_affine(&p).unwrap();
    let e = flow::calabi_energy(&u, &theta).unwrap();
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let last = trace.lines().last().unwrap();
    let e_trace: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert!(
        (e - e_trace).abs() <= 1e-12 * (1.0 + e_trace),
        "{e} vs {e_trace}"
    );
}

#[test]
fn scan_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ppath = write_polytope(dir.path(), &standard_simplex(2));
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("scan{k}.csv"));
        let cfg = RunConfig {
            polytope: Some(ppath.clone()),
            max_denominator: Some(2),
            depth_margin: Some(1.0 / 16.0),
            out: Some(out.clone()),
            ..Default::default()
        };
        let (res, _) = run(Command::Scan, &cfg);
        assert!(res.is_ok());
        outputs.push(fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn probe_outputs_are_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ppath = write_polytope(dir.path(), &standard_simplex(2));
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("probe{k}.csv"));
        let cfg = RunConfig {
            polytope: Some(ppath.clone()),
            h: Some(1.0 / 16.0),
            seed: Some(7),
            count: Some(8),
            out: Some(out.clone()),
            ..Default::default()
        };
        let (res, _) = run(Command::Probe, &cfg);
        assert!(res.is_ok());
        outputs.push(fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn wflow_writes_the_extended_columns() {
    let dir = tempfile::tempdir().unwrap();
    let ppath = interval_path(dir.path());
    let wpath = dir.path().join("weight.json");
    fs::write(
        &wpath,
        crate::weighted::weight_to_json(&crate::weighted::WeightData::trivial(1)),
    )
    .unwrap();
    let out = dir.path().join("wrun");
    let cfg = RunConfig {
        polytope: Some(ppath),
        weight: Some(wpath),
        h: Some(1.0 / 32.0),
        bump: Some(0.02),
        tol: Some(1e-12),
        max_steps: Some(10),
        out: Some(out.clone()),
        ..Default::default()
    };
    let (res, text) = run(Command::Wflow, &cfg);
    assert!(res.is_ok(), "{text}");
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let header = trace.lines().next().unwrap();
    assert!(header.ends_with("weighted_energy,A_1,B"), "{header}");
}

#[test]
fn segment_command_writes_the_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("segment.csv");
    let cfg = RunConfig {
        polytope: Some(interval_path(dir.path())),
        h: Some(1.0 / 32.0),
        segment_a: Some(vec![0.0]),
        segment_b: Some(vec![1.0]),
        samples: Some(33),
        out: Some(out.clone()),
        ..Default::default()
    };
    let (res, text) = run(Command::Segment, &cfg);
    assert!(res.is_ok(), "{text}");
    let csv = fs::read_to_string(out).unwrap();
    assert!(csv.starts_with("t,v,v2,w,w1,w2,rm"));
    assert!(text.contains("1/V'' at endpoints: 0.000000e0"), "{text}");
}

#[test]
fn config_file_fills_flags_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let ppath = interval_path(dir.path());
    let cpath = dir.path().join("run.json");
    fs::write(
        &cpath,
        format!(
            r#"{{"polytope": "{}", "h": 0.03125}}"#,
            ppath.display()
        ),
    )
    .unwrap();
    let base = RunConfig::load_config_file(&cpath).unwrap();
    // flag overrides config
    let cfg = RunConfig {
        h: Some(1.0 / 16.0),
        ..Default::default()
    }
    .or(base.clone());
    assert_eq!(cfg.h, Some(1.0 / 16.0));
    assert_eq!(cfg.polytope, Some(ppath));
    // config fills unset values
    let cfg = RunConfig::default().or(base);
    assert_eq!(cfg.h, Some(0.03125));

    fs::write(&cpath, r#"{"polytope": "x.json", "wat": 3}"#).unwrap();
    assert!(matches!(
        RunConfig::load_config_file(&cpath),
        Err(Error::Parse(_))
    ));
}

#[test]
fn negative_controls_are_rejected() {
    let cfg = RunConfig {
        polytope: Some(PathBuf::from("unused.json")),
        h: Some(-0.1),
        ..Default::default()
    };
    let (res, _) = run(Command::Theta, &cfg);
    assert!(matches!(res, Err(Error::InvalidInput(_))));
}
