use splitup::extrapolate::{combine, richardson_weights, Variant};
use splitup::grid::{make_grid, NormSpec};
use splitup::harness::{
    builtin, measure_error, parse_csv, recompute_pairwise, reference, run_experiment, ExperimentConfig,
};
use splitup::schemes::{run_scheme, SchemeKind, SchemeSpec, TimeGrid};
use splitup::substep::PropagatorConfig;
use splitup::Error;

fn p1_config(scheme: SchemeKind, k: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(builtin("p1").unwrap(), scheme);
    cfg.k = k;
    cfg.base_n = 8;
    cfg.points = 32;
    cfg
}

#[test]
fn csv_is_deterministic_and_independent_of_reuse_and_threads() {
    let cfg = p1_config(SchemeKind::Lie, 2);
    let first = run_experiment(&cfg).unwrap().to_csv();
    assert_eq!(first, run_experiment(&cfg).unwrap().to_csv());
    let mut no_reuse = cfg.clone();
    no_reuse.reuse_runs = false;
    assert_eq!(first, run_experiment(&no_reuse).unwrap().to_csv());
    let mut serial = cfg;
    serial.threads = 1;
    assert_eq!(first, run_experiment(&serial).unwrap().to_csv());
}

#[test]
fn csv_pairwise_orders_are_self_consistent() {
    let report = run_experiment(&p1_config(SchemeKind::Strang, 0)).unwrap();
    let records = parse_csv(&report.to_csv()).unwrap();
    assert_eq!(records.len(), report.rows.len());
    for ((m, p), orders) in recompute_pairwise(&records) {
        let column: Vec<f64> = records
            .iter()
            .filter(|r| r.0 == m && r.1 == p)
            .filter_map(|r| r.4)
            .collect();
        assert_eq!(orders.len(), column.len());
        for (a, b) in orders.iter().zip(&column) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn rows_are_sorted_by_norm_then_n() {
    let mut cfg = p1_config(SchemeKind::Lie, 0);
    cfg.norms = vec![NormSpec::max(), NormSpec::l2()];
    let report = run_experiment(&cfg).unwrap();
    let keys: Vec<(bool, usize)> = report.rows.iter().map(|r| (r.norm == NormSpec::max(), r.n)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn accelerated_errors_beat_finest_constituent() {
    for (scheme, k, variant) in [
        (SchemeKind::Lie, 1, Variant::General),
        (SchemeKind::Lie, 2, Variant::General),
        (SchemeKind::Strang, 2, Variant::Strang),
    ] {
        let mut cfg = p1_config(scheme, k);
        cfg.variant = variant;
        cfg.base_n = 16;
        let report = run_experiment(&cfg).unwrap();
        for row in &report.rows {
            assert!(row.error < row.finest_constituent_error, "{row:?}");
        }
    }
}

#[test]
fn k1_combination_beats_u32() {
    let p = builtin("p1").unwrap();
    let grid = make_grid(1, 64).unwrap();
    let cfg = PropagatorConfig::default();
    let u16 = run_scheme(
        &p.problem,
        &SchemeSpec {
            kind: SchemeKind::Lie,
            n: 16,
        },
        &grid,
        &cfg,
    )
    .unwrap();
    let u32 = run_scheme(
        &p.problem,
        &SchemeSpec {
            kind: SchemeKind::Lie,
            n: 32,
        },
        &grid,
        &cfg,
    )
    .unwrap();
    let v = combine(&[u16, u32.clone()], &richardson_weights(1).unwrap()).unwrap();
    let exact = grid.sample(p.exact.as_ref().unwrap(), 0.5).unwrap();
    let e_v = v.last().sub(&exact).unwrap().max_abs();
    let e_32 = u32.last().sub(&exact).unwrap().max_abs();
    assert!(e_v < e_32, "{e_v} vs {e_32}");
}

#[test]
fn lie_error_is_positive_and_decreasing() {
    let p = builtin("p1").unwrap();
    let grid = make_grid(1, 64).unwrap();
    let cfg = PropagatorConfig::default();
    let mut last = f64::INFINITY;
    for n in [16, 32, 64] {
        let traj = run_scheme(
            &p.problem,
            &SchemeSpec {
                kind: SchemeKind::Lie,
                n,
            },
            &grid,
            &cfg,
        )
        .unwrap();
        let r = reference(&p, &grid, &TimeGrid::new(n, 0.5).unwrap(), &cfg).unwrap();
        let err = measure_error(&traj, &r, NormSpec::l2()).unwrap();
        assert!(err > 0.0 && err < last);
        last = err;
    }
}

#[test]
fn k0_reproduces_plain_scheme() {
    let cfg = p1_config(SchemeKind::Lie, 0);
    let report = run_experiment(&cfg).unwrap();
    let grid = make_grid(1, cfg.points).unwrap();
    for row in report.series(NormSpec::l2()) {
        let traj = run_scheme(
            &cfg.problem.problem,
            &SchemeSpec {
                kind: SchemeKind::Lie,
                n: row.n,
            },
            &grid,
            &cfg.propagator,
        )
        .unwrap();
        let r = reference(&cfg.problem, &grid, traj.times(), &cfg.propagator).unwrap();
        assert_eq!(row.error, measure_error(&traj, &r, NormSpec::l2()).unwrap());
    }
}

#[test]
fn mismatched_reference_is_rejected() {
    let p = builtin("p1").unwrap();
    let grid = make_grid(1, 16).unwrap();
    let cfg = PropagatorConfig::default();
    let a = reference(&p, &grid, &TimeGrid::new(4, 0.5).unwrap(), &cfg).unwrap();
    let b = reference(&p, &grid, &TimeGrid::new(8, 0.5).unwrap(), &cfg).unwrap();
    assert!(matches!(
        measure_error(&a, &b, NormSpec::l2()),
        Err(Error::GridMismatch(_))
    ));
}

#[test]
fn failing_constituent_names_the_case() {
    let mut cfg = ExperimentConfig::new(builtin("degenerate").unwrap(), SchemeKind::Lie);
    cfg.base_n = 4;
    cfg.points = 16;
    cfg.propagator.max_internal_steps = 1;
    match run_experiment(&cfg) {
        Err(Error::Case { case, .. }) => assert!(case.starts_with("lie n="), "{case}"),
        other => panic!("expected a case error, got {other:?}"),
    }
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(
        &path,
        r#"
[problem]
name = "p1"

[scheme]
kind = "lie"
base_n = 8
levels = 2

[extrapolation]
k = 1

[grid]
points = 32

[propagator]
substep_tol = 1e-12

[output]
csv = "out.csv"
norms = [{ m = 0, p = 2 }, { m = 0, p = "inf" }]
"#,
    )
    .unwrap();
    let cfg = ExperimentConfig::from_path(&path).unwrap();
    assert_eq!(cfg.output.as_deref(), Some(dir.path().join("out.csv").as_path()));
    let report = run_experiment(&cfg).unwrap();
    let written = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert_eq!(written, report.to_csv());
    assert!(written.starts_with("scheme,k,n,delta,norm_m,norm_p,error,pairwise_order,fitted_order\n"));
}

#[test]
fn two_dimensional_problem_converges() {
    let mut cfg = ExperimentConfig::new(builtin("p1_2d").unwrap(), SchemeKind::Strang);
    cfg.points = 16;
    let report = run_experiment(&cfg).unwrap();
    let order = report.fitted_order(NormSpec::l2()).unwrap();
    assert!((1.7..=2.3).contains(&order), "{order}");
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
