use std::process::Command;

fn splitup(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_splitup")).args(args).output().unwrap();
    (out.status.success(), String::from_utf8(out.stdout).unwrap())
}

#[test]
fn weights_print_rationals() {
    let (ok, out) = splitup(&["weights", "--k", "2"]);
    assert!(ok);
    assert!(
        out.contains("(1/3)") && out.contains("(-2)") && out.contains("(8/3)"),
        "{out}"
    );
    let (ok, out) = splitup(&["weights", "--k", "2", "--variant", "strang"]);
    assert!(ok);
    assert!(out.contains("(-1/3)") && out.contains("(4/3)"), "{out}");
}

#[test]
fn weights_beyond_exact_range_are_decimal_only() {
    let (ok, out) = splitup(&["weights", "--k", "6"]);
    assert!(ok);
    assert_eq!(out.lines().filter(|l| l.starts_with("b[")).count(), 7);
    assert!(!out.contains('/'));
    assert!(!splitup(&["weights", "--k", "9"]).0);
}

#[test]
fn list_problems_names_registry() {
    let (ok, out) = splitup(&["list-problems"]);
    assert!(ok);
    for name in ["p1", "p2", "commuting", "degenerate"] {
        assert!(out.lines().any(|l| l.starts_with(name)), "{name}");
    }
}

#[test]
fn run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "[problem]\nname = \"p1\"\n[scheme]\nkind = \"strang\"\nbase_n = 4\n[grid]\npoints = 16\n[output]\ncsv = \"out.csv\"\n",
    )
    .unwrap();
    let (ok, out) = splitup(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(ok, "{out}");
    assert!(out.contains("fitted"));
    let csv = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn run_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "[problem]\nname = \"p1\"\n[scheme]\nkind = \"lie\"\nspeed = 3\n").unwrap();
    assert!(!splitup(&["run", "--config", cfg.to_str().unwrap()]).0);
}
