use std::path::Path;

use cetsp::instance;
use cetsp_cli::{run, EXIT_USAGE};

fn call(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("cetsp").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_round_trip_and_seed_echo() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("a.txt");
    let (code, out, _) = call(&["--seed", "17", "gen", "--n", "12", "--out", p(&f)]);
    assert_eq!(code, 0);
    assert!(out.starts_with("seed: 17\n"));
    let inst = instance::load(&f).unwrap();
    assert_eq!(inst.targets.len(), 12);
    let g = dir.path().join("b.txt");
    call(&["--seed", "17", "gen", "--n", "12", "--out", p(&g)]);
    assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(&g).unwrap());
}

#[test]
fn gen_many_and_dynamic_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let many = dir.path().join("set");
    assert_eq!(call(&["gen", "--n", "5", "--count", "3", "--out", p(&many)]).0, 0);
    assert_eq!(std::fs::read_dir(&many).unwrap().count(), 3);
    let sc = dir.path().join("sc.txt");
    assert_eq!(call(&["gen", "--n", "6", "--m", "2", "--out", p(&sc)]).0, 0);
    let (code, out, _) = call(&["dynamic", "--input", p(&sc), "--planner", "ci"]);
    assert_eq!(code, 0);
    assert!(out.contains("CETSP6-2"));
}

#[test]
fn svg_structure_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("i.txt");
    call(&["--seed", "5", "gen", "--n", "9", "--out", p(&f)]);
    let s1 = dir.path().join("1.svg");
    let s2 = dir.path().join("2.svg");
    assert_eq!(call(&["plot", "--input", p(&f), "--solver", "ci", "--out", p(&s1)]).0, 0);
    assert_eq!(call(&["plot", "--input", p(&f), "--solver", "ci", "--out", p(&s2)]).0, 0);
    let text = std::fs::read_to_string(&s1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&s2).unwrap());
    assert_eq!(text.matches("<circle").count(), 9);
    // background plus depot marker
    assert_eq!(text.matches("<rect").count(), 2);
    let poly = text.lines().find(|l| l.starts_with("<polyline")).unwrap();
    let pts: Vec<&str> = poly.split('"').nth(1).unwrap().split(' ').collect();
    assert_eq!(pts.first(), pts.last());

    let inst = instance::normalize(&instance::load(&f).unwrap()).unwrap().instance;
    let d = cetsp::env::DiscretizedInstance::new(inst, cetsp::policy::PolicyConfig::default().gamma).unwrap();
    let route = cetsp::heuristics::cheapest_insertion(&d, None);
    assert_eq!(pts.len(), route.waypoints().len());
}

#[test]
fn plot_without_route_has_no_polyline() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("i.txt");
    call(&["gen", "--n", "4", "--out", p(&f)]);
    let s = dir.path().join("x.svg");
    assert_eq!(call(&["plot", "--input", p(&f), "--out", p(&s)]).0, 0);
    let text = std::fs::read_to_string(&s).unwrap();
    assert_eq!(text.matches("<circle").count(), 4);
    assert!(!text.contains("<polyline"));
}

#[test]
fn selftest_passes() {
    let (code, out, _) = call(&["selftest"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.matches("PASS").count(), 6);
}

#[test]
fn exit_codes() {
    assert_eq!(call(&["--bogus"]).0, EXIT_USAGE);
    assert_eq!(call(&["solve"]).0, EXIT_USAGE);
    assert_eq!(call(&["solve", "--input", "/nonexistent/file"]).0, EXIT_USAGE);
    assert_eq!(call(&["--help"]).0, 0);
    assert_eq!(call(&["--version"]).0, 0);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("i.txt");
    call(&["gen", "--n", "4", "--out", p(&f)]);
    let text = std::fs::read_to_string(&f).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = "NaN 0.5 0".into();
    std::fs::write(&f, lines.join("\n")).unwrap();
    let (code, _, err) = call(&["solve", "--input", p(&f)]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn config_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let f = dir.path().join("i.txt");
    std::fs::write(&cfg, format!("seed = 9\nn = 7\nout = \"{}\"\n", p(&f))).unwrap();
    let (code, out, _) = call(&["--config", p(&cfg), "gen"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("seed: 9\n"));
    assert_eq!(instance::load(&f).unwrap().targets.len(), 7);
    let (_, out, _) = call(&["--config", p(&cfg), "--seed", "2", "gen", "--n", "3"]);
    assert!(out.starts_with("seed: 2\n"));
    assert_eq!(instance::load(&f).unwrap().targets.len(), 3);
    std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(call(&["--config", p(&cfg), "gen"]).0, EXIT_USAGE);
}

#[test]
fn eval_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let (code, out, _) = call(&["eval", "--n", "6", "--count", "4", "--csv", p(&csv)]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("instances: 4"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().count() >= 3);
}
