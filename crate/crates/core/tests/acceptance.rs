//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a gated criterion fails.
//!
//! The desk model is trained once and cached under the cargo target tmpdir,
//! keyed by a hash of the configuration. Delete that directory to retrain.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cetsp::diffcore::{grad_check, value_of, GradCheckConfig, Tape};
use cetsp::dynamic::{generate_scenario, simulate_all, Planner};
use cetsp::env::{random_rollout, DiscretizedInstance, EnvState};
use cetsp::geometry::{tour_length, Disk, Point};
use cetsp::heuristics::{brute_force, cheapest_insertion, geometric_coverage, nearest_neighbor, refine_waypoints, InsertionMode, Route, Stop};
use cetsp::instance::{augment8, generate_indexed, GenConfig, Instance, RadiusKind, Symmetry};
use cetsp::par::ExecMode;
use cetsp::policy::{Policy, PolicyConfig};
use cetsp::training::{evaluate, reinforce_gradient, replayed_surrogate, surrogate_weights, train, Baseline, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Full-scale reference objective for augmented greedy decoding on n=20
/// random-radii instances, and the allowed relative excess.
const ANCHOR_N20_RANDOM: f64 = 3.24;
const ANCHOR_SLACK: f64 = 0.20;
const DESK_EPOCHS: usize = 30;
const TRAIN_BUDGET: Duration = Duration::from_secs(4 * 3600);
const HELD_OUT_SEED: u64 = 999;

struct Outcome {
    name: &'static str,
    passed: bool,
    gated: bool,
    detail: String,
}

impl Outcome {
    fn line(&self) -> String {
        let tag = match (self.passed, self.gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported, not gated)",
        };
        format!("{tag}  {:<26} {}", self.name, self.detail)
    }
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let cfg = PolicyConfig { layers: 1, heads: 2, dim: 16, gamma: 4, ..PolicyConfig::default() };
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut error = None;
    for seed in 0..3u64 {
        let run = || -> Result<(f64, usize), String> {
            let policy = Policy::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
            let gen = GenConfig::new(vec![5], RadiusKind::Random, 40 + seed);
            let d = (0..)
                .map(|i| DiscretizedInstance::new(generate_indexed(&gen, 5, i), 4).unwrap())
                .find(|d| EnvState::initial(d).uncovered().count() >= 2)
                .unwrap();
            let starts = EnvState::initial(&d).uncovered().count();
            let scale = 1.0 / starts as f64;
            let g = reinforce_gradient(&policy, &d, starts, scale, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
            let actions: Vec<_> = g.trajectories.iter().map(|t| t.actions.clone()).collect();
            let weights = surrogate_weights(&g.rewards, scale).map_err(|e| e.to_string())?;
            let build = |t: &mut Tape<'_>| Ok(replayed_surrogate(t, &policy, &d, &actions, &weights).expect("sampled actions replay"));
            let check = GradCheckConfig { h: 1e-4, max_coords: 2048, seed };
            let r = grad_check(policy.params(), &g.grads, |p| value_of(p, build), check).map_err(|e| e.to_string())?;
            Ok((r.max_rel_err, r.coords_checked))
        };
        match run() {
            Ok((e, c)) => {
                worst = worst.max(e);
                coords += c;
            }
            Err(e) => error = Some(e),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        name: "gradient fidelity",
        passed: error.is_none() && worst < 1e-4 && secs < 120.0,
        gated: true,
        detail: match error {
            Some(e) => e,
            None => format!("max rel err {worst:.2e} over {coords} coords, {secs:.1}s"),
        },
    }
}

fn env_oracle() -> Outcome {
    let t0 = Instant::now();
    let gen = GenConfig::new(vec![4], RadiusKind::Random, 2024);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut violations, mut rollouts) = (0.0f64, 0, 0);
    for i in 0..200 {
        let d = DiscretizedInstance::new(generate_indexed(&gen, 4, i), 4).unwrap();
        let best = brute_force(&d).unwrap().length;
        for _ in 0..10 {
            let s = random_rollout(&d, &mut rng);
            rollouts += 1;
            let geo = tour_length(&s.waypoints, false);
            worst = worst.max((s.length_so_far - geo).abs());
            if best > s.length_so_far + 1e-9 {
                violations += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        name: "env/oracle equivalence",
        passed: worst <= 1e-9 && violations == 0 && secs < 120.0,
        gated: true,
        detail: format!("{rollouts} rollouts, max |env - geometry| {worst:.1e}, brute-force violations {violations}, {secs:.1}s"),
    }
}

fn augmentation() -> Outcome {
    let gen = GenConfig::new(vec![12], RadiusKind::Random, 77);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst, mut coverage_breaks) = (0.0f64, 0);
    for i in 0..100 {
        let inst = generate_indexed(&gen, 12, i);
        let d = DiscretizedInstance::new(inst.clone(), 8).unwrap();
        let pts = random_rollout(&d, &mut rng).waypoints;
        let base = tour_length(&pts, false);
        let cov = geometric_coverage(&inst, &pts);
        let images = augment8(&inst).unwrap();
        for s in Symmetry::all() {
            let moved: Vec<Point> = pts.iter().map(|&p| s.apply(p)).collect();
            worst = worst.max((tour_length(&moved, false) - base).abs());
            if geometric_coverage(&images[s.index()], &moved) != cov {
                coverage_breaks += 1;
            }
        }
    }
    Outcome {
        name: "augmentation symmetry",
        passed: worst <= 1e-9 && coverage_breaks == 0,
        gated: true,
        detail: format!("100 instances x 8 transforms, max length diff {worst:.1e}, coverage changes {coverage_breaks}"),
    }
}

fn refinement() -> Outcome {
    let disks = [(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)].map(|(x, y)| Disk::new(Point::new(x, y), 0.2));
    let inst = Instance::new(Point::new(0.0, 0.0), disks.to_vec());
    let stops = (1..=3).map(|n| Stop { node: n, point: Point::new(n as f64, 0.2), waypoint_index: None }).collect();
    let collinear = refine_waypoints(&Route::new(inst.depot, stops, inst.depot), &inst).length;
    // Out along the axis to the near edge of the last disk and back.
    let optimum = 2.0 * (3.0 - 0.2);

    let mut increases = 0;
    let mut lost_coverage = 0;
    let mut routes = 0;
    for (i, n) in [8usize, 12, 16, 20, 30].iter().cycle().take(500).enumerate() {
        let kind = if i % 2 == 0 { RadiusKind::Random } else { RadiusKind::Constant };
        let inst = generate_indexed(&GenConfig::new(vec![*n], kind, 31), *n, i as u64);
        let d = DiscretizedInstance::new(inst.clone(), 8).unwrap();
        for r in [cheapest_insertion(&d, None), nearest_neighbor(&d)] {
            routes += 1;
            let refined = refine_waypoints(&r, &inst);
            if refined.length > r.length + 1e-12 {
                increases += 1;
            }
            if !refined.covers_all(&inst) {
                lost_coverage += 1;
            }
        }
    }
    let err = (collinear - optimum).abs();
    Outcome {
        name: "refinement oracle",
        passed: increases == 0 && lost_coverage == 0 && err <= 1e-6,
        gated: true,
        detail: format!("{routes} routes, increases {increases}, coverage lost {lost_coverage}, collinear {collinear:.9} vs {optimum:.9}"),
    }
}

struct DeskModel {
    policy: Policy,
    multistart_violations: usize,
    multistart_checked: usize,
    train_secs: f64,
    cached: bool,
}

fn desk_configs() -> (PolicyConfig, TrainConfig) {
    let pcfg = PolicyConfig::default();
    let tcfg = TrainConfig { epochs: DESK_EPOCHS, eval_every: 0, seed: 0, ..TrainConfig::default() };
    (pcfg, tcfg)
}

fn cache_dir(pcfg: &PolicyConfig, tcfg: &TrainConfig) -> PathBuf {
    let mut h = Sha256::new();
    h.update(format!("{pcfg:?}|{tcfg:?}").as_bytes());
    let digest = h.finalize();
    let tag: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-model-{tag}"))
}

fn load_cached(dir: &Path) -> Option<DeskModel> {
    let text = std::fs::read_to_string(dir.join("report.txt")).ok()?;
    let v: Vec<f64> = text.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    let policy = Policy::load(&dir.join("checkpoint.bin")).ok()?;
    match v[..] {
        [viol, checked, secs] => Some(DeskModel {
            policy,
            multistart_violations: viol as usize,
            multistart_checked: checked as usize,
            train_secs: secs,
            cached: true,
        }),
        _ => None,
    }
}

fn desk_model() -> Result<DeskModel, String> {
    let (pcfg, tcfg) = desk_configs();
    let dir = cache_dir(&pcfg, &tcfg);
    if let Some(m) = load_cached(&dir) {
        return Ok(m);
    }
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig { checkpoint_dir: Some(dir.clone()), metrics_path: Some(dir.join("metrics.log")), ..tcfg };
    let mut policy = Policy::new(pcfg, tcfg.seed).map_err(|e| e.to_string())?;
    eprintln!("training desk model into {}", dir.display());
    let t0 = Instant::now();
    let report = train(&tcfg, &mut policy, &mut |s| {
        eprintln!("  epoch {:>2}  reward {:.4}  {:.0}s", s.epoch, s.mean_reward, s.wall_ms as f64 / 1e3);
    })
    .map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    policy.save(&dir.join("checkpoint.bin")).map_err(|e| e.to_string())?;
    let summary = format!("{} {} {secs:.1}\n", report.multistart_violations, report.multistart_checked);
    std::fs::write(dir.join("report.txt"), summary).map_err(|e| e.to_string())?;
    Ok(DeskModel {
        policy,
        multistart_violations: report.multistart_violations,
        multistart_checked: report.multistart_checked,
        train_secs: secs,
        cached: false,
    })
}

fn held_out() -> Vec<Instance> {
    let gen = GenConfig::new(vec![20], RadiusKind::Random, HELD_OUT_SEED);
    (0..100).map(|i| generate_indexed(&gen, 20, i)).collect()
}

fn multistart_contract(m: &DeskModel) -> Outcome {
    Outcome {
        name: "multistart contract",
        passed: m.multistart_violations == 0 && m.multistart_checked > 0,
        gated: true,
        detail: format!("{} violations over {} training instances", m.multistart_violations, m.multistart_checked),
    }
}

fn desk_efficacy(m: &DeskModel, set: &[Instance]) -> (Outcome, f64) {
    let exec = ExecMode::available();
    let report = evaluate(Some(&m.policy), set, 0, true, &[Baseline::CheapestInsertion], exec).unwrap();
    let ours = report.row("policy+aug").unwrap().objective;
    let ci = report.row("CI").unwrap().objective;
    let ceiling = ANCHOR_N20_RANDOM * (1.0 + ANCHOR_SLACK);
    let within_budget = Duration::from_secs_f64(m.train_secs) <= TRAIN_BUDGET;
    let mut detail = format!(
        "policy+aug {ours:.4} vs CI {ci:.4}, ceiling {ceiling:.3}; {DESK_EPOCHS} epochs in {:.0} min",
        m.train_secs / 60.0
    );
    if m.cached {
        let _ = write!(detail, " (cached model)");
    }
    let out = Outcome { name: "desk training efficacy", passed: ours < ci && ours <= ceiling && within_budget, gated: true, detail };
    (out, ours)
}

fn dynamic_feasibility(m: &DeskModel) -> Outcome {
    let scenarios: Vec<_> = (0..100).map(|i| generate_scenario(20, 2, 4242, i)).collect();
    let gamma = m.policy.config().gamma;
    let exec = ExecMode::available();
    let mut incomplete = 0;
    let mut prefix_breaks = 0;
    let mut means = Vec::new();
    let planners = [Planner::Policy { policy: &m.policy, aug: true }, Planner::Insertion(InsertionMode::Greedy)];
    for planner in planners {
        let traces = match simulate_all(&scenarios, planner, gamma, exec) {
            Ok(t) => t,
            Err(e) => {
                return Outcome { name: "dynamic feasibility", passed: false, gated: true, detail: format!("{}: {e}", planner.name()) };
            }
        };
        for (t, sc) in traces.iter().zip(&scenarios) {
            if !t.covers_all(sc) {
                incomplete += 1;
            }
            // Each replanned suffix starts at the executed position.
            for ev in &t.events {
                if t.waypoints.get(ev.step) != Some(&ev.position) {
                    prefix_breaks += 1;
                }
            }
        }
        means.push(traces.iter().map(|t| t.length).sum::<f64>() / traces.len() as f64);
    }
    Outcome {
        name: "dynamic feasibility",
        passed: incomplete == 0 && prefix_breaks == 0 && means[0] <= means[1],
        gated: true,
        detail: format!(
            "200 traces, incomplete {incomplete}, prefix breaks {prefix_breaks}; policy+aug {:.4} vs MGI {:.4}",
            means[0], means[1]
        ),
    }
}

fn ablation(m: &DeskModel, set: &[Instance], full: f64) -> Outcome {
    let mut p = m.policy.clone();
    p.set_knn_interaction(false);
    let report = evaluate(Some(&p), set, 0, true, &[], ExecMode::available()).unwrap();
    let ablated = report.rows[0].objective;
    Outcome {
        name: "ablation direction",
        passed: ablated >= full,
        gated: false,
        detail: format!("without k-NN interaction {ablated:.4} vs full {full:.4}"),
    }
}

fn main() {
    // `cargo test -- --list` and filters should not trigger training.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut outcomes = vec![gradient_fidelity(), env_oracle(), augmentation()];
    match desk_model() {
        Ok(m) => {
            let set = held_out();
            outcomes.push(multistart_contract(&m));
            let (eff, full) = desk_efficacy(&m, &set);
            outcomes.push(eff);
            outcomes.push(refinement());
            outcomes.push(dynamic_feasibility(&m));
            outcomes.push(ablation(&m, &set, full));
        }
        Err(e) => {
            for name in ["multistart contract", "desk training efficacy", "dynamic feasibility", "ablation direction"] {
                outcomes.push(Outcome { name, passed: false, gated: true, detail: format!("training failed: {e}") });
            }
            outcomes.push(refinement());
        }
    }
    println!();
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| o.gated && !o.passed).count();
    println!("acceptance: {} of {} gated criteria passed", outcomes.iter().filter(|o| o.gated).count() - failed, outcomes.iter().filter(|o| o.gated).count());
    if failed > 0 {
        std::process::exit(1);
    }
}
