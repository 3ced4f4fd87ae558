//! Quick oracle checks run by `cetsp selftest`.

use cetsp::diffcore::{grad_check, value_and_grad, value_of, GatedFfParams, GradCheckConfig, Mask, MhaParams, ParamBlock, Tape, Tensor};
use cetsp::dynamic::{generate_scenario, simulate, Planner};
use cetsp::env::{random_rollout, DiscretizedInstance, EnvState};
use cetsp::geometry::{tour_length, Disk, Point};
use cetsp::heuristics::{brute_force, cheapest_insertion, refine_waypoints, InsertionMode, Route, Stop};
use cetsp::instance::{generate_indexed, GenConfig, Instance, RadiusKind, Symmetry};
use cetsp::policy::{Policy, PolicyConfig};
use cetsp::training::{reinforce_gradient, replayed_surrogate, surrogate_weights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {:<22} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn layer_gradients(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = ParamBlock::new();
    let attn = MhaParams::init(&mut block, "attn", 8, &mut rng);
    let ff = GatedFfParams::init(&mut block, "ff", 8, &mut rng);
    let gain = block.add_const("gain", 1, 8, 1.0);
    let head = block.add_fan_in("head", 8, 3, &mut rng);
    let x = Tensor::from_vec(5, 8, (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect());
    let mask = Mask::from_rows(&[vec![true, false, true], vec![true, true, true], vec![false, true, true], vec![true, true, false], vec![false, false, true]]);
    let build = |t: &mut Tape<'_>| {
        let h = t.leaf(x.clone());
        let g = t.param(gain);
        let n = t.rmsnorm(h, g)?;
        let a = cetsp::diffcore::mha(t, &attn, n, n, None, 2)?;
        let h = t.add(h, a)?;
        let f = cetsp::diffcore::gated_ff(t, &ff, h)?;
        let w = t.param(head);
        let u = t.matmul(f, w)?;
        let u = t.tanh(u);
        let lp = t.masked_log_softmax(u, Some(mask.clone()))?;
        Ok(t.pick_sum(lp, vec![(0, 0, 1.0), (1, 1, 0.5), (2, 2, -0.7), (3, 0, 0.3), (4, 2, 1.1)]))
    };
    let result = value_and_grad(&block, build)
        .and_then(|(_, g)| grad_check(&block, &g, |p| value_of(p, build), GradCheckConfig { seed, ..GradCheckConfig::default() }));
    match result {
        Ok(r) => Check::new("layer gradients", r.max_rel_err < 1e-6, format!("max rel err {:.2e} over {} coords", r.max_rel_err, r.coords_checked)),
        Err(e) => Check::new("layer gradients", false, e.to_string()),
    }
}

fn surrogate_gradients(seed: u64) -> Check {
    let run = || -> anyhow::Result<f64> {
        let cfg = PolicyConfig { layers: 1, heads: 2, dim: 16, gamma: 4, ..PolicyConfig::default() };
        let policy = Policy::new(cfg, seed)?;
        let inst = generate_indexed(&GenConfig::new(vec![5], RadiusKind::Random, seed), 5, 0);
        let d = DiscretizedInstance::new(inst, 4)?;
        let starts = EnvState::initial(&d).uncovered().count();
        anyhow::ensure!(starts >= 2, "instance has fewer than two open targets");
        let scale = 1.0 / starts as f64;
        let g = reinforce_gradient(&policy, &d, starts, scale, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let actions: Vec<_> = g.trajectories.iter().map(|t| t.actions.clone()).collect();
        let weights = surrogate_weights(&g.rewards, scale)?;
        let build = |t: &mut Tape<'_>| Ok(replayed_surrogate(t, &policy, &d, &actions, &weights).expect("replay of sampled actions"));
        let report = grad_check(policy.params(), &g.grads, |p| value_of(p, build), GradCheckConfig { seed, ..GradCheckConfig::default() })?;
        Ok(report.max_rel_err)
    };
    match run() {
        Ok(err) => Check::new("surrogate gradients", err < 1e-4, format!("max rel err {err:.2e}")),
        Err(e) => Check::new("surrogate gradients", false, e.to_string()),
    }
}

fn env_oracle(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut bf_violations) = (0.0f64, 0);
    for i in 0..50 {
        let inst = generate_indexed(&GenConfig::new(vec![4], RadiusKind::Random, seed), 4, i);
        let d = DiscretizedInstance::new(inst, 4).expect("gamma > 0");
        let best = brute_force(&d).expect("small instance").length;
        for _ in 0..4 {
            let s = random_rollout(&d, &mut rng);
            worst = worst.max((s.length_so_far - tour_length(&s.waypoints, false)).abs());
            if best > s.length_so_far + 1e-9 {
                bf_violations += 1;
            }
        }
    }
    Check::new("env vs geometry", worst < 1e-9 && bf_violations == 0, format!("max diff {worst:.1e}, brute-force violations {bf_violations}"))
}

fn augmentation(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let inst = generate_indexed(&GenConfig::new(vec![8], RadiusKind::Random, seed), 8, i);
        let d = DiscretizedInstance::new(inst, 8).expect("gamma > 0");
        let pts = random_rollout(&d, &mut rng).waypoints;
        let base = tour_length(&pts, false);
        for s in Symmetry::all() {
            let moved: Vec<Point> = pts.iter().map(|&p| s.apply(p)).collect();
            worst = worst.max((tour_length(&moved, false) - base).abs());
        }
    }
    Check::new("augmentation symmetry", worst < 1e-9, format!("max diff {worst:.1e}"))
}

fn refinement(seed: u64) -> Check {
    let disks = [(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)].map(|(x, y)| Disk::new(Point::new(x, y), 0.2));
    let inst = Instance::new(Point::new(0.0, 0.0), disks.to_vec());
    let stops = (1..=3).map(|n| Stop { node: n, point: Point::new(n as f64, 0.2), waypoint_index: None }).collect();
    let line = refine_waypoints(&Route::new(inst.depot, stops, inst.depot), &inst).length;
    let mut increases = 0;
    for i in 0..50 {
        let inst = generate_indexed(&GenConfig::new(vec![10], RadiusKind::Random, seed), 10, i);
        let d = DiscretizedInstance::new(inst.clone(), 8).expect("gamma > 0");
        let r = cheapest_insertion(&d, None);
        if refine_waypoints(&r, &inst).length > r.length {
            increases += 1;
        }
    }
    let ok = (line - 5.6).abs() < 1e-6 && increases == 0;
    Check::new("refinement", ok, format!("collinear {line:.9} (optimum 5.6), increases {increases}"))
}

fn dynamic_coverage(seed: u64) -> Check {
    let mut failures = 0;
    for i in 0..10 {
        let sc = generate_scenario(10, 2, seed, i);
        match simulate(&sc, Planner::Insertion(InsertionMode::Cheapest), 8) {
            Ok(t) if t.covers_all(&sc) => {}
            _ => failures += 1,
        }
    }
    Check::new("dynamic coverage", failures == 0, format!("{failures} of 10 traces incomplete"))
}

pub fn run_all(seed: u64) -> Vec<Check> {
    vec![layer_gradients(seed), surrogate_gradients(seed), env_oracle(seed), augmentation(seed), refinement(seed), dynamic_coverage(seed)]
}
