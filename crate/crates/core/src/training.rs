//! REINFORCE with a shared multistart baseline, and the evaluation harness.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;

use crate::diffcore::{AdamConfig, Grads, Tape, Var};
use crate::env::{reset, Action, DiscretizedInstance, EnvState};
use crate::error::TrainError;
use crate::heuristics::{cheapest_insertion, nearest_neighbor};
use crate::instance::{generate, normalize, stream_rng, Distribution, GenConfig, Instance, RadiusConfig, RadiusKind};
use crate::par::{self, ExecMode};
use crate::policy::{weighted_log_prob, Chooser, Policy, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub instances_per_epoch: usize,
    pub batch_size: usize,
    pub sizes: Vec<usize>,
    pub radius_kinds: Vec<RadiusKind>,
    pub distribution: Distribution,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Evaluate on the validation set every this many epochs (0 = never).
    pub eval_every: usize,
    pub eval_instances: usize,
    pub exec: ExecMode,
    /// Directory receiving `checkpoint.bin` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only metrics log.
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            instances_per_epoch: 10_000,
            batch_size: 64,
            sizes: vec![10, 20],
            radius_kinds: vec![RadiusKind::Constant, RadiusKind::Random],
            distribution: Distribution::Uniform,
            lr: 1e-4,
            weight_decay: 1e-6,
            clip_norm: Some(1.0),
            seed: 0,
            eval_every: 1,
            eval_instances: 64,
            exec: ExecMode::available(),
            checkpoint_dir: None,
            metrics_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.batch_size > self.instances_per_epoch {
            return bad("batch size must be in 1..=instances_per_epoch");
        }
        if self.batch_size > MAX_BATCH {
            return bad("batch size is limited to 4096");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&s| s < 2) {
            return bad("training sizes must be at least 2");
        }
        if self.radius_kinds.is_empty() {
            return bad("at least one radius type is required");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    /// Batch sizes of one epoch; the last batch holds the remainder.
    pub fn batch_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut done = 0;
        while done < self.instances_per_epoch {
            let b = self.batch_size.min(self.instances_per_epoch - done);
            out.push(b);
            done += b;
        }
        out
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Per-instance advantages against the mean reward of its trajectories.
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>, TrainError> {
    if rewards.len() < 2 {
        return Err(TrainError::DegenerateBaseline(rewards.len()));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// Outcome of one instance's rollout and backward pass.
#[derive(Clone, Debug)]
pub struct InstanceGradient {
    pub grads: Grads,
    /// This instance's share of the surrogate loss.
    pub loss: f64,
    pub rewards: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

/// Samples `n_starts` multistart trajectories and returns the gradient of
/// `−scale · Σ_j advantage_j · log p(trajectory j)`.
pub fn reinforce_gradient(
    policy: &Policy,
    dinst: &DiscretizedInstance,
    n_starts: usize,
    scale: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<InstanceGradient, TrainError> {
    let states = reset(dinst, n_starts).map_err(crate::error::PolicyError::from)?;
    if states.len() < 2 {
        return Err(TrainError::DegenerateBaseline(states.len()));
    }
    let mut tape = Tape::with_params(policy.params());
    let episode = policy.run_episode(&mut tape, dinst, states, Chooser::Sample(rng))?;
    let rewards: Vec<f64> = episode.trajectories.iter().map(|t| t.reward).collect();
    let weights = surrogate_weights(&rewards, scale)?;
    let loss = weighted_log_prob(&mut tape, &episode.records, &weights)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).map_err(crate::error::PolicyError::from)?.into_params();
    Ok(InstanceGradient { grads, loss: value, rewards, trajectories: episode.trajectories })
}

/// Per-trajectory coefficients of `log p` in the surrogate loss: `−scale · advantage`.
pub fn surrogate_weights(rewards: &[f64], scale: f64) -> Result<Vec<f64>, TrainError> {
    Ok(advantages(rewards)?.iter().map(|a| -scale * a).collect())
}

/// Rebuilds the surrogate `Σ_j weights[j] · log p(actions[j])` on `tape` by
/// replaying fixed multistart action sequences from the start state.
pub fn replayed_surrogate(
    tape: &mut Tape<'_>,
    policy: &Policy,
    dinst: &DiscretizedInstance,
    actions: &[Vec<Action>],
    weights: &[f64],
) -> Result<Var, TrainError> {
    if actions.len() != weights.len() {
        return Err(TrainError::Config("one weight per trajectory is required".into()));
    }
    for seq in actions {
        let end = crate::env::replay(dinst, seq).map_err(crate::error::PolicyError::from)?;
        if !end.done {
            return Err(TrainError::Config("replayed trajectory does not reach the terminal".into()));
        }
    }
    let states = reset(dinst, actions.len()).map_err(crate::error::PolicyError::from)?;
    let episode = policy.run_episode(tape, dinst, states, Chooser::Replay(actions))?;
    Ok(weighted_log_prob(tape, &episode.records, weights)?)
}

/// True if the second-visited nodes of the trajectories are pairwise distinct.
pub fn multistart_distinct(trajs: &[Trajectory]) -> bool {
    let mut seen: Vec<usize> = trajs.iter().filter_map(|t| t.forced.and(t.second_node())).collect();
    let n = seen.len();
    seen.sort_unstable();
    seen.dedup();
    seen.len() == n && trajs.iter().all(|t| t.forced.is_none() || t.forced == t.second_node())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub batch: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

impl MetricsRow {
    pub fn line(&self) -> String {
        format!(
            "{}, {}, {:.6}, {:.6e}, {:.6e}, {}",
            self.epoch, self.batch, self.mean_reward, self.loss, self.grad_norm, self.wall_ms
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_loss: f64,
    /// Greedy mean tour length on the validation set, when evaluated.
    pub validation: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub metrics: Vec<MetricsRow>,
    /// Instances whose forced second nodes were not pairwise distinct.
    pub multistart_violations: usize,
    pub multistart_checked: usize,
    /// Instances skipped because fewer than two targets were open at the start.
    pub skipped_instances: usize,
}

const MAX_BATCH: usize = 1 << 12;

fn batch_key(epoch: usize, batch: usize) -> u64 {
    ((epoch as u64) << 32) | (batch as u64) << 12
}

/// Validation instances: uniform, random radii, the largest training size.
pub fn validation_set(cfg: &TrainConfig) -> Vec<Instance> {
    let size = cfg.sizes.iter().copied().max().unwrap_or(10);
    let gen = GenConfig {
        sizes: vec![size],
        distribution: cfg.distribution,
        radius: RadiusConfig::new(RadiusKind::Random),
        seed: cfg.seed ^ 0x7A11_DA7E,
    };
    (0..cfg.eval_instances as u64).map(|i| generate(&gen, size, &mut stream_rng(gen.seed, i))).collect()
}

/// Mean greedy (single pass, no augmentation) length over `set`.
pub fn greedy_mean(policy: &Policy, set: &[Instance], exec: ExecMode) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let gamma = policy.config().gamma;
    let lengths = par::map(exec, set, |_, inst| -> Result<f64, TrainError> {
        let dinst = DiscretizedInstance::new(inst.clone(), gamma).map_err(crate::error::PolicyError::from)?;
        Ok(policy.solve(&dinst, false)?.length)
    });
    let lengths: Vec<f64> = lengths.into_iter().collect::<Result<_, _>>()?;
    Ok(lengths.iter().sum::<f64>() / lengths.len() as f64)
}

/// Trains `policy` in place. `progress` sees every epoch summary as it
/// completes.
pub fn train(
    cfg: &TrainConfig,
    policy: &mut Policy,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let gamma = policy.config().gamma;
    let adam = cfg.adam();
    let mut report = TrainReport::default();
    let validation = if cfg.eval_every > 0 && cfg.eval_instances > 0 { validation_set(cfg) } else { Vec::new() };
    let mut metrics_file = match &cfg.metrics_path {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut reward_sum = 0.0;
        let mut reward_count = 0usize;
        let mut loss_sum = 0.0;
        let batches = cfg.batch_sizes();
        for (batch, &bsize) in batches.iter().enumerate() {
            let t0 = Instant::now();
            let key = batch_key(epoch, batch);
            let mut brng = stream_rng(cfg.seed, key);
            let size = cfg.sizes[brng.random_range(0..cfg.sizes.len())];
            let kind = cfg.radius_kinds[brng.random_range(0..cfg.radius_kinds.len())];
            let gen = GenConfig { sizes: vec![size], distribution: cfg.distribution, radius: RadiusConfig::new(kind), seed: cfg.seed };
            let snapshot: &Policy = policy;
            let outcomes = par::map_range(cfg.exec, bsize, |i| -> Result<Option<InstanceGradient>, TrainError> {
                let inst = generate(&gen, size, &mut stream_rng(cfg.seed ^ 0x1A57_A7CE, key + i as u64));
                let dinst = DiscretizedInstance::new(inst, gamma).map_err(crate::error::PolicyError::from)?;
                let starts = EnvState::initial(&dinst).uncovered().count();
                if starts < 2 {
                    return Ok(None);
                }
                let scale = 1.0 / (bsize as f64 * starts as f64);
                let mut rng = stream_rng(cfg.seed ^ 0x5A3B_1E00, key + i as u64);
                reinforce_gradient(snapshot, &dinst, starts, scale, &mut rng).map(Some)
            });
            let mut total: Option<Grads> = None;
            let mut batch_loss = 0.0;
            let mut batch_rewards = Vec::new();
            for out in outcomes {
                let Some(g) = out? else {
                    report.skipped_instances += 1;
                    continue;
                };
                report.multistart_checked += 1;
                if !multistart_distinct(&g.trajectories) {
                    report.multistart_violations += 1;
                }
                batch_loss += g.loss;
                batch_rewards.extend_from_slice(&g.rewards);
                match &mut total {
                    Some(t) => t.add_assign(&g.grads),
                    None => total = Some(g.grads),
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            let mut grad_norm = 0.0;
            if let Some(mut g) = total {
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, batch });
                }
                grad_norm = match cfg.clip_norm {
                    Some(c) => g.clip_norm(c),
                    None => g.norm(),
                };
                policy.params_mut().adam_step(&g, &adam).map_err(crate::error::PolicyError::from)?;
            }
            let mean_reward = if batch_rewards.is_empty() {
                0.0
            } else {
                batch_rewards.iter().sum::<f64>() / batch_rewards.len() as f64
            };
            reward_sum += batch_rewards.iter().sum::<f64>();
            reward_count += batch_rewards.len();
            loss_sum += batch_loss;
            let row = MetricsRow { epoch, batch, mean_reward, loss: batch_loss, grad_norm, wall_ms: t0.elapsed().as_millis() };
            if let Some(f) = &mut metrics_file {
                writeln!(f, "{}", row.line())?;
            }
            report.metrics.push(row);
        }
        let validation_len = if !validation.is_empty() && (epoch + 1) % cfg.eval_every == 0 {
            Some(greedy_mean(policy, &validation, cfg.exec)?)
        } else {
            None
        };
        if let Some(dir) = &cfg.checkpoint_dir {
            policy.save_with(&dir.join("checkpoint.bin"), &[("epoch", (epoch + 1).to_string())])?;
        }
        let summary = EpochSummary {
            epoch,
            mean_reward: if reward_count > 0 { reward_sum / reward_count as f64 } else { 0.0 },
            mean_loss: loss_sum / batches.len() as f64,
            validation: validation_len,
            wall_ms: epoch_start.elapsed().as_millis(),
        };
        progress(&summary);
        report.epochs.push(summary);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    NearestNeighbor,
    CheapestInsertion,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::NearestNeighbor => "NN",
            Baseline::CheapestInsertion => "CI",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: String,
    /// Mean tour length.
    pub objective: f64,
    /// Percent above the best objective among the report's rows.
    pub gap: f64,
    /// Total wall time over the dataset, seconds.
    pub time_s: f64,
    pub per_instance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    fn from_rows(mut rows: Vec<EvalRow>) -> Self {
        let best = rows.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
        for r in &mut rows {
            r.gap = 100.0 * (r.objective - best) / best;
        }
        Self { rows }
    }

    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<w$}  {:>10}  {:>8}  {:>10}\n", "Method", "Obj.", "Gap", "Time");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:>10.4}  {:>7.2}%  {:>9.2}s", r.method, r.objective, r.gap, r.time_s);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,obj,gap_pct,time_s\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.9},{:.6},{:.6}", r.method, r.objective, r.gap, r.time_s);
        }
        s
    }
}

pub fn policy_method_name(aug: bool) -> &'static str {
    if aug {
        "policy+aug"
    } else {
        "policy"
    }
}

/// Runs the policy (greedy multistart, optionally augmented) and the
/// requested baselines on `dataset`. Instances are normalized first and
/// lengths reported in original units.
pub fn evaluate(
    policy: Option<&Policy>,
    dataset: &[Instance],
    gamma: usize,
    use_aug: bool,
    baselines: &[Baseline],
    exec: ExecMode,
) -> Result<EvalReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let gamma = policy.map_or(gamma, |p| p.config().gamma);
    let prepared: Vec<(DiscretizedInstance, f64)> = dataset
        .iter()
        .map(|inst| {
            let norm = normalize(inst).map_err(|e| TrainError::Config(e.to_string()))?;
            let d = DiscretizedInstance::new(norm.instance, gamma).map_err(crate::error::PolicyError::from)?;
            Ok((d, norm.scale))
        })
        .collect::<Result<_, TrainError>>()?;
    let mut rows = Vec::new();
    let run = |f: &(dyn Fn(&DiscretizedInstance) -> Result<f64, TrainError> + Sync)| -> Result<(Vec<f64>, f64), TrainError> {
        let t0 = Instant::now();
        let out = par::map(exec, &prepared, |_, (d, scale)| f(d).map(|l| l * scale));
        let lengths = out.into_iter().collect::<Result<Vec<f64>, _>>()?;
        Ok((lengths, t0.elapsed().as_secs_f64()))
    };
    let mut push = |name: &str, (lengths, time_s): (Vec<f64>, f64)| {
        let objective = lengths.iter().sum::<f64>() / lengths.len() as f64;
        rows.push(EvalRow { method: name.to_string(), objective, gap: 0.0, time_s, per_instance: lengths });
    };
    if let Some(p) = policy {
        push(policy_method_name(use_aug), run(&|d| Ok(p.solve(d, use_aug)?.length))?);
    }
    for &b in baselines {
        let res = match b {
            Baseline::NearestNeighbor => run(&|d| Ok(nearest_neighbor(d).length))?,
            Baseline::CheapestInsertion => run(&|d| Ok(cheapest_insertion(d, None).length))?,
        };
        push(b.name(), res);
    }
    Ok(EvalReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, value_and_grad, value_of, GradCheckConfig};
    use crate::instance::generate_indexed;
    use crate::policy::tests::micro_config;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_policy(seed: u64) -> Policy {
        Policy::new(micro_config(), seed).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            instances_per_epoch: 6,
            batch_size: 4,
            sizes: vec![4, 5],
            eval_every: 0,
            ..TrainConfig::default()
        }
    }

    fn dinst(n: usize, idx: u64) -> DiscretizedInstance {
        DiscretizedInstance::new(generate_indexed(&GenConfig::new(vec![n], RadiusKind::Random, 5), n, idx), 4).unwrap()
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(rewards in prop::collection::vec(-50.0f64..0.0, 2..40)) {
            let adv = advantages(&rewards).unwrap();
            prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn single_trajectory_is_rejected() {
        assert!(matches!(advantages(&[-1.0]), Err(TrainError::DegenerateBaseline(1))));
        let policy = micro_policy(0);
        let err = reinforce_gradient(&policy, &dinst(5, 0), 1, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, TrainError::DegenerateBaseline(1)));
    }

    #[test]
    fn equal_rewards_give_zero_gradient() {
        let policy = micro_policy(3);
        let d = dinst(5, 1);
        let starts = EnvState::initial(&d).uncovered().count();
        let trajs = policy.rollout(&d, crate::policy::DecodeMode::Sample, starts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let actions: Vec<Vec<Action>> = trajs.iter().map(|t| t.actions.clone()).collect();
        let weights = surrogate_weights(&vec![-2.5; starts], 0.1).unwrap();
        assert!(weights.iter().all(|&w| w == 0.0));
        let (_, grads) = value_and_grad(policy.params(), |t| Ok(replayed_surrogate(t, &policy, &d, &actions, &weights).unwrap())).unwrap();
        assert_eq!(grads.norm(), 0.0);
    }

    #[test]
    fn training_gradient_matches_finite_differences() {
        let policy = micro_policy(4);
        let d = dinst(5, 2);
        let starts = EnvState::initial(&d).uncovered().count();
        let scale = 1.0 / starts as f64;
        let g = reinforce_gradient(&policy, &d, starts, scale, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let actions: Vec<Vec<Action>> = g.trajectories.iter().map(|t| t.actions.clone()).collect();
        let weights = surrogate_weights(&g.rewards, scale).unwrap();
        let build = |t: &mut Tape<'_>| Ok(replayed_surrogate(t, &policy, &d, &actions, &weights).unwrap());
        assert!((value_of(policy.params(), build).unwrap() - g.loss).abs() < 1e-12);
        let cfg = GradCheckConfig { max_coords: 300, ..GradCheckConfig::default() };
        let report = grad_check(policy.params(), &g.grads, |p| value_of(p, build), cfg).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn replay_rejects_unfinished_sequences() {
        let policy = micro_policy(0);
        let d = dinst(5, 3);
        let seqs = vec![vec![Action::new(1, 0)], vec![Action::new(2, 0)]];
        let mut tape = Tape::with_params(policy.params());
        assert!(replayed_surrogate(&mut tape, &policy, &d, &seqs, &[0.0, 0.0]).is_err());
        assert!(replayed_surrogate(&mut tape, &policy, &d, &seqs, &[0.0]).is_err());
    }

    #[test]
    fn last_batch_holds_the_remainder() {
        let cfg = TrainConfig { instances_per_epoch: 150, batch_size: 64, ..TrainConfig::default() };
        assert_eq!(cfg.batch_sizes(), vec![64, 64, 22]);
        let exact = TrainConfig { instances_per_epoch: 128, ..cfg.clone() };
        assert_eq!(exact.batch_sizes(), vec![64, 64]);
        let report = train(&tiny_cfg(), &mut micro_policy(0), &mut |_| {}).unwrap();
        let per_epoch: Vec<usize> = report.metrics.iter().filter(|m| m.epoch == 0).map(|m| m.batch).collect();
        assert_eq!(per_epoch, vec![0, 1]);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!((ok.lr, ok.weight_decay, ok.batch_size), (1e-4, 1e-6, 64));
        for bad in [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { batch_size: 20_000, ..ok.clone() },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { sizes: vec![], ..ok.clone() },
            TrainConfig { radius_kinds: vec![], ..ok.clone() },
            TrainConfig { clip_norm: Some(-1.0), ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn training_is_deterministic_across_exec_modes() {
        let run = |exec| {
            let mut p = micro_policy(7);
            let cfg = TrainConfig { exec, ..tiny_cfg() };
            let r = train(&cfg, &mut p, &mut |_| {}).unwrap();
            (p.to_bytes(), r.metrics.iter().map(|m| (m.mean_reward, m.loss, m.grad_norm)).collect::<Vec<_>>())
        };
        let a = run(ExecMode::Sequential);
        assert_eq!(a, run(ExecMode::Sequential));
        assert_eq!(a, run(ExecMode::Parallel));
        assert_ne!(a.0, micro_policy(7).to_bytes());
    }

    #[test]
    fn training_writes_checkpoints_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().join("ckpt")),
            metrics_path: Some(dir.path().join("metrics.log")),
            eval_every: 1,
            eval_instances: 3,
            ..tiny_cfg()
        };
        let mut p = micro_policy(1);
        let mut seen = Vec::new();
        let report = train(&cfg, &mut p, &mut |s| seen.push(s.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert!(report.epochs.iter().all(|e| e.validation.is_some()));
        assert_eq!(report.multistart_violations, 0);
        assert!(report.multistart_checked > 0);
        let loaded = Policy::load(&dir.path().join("ckpt/checkpoint.bin")).unwrap();
        assert_eq!(loaded.to_bytes(), p.to_bytes());
        let log = std::fs::read_to_string(dir.path().join("metrics.log")).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.lines().all(|l| l.split(", ").count() == 6));
    }

    #[test]
    fn evaluation_report_contract() {
        let policy = micro_policy(2);
        let gen = GenConfig::new(vec![6], RadiusKind::Random, 17);
        let set: Vec<Instance> = (0..5).map(|i| generate_indexed(&gen, 6, i)).collect();
        let bl = [Baseline::NearestNeighbor, Baseline::CheapestInsertion];
        let plain = evaluate(Some(&policy), &set, 4, false, &bl, ExecMode::Sequential).unwrap();
        let aug = evaluate(Some(&policy), &set, 4, true, &[], ExecMode::Sequential).unwrap();
        let p = plain.row("policy").unwrap();
        let a = aug.row("policy+aug").unwrap();
        for (x, y) in a.per_instance.iter().zip(&p.per_instance) {
            assert!(x <= &(y + 1e-12));
        }
        assert!(plain.rows.iter().any(|r| r.gap == 0.0));
        assert!(plain.rows.iter().all(|r| r.gap >= 0.0));
        for r in &plain.rows {
            let mean = r.per_instance.iter().sum::<f64>() / r.per_instance.len() as f64;
            assert!((mean - r.objective).abs() < 1e-9);
        }
        // per-instance objectives are negated greedy rewards
        for (inst, &len) in set.iter().zip(&p.per_instance) {
            let d = DiscretizedInstance::new(inst.clone(), 4).unwrap();
            let trajs = policy.rollout(&d, crate::policy::DecodeMode::Greedy, EnvState::initial(&d).uncovered().count(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let best = trajs.iter().map(|t| -t.reward).fold(f64::INFINITY, f64::min);
            assert!((best - len).abs() < 1e-9);
        }
        assert!(evaluate(Some(&policy), &[], 4, false, &[], ExecMode::Sequential).is_err());
        let csv = plain.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(plain.to_table().contains("CI"));
    }

    #[test]
    fn policy_config_gamma_wins_in_evaluate() {
        let policy = micro_policy(0);
        let set = vec![generate_indexed(&GenConfig::new(vec![5], RadiusKind::Constant, 1), 5, 0)];
        assert!(evaluate(Some(&policy), &set, 16, false, &[], ExecMode::Sequential).is_ok());
    }
}
