//! Dual-decoder attention policy.
//!
//! The encoder embeds the depot and every target disk. At each step a node
//! decoder picks the next target (clipped-tanh compatibility over all nodes)
//! and a location decoder picks one of that target's `gamma` perimeter
//! waypoints, attending over the selected node's nearest neighbours.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{gated_ff, mha, GatedFfParams, Mask, MhaParams, ParamBlock, ParamId, Tape, Tensor, Var};
use crate::env::{feasible_mask, reset, reset_from, reward, step_in_place, Action, DiscretizedInstance, EnvState};
use crate::error::PolicyError;
use crate::geometry::Point;
use crate::instance::{Instance, Symmetry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// RMS pre-norm with gated feed-forward sublayers.
    PreNormGated,
    /// Post-norm with instance normalization and a ReLU feed-forward.
    PostNormInstance,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::PreNormGated => "prenorm",
            EncoderKind::PostNormInstance => "postnorm",
        }
    }
}

impl FromStr for EncoderKind {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prenorm" => Ok(EncoderKind::PreNormGated),
            "postnorm" => Ok(EncoderKind::PostNormInstance),
            _ => Err(PolicyError::Config(format!("unknown encoder kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub gamma: usize,
    /// Upper bound on the neighbour set; clamped to `n` per instance.
    pub k_nn: usize,
    pub clip: f64,
    pub encoder: EncoderKind,
    /// When false the location decoder attends only to the selected node.
    pub knn_interaction: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            dim: 128,
            gamma: 16,
            k_nn: 10,
            clip: 10.0,
            encoder: EncoderKind::PreNormGated,
            knn_interaction: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return bad(format!("dim {} must be even", self.dim));
        }
        if self.layers == 0 {
            return bad("at least one encoder layer is required".into());
        }
        if self.gamma < 2 {
            return bad(format!("gamma must be at least 2, got {}", self.gamma));
        }
        if self.k_nn == 0 {
            return bad("k_nn must be at least 1".into());
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        Ok(())
    }

    /// Key/value form stored in checkpoint headers.
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("layers".into(), self.layers.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("dim".into(), self.dim.to_string());
        m.insert("gamma".into(), self.gamma.to_string());
        m.insert("k_nn".into(), self.k_nn.to_string());
        m.insert("clip".into(), format!("{:?}", self.clip));
        m.insert("encoder".into(), self.encoder.name().into());
        m.insert("knn_interaction".into(), self.knn_interaction.to_string());
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self, PolicyError> {
        fn get<T: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T, PolicyError> {
            meta.get(key)
                .ok_or_else(|| PolicyError::Config(format!("checkpoint header lacks {key}")))?
                .parse()
                .map_err(|_| PolicyError::Config(format!("checkpoint header has a bad {key}")))
        }
        let cfg = Self {
            layers: get(meta, "layers")?,
            heads: get(meta, "heads")?,
            dim: get(meta, "dim")?,
            gamma: get(meta, "gamma")?,
            k_nn: get(meta, "k_nn")?,
            clip: get(meta, "clip")?,
            encoder: meta.get("encoder").map_or(Ok(EncoderKind::PreNormGated), |s| s.parse())?,
            knn_interaction: get(meta, "knn_interaction")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layers={} heads={} dim={} gamma={} k_nn={} clip={} encoder={} knn={}",
            self.layers,
            self.heads,
            self.dim,
            self.gamma,
            self.k_nn,
            self.clip,
            self.encoder.name(),
            self.knn_interaction
        )
    }
}

#[derive(Clone, Debug)]
enum LayerIds {
    Pre { norm1: ParamId, attn: MhaParams, norm2: ParamId, ff: GatedFfParams },
    Post { attn: MhaParams, in1: (ParamId, ParamId), ff: [ParamId; 4], in2: (ParamId, ParamId) },
}

#[derive(Clone, Debug)]
struct Ids {
    w_coord: ParamId,
    w_radius: ParamId,
    layers: Vec<LayerIds>,
    // node decoder
    wq_graph: ParamId,
    wq_last: ParamId,
    wk_node: ParamId,
    wv_node: ParamId,
    wo_node: ParamId,
    // location decoder
    wq_sel: ParamId,
    wq_prev: ParamId,
    wk_loc: ParamId,
    wv_loc: ParamId,
    wo_loc: ParamId,
    mlp: [(ParamId, ParamId); 3],
}

/// Value-only encoder output for one instance.
#[derive(Clone, Debug)]
pub struct Embeddings {
    /// `(n + 1) × d`, depot first.
    pub nodes: Tensor,
    /// `1 × d`, the mean of `nodes` over rows.
    pub graph: Tensor,
    /// Neighbour lists used by the location decoder, indexed by node.
    pub knn: Vec<Vec<usize>>,
}

/// One decoded tour.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<Action>,
    /// Log-probability of each step (node plus location term; forced and
    /// closing choices contribute zero for the node part).
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub forced: Option<usize>,
    pub state: EnvState,
}

impl Trajectory {
    pub fn length(&self) -> f64 {
        -self.reward
    }

    /// Node visited right after the start.
    pub fn second_node(&self) -> Option<usize> {
        self.actions.first().map(|a| a.node)
    }
}

/// Log-probability tensors recorded on a tape, with the entry each
/// trajectory selected.
#[derive(Clone, Debug)]
pub(crate) struct StepRecord {
    pub var: Var,
    /// `(row, column, trajectory)`
    pub picks: Vec<(usize, usize, usize)>,
}

#[derive(Debug)]
pub(crate) struct Episode {
    pub trajectories: Vec<Trajectory>,
    pub records: Vec<StepRecord>,
}

pub(crate) enum Chooser<'a> {
    Sample(&'a mut ChaCha8Rng),
    Greedy,
    /// Teacher forcing: trajectory `j` replays `actions[j]`.
    Replay(&'a [Vec<Action>]),
}

impl Chooser<'_> {
    fn pick(&mut self, log_probs: &[f64], traj: usize, step: usize, node_phase: bool) -> usize {
        match self {
            Chooser::Greedy => argmax(log_probs),
            Chooser::Sample(rng) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last = 0;
                for (i, &lp) in log_probs.iter().enumerate() {
                    let p = lp.exp();
                    if p > 0.0 {
                        acc += p;
                        last = i;
                        if u < acc {
                            return i;
                        }
                    }
                }
                last
            }
            Chooser::Replay(actions) => {
                let a = actions[traj][step];
                if node_phase {
                    a.node
                } else {
                    a.waypoint_index
                }
            }
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// The `k` nodes nearest to `node` by center distance (depot eligible, the
/// node itself excluded), nearest first, ties to the lower index.
pub fn knn_indices(inst: &Instance, node: usize, k: usize) -> Vec<usize> {
    let c = inst.node_disk(node).center;
    let mut others: Vec<(f64, usize)> =
        (0..=inst.n()).filter(|&j| j != node).map(|j| (inst.node_disk(j).center.dist(c), j)).collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Projections derived from the node embeddings, computed once per instance.
struct Prepared {
    q_last: Var,
    q_graph: Var,
    k_node: Var,
    v_node: Var,
    compat: Var,
    q_sel: Var,
    k_loc: Var,
    v_loc: Var,
    mlp_in: Var,
    knn: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    params: ParamBlock,
    ids: Ids,
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut p = ParamBlock::new();
        let w_coord = p.add_fan_in("enc.w_coord", 2, d / 2, &mut rng);
        let w_radius = p.add_fan_in("enc.w_radius", 1, d / 2, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let pre = format!("enc.{l}");
            layers.push(match config.encoder {
                EncoderKind::PreNormGated => LayerIds::Pre {
                    norm1: p.add_const(format!("{pre}.norm1"), 1, d, 1.0),
                    attn: MhaParams::init(&mut p, &format!("{pre}.attn"), d, &mut rng),
                    norm2: p.add_const(format!("{pre}.norm2"), 1, d, 1.0),
                    ff: GatedFfParams::init(&mut p, &format!("{pre}.ff"), d, &mut rng),
                },
                EncoderKind::PostNormInstance => LayerIds::Post {
                    attn: MhaParams::init(&mut p, &format!("{pre}.attn"), d, &mut rng),
                    in1: (
                        p.add_const(format!("{pre}.in1.gain"), 1, d, 1.0),
                        p.add_const(format!("{pre}.in1.bias"), 1, d, 0.0),
                    ),
                    ff: [
                        p.add_fan_in(format!("{pre}.ff.w1"), d, 4 * d, &mut rng),
                        p.add_const(format!("{pre}.ff.b1"), 1, 4 * d, 0.0),
                        p.add_fan_in(format!("{pre}.ff.w2"), 4 * d, d, &mut rng),
                        p.add_const(format!("{pre}.ff.b2"), 1, d, 0.0),
                    ],
                    in2: (
                        p.add_const(format!("{pre}.in2.gain"), 1, d, 1.0),
                        p.add_const(format!("{pre}.in2.bias"), 1, d, 0.0),
                    ),
                },
            });
        }
        let wq_graph = p.add_fan_in("node.wq_graph", d, d, &mut rng);
        let wq_last = p.add_fan_in("node.wq_last", d, d, &mut rng);
        let wk_node = p.add_fan_in("node.wk", d, d, &mut rng);
        let wv_node = p.add_fan_in("node.wv", d, d, &mut rng);
        let wo_node = p.add_fan_in("node.wo", d, d, &mut rng);
        let wq_sel = p.add_fan_in("loc.wq_sel", d, d, &mut rng);
        let wq_prev = p.add_fan_in("loc.wq_prev", 2, d, &mut rng);
        let wk_loc = p.add_fan_in("loc.wk", d, d, &mut rng);
        let wv_loc = p.add_fan_in("loc.wv", d, d, &mut rng);
        let wo_loc = p.add_fan_in("loc.wo", d, d, &mut rng);
        let widths = [d, d, d / 2, config.gamma];
        let mlp = std::array::from_fn(|i| {
            (
                p.add_fan_in(format!("loc.mlp{}.w", i + 1), widths[i], widths[i + 1], &mut rng),
                p.add_const(format!("loc.mlp{}.b", i + 1), 1, widths[i + 1], 0.0),
            )
        });
        let ids = Ids {
            w_coord,
            w_radius,
            layers,
            wq_graph,
            wq_last,
            wk_node,
            wv_node,
            wo_node,
            wq_sel,
            wq_prev,
            wk_loc,
            wv_loc,
            wo_loc,
            mlp,
        };
        Ok(Self { config, params: p, ids })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamBlock {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamBlock {
        &mut self.params
    }

    /// Toggles neighbour interaction in the location decoder without touching
    /// the weights.
    pub fn set_knn_interaction(&mut self, on: bool) {
        self.config.knn_interaction = on;
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        self.params.save(path, &self.config.to_meta())?;
        Ok(())
    }

    /// Saves with extra header entries (for example the epoch count).
    pub fn save_with(&self, path: &Path, extra: &[(&str, String)]) -> Result<(), PolicyError> {
        let mut meta = self.config.to_meta();
        for (k, v) in extra {
            meta.insert((*k).to_string(), v.clone());
        }
        self.params.save(path, &meta)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.to_bytes(&self.config.to_meta())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let (block, meta) = ParamBlock::from_bytes(bytes)?;
        Self::from_block(block, &meta)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let (block, meta) = ParamBlock::load(path)?;
        Self::from_block(block, &meta)
    }

    fn from_block(block: ParamBlock, meta: &BTreeMap<String, String>) -> Result<Self, PolicyError> {
        let config = PolicyConfig::from_meta(meta)?;
        let mut policy = Self::new(config, 0)?;
        if block.len() != policy.params.len() {
            return Err(PolicyError::Config(format!(
                "checkpoint holds {} blocks, configuration expects {}",
                block.len(),
                policy.params.len()
            )));
        }
        policy.params.load_values_from(&block)?;
        Ok(policy)
    }

    fn k_for(&self, n: usize) -> usize {
        self.config.k_nn.min(n).max(1)
    }

    fn knn_table(&self, inst: &Instance) -> Vec<Vec<usize>> {
        let k = self.k_for(inst.n());
        (0..=inst.n()).map(|i| knn_indices(inst, i, k)).collect()
    }

    /// Encoder on the tape; returns the `(n + 1) × d` node embeddings.
    pub(crate) fn encode_on(&self, tape: &mut Tape<'_>, inst: &Instance) -> Result<Var, PolicyError> {
        let n1 = inst.n() + 1;
        let mut coords = Tensor::zeros(n1, 2);
        let mut radii = Tensor::zeros(n1, 1);
        for i in 0..n1 {
            let d = inst.node_disk(i);
            coords.set(i, 0, d.center.x);
            coords.set(i, 1, d.center.y);
            radii.set(i, 0, d.radius);
        }
        let x = tape.leaf(coords);
        let r = tape.leaf(radii);
        let (wc, wr) = (tape.param(self.ids.w_coord), tape.param(self.ids.w_radius));
        let hx = tape.matmul(x, wc)?;
        let hr = tape.matmul(r, wr)?;
        let mut h = tape.concat_cols(hx, hr)?;
        let heads = self.config.heads;
        for layer in &self.ids.layers {
            h = match layer {
                LayerIds::Pre { norm1, attn, norm2, ff } => {
                    let g1 = tape.param(*norm1);
                    let x1 = tape.rmsnorm(h, g1)?;
                    let a = mha(tape, attn, x1, x1, None, heads)?;
                    let h1 = tape.add(h, a)?;
                    let g2 = tape.param(*norm2);
                    let x2 = tape.rmsnorm(h1, g2)?;
                    let f = gated_ff(tape, ff, x2)?;
                    tape.add(h1, f)?
                }
                LayerIds::Post { attn, in1, ff, in2 } => {
                    let a = mha(tape, attn, h, h, None, heads)?;
                    let s = tape.add(h, a)?;
                    let (g, b) = (tape.param(in1.0), tape.param(in1.1));
                    let h1 = tape.instance_norm(s, g, b)?;
                    let [w1, b1, w2, b2] = ff.map(|id| tape.param(id));
                    let u = tape.affine(h1, w1, Some(b1))?;
                    let u = tape.relu(u);
                    let f = tape.affine(u, w2, Some(b2))?;
                    let s = tape.add(h1, f)?;
                    let (g, b) = (tape.param(in2.0), tape.param(in2.1));
                    tape.instance_norm(s, g, b)?
                }
            };
        }
        Ok(h)
    }

    fn prepare(&self, tape: &mut Tape<'_>, h: Var, knn: Vec<Vec<usize>>) -> Result<Prepared, PolicyError> {
        let ids = &self.ids;
        let g = tape.mean_rows(h);
        let w = |tape: &mut Tape<'_>, id| tape.param(id);
        let wqg = w(tape, ids.wq_graph);
        let q_graph = tape.matmul(g, wqg)?;
        let wql = w(tape, ids.wq_last);
        let q_last = tape.matmul(h, wql)?;
        let wk = w(tape, ids.wk_node);
        let k_node = tape.matmul(h, wk)?;
        let wv = w(tape, ids.wv_node);
        let v_node = tape.matmul(h, wv)?;
        // h_i · (z W^O)ᵀ = z · (h_i W^Oᵀ)ᵀ, so project the nodes once
        let wo = w(tape, ids.wo_node);
        let compat = tape.matmul_bt(h, wo)?;
        let wqs = w(tape, ids.wq_sel);
        let q_sel = tape.matmul(h, wqs)?;
        let wkl = w(tape, ids.wk_loc);
        let k_loc = tape.matmul(h, wkl)?;
        let wvl = w(tape, ids.wv_loc);
        let v_loc = tape.matmul(h, wvl)?;
        // the attention output projection feeds straight into the first MLP
        // layer; fold the two matrices
        let wol = w(tape, ids.wo_loc);
        let f1 = w(tape, ids.mlp[0].0);
        let mlp_in = tape.matmul(wol, f1)?;
        Ok(Prepared { q_last, q_graph, k_node, v_node, compat, q_sel, k_loc, v_loc, mlp_in, knn })
    }

    /// Node log-probabilities for a batch of rows, `rows × (n + 1)`.
    fn node_logp(&self, tape: &mut Tape<'_>, pre: &Prepared, last: &[usize], mask: Mask) -> Result<Var, PolicyError> {
        let q = tape.gather_rows(pre.q_last, last);
        let q = tape.add_row(q, pre.q_graph)?;
        let z = tape.attention(q, pre.k_node, pre.v_node, Some(&mask), self.config.heads)?;
        let u = tape.matmul_bt(z, pre.compat)?;
        let dk = (self.config.dim / self.config.heads) as f64;
        let u = tape.scale(u, 1.0 / dk.sqrt());
        let u = tape.tanh(u);
        let u = tape.scale(u, self.config.clip);
        Ok(tape.masked_log_softmax(u, Some(mask))?)
    }

    /// Waypoint log-probabilities for a batch of rows, `rows × gamma`.
    fn loc_logp(&self, tape: &mut Tape<'_>, pre: &Prepared, sel: &[usize], prev: &[Point]) -> Result<Var, PolicyError> {
        let n1 = pre.knn.len();
        let mut allow = vec![false; sel.len() * n1];
        let mut y = Tensor::zeros(sel.len(), 2);
        for (r, (&s, p)) in sel.iter().zip(prev).enumerate() {
            if s == 0 {
                return Err(PolicyError::DepotLocation);
            }
            if self.config.knn_interaction {
                for &j in &pre.knn[s] {
                    allow[r * n1 + j] = true;
                }
            } else {
                allow[r * n1 + s] = true;
            }
            y.set(r, 0, p.x);
            y.set(r, 1, p.y);
        }
        let mask = Mask::new(sel.len(), n1, allow);
        let q = tape.gather_rows(pre.q_sel, sel);
        let y = tape.leaf(y);
        let wy = tape.param(self.ids.wq_prev);
        let qy = tape.matmul(y, wy)?;
        let q = tape.add(q, qy)?;
        let z = tape.attention(q, pre.k_loc, pre.v_loc, Some(&mask), self.config.heads)?;
        let b1 = tape.param(self.ids.mlp[0].1);
        let a = tape.affine(z, pre.mlp_in, Some(b1))?;
        let a = tape.silu(a);
        let (w2, b2) = (tape.param(self.ids.mlp[1].0), tape.param(self.ids.mlp[1].1));
        let a = tape.affine(a, w2, Some(b2))?;
        let a = tape.silu(a);
        let (w3, b3) = (tape.param(self.ids.mlp[2].0), tape.param(self.ids.mlp[2].1));
        let logits = tape.affine(a, w3, Some(b3))?;
        Ok(tape.masked_log_softmax(logits, None)?)
    }

    /// Encoder output as plain tensors.
    pub fn encode(&self, inst: &Instance) -> Result<Embeddings, PolicyError> {
        let mut tape = Tape::with_params(&self.params);
        let h = self.encode_on(&mut tape, inst)?;
        let g = tape.mean_rows(h);
        tape.status()?;
        Ok(Embeddings { nodes: tape.value(h).clone(), graph: tape.value(g).clone(), knn: self.knn_table(inst) })
    }

    /// Probabilities of the next node given the last visited node and the
    /// feasibility mask.
    pub fn node_decode_step(&self, emb: &Embeddings, last_node: usize, mask: &[bool]) -> Result<Vec<f64>, PolicyError> {
        let mut tape = Tape::with_params(&self.params);
        let h = tape.leaf(emb.nodes.clone());
        let pre = self.prepare(&mut tape, h, emb.knn.clone())?;
        let lp = self.node_logp(&mut tape, &pre, &[last_node], Mask::new(1, mask.len(), mask.to_vec()))?;
        Ok(tape.value(lp).data().iter().map(|l| l.exp()).collect())
    }

    /// Probabilities over the `gamma` waypoints of `selected`.
    pub fn loc_decode_step(&self, emb: &Embeddings, selected: usize, prev: Point) -> Result<Vec<f64>, PolicyError> {
        if selected == 0 {
            return Err(PolicyError::DepotLocation);
        }
        let mut tape = Tape::with_params(&self.params);
        let h = tape.leaf(emb.nodes.clone());
        let pre = self.prepare(&mut tape, h, emb.knn.clone())?;
        let lp = self.loc_logp(&mut tape, &pre, &[selected], &[prev])?;
        Ok(tape.value(lp).data().iter().map(|l| l.exp()).collect())
    }

    fn check_gamma(&self, dinst: &DiscretizedInstance) -> Result<(), PolicyError> {
        if dinst.gamma != self.config.gamma {
            return Err(PolicyError::Config(format!(
                "instance discretized with gamma {} but the model predicts {} waypoints",
                dinst.gamma, self.config.gamma
            )));
        }
        Ok(())
    }

    /// Decodes every state in `states` to completion on `tape`, recording the
    /// log-probability tensors of each network decision.
    pub(crate) fn run_episode(
        &self,
        tape: &mut Tape<'_>,
        dinst: &DiscretizedInstance,
        mut states: Vec<EnvState>,
        mut chooser: Chooser<'_>,
    ) -> Result<Episode, PolicyError> {
        self.check_gamma(dinst)?;
        let h = self.encode_on(tape, &dinst.base)?;
        let pre = self.prepare(tape, h, self.knn_table(&dinst.base))?;
        let m = states.len();
        let n1 = dinst.num_nodes();
        let forced: Vec<Option<usize>> = states.iter().map(|s| s.forced).collect();
        let mut actions: Vec<Vec<Action>> = vec![Vec::new(); m];
        let mut step_lp: Vec<Vec<f64>> = vec![Vec::new(); m];
        let mut records = Vec::new();
        let mut node_of = vec![0usize; m];
        loop {
            let active: Vec<usize> = (0..m).filter(|&j| !states[j].done).collect();
            if active.is_empty() {
                break;
            }
            // node choice
            let mut net_rows = Vec::new();
            for &j in &active {
                step_lp[j].push(0.0);
                if let Some(f) = states[j].forced {
                    node_of[j] = f;
                } else if states[j].all_covered() {
                    node_of[j] = 0;
                } else {
                    net_rows.push(j);
                }
            }
            if !net_rows.is_empty() {
                let last: Vec<usize> = net_rows.iter().map(|&j| states[j].last_node()).collect();
                let mut allow = Vec::with_capacity(net_rows.len() * n1);
                for &j in &net_rows {
                    allow.extend(feasible_mask(&states[j])?);
                }
                let lp = self.node_logp(tape, &pre, &last, Mask::new(net_rows.len(), n1, allow))?;
                let mut picks = Vec::with_capacity(net_rows.len());
                for (r, &j) in net_rows.iter().enumerate() {
                    let row = tape.value(lp).row(r);
                    let c = chooser.pick(row, j, states[j].steps(), true);
                    *step_lp[j].last_mut().unwrap() += row[c];
                    node_of[j] = c;
                    picks.push((r, c, j));
                }
                records.push(StepRecord { var: lp, picks });
            }
            // waypoint choice
            let loc_rows: Vec<usize> = active.iter().copied().filter(|&j| node_of[j] != 0).collect();
            if !loc_rows.is_empty() {
                let sel: Vec<usize> = loc_rows.iter().map(|&j| node_of[j]).collect();
                let prev: Vec<Point> = loc_rows.iter().map(|&j| states[j].position()).collect();
                let lp = self.loc_logp(tape, &pre, &sel, &prev)?;
                let mut picks = Vec::with_capacity(loc_rows.len());
                for (r, &j) in loc_rows.iter().enumerate() {
                    let row = tape.value(lp).row(r);
                    let c = chooser.pick(row, j, states[j].steps(), false);
                    *step_lp[j].last_mut().unwrap() += row[c];
                    picks.push((r, c, j));
                    let a = Action::new(node_of[j], c);
                    step_in_place(&mut states[j], a, dinst)?;
                    actions[j].push(a);
                }
                records.push(StepRecord { var: lp, picks });
            }
            for &j in &active {
                if node_of[j] == 0 {
                    step_in_place(&mut states[j], Action::DEPOT, dinst)?;
                    actions[j].push(Action::DEPOT);
                }
            }
        }
        tape.status()?;
        let trajectories = states
            .into_iter()
            .zip(actions)
            .zip(step_lp)
            .zip(forced)
            .map(|(((state, actions), step_log_probs), forced)| {
                Ok(Trajectory {
                    log_prob: step_log_probs.iter().sum(),
                    reward: reward(&state)?,
                    actions,
                    step_log_probs,
                    forced,
                    state,
                })
            })
            .collect::<Result<Vec<_>, PolicyError>>()?;
        Ok(Episode { trajectories, records })
    }

    /// Multistart rollout from the start state of `dinst`.
    pub fn rollout(
        &self,
        dinst: &DiscretizedInstance,
        mode: DecodeMode,
        n_starts: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Trajectory>, PolicyError> {
        let states = reset(dinst, n_starts)?;
        self.decode_states(dinst, states, mode, rng)
    }

    fn decode_states(
        &self,
        dinst: &DiscretizedInstance,
        states: Vec<EnvState>,
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Trajectory>, PolicyError> {
        let mut tape = Tape::with_params(&self.params);
        let chooser = match mode {
            DecodeMode::Sample => Chooser::Sample(rng),
            DecodeMode::Greedy => Chooser::Greedy,
        };
        Ok(self.run_episode(&mut tape, dinst, states, chooser)?.trajectories)
    }

    /// Greedy multistart decoding with one start per initially uncovered
    /// target, optionally over all eight symmetric images. The returned
    /// waypoints are in the coordinates of `dinst`.
    pub fn solve(&self, dinst: &DiscretizedInstance, aug: bool) -> Result<Solution, PolicyError> {
        self.solve_from(dinst, &EnvState::initial(dinst), aug)
    }

    /// [`Policy::solve`] continuing from `start`, a state of `dinst` (for
    /// example one built by [`EnvState::resume`]). The returned waypoints
    /// begin with those already in `start`.
    pub fn solve_from(&self, dinst: &DiscretizedInstance, start: &EnvState, aug: bool) -> Result<Solution, PolicyError> {
        self.check_gamma(dinst)?;
        if start.covered.len() != dinst.num_nodes() {
            return Err(PolicyError::Config("start state does not belong to the instance".into()));
        }
        let starts = start.uncovered().count().max(1);
        let syms: Vec<Symmetry> = if aug { Symmetry::all().to_vec() } else { vec![Symmetry::IDENTITY] };
        let mut best: Option<Solution> = None;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in syms {
            let image = transform(dinst, s)?;
            let moved = EnvState { waypoints: start.waypoints.iter().map(|&p| s.apply(p)).collect(), ..start.clone() };
            let trajs = self.decode_states(&image, reset_from(&moved, starts)?, DecodeMode::Greedy, &mut rng)?;
            for t in trajs {
                if best.as_ref().is_none_or(|b| t.length() < b.length) {
                    let inv = s.inverse();
                    best = Some(Solution {
                        length: t.length(),
                        waypoints: t.state.waypoints.iter().map(|&p| inv.apply(p)).collect(),
                        actions: t.actions,
                        symmetry: s,
                    });
                }
            }
        }
        Ok(best.expect("at least one trajectory is decoded"))
    }
}

/// `Σ_j weights[j] · log p(trajectory j)` as a tape scalar.
pub(crate) fn weighted_log_prob(tape: &mut Tape<'_>, records: &[StepRecord], weights: &[f64]) -> Result<Var, PolicyError> {
    let mut terms = Vec::with_capacity(records.len());
    for rec in records {
        let picks = rec.picks.iter().map(|&(r, c, j)| (r, c, weights[j])).collect();
        terms.push(tape.pick_sum(rec.var, picks));
    }
    if terms.is_empty() {
        terms.push(tape.leaf(Tensor::scalar(0.0)));
    }
    Ok(tape.sum(terms)?)
}

/// Applies a symmetry to a discretized instance (including its terminal).
pub fn transform(dinst: &DiscretizedInstance, s: Symmetry) -> Result<DiscretizedInstance, PolicyError> {
    if s == Symmetry::IDENTITY {
        return Ok(dinst.clone());
    }
    let base = s.apply_instance(&dinst.base);
    Ok(DiscretizedInstance::with_phase(base, dinst.gamma, dinst.phase)?.with_terminal(s.apply(dinst.terminal)))
}

/// Best tour found by [`Policy::solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub length: f64,
    /// Start, every stop, and the terminal.
    pub waypoints: Vec<Point>,
    /// Actions in the frame of `symmetry`.
    pub actions: Vec<Action>,
    pub symmetry: Symmetry,
}
