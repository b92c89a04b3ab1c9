//! Mean-aggregation message passing encoder that maps a problem graph to an
//! initial latent code, with unsupervised pretraining on the soft objective.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linsat::{project_var, LinSatConfig};
use crate::problems::flp::{FlpInstance, Metric};
use crate::problems::mcp::McpInstance;
use crate::problems::SearchProblem;
use crate::sampling::{derive_seed, noise_row};

pub const LAYERS: usize = 3;
pub const HIDDEN: usize = 16;
pub const PARAMS_VERSION: u32 = 1;
/// FLP graphs join locations closer than this fraction of the region diameter.
pub const FLP_EDGE_FRACTION: f64 = 0.02;
const MCP_FEATURES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Flp,
    Mcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    /// Carries a decision variable (facility site, set).
    Decision,
    /// MCP item node.
    Item,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemGraph {
    pub family: Family,
    /// One row of features per node.
    pub features: Tensor,
    /// Undirected edges `(a, b)` with `a <= b`; self-loops are `(a, a)`.
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Vec<f64>,
    pub kinds: Vec<NodeKind>,
}

impl ProblemGraph {
    pub fn nodes(&self) -> usize {
        self.kinds.len()
    }

    /// Nodes that carry decision variables, in variable order.
    pub fn decision_nodes(&self) -> Vec<usize> {
        (0..self.nodes()).filter(|&v| self.kinds[v] == NodeKind::Decision).collect()
    }

    /// Row-normalized adjacency: row `v` averages over the neighbors of `v`.
    pub fn mean_adjacency(&self) -> Tensor {
        let n = self.nodes();
        let mut a = Tensor::zeros(n, n);
        for &(u, v) in &self.edges {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        for r in 0..n {
            let deg: f64 = a.row(r).iter().sum();
            if deg > 0.0 {
                for c in 0..n {
                    a.set(r, c, a.get(r, c) / deg);
                }
            }
        }
        a
    }

    fn validate(&self) -> Result<()> {
        let n = self.nodes();
        if self.features.rows() != n {
            return Err(Error::shape("graph", format!("{} feature rows for {n} nodes", self.features.rows())));
        }
        if let Some(&(a, b)) = self.edges.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::shape("graph", format!("edge ({a}, {b}) out of range {n}")));
        }
        Ok(())
    }
}

fn diameter(metric: Option<Metric>, dist: &Tensor) -> f64 {
    match metric {
        Some(Metric::Euclidean) => std::f64::consts::SQRT_2,
        Some(Metric::Manhattan) => 2.0,
        None => dist.data().iter().copied().fold(0.0, f64::max),
    }
}

/// Pairs `(i, j)`, `i < j`, closer than 2% of the region diameter.
pub fn threshold_edges(inst: &FlpInstance) -> Vec<(usize, usize)> {
    let threshold = FLP_EDGE_FRACTION * diameter(inst.metric, &inst.dist);
    let mut edges = Vec::new();
    for i in 0..inst.m {
        for j in i + 1..inst.m {
            if inst.dist.get(i, j) < threshold {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Locations joined when closer than 2% of the region diameter, every node
/// with a self-loop; a node left without neighbors is joined to its nearest
/// location. Features are the coordinates.
pub fn flp_graph(inst: &FlpInstance) -> Result<ProblemGraph> {
    let coords = inst
        .coords
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("FLP graph needs coordinates".into()))?;
    let m = inst.m;
    let mut edges = threshold_edges(inst);
    let mut edge_features: Vec<f64> = edges.iter().map(|&(i, j)| inst.dist.get(i, j)).collect();
    let mut has_neighbor = vec![false; m];
    for &(i, j) in &edges {
        has_neighbor[i] = true;
        has_neighbor[j] = true;
    }
    for i in 0..m {
        if !has_neighbor[i] && m > 1 {
            let j = (0..m)
                .filter(|&j| j != i)
                .min_by(|&a, &b| inst.dist.get(i, a).total_cmp(&inst.dist.get(i, b)).then(a.cmp(&b)))
                .expect("m > 1");
            let e = (i.min(j), i.max(j));
            if !edges.contains(&e) {
                edges.push(e);
                edge_features.push(inst.dist.get(i, j));
            }
        }
    }
    for i in 0..m {
        edges.push((i, i));
        edge_features.push(0.0);
    }
    let features = Tensor::from_rows(&coords.iter().map(|c| c.to_vec()).collect::<Vec<_>>());
    Ok(ProblemGraph {
        family: Family::Flp,
        features,
        edges,
        edge_features,
        kinds: vec![NodeKind::Decision; m],
    })
}

/// Bipartite set/item graph, one edge per incidence. Set features: size over
/// `n`, covered value over total value, 1. Item features: number of covering
/// sets over `m`, value over the largest value, 0.
pub fn mcp_graph(inst: &McpInstance) -> ProblemGraph {
    let (m, n) = (inst.m, inst.n);
    let total: f64 = inst.values.iter().sum::<f64>().max(1e-12);
    let vmax = inst.values.iter().copied().fold(1e-12, f64::max);
    let mut item_deg = vec![0usize; n];
    let mut edges = Vec::new();
    let mut rows = Vec::with_capacity(m + n);
    for (i, s) in inst.sets.iter().enumerate() {
        for &j in s {
            edges.push((i, m + j));
            item_deg[j] += 1;
        }
        let covered: f64 = s.iter().map(|&j| inst.values[j]).sum();
        rows.push(vec![s.len() as f64 / n as f64, covered / total, 1.0]);
    }
    for j in 0..n {
        rows.push(vec![item_deg[j] as f64 / m as f64, inst.values[j] / vmax, 0.0]);
    }
    let edge_features = vec![1.0; edges.len()];
    let mut kinds = vec![NodeKind::Decision; m];
    kinds.extend(std::iter::repeat(NodeKind::Item).take(n));
    ProblemGraph {
        family: Family::Mcp,
        features: Tensor::from_rows(&rows),
        edges,
        edge_features,
        kinds,
    }
}

pub fn feature_width(family: Family) -> usize {
    match family {
        Family::Flp => 2,
        Family::Mcp => MCP_FEATURES,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w_self: Tensor,
    pub w_msg: Tensor,
    pub bias: Tensor,
}

/// Layer update `H' = tanh(H W_self + A H W_msg + b)`, followed by a linear
/// readout to one score per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub version: u32,
    pub family: Family,
    pub layers: Vec<Layer>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl EncoderParams {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(family: Family, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let r = 1.0 / (rows as f64).sqrt();
            Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-r..=r)).collect())
        };
        let mut layers = Vec::with_capacity(LAYERS);
        let mut width = feature_width(family);
        for _ in 0..LAYERS {
            layers.push(Layer {
                w_self: uniform(width, HIDDEN),
                w_msg: uniform(width, HIDDEN),
                bias: Tensor::vector(vec![0.0; HIDDEN]),
            });
            width = HIDDEN;
        }
        let w_out = uniform(HIDDEN, 1);
        Self {
            version: PARAMS_VERSION,
            family,
            layers,
            w_out,
            b_out: Tensor::vector(vec![0.0]),
        }
    }

    pub fn zeros(family: Family) -> Self {
        let mut p = Self::init(family, 0);
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    /// Parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(3 * LAYERS + 2);
        for l in &self.layers {
            out.extend([&l.w_self, &l.w_msg, &l.bias]);
        }
        out.push(&self.w_out);
        out.push(&self.b_out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(3 * LAYERS + 2);
        for l in &mut self.layers {
            out.push(&mut l.w_self);
            out.push(&mut l.w_msg);
            out.push(&mut l.bias);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PARAMS_VERSION {
            return Err(Error::Schema(format!("encoder params version {} unsupported", self.version)));
        }
        if self.layers.len() != LAYERS {
            return Err(Error::Schema(format!("expected {LAYERS} layers, got {}", self.layers.len())));
        }
        let mut width = feature_width(self.family);
        for (i, l) in self.layers.iter().enumerate() {
            let ok = l.w_self.shape() == (width, HIDDEN)
                && l.w_msg.shape() == (width, HIDDEN)
                && l.bias.shape() == (HIDDEN, 1);
            if !ok {
                return Err(Error::Schema(format!("layer {i} has wrong shapes")));
            }
            width = HIDDEN;
        }
        if self.w_out.shape() != (HIDDEN, 1) || self.b_out.shape() != (1, 1) {
            return Err(Error::Schema("readout has wrong shapes".into()));
        }
        if self.tensors().iter().any(|t| !t.all_finite()) {
            return Err(Error::Schema("encoder params contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Parameters recorded on a tape, in [`EncoderParams::tensors`] order.
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn inputs(tape: &mut Tape, params: &EncoderParams) -> Result<Self> {
        params
            .tensors()
            .into_iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<Vec<_>>>()
            .map(ParamVars)
    }
}

/// Scores of the decision nodes, recorded on `tape`.
pub fn forward(tape: &mut Tape, graph: &ProblemGraph, params: &ParamVars) -> Result<Var> {
    graph.validate()?;
    if params.0.len() != 3 * LAYERS + 2 {
        return Err(Error::shape("encoder", format!("{} parameter tensors", params.0.len())));
    }
    let adj = tape.constant(graph.mean_adjacency())?;
    let mut h = tape.constant(graph.features.clone())?;
    for l in 0..LAYERS {
        let (w_self, w_msg, bias) = (params.0[3 * l], params.0[3 * l + 1], params.0[3 * l + 2]);
        let own = tape.matmul(h, w_self)?;
        let agg = tape.matmul(adj, h)?;
        let msg = tape.matmul(agg, w_msg)?;
        let pre = tape.add(own, msg)?;
        let pre = tape.add_row_broadcast(pre, bias)?;
        h = tape.tanh(pre)?;
    }
    let out = tape.matmul(h, params.0[3 * LAYERS])?;
    let out = tape.add_row_broadcast(out, params.0[3 * LAYERS + 1])?;
    tape.gather(out, &graph.decision_nodes())
}

/// Latent code for `graph` without recording gradients.
pub fn encode(graph: &ProblemGraph, params: &EncoderParams) -> Result<Vec<f64>> {
    if graph.family != params.family {
        return Err(Error::InvalidArgument(format!(
            "encoder trained for {:?} applied to a {:?} graph",
            params.family, graph.family
        )));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::inputs(&mut tape, params)?;
    let y = forward(&mut tape, graph, &vars)?;
    Ok(tape.value(y).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Gumbel samples per instance per epoch.
    pub batch: usize,
    pub sigma: f64,
    pub seed: u64,
    pub linsat: LinSatConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            batch: 8,
            sigma: 0.25,
            seed: 0,
            linsat: LinSatConfig::default(),
        }
    }
}

/// A training instance: its graph and the problem whose soft loss is minimized.
pub struct TrainingInstance<'a> {
    pub graph: ProblemGraph,
    pub problem: &'a dyn SearchProblem,
}

/// Mean soft loss of `batch` perturbed projections of the encoder output on
/// one instance, with its gradient in flattened parameter order.
fn instance_loss(
    t: &TrainingInstance<'_>,
    params: &EncoderParams,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::inputs(&mut tape, params)?;
    let y = forward(&mut tape, &t.graph, &vars)?;
    let l = tape.value(y).len();
    let mut losses = Vec::with_capacity(cfg.batch);
    for s in 0..cfg.batch as u64 {
        let noise = tape.constant(Tensor::vector(noise_row(seed, s, l, cfg.sigma)))?;
        let noisy = tape.add(y, noise)?;
        let (x, _) = project_var(&mut tape, noisy, t.problem.constraints(), &cfg.linsat)?;
        losses.push(t.problem.soft_loss(&mut tape, x)?);
    }
    let stacked = tape.concat(&losses)?;
    let loss = tape.mean(stacked)?;
    let grads = tape.backward(loss)?;
    let flat = vars.0.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();
    Ok((tape.scalar(loss), flat))
}

fn pairwise(parts: &[Vec<f64>]) -> Vec<f64> {
    match parts.len() {
        0 => Vec::new(),
        1 => parts[0].clone(),
        n => {
            let (a, b) = parts.split_at(n / 2);
            let mut left = pairwise(a);
            for (l, r) in left.iter_mut().zip(pairwise(b)) {
                *l += r;
            }
            left
        }
    }
}

/// Minimizes the mean perturbed soft loss over `instances` with Adam. Returns
/// the trained parameters and the mean training loss of every epoch, measured
/// before that epoch's update.
pub fn pretrain(instances: &[TrainingInstance<'_>], cfg: &PretrainConfig) -> Result<(EncoderParams, Vec<f64>)> {
    let family = instances
        .first()
        .ok_or_else(|| Error::InvalidArgument("pretraining needs at least one instance".into()))?
        .graph
        .family;
    if instances.iter().any(|t| t.graph.family != family) {
        return Err(Error::InvalidArgument("pretraining instances mix problem families".into()));
    }
    if !(cfg.lr > 0.0) || cfg.batch == 0 {
        return Err(Error::InvalidArgument("pretraining needs lr > 0 and batch >= 1".into()));
    }
    let mut params = EncoderParams::init(family, cfg.seed);
    let mut flat = params.flatten();
    let (mut m, mut v) = (vec![0.0; flat.len()], vec![0.0; flat.len()]);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let n = instances.len() as f64;
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let results: Vec<(f64, Vec<f64>)> = instances
            .par_iter()
            .enumerate()
            .map(|(i, t)| instance_loss(t, &params, cfg, derive_seed(epoch_seed, i as u64)))
            .collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("training loss {loss} at epoch {epoch}")));
        }
        losses.push(loss);
        let grads: Vec<Vec<f64>> = results.into_iter().map(|r| r.1).collect();
        let g: Vec<f64> = pairwise(&grads).into_iter().map(|x| x / n).collect();
        let t = epoch as i32 + 1;
        let (c1, c2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
        for i in 0..flat.len() {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            flat[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
        }
        params.set_flat(&flat);
    }
    Ok((params, losses))
}
