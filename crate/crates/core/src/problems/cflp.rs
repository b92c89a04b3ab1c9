//! Capacitated facility location: open at most `k` sites, each able to serve
//! up to `capacity` units of demand, and route all demand at least cost.
//!
//! The inner routing problem is a transportation problem. The search
//! differentiates an entropic approximation unrolled on the tape; reported
//! objectives come from an exact min-cost-flow solve.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use super::flp::{flp_hard_objective, selection_solution, FlpInstance};
use super::{for_each_subset, top_k, DiscreteSolution, SearchProblem, Sense};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linsat::PositiveLinearConstraints;

/// Demands and capacities are scaled by this factor and rounded to integers
/// for the exact flow solve.
pub const FLOW_SCALE: f64 = 1e6;
/// Entropic temperature used during search.
pub const SEARCH_EPS: f64 = 0.02;
/// Unrolled normalization rounds used during search.
pub const SEARCH_ITERS: usize = 50;

/// Capacity check shared by every solver: `sum_i capacity * x_i >= sum_j d_j`.
fn check_capacity(x: &[f64], demand: &[f64], capacity: f64) -> Result<()> {
    let supply: f64 = x.iter().map(|v| capacity * v).sum();
    let need: f64 = demand.iter().sum();
    if supply + 1e-9 * need.max(1.0) < need {
        return Err(Error::Infeasible(format!(
            "open capacity {supply} is below total demand {need}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportSolution {
    /// `plan[i][j]`: demand of location `j` served by facility `i`.
    pub plan: Tensor,
    pub cost: f64,
}

impl TransportSolution {
    /// Largest deviation from `column sums = demand` and `row sums <= capacity * x`.
    pub fn marginal_error(&self, x: &[f64], demand: &[f64], capacity: f64) -> f64 {
        let p = &self.plan;
        let mut worst: f64 = 0.0;
        for (j, d) in demand.iter().enumerate() {
            let s: f64 = (0..p.rows()).map(|i| p.get(i, j)).sum();
            worst = worst.max((s - d).abs());
        }
        for (i, xi) in x.iter().enumerate() {
            let s: f64 = p.row(i).iter().sum();
            worst = worst.max(s - capacity * xi);
        }
        worst
    }
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + vals.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Entropic transport with row supplies `capacity * x_i`, column demands, and a
/// zero-cost slack column absorbing unused capacity.
///
/// Runs log-domain Sinkhorn with temperature halving down to `eps`, iterating
/// each level until the supply residual is below `tol` (at most `max_iters`
/// rounds per level), then rounds the plan onto the exact marginals.
pub fn cflp_inner_transport(
    x: &[f64],
    dist: &Tensor,
    demand: &[f64],
    capacity: f64,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportSolution> {
    let m = dist.rows();
    let n = dist.cols();
    if x.len() != m || demand.len() != n {
        return Err(Error::shape("cflp_inner_transport", "x, demand and distances disagree"));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    check_capacity(x, demand, capacity)?;

    let rows: Vec<usize> = (0..m).filter(|&i| x[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| demand[j] > 0.0).collect();
    let supply: Vec<f64> = rows.iter().map(|&i| capacity * x[i]).collect();
    let mut target: Vec<f64> = cols.iter().map(|&j| demand[j]).collect();
    let slack = supply.iter().sum::<f64>() - target.iter().sum::<f64>();
    let has_slack = slack > 0.0;
    if has_slack {
        target.push(slack);
    }
    let nc = target.len();
    let cost = |r: usize, c: usize| if c < cols.len() { dist.get(rows[r], cols[c]) } else { 0.0 };
    let log_a: Vec<f64> = supply.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = target.iter().map(|v| v.ln()).collect();

    let mut f = vec![0.0; rows.len()];
    let mut g = vec![0.0; nc];
    let cmax = dist.data().iter().copied().fold(0.0, f64::max).max(eps);
    let mut level = cmax;
    loop {
        level = (level * 0.5).max(eps);
        for _ in 0..max_iters {
            for r in 0..rows.len() {
                let lse = log_sum_exp((0..nc).map(|c| (g[c] - cost(r, c)) / level));
                f[r] = level * (log_a[r] - lse);
            }
            for c in 0..nc {
                let lse = log_sum_exp((0..rows.len()).map(|r| (f[r] - cost(r, c)) / level));
                g[c] = level * (log_b[c] - lse);
            }
            // Columns are exact after the g update; measure the supply side.
            let err = (0..rows.len())
                .map(|r| {
                    let s: f64 = (0..nc).map(|c| ((f[r] + g[c] - cost(r, c)) / level).exp()).sum();
                    (s - supply[r]).abs()
                })
                .fold(0.0, f64::max);
            if err < tol {
                break;
            }
        }
        if level <= eps {
            break;
        }
    }
    let mut p = Tensor::zeros(rows.len(), nc);
    for r in 0..rows.len() {
        for c in 0..nc {
            p.set(r, c, ((f[r] + g[c] - cost(r, c)) / eps).exp());
        }
    }
    let p = round_to_marginals(&p, &supply, &target);
    let mut plan = Tensor::zeros(m, n);
    let mut total = 0.0;
    for (r, &i) in rows.iter().enumerate() {
        for (c, &j) in cols.iter().enumerate() {
            let v = p.get(r, c);
            plan.set(i, j, v);
            total += v * dist.get(i, j);
        }
    }
    Ok(TransportSolution { plan, cost: total })
}

/// Moves a nonnegative plan onto exact row and column marginals: scale down
/// rows and columns that overshoot, then spread the remaining deficit as a
/// rank-one correction.
pub fn round_to_marginals(p: &Tensor, rows: &[f64], cols: &[f64]) -> Tensor {
    let mut out = p.clone();
    for (r, &target) in rows.iter().enumerate() {
        let s: f64 = out.row(r).iter().sum();
        if s > target {
            let f = target / s;
            for c in 0..out.cols() {
                out.set(r, c, out.get(r, c) * f);
            }
        }
    }
    for (c, &target) in cols.iter().enumerate() {
        let s: f64 = (0..out.rows()).map(|r| out.get(r, c)).sum();
        if s > target {
            let f = target / s;
            for r in 0..out.rows() {
                out.set(r, c, out.get(r, c) * f);
            }
        }
    }
    let err_r: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(r, t)| (t - out.row(r).iter().sum::<f64>()).max(0.0))
        .collect();
    let err_c: Vec<f64> = cols
        .iter()
        .enumerate()
        .map(|(c, t)| (t - (0..out.rows()).map(|r| out.get(r, c)).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = err_c.iter().sum();
    if total > 0.0 {
        for (r, er) in err_r.iter().enumerate() {
            for (c, ec) in err_c.iter().enumerate() {
                out.set(r, c, out.get(r, c) + er * ec / total);
            }
        }
    }
    out
}

/// Entropic transport unrolled on the tape: `iters` rounds of supply-side and
/// demand-side rescaling of `exp(-dist / eps)`, starting and ending with the
/// demand side exact. Returns the transport cost node.
pub fn cflp_soft_cost(
    tape: &mut Tape,
    x: Var,
    dist: &Tensor,
    demand: &[f64],
    capacity: f64,
    eps: f64,
    iters: usize,
) -> Result<Var> {
    let m = dist.rows();
    let n = dist.cols();
    if tape.value(x).len() != m || demand.len() != n {
        return Err(Error::shape("cflp_soft_cost", "x, demand and distances disagree"));
    }
    let need: f64 = demand.iter().sum();
    let mut kernel = Tensor::zeros(m, n + 1);
    let mut padded = Tensor::zeros(m, n + 1);
    for i in 0..m {
        for j in 0..n {
            kernel.set(i, j, (-dist.get(i, j) / eps).exp());
            padded.set(i, j, dist.get(i, j));
        }
        kernel.set(i, n, 1.0);
    }
    let supply = tape.scale(x, capacity)?;
    let total = tape.sum(supply)?;
    let slack = if tape.scalar(total) - need > 1e-9 {
        tape.add_scalar(total, -need)?
    } else {
        tape.constant(Tensor::scalar(1e-9))?
    };
    let d = tape.constant(Tensor::vector(demand.to_vec()))?;
    let col_target = tape.concat(&[d, slack])?;
    let ones_c = tape.constant(Tensor::vector(vec![1.0; n + 1]))?;
    let ones_r = tape.constant(Tensor::vector(vec![1.0; m]))?;

    let mut plan = tape.constant(kernel)?;
    let rescale_cols = |tape: &mut Tape, plan: Var| -> Result<Var> {
        let pt = tape.transpose(plan)?;
        let sums = tape.matvec(pt, ones_r)?;
        let f = tape.div(col_target, sums)?;
        let fb = tape.broadcast_cols(f, m)?;
        let ft = tape.transpose(fb)?;
        tape.mul(plan, ft)
    };
    plan = rescale_cols(tape, plan)?;
    for _ in 0..iters {
        let sums = tape.matvec(plan, ones_c)?;
        let f = tape.div(supply, sums)?;
        let fb = tape.broadcast_cols(f, n + 1)?;
        plan = tape.mul(plan, fb)?;
        plan = rescale_cols(tape, plan)?;
    }
    tape.weighted_sum(plan, padded.data())
}

struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
}

/// Successive-shortest-path min-cost flow (Bellman-Ford queue variant).
struct FlowGraph {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl FlowGraph {
    fn new(nodes: usize) -> Self {
        Self {
            edges: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    fn add(&mut self, from: usize, to: usize, cap: i64, cost: f64) -> usize {
        let id = self.edges.len();
        self.edges.push(Edge { to, cap, cost });
        self.adj[from].push(id);
        self.edges.push(Edge { to: from, cap: 0, cost: -cost });
        self.adj[to].push(id + 1);
        id
    }

    fn min_cost_flow(&mut self, s: usize, t: usize, want: i64) -> (i64, f64) {
        let nodes = self.adj.len();
        let (mut flow, mut cost) = (0i64, 0.0);
        while flow < want {
            let mut dist = vec![f64::INFINITY; nodes];
            let mut prev = vec![usize::MAX; nodes];
            let mut queued = vec![false; nodes];
            let mut queue = VecDeque::new();
            dist[s] = 0.0;
            queue.push_back(s);
            queued[s] = true;
            while let Some(u) = queue.pop_front() {
                queued[u] = false;
                for &e in &self.adj[u] {
                    let edge = &self.edges[e];
                    if edge.cap > 0 && dist[u] + edge.cost < dist[edge.to] - 1e-12 {
                        dist[edge.to] = dist[u] + edge.cost;
                        prev[edge.to] = e;
                        if !queued[edge.to] {
                            queued[edge.to] = true;
                            queue.push_back(edge.to);
                        }
                    }
                }
            }
            if !dist[t].is_finite() {
                break;
            }
            let mut push = want - flow;
            let mut v = t;
            while v != s {
                let e = prev[v];
                push = push.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = t;
            while v != s {
                let e = prev[v];
                self.edges[e].cap -= push;
                self.edges[e ^ 1].cap += push;
                v = self.edges[e ^ 1].to;
            }
            flow += push;
            cost += push as f64 * dist[t];
        }
        (flow, cost)
    }
}

/// Exact routing cost of a selection by min-cost flow on the bipartite
/// facility-to-customer network, with demands and capacities scaled by
/// [`FLOW_SCALE`] and rounded to integers.
pub fn cflp_exact_oracle(selection: &[usize], dist: &Tensor, demand: &[f64], capacity: f64) -> Result<TransportSolution> {
    let m = dist.rows();
    let n = dist.cols();
    if selection.is_empty() {
        return Err(Error::EmptySelection);
    }
    if selection.iter().any(|&i| i >= m) || demand.len() != n {
        return Err(Error::shape("cflp_exact_oracle", "selection, demand and distances disagree"));
    }
    let cap_units = (capacity * FLOW_SCALE).round() as i64;
    let d_units: Vec<i64> = demand.iter().map(|d| (d * FLOW_SCALE).round() as i64).collect();
    let need: i64 = d_units.iter().sum();
    if cap_units * (selection.len() as i64) < need {
        return Err(Error::Infeasible(format!(
            "{} open facilities of capacity {capacity} cannot serve demand {}",
            selection.len(),
            demand.iter().sum::<f64>()
        )));
    }
    let (s, t) = (0, 1);
    let fac = |i: usize| 2 + i;
    let cus = |j: usize| 2 + selection.len() + j;
    let mut g = FlowGraph::new(2 + selection.len() + n);
    let mut arcs = Vec::new();
    for (a, &i) in selection.iter().enumerate() {
        g.add(s, fac(a), cap_units, 0.0);
        for j in 0..n {
            if d_units[j] > 0 {
                arcs.push((i, j, g.add(fac(a), cus(j), need, dist.get(i, j))));
            }
        }
    }
    for (j, &d) in d_units.iter().enumerate() {
        if d > 0 {
            g.add(cus(j), t, d, 0.0);
        }
    }
    let (flow, _) = g.min_cost_flow(s, t, need);
    if flow < need {
        return Err(Error::Infeasible("demand cannot be routed".into()));
    }
    let mut plan = Tensor::zeros(m, n);
    let mut cost = 0.0;
    for (i, j, e) in arcs {
        let units = g.edges[e ^ 1].cap;
        if units > 0 {
            let v = units as f64 / FLOW_SCALE;
            plan.set(i, j, plan.get(i, j) + v);
            cost += v * dist.get(i, j);
        }
    }
    Ok(TransportSolution { plan, cost })
}

/// Largest number of subsets the capacitated oracle will enumerate; each one
/// costs a min-cost-flow solve.
pub const CFLP_BRUTE_FORCE_LIMIT: f64 = 1e5;

/// Exact optimum over every `k`-subset. Opening more sites never raises the
/// routing cost, so subsets of exactly `k` sites suffice.
pub fn cflp_brute_force(inst: &FlpInstance) -> Result<DiscreteSolution> {
    let problem = CflpProblem::new(inst.clone())?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_subset(inst.m, inst.k, CFLP_BRUTE_FORCE_LIMIT, |s| {
        if let Ok(t) = cflp_exact_oracle(s, &inst.dist, &problem.demand, problem.capacity) {
            if best.as_ref().map_or(true, |(_, c)| t.cost < *c) {
                best = Some((s.to_vec(), t.cost));
            }
        }
    })?;
    let (sel, _) = best.ok_or_else(|| Error::Infeasible("no subset can serve the demand".into()))?;
    Ok(problem.evaluate(sel))
}

/// Adds sites one at a time. While the open capacity cannot cover demand the
/// site that most lowers the uncapacitated cost is added; afterwards the one
/// that most lowers the exact routing cost. Ties go to the lower index.
pub fn cflp_greedy(inst: &FlpInstance) -> Result<DiscreteSolution> {
    let problem = CflpProblem::new(inst.clone())?;
    let need: f64 = problem.demand.iter().sum();
    let mut chosen: Vec<usize> = Vec::with_capacity(inst.k);
    for _ in 0..inst.k {
        let feasible_next = problem.capacity * (chosen.len() + 1) as f64 + 1e-9 * need.max(1.0) >= need;
        let mut best: Option<(usize, f64)> = None;
        for i in (0..inst.m).filter(|i| !chosen.contains(i)) {
            let mut trial = chosen.clone();
            trial.push(i);
            trial.sort_unstable();
            let cost = if feasible_next {
                problem.evaluate(trial).objective
            } else {
                flp_hard_objective(&trial, &inst.dist)?
            };
            if best.map_or(true, |(_, c)| cost < c) {
                best = Some((i, cost));
            }
        }
        let (i, _) = best.expect("k <= m leaves a candidate");
        chosen.push(i);
    }
    chosen.sort_unstable();
    Ok(problem.evaluate(chosen))
}

pub struct CflpProblem {
    pub inst: FlpInstance,
    pub capacity: f64,
    pub demand: Vec<f64>,
    pub eps: f64,
    pub iters: usize,
    constraints: PositiveLinearConstraints,
    cache: Mutex<HashMap<Vec<usize>, Option<TransportSolution>>>,
}

impl CflpProblem {
    pub fn new(inst: FlpInstance) -> Result<Self> {
        let (capacity, demand) = match (inst.capacity, inst.demand.clone()) {
            (Some(c), Some(d)) => (c, d),
            _ => return Err(Error::InvalidArgument("instance has no capacity and demand".into())),
        };
        let need: f64 = demand.iter().sum();
        if capacity * inst.k as f64 + 1e-9 < need {
            return Err(Error::Infeasible(format!(
                "k = {} facilities of capacity {capacity} cannot serve demand {need}",
                inst.k
            )));
        }
        let mut constraints = inst.budget_constraints();
        constraints.push_ge(&vec![capacity; inst.m], need)?;
        Ok(Self {
            inst,
            capacity,
            demand,
            eps: SEARCH_EPS,
            iters: SEARCH_ITERS,
            constraints,
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Exact objective of a selection; memoized because the search revisits
    /// the same selections many times.
    pub fn evaluate(&self, selection: Vec<usize>) -> DiscreteSolution {
        let cached = self.cache.lock().expect("cache lock").get(&selection).cloned();
        let sol = match cached {
            Some(s) => s,
            None => {
                let s = cflp_exact_oracle(&selection, &self.inst.dist, &self.demand, self.capacity).ok();
                self.cache.lock().expect("cache lock").insert(selection.clone(), s.clone());
                s
            }
        };
        match sol {
            Some(t) => {
                let mut out = selection_solution(selection, t.cost, self.inst.k);
                out.plan = Some(t.plan);
                out
            }
            None => {
                let mut out = selection_solution(selection, f64::INFINITY, self.inst.k);
                out.feasible = false;
                out
            }
        }
    }
}

impl SearchProblem for CflpProblem {
    fn dim(&self) -> usize {
        self.inst.m
    }

    fn constraints(&self) -> &PositiveLinearConstraints {
        &self.constraints
    }

    fn sense(&self) -> Sense {
        Sense::Minimize
    }

    fn soft_loss(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        cflp_soft_cost(tape, x, &self.inst.dist, &self.demand, self.capacity, self.eps, self.iters)
    }

    fn decode(&self, x: &[f64]) -> Result<DiscreteSolution> {
        Ok(self.evaluate(top_k(x, self.inst.k)))
    }
}
