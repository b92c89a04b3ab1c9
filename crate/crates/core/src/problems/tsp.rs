//! Symmetric Euclidean TSP over edge variables of the complete graph.
//!
//! The search variable is one score per undirected edge `(i, j)`, `i < j`, in
//! row-major upper-triangle order. The relaxation only asks every city to
//! have degree 2; the decoder turns the resulting heatmap into a tour.

use serde::{Deserialize, Serialize};

use super::flp::{distance_matrix, validate_distances, Metric};
use super::{Decision, DiscreteSolution, SearchProblem, Sense};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linsat::{PositiveLinearConstraints, RowKind};

/// Largest city count accepted by the exact dynamic program.
pub const HELD_KARP_MAX: usize = 18;
const TWO_OPT_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TspInstance {
    pub m: usize,
    pub coords: Option<Vec<[f64; 2]>>,
    pub dist: Tensor,
}

impl TspInstance {
    pub fn from_coords(coords: Vec<[f64; 2]>) -> Result<Self> {
        let dist = distance_matrix(&coords, Metric::Euclidean);
        Ok(Self {
            m: coords.len(),
            coords: Some(coords),
            dist,
        })
    }

    pub fn from_distances(dist: Tensor) -> Result<Self> {
        validate_distances(&dist)?;
        Ok(Self {
            m: dist.rows(),
            coords: None,
            dist,
        })
    }
}

/// Number of undirected edges of `K_m`.
pub fn edge_count(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// Edge endpoints in variable order.
pub fn edges(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(edge_count(m));
    for i in 0..m {
        for j in i + 1..m {
            out.push((i, j));
        }
    }
    out
}

/// Variable index of edge `{i, j}`.
pub fn edge_index(m: usize, i: usize, j: usize) -> usize {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    a * (2 * m - a - 1) / 2 + (b - a - 1)
}

/// One equality row per city: its incident edge variables sum to 2.
pub fn degree_constraints(m: usize) -> PositiveLinearConstraints {
    let mut c = PositiveLinearConstraints::new(edge_count(m));
    for v in 0..m {
        let idx: Vec<usize> = (0..m).filter(|&u| u != v).map(|u| edge_index(m, u, v)).collect();
        let coef = vec![1.0; idx.len()];
        c.push_sparse(RowKind::Eq, idx, coef, 2.0)
            .expect("degree row is valid for m >= 3");
    }
    c
}

/// Folds an edge vector into a symmetric `m x m` matrix with zero diagonal.
pub fn edge_vector_to_matrix(m: usize, x: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(m, m);
    for (e, (i, j)) in edges(m).into_iter().enumerate() {
        out.set(i, j, x[e]);
        out.set(j, i, x[e]);
    }
    out
}

/// `1/2 sum_ij D_ij X_ij` over the symmetrized `X`; the diagonal of `D` is zero.
pub fn tsp_soft_objective(tape: &mut Tape, x: Var, dist: &Tensor) -> Result<Var> {
    let xt = tape.transpose(x)?;
    let both = tape.add(x, xt)?;
    let sym = tape.scale(both, 0.5)?;
    let half_d: Vec<f64> = dist.data().iter().map(|d| 0.5 * d).collect();
    tape.weighted_sum(sym, &half_d)
}

/// Same value as [`tsp_soft_objective`] for an edge-variable vector.
pub fn tsp_edge_objective(tape: &mut Tape, x: Var, dist: &Tensor) -> Result<Var> {
    let m = dist.rows();
    let w: Vec<f64> = edges(m).into_iter().map(|(i, j)| dist.get(i, j)).collect();
    tape.weighted_sum(x, &w)
}

pub fn tour_length(tour: &[usize], dist: &Tensor) -> f64 {
    let n = tour.len();
    (0..n).map(|t| dist.get(tour[t], tour[(t + 1) % n])).sum()
}

/// True when `tour` visits each of `m` cities exactly once.
pub fn is_hamiltonian(tour: &[usize], m: usize) -> bool {
    if tour.len() != m {
        return false;
    }
    let mut seen = vec![false; m];
    for &c in tour {
        if c >= m || seen[c] {
            return false;
        }
        seen[c] = true;
    }
    true
}

fn find(parent: &mut [usize], mut v: usize) -> usize {
    while parent[v] != v {
        parent[v] = parent[parent[v]];
        v = parent[v];
    }
    v
}

/// Greedy edge insertion by descending heatmap weight (ties to the lower edge
/// index). An edge is kept when both endpoints have degree below 2 and it
/// does not close a cycle early; the last two path ends are then joined.
pub fn tsp_decode(heat: &Tensor, dist: &Tensor) -> Vec<usize> {
    let m = dist.rows();
    if m <= 3 {
        return (0..m).collect();
    }
    let all = edges(m);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let w = |e: usize| {
        let (i, j) = all[e];
        heat.get(i, j) + heat.get(j, i)
    };
    order.sort_by(|&a, &b| w(b).total_cmp(&w(a)).then(a.cmp(&b)));

    let mut parent: Vec<usize> = (0..m).collect();
    let mut degree = vec![0usize; m];
    let mut adj = vec![Vec::with_capacity(2); m];
    let mut added = 0;
    for e in order {
        if added == m - 1 {
            break;
        }
        let (i, j) = all[e];
        if degree[i] >= 2 || degree[j] >= 2 {
            continue;
        }
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj {
            continue;
        }
        parent[ri] = rj;
        degree[i] += 1;
        degree[j] += 1;
        adj[i].push(j);
        adj[j].push(i);
        added += 1;
    }
    // The kept edges form one Hamiltonian path; walk it from an end.
    let start = (0..m).find(|&v| degree[v] < 2).expect("a path has two ends");
    let mut path = Vec::with_capacity(m);
    let (mut prev, mut cur) = (usize::MAX, start);
    loop {
        path.push(cur);
        match adj[cur].iter().find(|&&n| n != prev) {
            Some(&next) => {
                prev = cur;
                cur = next;
            }
            None => break,
        }
    }
    debug_assert_eq!(path.len(), m);
    normalize_tour(&path)
}

/// Rotates a tour to start at city 0, oriented toward the smaller neighbor.
pub fn normalize_tour(tour: &[usize]) -> Vec<usize> {
    let n = tour.len();
    if n == 0 {
        return Vec::new();
    }
    let p = tour.iter().position(|&c| c == 0).unwrap_or(0);
    let mut out: Vec<usize> = (0..n).map(|t| tour[(p + t) % n]).collect();
    if n > 2 && out[n - 1] < out[1] {
        out[1..].reverse();
    }
    out
}

/// First-improvement 2-opt until no segment reversal shortens the tour.
pub fn two_opt(tour: &[usize], dist: &Tensor) -> Vec<usize> {
    let n = tour.len();
    let mut t = tour.to_vec();
    if n < 4 {
        return t;
    }
    let d = |a: usize, b: usize| dist.get(a, b);
    let mut improved = true;
    while improved {
        improved = false;
        'scan: for i in 0..n - 1 {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (t[i], t[i + 1]);
                let (c, e) = (t[j], t[(j + 1) % n]);
                let delta = d(a, c) + d(b, e) - d(a, b) - d(c, e);
                if delta < -TWO_OPT_EPS {
                    t[i + 1..=j].reverse();
                    improved = true;
                    break 'scan;
                }
            }
        }
    }
    t
}

/// Exact optimum by dynamic programming over subsets containing city 0.
pub fn tsp_held_karp(inst: &TspInstance) -> Result<DiscreteSolution> {
    let m = inst.m;
    if m > HELD_KARP_MAX {
        return Err(Error::SizeGuard(format!("Held-Karp limited to {HELD_KARP_MAX} cities, got {m}")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("instance has no cities".into()));
    }
    if m <= 3 {
        let tour: Vec<usize> = (0..m).collect();
        let len = tour_length(&tour, &inst.dist);
        return Ok(tour_solution(tour, len, m));
    }
    // States over cities 1..m; bit t stands for city t + 1.
    let n = m - 1;
    let full = 1usize << n;
    let d = |a: usize, b: usize| inst.dist.get(a, b);
    let mut cost = vec![f64::INFINITY; full * n];
    let mut from = vec![usize::MAX; full * n];
    for t in 0..n {
        cost[(1 << t) * n + t] = d(0, t + 1);
    }
    for mask in 1..full {
        for last in 0..n {
            if mask & (1 << last) == 0 {
                continue;
            }
            let c = cost[mask * n + last];
            if !c.is_finite() {
                continue;
            }
            for next in 0..n {
                if mask & (1 << next) != 0 {
                    continue;
                }
                let nm = mask | (1 << next);
                let v = c + d(last + 1, next + 1);
                if v < cost[nm * n + next] {
                    cost[nm * n + next] = v;
                    from[nm * n + next] = last;
                }
            }
        }
    }
    let mask = full - 1;
    let mut best = (f64::INFINITY, 0);
    for last in 0..n {
        let v = cost[mask * n + last] + d(last + 1, 0);
        if v < best.0 {
            best = (v, last);
        }
    }
    let mut tour = Vec::with_capacity(m);
    let (mut mask, mut cur) = (mask, best.1);
    while cur != usize::MAX {
        tour.push(cur + 1);
        let prev = from[mask * n + cur];
        mask &= !(1 << cur);
        cur = prev;
    }
    tour.push(0);
    tour.reverse();
    let tour = normalize_tour(&tour);
    let len = tour_length(&tour, &inst.dist);
    Ok(tour_solution(tour, len, m))
}

fn tour_solution(tour: Vec<usize>, length: f64, m: usize) -> DiscreteSolution {
    let feasible = is_hamiltonian(&tour, m);
    DiscreteSolution {
        decision: Decision::Tour(tour),
        objective: length,
        feasible,
        plan: None,
    }
}

pub struct TspProblem {
    pub inst: TspInstance,
    /// Polish every decoded tour with 2-opt.
    pub two_opt: bool,
    constraints: PositiveLinearConstraints,
}

impl TspProblem {
    pub fn new(inst: TspInstance) -> Result<Self> {
        if inst.m < 3 {
            return Err(Error::InvalidArgument("TSP search needs at least 3 cities".into()));
        }
        let constraints = degree_constraints(inst.m);
        Ok(Self {
            inst,
            two_opt: true,
            constraints,
        })
    }
}

impl SearchProblem for TspProblem {
    fn dim(&self) -> usize {
        edge_count(self.inst.m)
    }

    fn constraints(&self) -> &PositiveLinearConstraints {
        &self.constraints
    }

    fn sense(&self) -> Sense {
        Sense::Minimize
    }

    fn soft_loss(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tsp_edge_objective(tape, x, &self.inst.dist)
    }

    fn decode(&self, x: &[f64]) -> Result<DiscreteSolution> {
        let heat = edge_vector_to_matrix(self.inst.m, x);
        let mut tour = tsp_decode(&heat, &self.inst.dist);
        if self.two_opt {
            tour = normalize_tour(&two_opt(&tour, &self.inst.dist));
        }
        let len = tour_length(&tour, &self.inst.dist);
        Ok(tour_solution(tour, len, self.inst.m))
    }
}

#[cfg(test)]
mod tests;
