//! Uncapacitated facility location (k-median): open at most `k` of `m`
//! locations and serve every location from its nearest open facility.

use serde::{Deserialize, Serialize};

use super::{for_each_subset, top_k, Decision, DiscreteSolution, SearchProblem, Sense};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linsat::PositiveLinearConstraints;

/// Largest number of subsets the exhaustive oracles will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

const NEIGHBORHOOD_ROUNDS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Manhattan,
}

impl Metric {
    pub fn distance(self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
        match self {
            Metric::Euclidean => dx.hypot(dy),
            Metric::Manhattan => dx.abs() + dy.abs(),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "manhattan" => Ok(Metric::Manhattan),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

/// Dense pairwise distance matrix.
pub fn distance_matrix(coords: &[[f64; 2]], metric: Metric) -> Tensor {
    let m = coords.len();
    let mut d = Tensor::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let v = metric.distance(coords[i], coords[j]);
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Checks that `dist` is square, finite, nonnegative, symmetric and has a zero
/// diagonal.
pub fn validate_distances(dist: &Tensor) -> Result<()> {
    let m = dist.rows();
    if dist.cols() != m {
        return Err(Error::Schema(format!("distance matrix is {}x{}", m, dist.cols())));
    }
    for i in 0..m {
        if dist.get(i, i) != 0.0 {
            return Err(Error::Schema(format!("distance diagonal entry {i} is nonzero")));
        }
        for j in 0..m {
            let v = dist.get(i, j);
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Schema(format!("distance ({i},{j}) = {v} is not a finite nonnegative number")));
            }
            if (v - dist.get(j, i)).abs() > 1e-12 {
                return Err(Error::Schema(format!("distance matrix is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlpInstance {
    pub m: usize,
    pub k: usize,
    pub coords: Option<Vec<[f64; 2]>>,
    /// `dist[i][j]`: distance from facility site `i` to customer location `j`.
    pub dist: Tensor,
    pub metric: Option<Metric>,
    /// Per-facility service limit (capacitated variant).
    pub capacity: Option<f64>,
    /// Per-location demand (capacitated variant).
    pub demand: Option<Vec<f64>>,
}

impl FlpInstance {
    pub fn from_coords(coords: Vec<[f64; 2]>, k: usize, metric: Metric) -> Result<Self> {
        let dist = distance_matrix(&coords, metric);
        let inst = Self {
            m: coords.len(),
            k,
            coords: Some(coords),
            dist,
            metric: Some(metric),
            capacity: None,
            demand: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn from_distances(dist: Tensor, k: usize) -> Result<Self> {
        let inst = Self {
            m: dist.rows(),
            k,
            coords: None,
            dist,
            metric: None,
            capacity: None,
            demand: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn with_capacity(mut self, capacity: f64, demand: Vec<f64>) -> Result<Self> {
        self.capacity = Some(capacity);
        self.demand = Some(demand);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Schema("instance has no locations".into()));
        }
        if self.k == 0 || self.k > self.m {
            return Err(Error::Schema(format!("k = {} must lie in 1..={}", self.k, self.m)));
        }
        if self.dist.rows() != self.m {
            return Err(Error::Schema(format!("distance matrix has {} rows, m = {}", self.dist.rows(), self.m)));
        }
        validate_distances(&self.dist)?;
        if let Some(c) = &self.coords {
            if c.len() != self.m {
                return Err(Error::Schema(format!("{} coordinates for m = {}", c.len(), self.m)));
            }
        }
        match (&self.capacity, &self.demand) {
            (None, None) => {}
            (Some(cap), Some(d)) => {
                if !(cap.is_finite() && *cap > 0.0) {
                    return Err(Error::Schema(format!("capacity {cap} must be positive")));
                }
                if d.len() != self.m || d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Schema("demand must hold m nonnegative numbers".into()));
                }
            }
            _ => return Err(Error::Schema("capacity and demand must be given together".into())),
        }
        Ok(())
    }

    pub fn is_capacitated(&self) -> bool {
        self.capacity.is_some()
    }

    /// `sum_i x_i <= k`.
    pub fn budget_constraints(&self) -> PositiveLinearConstraints {
        let mut c = PositiveLinearConstraints::new(self.m);
        c.push_le(&vec![1.0; self.m], self.k as f64)
            .expect("budget row is valid for k >= 1");
        c
    }
}

/// `sum_j sum_i w_ij dist_ij` with `w_ij = x_i exp(-beta dist_ij) / sum_t x_t exp(-beta dist_tj)`.
///
/// Each customer's kernel column is rescaled so that its largest weighted
/// entry is 1. The weights are invariant to that rescaling, and it keeps the
/// denominators far from the division floor at large `beta`.
pub fn flp_soft_objective(tape: &mut Tape, x: Var, dist: &Tensor, beta: f64) -> Result<Var> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let xv = tape.value(x).data().to_vec();
    if xv.len() != dist.rows() {
        return Err(Error::shape("flp_soft_objective", format!("{} scores for {} sites", xv.len(), dist.rows())));
    }
    if xv.iter().sum::<f64>() <= 0.0 {
        return Err(Error::NoFacilityMass);
    }
    let (m, n) = dist.shape();
    let mut kt = Tensor::zeros(n, m);
    let mut kdt = Tensor::zeros(n, m);
    for j in 0..n {
        let shift = (0..m)
            .filter(|&i| xv[i] > 0.0)
            .map(|i| dist.get(i, j) - xv[i].ln() / beta)
            .fold(f64::INFINITY, f64::min);
        for i in 0..m {
            let d = dist.get(i, j);
            let k = (-beta * (d - shift)).exp();
            kt.set(j, i, k);
            kdt.set(j, i, k * d);
        }
    }
    let kdt = tape.constant(kdt)?;
    let kt = tape.constant(kt)?;
    let num = tape.matvec(kdt, x)?;
    let den = tape.matvec(kt, x)?;
    let per_customer = tape.div(num, den)?;
    tape.sum(per_customer)
}

/// Hard-min surrogate `sum_j min_i (dist_ij + M (1 - x_i))` with `M = max dist`.
/// Its gradient reaches only the arg-min facility of each customer.
pub fn flp_hardmin_objective(tape: &mut Tape, x: Var, dist: &Tensor) -> Result<Var> {
    let m = dist.rows();
    let big = dist.data().iter().copied().fold(0.0, f64::max).max(1e-12);
    let rows = tape.broadcast_cols(x, dist.cols())?;
    let neg = tape.scale(rows, -big)?;
    let penalty = tape.add_scalar(neg, big)?;
    let d = tape.constant(dist.clone())?;
    let shifted = tape.add(d, penalty)?;
    debug_assert_eq!(tape.value(shifted).rows(), m);
    let mins = tape.col_min(shifted)?;
    tape.sum(mins)
}

/// Nearest-open-facility cost of a selection.
pub fn flp_hard_objective(selection: &[usize], dist: &Tensor) -> Result<f64> {
    if selection.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok((0..dist.cols())
        .map(|j| selection.iter().map(|&i| dist.get(i, j)).fold(f64::INFINITY, f64::min))
        .sum())
}

/// The `k` sites with the largest scores.
pub fn flp_decode(x: &[f64], k: usize) -> Vec<usize> {
    top_k(x, k)
}

fn assign(selection: &[usize], dist: &Tensor) -> Vec<usize> {
    (0..dist.cols())
        .map(|j| {
            let mut best = 0;
            for (s, &i) in selection.iter().enumerate() {
                if dist.get(i, j) < dist.get(selection[best], j) {
                    best = s;
                }
            }
            best
        })
        .collect()
}

/// Alternates nearest-facility assignment and medoid replacement until the
/// selection stops changing (at most 20 rounds). Never increases the cost.
pub fn flp_neighborhood(selection: &[usize], dist: &Tensor) -> Vec<usize> {
    let mut current = selection.to_vec();
    current.sort_unstable();
    if current.is_empty() {
        return current;
    }
    let mut cost = flp_hard_objective(&current, dist).unwrap_or(f64::INFINITY);
    for _ in 0..NEIGHBORHOOD_ROUNDS {
        let owner = assign(&current, dist);
        let mut next = current.clone();
        for (s, &fac) in current.iter().enumerate() {
            let members: Vec<usize> = (0..owner.len()).filter(|&j| owner[j] == s).collect();
            if members.is_empty() {
                continue;
            }
            let within = |c: usize| members.iter().map(|&j| dist.get(c, j)).sum::<f64>();
            let mut best = fac;
            let mut best_cost = within(fac);
            for &c in &members {
                let v = within(c);
                if v < best_cost {
                    best = c;
                    best_cost = v;
                }
            }
            if best != fac && !next.contains(&best) {
                next[s] = best;
            }
        }
        next.sort_unstable();
        if next == current {
            break;
        }
        let next_cost = flp_hard_objective(&next, dist).unwrap_or(f64::INFINITY);
        if next_cost > cost {
            break;
        }
        current = next;
        cost = next_cost;
    }
    current
}

/// Adds, `k` times, the site that lowers the cost most (ties to the lower index).
pub fn flp_greedy(inst: &FlpInstance) -> Vec<usize> {
    let n = inst.dist.cols();
    let mut nearest = vec![f64::INFINITY; n];
    let mut chosen = Vec::with_capacity(inst.k);
    for _ in 0..inst.k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..inst.m {
            if chosen.contains(&i) {
                continue;
            }
            let cost: f64 = (0..n).map(|j| nearest[j].min(inst.dist.get(i, j))).sum();
            if best.map_or(true, |(_, c)| cost < c) {
                best = Some((i, cost));
            }
        }
        let (i, _) = best.expect("k <= m leaves a candidate");
        for (j, v) in nearest.iter_mut().enumerate() {
            *v = v.min(inst.dist.get(i, j));
        }
        chosen.push(i);
    }
    chosen.sort_unstable();
    chosen
}

/// Exact optimum by enumerating every `k`-subset (first in lexicographic
/// order among ties).
pub fn flp_brute_force(inst: &FlpInstance) -> Result<DiscreteSolution> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_subset(inst.m, inst.k, BRUTE_FORCE_LIMIT, |s| {
        let cost = flp_hard_objective(s, &inst.dist).expect("k >= 1");
        if best.as_ref().map_or(true, |(_, c)| cost < *c) {
            best = Some((s.to_vec(), cost));
        }
    })?;
    let (sel, cost) = best.ok_or(Error::EmptySelection)?;
    Ok(selection_solution(sel, cost, inst.k))
}

pub(crate) fn selection_solution(selection: Vec<usize>, objective: f64, k: usize) -> DiscreteSolution {
    let feasible = !selection.is_empty() && selection.len() <= k;
    DiscreteSolution {
        decision: Decision::Select(selection),
        objective,
        feasible,
        plan: None,
    }
}

/// Surrogate driving the search.
#[derive(Clone, Debug)]
pub enum FlpEstimator {
    /// Softmin at inverse temperature `beta`.
    Softmin(f64),
    HardMin,
}

pub struct FlpProblem {
    pub inst: FlpInstance,
    pub estimator: FlpEstimator,
    constraints: PositiveLinearConstraints,
}

impl FlpProblem {
    pub fn softmin(inst: FlpInstance, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Ok(Self::with_estimator(inst, FlpEstimator::Softmin(beta)))
    }

    pub fn hard_min(inst: FlpInstance) -> Self {
        Self::with_estimator(inst, FlpEstimator::HardMin)
    }

    fn with_estimator(inst: FlpInstance, estimator: FlpEstimator) -> Self {
        let constraints = inst.budget_constraints();
        Self {
            inst,
            estimator,
            constraints,
        }
    }

    pub fn evaluate(&self, selection: Vec<usize>) -> DiscreteSolution {
        let cost = flp_hard_objective(&selection, &self.inst.dist).unwrap_or(f64::INFINITY);
        selection_solution(selection, cost, self.inst.k)
    }
}

impl SearchProblem for FlpProblem {
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
        match &self.estimator {
            FlpEstimator::Softmin(beta) => flp_soft_objective(tape, x, &self.inst.dist, *beta),
            FlpEstimator::HardMin => flp_hardmin_objective(tape, x, &self.inst.dist),
        }
    }

    fn decode(&self, x: &[f64]) -> Result<DiscreteSolution> {
        Ok(self.evaluate(flp_decode(x, self.inst.k)))
    }

    fn neighborhood(&self, sol: &DiscreteSolution) -> Result<Option<DiscreteSolution>> {
        let improved = flp_neighborhood(sol.selection(), &self.inst.dist);
        Ok(Some(self.evaluate(improved)))
    }
}

#[cfg(test)]
mod tests;
