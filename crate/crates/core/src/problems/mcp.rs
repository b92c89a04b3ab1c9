//! Maximum coverage: pick at most `k` of `m` sets to maximize the total value
//! of the items they cover.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::flp::{selection_solution, BRUTE_FORCE_LIMIT};
use super::{for_each_subset, top_k, DiscreteSolution, SearchProblem, Sense};
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linsat::PositiveLinearConstraints;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McpInstance {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Items covered by each set, increasing.
    pub sets: Vec<Vec<usize>>,
    pub values: Vec<f64>,
}

impl McpInstance {
    pub fn new(n: usize, k: usize, sets: Vec<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let inst = Self {
            m: sets.len(),
            n,
            k,
            sets,
            values,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Builds an instance from an `m x n` 0/1 incidence matrix.
    pub fn from_incidence(incidence: &[Vec<u8>], k: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        let mut sets = Vec::with_capacity(incidence.len());
        for (i, row) in incidence.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Schema(format!("incidence row {i} has {} entries, expected {n}", row.len())));
            }
            let mut s = Vec::new();
            for (j, &a) in row.iter().enumerate() {
                match a {
                    0 => {}
                    1 => s.push(j),
                    other => return Err(Error::Schema(format!("incidence entry {other} is not 0/1"))),
                }
            }
            sets.push(s);
        }
        Self::new(n, k, sets, values)
    }

    pub fn incidence(&self) -> Vec<Vec<u8>> {
        self.sets
            .iter()
            .map(|s| {
                let mut row = vec![0u8; self.n];
                for &j in s {
                    row[j] = 1;
                }
                row
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Schema("instance needs at least one set and one item".into()));
        }
        if self.k == 0 || self.k > self.m {
            return Err(Error::Schema(format!("k = {} must lie in 1..={}", self.k, self.m)));
        }
        if self.values.len() != self.n {
            return Err(Error::Schema(format!("{} values for n = {}", self.values.len(), self.n)));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Schema("item values must be finite and nonnegative".into()));
        }
        for (i, s) in self.sets.iter().enumerate() {
            if s.windows(2).any(|w| w[0] >= w[1]) || s.last().is_some_and(|&j| j >= self.n) {
                return Err(Error::Schema(format!("set {i} must list distinct items below n in increasing order")));
            }
        }
        Ok(())
    }

    /// Sets covering each item.
    pub fn covering(&self) -> Vec<Vec<usize>> {
        let mut cov = vec![Vec::new(); self.n];
        for (i, s) in self.sets.iter().enumerate() {
            for &j in s {
                cov[j].push(i);
            }
        }
        cov
    }

    pub fn budget_constraints(&self) -> PositiveLinearConstraints {
        let mut c = PositiveLinearConstraints::new(self.m);
        c.push_le(&vec![1.0; self.m], self.k as f64)
            .expect("budget row is valid for k >= 1");
        c
    }
}

/// `sum_j v_j (1 - prod_{i covers j} (1 - x_i))`, the probability-weighted
/// coverage when set `i` is chosen independently with probability `x_i`.
pub fn mcp_soft_objective(tape: &mut Tape, x: Var, covering: Arc<[Vec<usize>]>, values: &[f64]) -> Result<Var> {
    let neg = tape.scale(x, -1.0)?;
    let miss = tape.add_scalar(neg, 1.0)?;
    let uncovered = tape.group_prod(miss, covering)?;
    let neg_u = tape.scale(uncovered, -1.0)?;
    let covered = tape.add_scalar(neg_u, 1.0)?;
    tape.weighted_sum(covered, values)
}

/// Total value of items covered by the selected sets.
pub fn mcp_hard_objective(selection: &[usize], inst: &McpInstance) -> f64 {
    let mut covered = vec![false; inst.n];
    for &i in selection {
        for &j in &inst.sets[i] {
            covered[j] = true;
        }
    }
    covered
        .iter()
        .zip(&inst.values)
        .filter(|(c, _)| **c)
        .map(|(_, v)| v)
        .sum()
}

/// `k` rounds of picking the set with the largest marginal value (ties to the
/// lower index).
pub fn mcp_greedy(inst: &McpInstance) -> Vec<usize> {
    let mut covered = vec![false; inst.n];
    let mut chosen: Vec<usize> = Vec::with_capacity(inst.k);
    for _ in 0..inst.k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..inst.m {
            if chosen.contains(&i) {
                continue;
            }
            let gain: f64 = inst.sets[i]
                .iter()
                .filter(|&&j| !covered[j])
                .map(|&j| inst.values[j])
                .sum();
            if best.map_or(true, |(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let (i, _) = best.expect("k <= m leaves a candidate");
        for &j in &inst.sets[i] {
            covered[j] = true;
        }
        chosen.push(i);
    }
    chosen.sort_unstable();
    chosen
}

/// Exact optimum over all `k`-subsets (first in lexicographic order among ties).
pub fn mcp_brute_force(inst: &McpInstance) -> Result<DiscreteSolution> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_subset(inst.m, inst.k, BRUTE_FORCE_LIMIT, |s| {
        let value = mcp_hard_objective(s, inst);
        if best.as_ref().map_or(true, |(_, b)| value > *b) {
            best = Some((s.to_vec(), value));
        }
    })?;
    let (sel, value) = best.ok_or(Error::EmptySelection)?;
    Ok(selection_solution(sel, value, inst.k))
}

pub struct McpProblem {
    pub inst: McpInstance,
    covering: Arc<[Vec<usize>]>,
    constraints: PositiveLinearConstraints,
}

impl McpProblem {
    pub fn new(inst: McpInstance) -> Self {
        let covering = inst.covering().into();
        let constraints = inst.budget_constraints();
        Self {
            inst,
            covering,
            constraints,
        }
    }

    pub fn evaluate(&self, selection: Vec<usize>) -> DiscreteSolution {
        let v = mcp_hard_objective(&selection, &self.inst);
        selection_solution(selection, v, self.inst.k)
    }
}

impl SearchProblem for McpProblem {
    fn dim(&self) -> usize {
        self.inst.m
    }

    fn constraints(&self) -> &PositiveLinearConstraints {
        &self.constraints
    }

    fn sense(&self) -> Sense {
        Sense::Maximize
    }

    fn soft_loss(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let cov = mcp_soft_objective(tape, x, self.covering.clone(), &self.inst.values)?;
        tape.scale(cov, -1.0)
    }

    fn decode(&self, x: &[f64]) -> Result<DiscreteSolution> {
        Ok(self.evaluate(top_k(x, self.inst.k)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference_check, Tensor};
    use crate::problems::generate::gen_mcp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn soft_value(inst: &McpInstance, x: &[f64]) -> f64 {
        let mut t = Tape::new();
        let xv = t.input(Tensor::vector(x.to_vec())).unwrap();
        let v = mcp_soft_objective(&mut t, xv, inst.covering().into(), &inst.values).unwrap();
        t.scalar(v)
    }

    #[test]
    fn soft_equals_hard_on_binary_points() {
        let inst = gen_mcp(12, 30, 3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..12).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let sel: Vec<usize> = (0..12).filter(|&i| x[i] == 1.0).collect();
            assert_eq!(soft_value(&inst, &x), mcp_hard_objective(&sel, &inst));
        }
    }

    #[test]
    fn zero_point_covers_nothing() {
        let inst = gen_mcp(5, 10, 2, 0).unwrap();
        assert_eq!(soft_value(&inst, &[0.0; 5]), 0.0);
    }

    #[test]
    fn two_half_sets_cover_three_quarters() {
        let inst = McpInstance::new(1, 1, vec![vec![0], vec![0]], vec![8.0]).unwrap();
        assert!((soft_value(&inst, &[0.5, 0.5]) - 6.0).abs() < 1e-15);
    }

    #[test]
    fn hard_objective_examples() {
        let inst = McpInstance::new(3, 2, vec![vec![0, 1], vec![1, 2]], vec![1.0; 3]).unwrap();
        assert_eq!(mcp_hard_objective(&[0, 1], &inst), 3.0);
        assert_eq!(mcp_hard_objective(&[], &inst), 0.0);
    }

    #[test]
    fn incidence_round_trip() {
        let inst = gen_mcp(6, 20, 2, 3).unwrap();
        let back = McpInstance::from_incidence(&inst.incidence(), 2, inst.values.clone()).unwrap();
        assert_eq!(back, inst);
        let edges: usize = inst.incidence().iter().flatten().map(|&a| a as usize).sum();
        assert_eq!(edges, inst.sets.iter().map(Vec::len).sum::<usize>());
    }

    #[test]
    fn greedy_on_disjoint_sets_takes_largest() {
        let inst = McpInstance::new(
            6,
            2,
            vec![vec![0], vec![1, 2], vec![3], vec![4, 5]],
            vec![5.0, 1.0, 1.0, 9.0, 2.0, 2.0],
        )
        .unwrap();
        assert_eq!(mcp_greedy(&inst), vec![0, 2]);
    }

    #[test]
    fn greedy_within_approximation_bound() {
        // Greedy grabs the big middle set first and ends suboptimal.
        let inst = McpInstance::new(
            6,
            2,
            vec![vec![0, 1, 2, 3], vec![0, 1, 4], vec![2, 3, 5]],
            vec![1.0; 6],
        )
        .unwrap();
        let g = mcp_hard_objective(&mcp_greedy(&inst), &inst);
        let opt = mcp_brute_force(&inst).unwrap().objective;
        assert!(g < opt);
        assert!(g >= (1.0 - (-1.0f64).exp()) * opt);
    }

    #[test]
    fn k_equal_m_covers_everything() {
        let inst = gen_mcp(5, 30, 5, 9).unwrap();
        let total: f64 = inst.values.iter().sum();
        assert_eq!(mcp_hard_objective(&mcp_greedy(&inst), &inst), total);
    }

    #[test]
    fn oracle_dominates_greedy() {
        for seed in 0..100 {
            let inst = gen_mcp(10, 25, 3, seed).unwrap();
            let opt = mcp_brute_force(&inst).unwrap();
            assert_eq!(opt.objective, mcp_hard_objective(opt.selection(), &inst));
            assert!(opt.objective >= mcp_hard_objective(&mcp_greedy(&inst), &inst));
        }
    }

    #[test]
    fn soft_objective_gradient() {
        let inst = gen_mcp(8, 20, 2, 4).unwrap();
        let cov: Arc<[Vec<usize>]> = inst.covering().into();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(0.05..0.95)).collect();
            let err = finite_difference_check(
                |t, v| mcp_soft_objective(t, v[0], cov.clone(), &inst.values),
                &[Tensor::vector(x)],
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }
}
