//! Problem families: differentiable surrogates, hard objectives, decoders,
//! baselines, exact oracles and instance generators.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::linsat::PositiveLinearConstraints;

pub mod cflp;
mod combinations;
pub mod flp;
pub mod generate;
pub mod mcp;
pub mod tsp;

pub use combinations::{binomial, for_each_subset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Sense::Minimize => a < b,
            Sense::Maximize => a > b,
        }
    }

    /// Relative gap of `objective` to `best`; nonnegative whenever `best` is
    /// at least as good.
    pub fn gap(self, objective: f64, best: f64) -> f64 {
        let denom = best.abs().max(1e-12);
        match self {
            Sense::Minimize => (objective - best) / denom,
            Sense::Maximize => (best - objective) / denom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Decision {
    /// Chosen indices in increasing order.
    Select(Vec<usize>),
    /// City order of a closed tour, starting at city 0.
    Tour(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSolution {
    pub decision: Decision,
    pub objective: f64,
    pub feasible: bool,
    /// Facility-by-customer service plan (capacitated FLP only).
    pub plan: Option<Tensor>,
}

impl DiscreteSolution {
    pub fn selection(&self) -> &[usize] {
        match &self.decision {
            Decision::Select(s) => s,
            Decision::Tour(_) => &[],
        }
    }

    pub fn tour(&self) -> &[usize] {
        match &self.decision {
            Decision::Tour(t) => t,
            Decision::Select(_) => &[],
        }
    }

    /// Binary indicator vector of the selection.
    pub fn indicator(&self, m: usize) -> Vec<f64> {
        let mut v = vec![0.0; m];
        for &i in self.selection() {
            v[i] = 1.0;
        }
        v
    }
}

/// A problem the latent search can optimize.
pub trait SearchProblem: Sync {
    /// Number of decision variables `l`.
    fn dim(&self) -> usize;
    fn constraints(&self) -> &PositiveLinearConstraints;
    fn sense(&self) -> Sense;
    /// Differentiable surrogate to minimize, evaluated at the projected point.
    fn soft_loss(&self, tape: &mut Tape, x: Var) -> Result<Var>;
    /// Rounds a point of the unit box to a hard solution.
    fn decode(&self, x: &[f64]) -> Result<DiscreteSolution>;
    /// Local improvement of an incumbent, for families that define one.
    fn neighborhood(&self, _sol: &DiscreteSolution) -> Result<Option<DiscreteSolution>> {
        Ok(None)
    }
}

/// Indices of the `k` largest entries, ties to the lower index, returned in
/// increasing index order.
pub fn top_k(x: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.9, 0.1, 0.8], 2), vec![0, 2]);
        assert_eq!(top_k(&[0.5; 4], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.1, 0.3, 0.3, 0.2], 1), vec![1]);
    }

    #[test]
    fn gap_signs() {
        assert!((Sense::Minimize.gap(11.0, 10.0) - 0.1).abs() < 1e-15);
        assert!((Sense::Maximize.gap(90.0, 100.0) - 0.1).abs() < 1e-15);
        assert_eq!(Sense::Maximize.gap(100.0, 100.0), 0.0);
    }
}
