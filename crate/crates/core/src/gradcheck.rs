//! Finite-difference suites over every differentiable piece of the pipeline.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diff::{finite_difference_check, Tape, Tensor, Var};
use crate::encoder::{flp_graph, forward, mcp_graph, EncoderParams, Family, ParamVars};
use crate::error::{Error, Result};
use crate::linsat::{project_var, LinSatConfig, PositiveLinearConstraints};
use crate::problems::cflp::cflp_soft_cost;
use crate::problems::flp::{flp_soft_objective, Metric};
use crate::problems::generate::{gen_flp, gen_mcp, gen_tsp};
use crate::problems::mcp::mcp_soft_objective;
use crate::problems::tsp::{tsp_edge_objective, tsp_soft_objective};
use crate::sampling::noise_row;

/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Diffcore,
    Linsat,
    Objectives,
    Encoder,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Diffcore, Suite::Linsat, Suite::Objectives, Suite::Encoder];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Diffcore => "diffcore",
            Suite::Linsat => "linsat",
            Suite::Objectives => "objectives",
            Suite::Encoder => "encoder",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub checks: usize,
    pub max_rel_err: f64,
    /// Case with the largest error.
    pub worst_case: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOL
    }
}

struct Collector {
    result: SuiteResult,
}

impl Collector {
    fn new(suite: Suite) -> Self {
        Self {
            result: SuiteResult {
                suite: suite.name(),
                checks: 0,
                max_rel_err: 0.0,
                worst_case: String::new(),
            },
        }
    }

    fn record(&mut self, case: &str, err: f64) {
        self.result.checks += 1;
        if err > self.result.max_rel_err || self.result.worst_case.is_empty() {
            self.result.max_rel_err = self.result.max_rel_err.max(err);
            self.result.worst_case = case.to_string();
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Scalar reduction with distinct weights per coordinate.
fn reduce(t: &mut Tape, v: Var) -> Result<Var> {
    let n = t.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7 + 3) % 11) as f64 / 11.0).collect();
    t.weighted_sum(v, &w)
}

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Shape = (usize, usize, f64, f64);

/// One program per primitive with its input shapes and sampling ranges.
fn primitive_programs() -> Vec<(&'static str, Program, Vec<Shape>)> {
    let v3 = |lo, hi| (3usize, 1usize, lo, hi);
    let unary = |f: fn(&mut Tape, Var) -> Result<Var>| -> Program {
        Box::new(move |t, x| {
            let o = f(t, x[0])?;
            reduce(t, o)
        })
    };
    let binary = |f: fn(&mut Tape, Var, Var) -> Result<Var>| -> Program {
        Box::new(move |t, x| {
            let o = f(t, x[0], x[1])?;
            reduce(t, o)
        })
    };
    let full = (-3.0, 3.0);
    let pos = (0.1, 3.0);
    vec![
        ("add", binary(|t, a, b| t.add(a, b)), vec![v3(full.0, full.1); 2]),
        ("sub", binary(|t, a, b| t.sub(a, b)), vec![v3(full.0, full.1); 2]),
        ("mul", binary(|t, a, b| t.mul(a, b)), vec![v3(full.0, full.1); 2]),
        ("div", binary(|t, a, b| t.div(a, b)), vec![v3(full.0, full.1), v3(0.5, 3.0)]),
        ("scale", unary(|t, a| t.scale(a, -1.7)), vec![v3(full.0, full.1)]),
        ("add_scalar", unary(|t, a| t.add_scalar(a, 0.9)), vec![v3(full.0, full.1)]),
        ("exp", unary(|t, a| t.exp(a)), vec![v3(full.0, full.1)]),
        ("log", unary(|t, a| t.log(a)), vec![v3(pos.0, pos.1)]),
        ("tanh", unary(|t, a| t.tanh(a)), vec![v3(full.0, full.1)]),
        ("sigmoid", unary(|t, a| t.sigmoid(a, 0.7)), vec![v3(full.0, full.1)]),
        ("matvec", binary(|t, a, b| t.matvec(a, b)), vec![(2, 3, -3.0, 3.0), v3(full.0, full.1)]),
        ("matmul", binary(|t, a, b| t.matmul(a, b)), vec![(2, 3, -3.0, 3.0), (3, 2, -3.0, 3.0)]),
        ("transpose", unary(|t, a| t.transpose(a)), vec![(2, 3, -3.0, 3.0)]),
        ("row_normalize", unary(|t, a| t.row_normalize(a, &[1.0, 2.5])), vec![(2, 3, 0.1, 3.0)]),
        ("col_normalize", unary(|t, a| t.col_normalize(a, &[1.0, 2.0, 0.5])), vec![(2, 3, 0.1, 3.0)]),
        ("softmax", unary(|t, a| t.softmax(a, 1.3)), vec![v3(full.0, full.1)]),
        (
            "weighted_sum",
            Box::new(|t, x| t.weighted_sum(x[0], &[0.2, -0.4, 1.1])),
            vec![v3(full.0, full.1)],
        ),
        (
            "sum",
            Box::new(|t, x| {
                let e = t.exp(x[0])?;
                t.sum(e)
            }),
            vec![v3(full.0, full.1)],
        ),
        (
            "mean",
            Box::new(|t, x| {
                let e = t.exp(x[0])?;
                t.mean(e)
            }),
            vec![v3(full.0, full.1)],
        ),
        ("gather", unary(|t, a| t.gather(a, &[2, 0, 2])), vec![v3(full.0, full.1)]),
        (
            "concat",
            binary(|t, a, b| t.concat(&[a, b])),
            vec![v3(full.0, full.1), (2, 1, -3.0, 3.0)],
        ),
        ("broadcast_cols", unary(|t, a| t.broadcast_cols(a, 2)), vec![v3(full.0, full.1)]),
        (
            "add_row_broadcast",
            binary(|t, a, b| t.add_row_broadcast(a, b)),
            vec![(2, 3, -3.0, 3.0), v3(full.0, full.1)],
        ),
        (
            "group_prod",
            unary(|t, a| {
                let groups: Arc<[Vec<usize>]> = vec![vec![0, 1], vec![1, 2, 0], vec![]].into();
                t.group_prod(a, groups)
            }),
            vec![v3(full.0, full.1)],
        ),
    ]
}

/// Every tape primitive on `trials` random inputs.
pub fn diffcore_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Collector::new(Suite::Diffcore);
    for (name, prog, shapes) in primitive_programs() {
        for _ in 0..trials {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|&(r, cols, lo, hi)| random_tensor(&mut rng, r, cols, lo, hi))
                .collect();
            c.record(name, finite_difference_check(&prog, &inputs, 1e-5)?);
        }
    }
    Ok(c.result)
}

/// Random feasible set of 1 to 4 mixed rows built around an interior point.
pub fn random_feasible_constraints(rng: &mut ChaCha8Rng, l: usize) -> Result<PositiveLinearConstraints> {
    let xs: Vec<f64> = (0..l).map(|_| rng.gen_range(0.05..0.95)).collect();
    let mut c = PositiveLinearConstraints::new(l);
    for _ in 0..rng.gen_range(1..=4) {
        let density = rng.gen_range(0.2..1.0);
        let mut a: Vec<f64> = (0..l)
            .map(|_| if rng.gen_bool(density) { rng.gen_range(0.1..2.0) } else { 0.0 })
            .collect();
        if a.iter().all(|&v| v == 0.0) {
            a[rng.gen_range(0..l)] = 1.0;
        }
        let ax: f64 = a.iter().zip(&xs).map(|(p, q)| p * q).sum();
        let slack = rng.gen_range(0.0..0.2) * a.iter().sum::<f64>();
        match rng.gen_range(0..3) {
            0 => c.push_le(&a, ax + slack)?,
            1 => c.push_ge(&a, (ax - slack).max(0.0))?,
            _ => c.push_eq(&a, ax)?,
        }
    }
    Ok(c)
}

/// The projection under a fixed unroll, on random feasible sets.
pub fn linsat_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Collector::new(Suite::Linsat);
    let cfg = LinSatConfig {
        tau: 0.5,
        max_outer: 3,
        max_inner: 5,
        fixed_unroll: true,
        ..LinSatConfig::default()
    };
    for trial in 0..trials {
        let l = 6;
        let cons = random_feasible_constraints(&mut rng, l)?;
        let y = random_tensor(&mut rng, l, 1, -1.0, 1.0);
        let w: Vec<f64> = (0..l).map(|_| rng.gen_range(0.5..1.5)).collect();
        let err = finite_difference_check(
            |t, x| {
                let (p, _) = project_var(t, x[0], &cons, &cfg)?;
                t.weighted_sum(p, &w)
            },
            &[y],
            1e-6,
        )?;
        c.record(&format!("projection #{trial}"), err);
    }
    Ok(c.result)
}

/// FLP softmin, MCP coverage, TSP length (matrix and edge forms) and the
/// unrolled capacitated routing cost at random interior points.
pub fn objectives_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Collector::new(Suite::Objectives);
    let flp = gen_flp(5, 2, seed, Metric::Euclidean, false)?;
    let mcp = gen_mcp(8, 20, 2, seed)?;
    let cover: Arc<[Vec<usize>]> = mcp.covering().into();
    let tsp = gen_tsp(5, seed)?;
    let cflp = gen_flp(5, 2, seed, Metric::Euclidean, true)?;
    let cap = cflp.capacity.unwrap_or(1.0);
    let demand = cflp.demand.clone().unwrap_or_default();
    for _ in 0..trials {
        for beta in [10.0, 50.0] {
            let x = random_tensor(&mut rng, 5, 1, 0.05, 0.95);
            let err = finite_difference_check(|t, v| flp_soft_objective(t, v[0], &flp.dist, beta), &[x], 1e-6)?;
            c.record(&format!("flp softmin beta={beta}"), err);
        }
        let x = random_tensor(&mut rng, 8, 1, 0.05, 0.95);
        let err = finite_difference_check(|t, v| mcp_soft_objective(t, v[0], cover.clone(), &mcp.values), &[x], 1e-6)?;
        c.record("mcp coverage", err);
        let x = random_tensor(&mut rng, 5, 5, 0.0, 1.0);
        let err = finite_difference_check(|t, v| tsp_soft_objective(t, v[0], &tsp.dist), &[x], 1e-6)?;
        c.record("tsp trace", err);
        let x = random_tensor(&mut rng, 10, 1, 0.0, 1.0);
        let err = finite_difference_check(|t, v| tsp_edge_objective(t, v[0], &tsp.dist), &[x], 1e-6)?;
        c.record("tsp edges", err);
        let x = random_tensor(&mut rng, 5, 1, 0.3, 0.9);
        let err = finite_difference_check(|t, v| cflp_soft_cost(t, v[0], &cflp.dist, &demand, cap, 0.1, 10), &[x], 1e-6)?;
        c.record("cflp routing", err);
    }
    Ok(c.result)
}

/// Central-difference step for the encoder suites. Some parameter gradients
/// of the deep pipeline are near 1e-8, where a smaller step is dominated by
/// cancellation error.
const ENCODER_STEP: f64 = 1e-4;

/// Encoder forward alone and the full train-time pipeline (encoder, Gumbel
/// noise, projection, soft objective) on a 5-node instance, both with
/// respect to the encoder parameters.
pub fn encoder_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut c = Collector::new(Suite::Encoder);
    let cfg = LinSatConfig {
        tau: 0.5,
        max_outer: 10,
        fixed_unroll: true,
        ..LinSatConfig::default()
    };
    for trial in 0..trials as u64 {
        let s = seed.wrapping_add(trial);
        let flp = gen_flp(5, 2, s, Metric::Euclidean, false)?;
        let g = flp_graph(&flp)?;
        let params = EncoderParams::init(Family::Flp, s);
        let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let err = finite_difference_check(
            |t, v| {
                let y = forward(t, &g, &ParamVars(v.to_vec()))?;
                reduce(t, y)
            },
            &inputs,
            ENCODER_STEP,
        )?;
        c.record("flp forward", err);

        let mcp = gen_mcp(4, 8, 2, s)?;
        let gm = mcp_graph(&mcp);
        let pm = EncoderParams::init(Family::Mcp, s);
        let inputs: Vec<Tensor> = pm.tensors().into_iter().cloned().collect();
        let err = finite_difference_check(
            |t, v| {
                let y = forward(t, &gm, &ParamVars(v.to_vec()))?;
                reduce(t, y)
            },
            &inputs,
            ENCODER_STEP,
        )?;
        c.record("mcp forward", err);

        let cons = flp.budget_constraints();
        let noise = noise_row(s, 0, 5, 0.25);
        let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let err = finite_difference_check(
            |t, v| {
                let y = forward(t, &g, &ParamVars(v.to_vec()))?;
                let n = t.constant(Tensor::vector(noise.clone()))?;
                let noisy = t.add(y, n)?;
                let (x, _) = project_var(t, noisy, &cons, &cfg)?;
                flp_soft_objective(t, x, &flp.dist, 10.0)
            },
            &inputs,
            ENCODER_STEP,
        )?;
        c.record("flp pipeline", err);
    }
    Ok(c.result)
}

/// Runs one suite at its standard size.
pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteResult> {
    match suite {
        Suite::Diffcore => diffcore_suite(100, seed),
        Suite::Linsat => linsat_suite(20, seed),
        Suite::Objectives => objectives_suite(10, seed),
        Suite::Encoder => encoder_suite(3, seed),
    }
}

pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Suite::ALL.into_iter().map(|s| run_suite(s, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for r in [
            diffcore_suite(5, 1).unwrap(),
            linsat_suite(3, 1).unwrap(),
            objectives_suite(2, 1).unwrap(),
            encoder_suite(1, 1).unwrap(),
        ] {
            assert!(r.passed(), "{r:?}");
            assert!(r.checks > 0);
        }
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }
}
