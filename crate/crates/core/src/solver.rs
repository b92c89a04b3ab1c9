//! Online gradient search over latent codes.
//!
//! Each step draws `B` Gumbel perturbations of the latent code, projects them
//! onto the constraint set, averages the soft loss, and takes an Adam step on
//! the code. Every projected sample is decoded, and the best feasible hard
//! solution seen so far is kept as the incumbent.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::linsat::{project, project_var, LinSatConfig};
use crate::problems::{DiscreteSolution, SearchProblem, Sense};
use crate::sampling::{derive_seed, perturb_one};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Zeros,
    Random,
    Encoder,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(InitMode::Zeros),
            "random" => Ok(InitMode::Random),
            "encoder" => Ok(InitMode::Encoder),
            other => Err(Error::InvalidArgument(format!("unknown init mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub sigma: f64,
    /// Inverse temperature of the FLP softmin; read when the problem is built.
    pub beta: f64,
    pub seed: u64,
    pub neighborhood: bool,
    pub init: InitMode,
    pub linsat: LinSatConfig,
    /// Stop after the first step that ends past this wall-clock budget.
    pub time_limit_ms: Option<u64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            batch: 64,
            sigma: 0.25,
            beta: 50.0,
            seed: 0,
            neighborhood: true,
            init: InitMode::Zeros,
            linsat: LinSatConfig::default(),
            time_limit_ms: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 0 is the unperturbed initial code; search steps count from 1.
    pub step: usize,
    /// Mean soft loss of the batch evaluated at this step.
    pub loss: f64,
    /// Hard objective of the incumbent after this step.
    pub best_objective: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
}

impl SearchTrace {
    /// True when `best_objective` never gets worse from one record to the next.
    pub fn is_monotone(&self, sense: Sense) -> bool {
        self.records
            .windows(2)
            .all(|w| !sense.better(w[0].best_objective, w[1].best_objective))
    }

    /// First step whose incumbent is within `gap` of `best`.
    pub fn steps_to_gap(&self, sense: Sense, best: f64, gap: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| sense.gap(r.best_objective, best) <= gap)
            .map(|r| r.step)
    }
}

/// Initial latent code. Encoder mode needs the code from a forward pass, so
/// it is rejected here; use the encoder module to produce it.
pub fn init_latent(problem: &dyn SearchProblem, mode: InitMode, seed: u64) -> Result<Vec<f64>> {
    let l = problem.dim();
    match mode {
        InitMode::Zeros => Ok(vec![0.0; l]),
        InitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..l).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        }
        InitMode::Encoder => Err(Error::InvalidArgument(
            "encoder initialization needs loaded encoder parameters".into(),
        )),
    }
}

/// Outcome of one perturbed sample.
struct Sample {
    loss: f64,
    grad: Vec<f64>,
    solution: Option<DiscreteSolution>,
}

fn run_sample(problem: &dyn SearchProblem, y: &[f64], cfg: &SearchConfig, seed: u64, s: u64) -> Result<Sample> {
    let noisy = perturb_one(y, seed, s, cfg.sigma);
    let mut tape = Tape::new();
    let yv = tape.input(Tensor::vector(noisy))?;
    let (x, report) = project_var(&mut tape, yv, problem.constraints(), &cfg.linsat)?;
    let loss = problem.soft_loss(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let solution = if report.converged {
        Some(problem.decode(tape.value(x).data())?).filter(|sol| sol.feasible)
    } else {
        None
    };
    Ok(Sample {
        loss: tape.scalar(loss),
        grad: grads.wrt(yv).into_data(),
        solution,
    })
}

/// Sum of `parts` by a fixed balanced tree, independent of thread count.
fn pairwise_sum(parts: &[Vec<f64>]) -> Vec<f64> {
    match parts.len() {
        0 => Vec::new(),
        1 => parts[0].clone(),
        n => {
            let (a, b) = parts.split_at(n / 2);
            let mut left = pairwise_sum(a);
            for (l, r) in left.iter_mut().zip(pairwise_sum(b)) {
                *l += r;
            }
            left
        }
    }
}

fn pairwise_scalar(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_scalar(&v[..n / 2]) + pairwise_scalar(&v[n / 2..]),
    }
}

/// One batch at `y`: mean loss, mean gradient, and the best feasible decoded
/// sample (ties to the lowest sample index).
struct Batch {
    loss: f64,
    grad: Vec<f64>,
    best: Option<DiscreteSolution>,
}

fn run_batch(problem: &dyn SearchProblem, y: &[f64], cfg: &SearchConfig, seed: u64) -> Result<Batch> {
    let samples: Vec<Sample> = (0..cfg.batch as u64)
        .into_par_iter()
        .map(|s| run_sample(problem, y, cfg, seed, s))
        .collect::<Result<_>>()?;
    let b = samples.len() as f64;
    let losses: Vec<f64> = samples.iter().map(|s| s.loss).collect();
    let grads: Vec<Vec<f64>> = samples.iter().map(|s| s.grad.clone()).collect();
    let grad = pairwise_sum(&grads).into_iter().map(|g| g / b).collect();
    let sense = problem.sense();
    let mut best: Option<DiscreteSolution> = None;
    for sol in samples.into_iter().filter_map(|s| s.solution) {
        if best.as_ref().map_or(true, |b| sense.better(sol.objective, b.objective)) {
            best = Some(sol);
        }
    }
    Ok(Batch {
        loss: pairwise_scalar(&losses) / b,
        grad,
        best,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(dim: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, y: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..y.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            y[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Incumbent bookkeeping: a candidate replaces the incumbent only when it is
/// strictly better, so the reported objective is monotone.
struct Incumbent {
    sense: Sense,
    best: Option<DiscreteSolution>,
}

impl Incumbent {
    fn offer(&mut self, sol: Option<DiscreteSolution>) {
        let Some(sol) = sol else { return };
        if !sol.feasible {
            return;
        }
        if self.best.as_ref().map_or(true, |b| self.sense.better(sol.objective, b.objective)) {
            self.best = Some(sol);
        }
    }

    fn objective(&self) -> f64 {
        match (&self.best, self.sense) {
            (Some(b), _) => b.objective,
            (None, Sense::Minimize) => f64::INFINITY,
            (None, Sense::Maximize) => f64::NEG_INFINITY,
        }
    }
}

/// Decodes the unperturbed projection of `y`, with its soft loss.
fn evaluate_point(problem: &dyn SearchProblem, y: &[f64], linsat: &LinSatConfig) -> Result<(f64, Option<DiscreteSolution>)> {
    let proj = project(y, problem.constraints(), linsat)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(proj.x.clone()))?;
    let loss = problem.soft_loss(&mut tape, x)?;
    let sol = if proj.report.converged {
        Some(problem.decode(&proj.x)?)
    } else {
        None
    };
    Ok((tape.scalar(loss), sol))
}

/// Gradient search from `y0`. Returns the best feasible solution found and
/// the per-step trace; with `steps == 0` the result is the decoded
/// projection of `y0`.
pub fn latent_search(
    problem: &dyn SearchProblem,
    y0: &[f64],
    cfg: &SearchConfig,
) -> Result<(DiscreteSolution, SearchTrace)> {
    cfg.validate()?;
    if y0.len() != problem.dim() {
        return Err(Error::shape(
            "latent_search",
            format!("latent has {} entries, problem has {} variables", y0.len(), problem.dim()),
        ));
    }
    let start = Instant::now();
    let elapsed = || start.elapsed().as_secs_f64() * 1e3;
    let sense = problem.sense();
    let mut inc = Incumbent { sense, best: None };
    let mut trace = SearchTrace::default();

    let (loss0, sol0) = evaluate_point(problem, y0, &cfg.linsat)?;
    inc.offer(sol0);
    trace.records.push(TraceRecord {
        step: 0,
        loss: loss0,
        best_objective: inc.objective(),
        elapsed_ms: elapsed(),
    });

    let mut y = y0.to_vec();
    let mut adam = Adam::new(y.len(), cfg.lr);
    for step in 1..=cfg.steps {
        let batch = run_batch(problem, &y, cfg, derive_seed(cfg.seed, step as u64))?;
        inc.offer(batch.best);
        if cfg.neighborhood {
            if let Some(cur) = &inc.best {
                let improved = problem.neighborhood(cur)?;
                inc.offer(improved);
            }
        }
        adam.step(&mut y, &batch.grad);
        if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("latent entry became {bad} at step {step}")));
        }
        trace.records.push(TraceRecord {
            step,
            loss: batch.loss,
            best_objective: inc.objective(),
            elapsed_ms: elapsed(),
        });
        if let Some(limit) = cfg.time_limit_ms {
            if elapsed() >= limit as f64 {
                log::info!("time limit reached after {step} steps");
                break;
            }
        }
    }
    match inc.best {
        Some(best) => Ok((best, trace)),
        None => Err(Error::NoFeasibleSample),
    }
}

/// One batch of perturbed samples at `y0` with no latent updates; the best
/// decoded sample is returned.
pub fn sample_without_search(
    problem: &dyn SearchProblem,
    y0: &[f64],
    cfg: &SearchConfig,
) -> Result<(DiscreteSolution, SearchTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut inc = Incumbent {
        sense: problem.sense(),
        best: None,
    };
    let (_, sol0) = evaluate_point(problem, y0, &cfg.linsat)?;
    inc.offer(sol0);
    let batch = run_batch(problem, y0, cfg, derive_seed(cfg.seed, 1))?;
    inc.offer(batch.best);
    let trace = SearchTrace {
        records: vec![TraceRecord {
            step: 0,
            loss: batch.loss,
            best_objective: inc.objective(),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        }],
    };
    inc.best.map(|b| (b, trace)).ok_or(Error::NoFeasibleSample)
}

/// FLP ablation arms: which surrogate drives the search, and whether the
/// latent code is updated at all.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Variant {
    HardMinSearch,
    SoftminNoSearch { beta: f64 },
    SoftminSearch { beta: f64 },
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::HardMinSearch => "min+search".into(),
            Variant::SoftminNoSearch { beta } => format!("softmin(beta={beta})-no-search"),
            Variant::SoftminSearch { beta } => format!("softmin(beta={beta})+search"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_gap: f64,
    pub gaps: Vec<f64>,
}

/// One testbed instance: the problem data, its known optimum, and the initial
/// latent code all arms start from.
pub struct AblationInstance {
    pub inst: crate::problems::flp::FlpInstance,
    pub optimum: f64,
    pub y0: Vec<f64>,
}

/// Runs every variant on every instance with the same search settings and
/// reports mean gaps to the known optima.
pub fn ablation_run(testbed: &[AblationInstance], variants: &[Variant], cfg: &SearchConfig) -> Result<Vec<AblationRow>> {
    use crate::problems::flp::FlpProblem;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut gaps = Vec::with_capacity(testbed.len());
        for (i, t) in testbed.iter().enumerate() {
            let run_cfg = SearchConfig {
                seed: derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            let (sol, _) = match *v {
                Variant::HardMinSearch => {
                    latent_search(&FlpProblem::hard_min(t.inst.clone()), &t.y0, &run_cfg)?
                }
                Variant::SoftminNoSearch { beta } => {
                    sample_without_search(&FlpProblem::softmin(t.inst.clone(), beta)?, &t.y0, &run_cfg)?
                }
                Variant::SoftminSearch { beta } => {
                    latent_search(&FlpProblem::softmin(t.inst.clone(), beta)?, &t.y0, &run_cfg)?
                }
            };
            gaps.push(Sense::Minimize.gap(sol.objective, t.optimum));
        }
        let mean_gap = gaps.iter().sum::<f64>() / gaps.len().max(1) as f64;
        rows.push(AblationRow {
            variant: v.label(),
            mean_gap,
            gaps,
        });
    }
    Ok(rows)
}

/// Inverse temperatures of the softmin sweep.
pub const BETA_GRID: [f64; 5] = [10.0, 20.0, 50.0, 100.0, 200.0];

/// Search settings shared by the ablation arms: fixed step count, no
/// neighborhood moves, zero initial code.
pub fn ablation_config(seed: u64) -> SearchConfig {
    SearchConfig {
        steps: 300,
        neighborhood: false,
        init: InitMode::Zeros,
        seed,
        ..SearchConfig::default()
    }
}

/// Uncapacitated Euclidean FLP instances generated from seeds
/// `first_seed..first_seed + count`, each with its brute-force optimum and a
/// zero initial code.
pub fn flp_testbed(m: usize, k: usize, count: usize, first_seed: u64) -> Result<Vec<AblationInstance>> {
    use crate::problems::flp::{flp_brute_force, Metric};
    use crate::problems::generate::gen_flp;
    (0..count as u64)
        .map(|i| {
            let inst = gen_flp(m, k, first_seed + i, Metric::Euclidean, false)?;
            let optimum = flp_brute_force(&inst)?.objective;
            Ok(AblationInstance { inst, optimum, y0: vec![0.0; m] })
        })
        .collect()
}

#[cfg(test)]
mod tests;
