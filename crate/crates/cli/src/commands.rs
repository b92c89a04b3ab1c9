use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use narco::encoder::{encode, pretrain as train_encoder, EncoderParams, PretrainConfig, TrainingInstance};
use narco::gradcheck::run_suite;
use narco::instance::{generate, GenParams, Instance, InstanceFile, ProblemKind};
use narco::linsat::LinSatConfig;
use narco::problems::{DiscreteSolution, Sense};
use narco::solver::{
    ablation_config, ablation_run, flp_testbed, init_latent, latent_search, InitMode, SearchConfig, SearchTrace,
    Variant, BETA_GRID,
};
use narco::Error;
use rayon::prelude::*;

use crate::report::{self, fixed, ResultRow};
use crate::{
    AblateArgs, BaselineArgs, BenchArgs, Command, GenArgs, GradcheckArgs, PretrainArgs, SearchArgs, SolveArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Solve(a) => solve(a),
        Command::Oracle(a) => baseline(a, Baseline::Oracle),
        Command::Greedy(a) => baseline(a, Baseline::Greedy),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
        Command::Pretrain(a) => pretrain(a),
    }
}

fn instance_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load(path: &Path) -> Result<(InstanceFile, Instance)> {
    InstanceFile::load(path).with_context(|| format!("loading {}", path.display()))
}

fn gap_text(sense: Sense, objective: f64, best_known: Option<f64>) -> String {
    best_known.map(|b| fixed(sense.gap(objective, b))).unwrap_or_default()
}

fn gen(a: GenArgs) -> Result<()> {
    let inst = generate(&GenParams {
        problem: a.problem,
        m: a.m,
        k: a.k,
        n: a.n,
        seed: a.seed,
        metric: a.metric,
    })?;
    let json = InstanceFile::from_instance(&inst, a.seed).to_json()?;
    let mut out = report::sink(a.out.as_deref())?;
    out.write_all(json.as_bytes())?;
    Ok(())
}

fn initial_code(inst: &Instance, problem: &dyn narco::problems::SearchProblem, s: &SearchArgs) -> Result<Vec<f64>> {
    match s.init {
        InitMode::Encoder => {
            let path = s.encoder.as_ref().context("--init encoder needs --encoder <params.json>")?;
            let params = EncoderParams::load(path).with_context(|| format!("loading {}", path.display()))?;
            Ok(encode(&inst.graph()?, &params)?)
        }
        mode => Ok(init_latent(problem, mode, s.seed)?),
    }
}

/// Latent search on one instance. The gap column is filled from
/// `best_known` when given.
fn run_latent(id: &str, inst: &Instance, s: &SearchArgs) -> Result<(ResultRow, SearchTrace)> {
    let cfg = s.config();
    let problem = inst.search_problem(cfg.beta)?;
    let y0 = initial_code(inst, problem.as_ref(), s)?;
    let start = Instant::now();
    let (sol, trace) = latent_search(problem.as_ref(), &y0, &cfg)?;
    let steps = trace.records.last().map_or(0, |r| r.step);
    let row = ResultRow {
        instance_id: id.to_string(),
        solver: "latent".into(),
        objective: fixed(sol.objective),
        gap: String::new(),
        feasible: sol.feasible,
        steps,
        elapsed_ms: fixed(start.elapsed().as_secs_f64() * 1e3),
        seed: cfg.seed,
    };
    Ok((row, trace))
}

fn solve(a: SolveArgs) -> Result<()> {
    let (_, inst) = load(&a.instance)?;
    let id = instance_id(&a.instance);
    let (mut row, trace) = run_latent(&id, &inst, &a.search)?;
    let objective: f64 = row.objective.parse()?;
    row.gap = gap_text(inst.sense(), objective, a.best_known);
    if let Some(path) = &a.trace {
        report::write_trace(path, &trace, a.trace_timing)?;
    }
    report::write_results(a.out.as_deref(), std::slice::from_ref(&row))?;
    if !row.feasible {
        bail!("latent search returned an infeasible solution for {id}");
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Baseline {
    Oracle,
    Greedy,
}

impl Baseline {
    fn name(self) -> &'static str {
        match self {
            Baseline::Oracle => "oracle",
            Baseline::Greedy => "greedy",
        }
    }

    fn solve(self, inst: &Instance) -> narco::Result<DiscreteSolution> {
        match self {
            Baseline::Oracle => inst.oracle(),
            Baseline::Greedy => inst.greedy(),
        }
    }
}

fn baseline_row(id: &str, seed: u64, inst: &Instance, which: Baseline) -> narco::Result<(ResultRow, f64)> {
    let start = Instant::now();
    let sol = which.solve(inst)?;
    let row = ResultRow {
        instance_id: id.to_string(),
        solver: which.name().into(),
        objective: fixed(sol.objective),
        gap: String::new(),
        feasible: sol.feasible,
        steps: 0,
        elapsed_ms: fixed(start.elapsed().as_secs_f64() * 1e3),
        seed,
    };
    Ok((row, sol.objective))
}

fn baseline(a: BaselineArgs, which: Baseline) -> Result<()> {
    let (file, inst) = load(&a.instance)?;
    let id = instance_id(&a.instance);
    let (mut row, _) = baseline_row(&id, file.seed, &inst, which)?;
    if let Baseline::Oracle = which {
        row.gap = fixed(0.0);
    }
    report::write_results(a.out.as_deref(), std::slice::from_ref(&row))?;
    if !row.feasible {
        bail!("{} returned an infeasible solution for {id}", which.name());
    }
    Ok(())
}

fn instance_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    Ok(files)
}

/// Every requested solver on one instance. The reference for gaps is the
/// exact optimum when the oracle ran, otherwise the best objective found.
fn bench_instance(path: &Path, solvers: &[String], search: &SearchArgs) -> Result<Vec<ResultRow>> {
    let (file, inst) = load(path)?;
    let id = instance_id(path);
    let sense = inst.sense();
    let mut rows: Vec<(ResultRow, f64)> = Vec::new();
    let mut optimum = None;
    for name in solvers {
        match name.as_str() {
            "latent" => {
                let (row, _) = run_latent(&id, &inst, search)?;
                let obj = row.objective.parse()?;
                rows.push((row, obj));
            }
            "greedy" => rows.push(baseline_row(&id, file.seed, &inst, Baseline::Greedy)?),
            "oracle" => match baseline_row(&id, file.seed, &inst, Baseline::Oracle) {
                Ok((row, obj)) => {
                    optimum = Some(obj);
                    rows.push((row, obj));
                }
                Err(Error::SizeGuard(msg)) => log::warn!("{id}: oracle skipped: {msg}"),
                Err(e) => return Err(e.into()),
            },
            other => bail!("unknown solver {other:?}; expected latent, greedy or oracle"),
        }
    }
    let best_known = optimum.or_else(|| {
        rows.iter()
            .filter(|(r, _)| r.feasible)
            .map(|&(_, o)| o)
            .reduce(|a, b| if sense.better(b, a) { b } else { a })
    });
    Ok(rows
        .into_iter()
        .map(|(mut r, obj)| {
            r.gap = gap_text(sense, obj, best_known);
            r
        })
        .collect())
}

fn bench(a: BenchArgs) -> Result<()> {
    let files = instance_files(&a.dir)?;
    if files.is_empty() {
        bail!("no instance files (*.json) in {}", a.dir.display());
    }
    let per_instance: Vec<Vec<ResultRow>> = files
        .par_iter()
        .map(|p| bench_instance(p, &a.solvers, &a.search))
        .collect::<Result<_>>()?;
    let rows: Vec<ResultRow> = per_instance.into_iter().flatten().collect();
    report::write_results(a.out.as_deref(), &rows)?;
    let infeasible = rows.iter().filter(|r| !r.feasible).count();
    if infeasible > 0 {
        bail!("{infeasible} run(s) returned infeasible solutions");
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut failed = Vec::new();
    println!("suite,checks,max_rel_err,worst_case,status");
    for suite in a.suites()? {
        let r = run_suite(suite, a.seed)?;
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{},{},{:.3e},{},{status}", r.suite, r.checks, r.max_rel_err, r.worst_case);
        if !r.passed() {
            failed.push(r.suite);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let testbed = flp_testbed(a.m, a.k, a.instances, a.seed)?;
    let cfg = SearchConfig {
        steps: a.steps,
        batch: a.batch,
        sigma: a.sigma,
        lr: a.lr,
        linsat: LinSatConfig {
            tau: a.tau,
            ..LinSatConfig::default()
        },
        ..ablation_config(a.seed)
    };
    let variants: Vec<Variant> = match a.table {
        1 => BETA_GRID.iter().map(|&beta| Variant::SoftminSearch { beta }).collect(),
        _ => vec![
            Variant::HardMinSearch,
            Variant::SoftminNoSearch { beta: 50.0 },
            Variant::SoftminSearch { beta: 50.0 },
        ],
    };
    let rows = ablation_run(&testbed, &variants, &cfg)?;
    report::write_ablation(a.out.as_deref(), &rows)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    if !matches!(a.problem, ProblemKind::Flp | ProblemKind::Mcp) {
        bail!("pretraining supports flp and mcp, not {}", a.problem);
    }
    let instances: Vec<Instance> = (0..a.count as u64)
        .map(|i| {
            generate(&GenParams {
                problem: a.problem,
                m: a.m,
                k: Some(a.k),
                n: a.n,
                seed: a.seed + i,
                metric: narco::problems::flp::Metric::Euclidean,
            })
        })
        .collect::<narco::Result<_>>()?;
    let problems = instances
        .iter()
        .map(|i| i.search_problem(a.beta))
        .collect::<narco::Result<Vec<_>>>()?;
    let data = instances
        .iter()
        .zip(&problems)
        .map(|(i, p)| {
            Ok(TrainingInstance {
                graph: i.graph()?,
                problem: p.as_ref(),
            })
        })
        .collect::<narco::Result<Vec<_>>>()?;
    let cfg = PretrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        sigma: a.sigma,
        seed: a.seed,
        linsat: LinSatConfig {
            tau: a.tau,
            ..LinSatConfig::default()
        },
    };
    let (params, losses) = train_encoder(&data, &cfg)?;
    params.save(&a.out)?;
    if let Some(path) = &a.trace {
        report::write_losses(path, &losses)?;
    }
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("training loss {first:.6} -> {last:.6}");
    }
    Ok(())
}
