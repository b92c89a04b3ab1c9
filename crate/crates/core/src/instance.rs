//! JSON instance files shared by every problem family.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::encoder::{flp_graph, mcp_graph, ProblemGraph};
use crate::problems::cflp::{cflp_brute_force, cflp_greedy, CflpProblem};
use crate::problems::flp::{distance_matrix, flp_brute_force, flp_greedy, FlpInstance, FlpProblem, Metric};
use crate::problems::generate::{gen_flp, gen_mcp, gen_tsp};
use crate::problems::mcp::{mcp_brute_force, mcp_greedy, McpInstance, McpProblem};
use crate::problems::tsp::{normalize_tour, tour_length, tsp_decode, tsp_held_karp, two_opt, TspInstance, TspProblem};
use crate::problems::{Decision, DiscreteSolution, SearchProblem, Sense};

/// Largest allowed gap between given distances and those implied by the
/// coordinates.
pub const DISTANCE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Flp,
    Cflp,
    Mcp,
    Tsp,
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flp" => Ok(ProblemKind::Flp),
            "cflp" => Ok(ProblemKind::Cflp),
            "mcp" => Ok(ProblemKind::Mcp),
            "tsp" => Ok(ProblemKind::Tsp),
            other => Err(Error::InvalidArgument(format!("unknown problem type {other:?}"))),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ProblemKind::Flp => "flp",
            ProblemKind::Cflp => "cflp",
            ProblemKind::Mcp => "mcp",
            ProblemKind::Tsp => "tsp",
        };
        f.write_str(s)
    }
}

/// On-disk form. `k` is required except for TSP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub problem: ProblemKind,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incidence: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
}

/// A validated instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Instance {
    Flp(FlpInstance),
    Cflp(FlpInstance),
    Mcp(McpInstance),
    Tsp(TspInstance),
}

impl Instance {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Instance::Flp(_) => ProblemKind::Flp,
            Instance::Cflp(_) => ProblemKind::Cflp,
            Instance::Mcp(_) => ProblemKind::Mcp,
            Instance::Tsp(_) => ProblemKind::Tsp,
        }
    }

    pub fn sense(&self) -> Sense {
        match self {
            Instance::Mcp(_) => Sense::Maximize,
            _ => Sense::Minimize,
        }
    }

    /// The search problem; `beta` is the FLP softmin inverse temperature.
    pub fn search_problem(&self, beta: f64) -> Result<Box<dyn SearchProblem>> {
        Ok(match self {
            Instance::Flp(i) => Box::new(FlpProblem::softmin(i.clone(), beta)?),
            Instance::Cflp(i) => Box::new(CflpProblem::new(i.clone())?),
            Instance::Mcp(i) => Box::new(McpProblem::new(i.clone())),
            Instance::Tsp(i) => Box::new(TspProblem::new(i.clone())?),
        })
    }

    /// Exact optimum; fails with a size-guard error on large instances.
    pub fn oracle(&self) -> Result<DiscreteSolution> {
        match self {
            Instance::Flp(i) => flp_brute_force(i),
            Instance::Cflp(i) => cflp_brute_force(i),
            Instance::Mcp(i) => mcp_brute_force(i),
            Instance::Tsp(i) => tsp_held_karp(i),
        }
    }

    /// Constructive baseline: greedy selection, or greedy edge insertion
    /// followed by 2-opt for tours.
    pub fn greedy(&self) -> Result<DiscreteSolution> {
        match self {
            Instance::Flp(i) => Ok(FlpProblem::hard_min(i.clone()).evaluate(flp_greedy(i))),
            Instance::Cflp(i) => cflp_greedy(i),
            Instance::Mcp(i) => Ok(McpProblem::new(i.clone()).evaluate(mcp_greedy(i))),
            Instance::Tsp(i) => {
                let heat = Tensor::new(i.m, i.m, i.dist.data().iter().map(|d| -d).collect());
                let tour = normalize_tour(&two_opt(&tsp_decode(&heat, &i.dist), &i.dist));
                let length = tour_length(&tour, &i.dist);
                Ok(DiscreteSolution {
                    feasible: crate::problems::tsp::is_hamiltonian(&tour, i.m),
                    decision: Decision::Tour(tour),
                    objective: length,
                    plan: None,
                })
            }
        }
    }

    /// Encoder input graph; TSP has no encoder.
    pub fn graph(&self) -> Result<ProblemGraph> {
        match self {
            Instance::Flp(i) | Instance::Cflp(i) => flp_graph(i),
            Instance::Mcp(i) => Ok(mcp_graph(i)),
            Instance::Tsp(_) => Err(Error::InvalidArgument("no encoder for tsp instances".into())),
        }
    }
}

/// Generator inputs. `k` is required for every family but TSP, `n` for MCP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenParams {
    pub problem: ProblemKind,
    pub m: usize,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub seed: u64,
    pub metric: Metric,
}

/// Seeded random instance of the requested family.
pub fn generate(p: &GenParams) -> Result<Instance> {
    let need = |v: Option<usize>, name: &str| {
        v.ok_or_else(|| Error::InvalidArgument(format!("{} instances need {name}", p.problem)))
    };
    Ok(match p.problem {
        ProblemKind::Flp => Instance::Flp(gen_flp(p.m, need(p.k, "k")?, p.seed, p.metric, false)?),
        ProblemKind::Cflp => Instance::Cflp(gen_flp(p.m, need(p.k, "k")?, p.seed, p.metric, true)?),
        ProblemKind::Mcp => Instance::Mcp(gen_mcp(p.m, need(p.n, "n")?, need(p.k, "k")?, p.seed)?),
        ProblemKind::Tsp => Instance::Tsp(gen_tsp(p.m, p.seed)?),
    })
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

impl InstanceFile {
    /// File form of `inst`. Coordinates are written when known, otherwise
    /// the distance matrix.
    pub fn from_instance(inst: &Instance, seed: u64) -> Self {
        let mut f = InstanceFile {
            problem: inst.kind(),
            m: 0,
            k: None,
            n: None,
            coords: None,
            distances: None,
            incidence: None,
            values: None,
            demand: None,
            capacity: None,
            seed,
            metric: None,
        };
        match inst {
            Instance::Flp(i) | Instance::Cflp(i) => {
                f.m = i.m;
                f.k = Some(i.k);
                f.metric = i.metric;
                match &i.coords {
                    Some(c) => f.coords = Some(c.clone()),
                    None => f.distances = Some(rows_of(&i.dist)),
                }
                f.demand = i.demand.clone();
                f.capacity = i.capacity;
            }
            Instance::Mcp(i) => {
                f.m = i.m;
                f.k = Some(i.k);
                f.n = Some(i.n);
                f.incidence = Some(i.incidence());
                f.values = Some(i.values.clone());
            }
            Instance::Tsp(i) => {
                f.m = i.m;
                match &i.coords {
                    Some(c) => f.coords = Some(c.clone()),
                    None => f.distances = Some(rows_of(&i.dist)),
                }
            }
        }
        f
    }

    fn require_k(&self) -> Result<usize> {
        self.k
            .ok_or_else(|| Error::Schema(format!("{} instance needs \"k\"", self.problem)))
    }

    /// Distance matrix from coordinates and/or explicit distances.
    fn distance_matrix(&self) -> Result<(Tensor, Option<Metric>)> {
        let given = match &self.distances {
            Some(rows) => {
                if rows.len() != self.m || rows.iter().any(|r| r.len() != self.m) {
                    return Err(Error::Schema(format!("distances must be {0}x{0}", self.m)));
                }
                Some(Tensor::from_rows(rows))
            }
            None => None,
        };
        match (&self.coords, given) {
            (Some(c), given) => {
                if c.len() != self.m {
                    return Err(Error::Schema(format!("{} coordinates for m = {}", c.len(), self.m)));
                }
                if c.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Schema("coordinates must be finite".into()));
                }
                let metric = self.metric.unwrap_or(Metric::Euclidean);
                let d = distance_matrix(c, metric);
                if let Some(g) = given {
                    let worst = d
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    if !(worst <= DISTANCE_TOLERANCE) {
                        return Err(Error::Schema(format!(
                            "distances disagree with coordinates by {worst:e}"
                        )));
                    }
                }
                Ok((d, Some(metric)))
            }
            (None, Some(g)) => Ok((g, self.metric)),
            (None, None) => Err(Error::Schema(format!(
                "{} instance needs \"coords\" or \"distances\"",
                self.problem
            ))),
        }
    }

    fn flp(&self) -> Result<FlpInstance> {
        let k = self.require_k()?;
        let (dist, metric) = self.distance_matrix()?;
        let inst = FlpInstance {
            m: self.m,
            k,
            coords: self.coords.clone(),
            dist,
            metric,
            capacity: None,
            demand: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Validates the file and builds the instance it describes.
    pub fn to_instance(&self) -> Result<Instance> {
        let forbid = |present: bool, field: &str| -> Result<()> {
            if present {
                Err(Error::Schema(format!("\"{field}\" is not valid for {} instances", self.problem)))
            } else {
                Ok(())
            }
        };
        match self.problem {
            ProblemKind::Flp => {
                forbid(self.incidence.is_some() || self.values.is_some(), "incidence/values")?;
                forbid(self.demand.is_some() || self.capacity.is_some(), "demand/capacity")?;
                Ok(Instance::Flp(self.flp()?))
            }
            ProblemKind::Cflp => {
                forbid(self.incidence.is_some() || self.values.is_some(), "incidence/values")?;
                let capacity = self
                    .capacity
                    .ok_or_else(|| Error::Schema("cflp instance needs \"capacity\"".into()))?;
                let demand = self
                    .demand
                    .clone()
                    .ok_or_else(|| Error::Schema("cflp instance needs \"demand\"".into()))?;
                Ok(Instance::Cflp(self.flp()?.with_capacity(capacity, demand)?))
            }
            ProblemKind::Mcp => {
                forbid(self.coords.is_some() || self.distances.is_some(), "coords/distances")?;
                forbid(self.demand.is_some() || self.capacity.is_some(), "demand/capacity")?;
                let k = self.require_k()?;
                let incidence = self
                    .incidence
                    .as_ref()
                    .ok_or_else(|| Error::Schema("mcp instance needs \"incidence\"".into()))?;
                let values = self
                    .values
                    .clone()
                    .ok_or_else(|| Error::Schema("mcp instance needs \"values\"".into()))?;
                if incidence.len() != self.m {
                    return Err(Error::Schema(format!("{} incidence rows for m = {}", incidence.len(), self.m)));
                }
                let n = self.n.unwrap_or(values.len());
                if values.len() != n || incidence.iter().any(|r| r.len() != n) {
                    return Err(Error::Schema(format!("incidence rows and values must have n = {n} entries")));
                }
                if incidence.iter().flatten().any(|&b| b > 1) {
                    return Err(Error::Schema("incidence entries must be 0 or 1".into()));
                }
                Ok(Instance::Mcp(McpInstance::from_incidence(incidence, k, values)?))
            }
            ProblemKind::Tsp => {
                forbid(self.incidence.is_some() || self.values.is_some(), "incidence/values")?;
                forbid(self.demand.is_some() || self.capacity.is_some(), "demand/capacity")?;
                if self.m < 3 {
                    return Err(Error::Schema(format!("tsp instance needs m >= 3, got {}", self.m)));
                }
                let (dist, _) = self.distance_matrix()?;
                let inst = match &self.coords {
                    Some(c) => TspInstance::from_coords(c.clone())?,
                    None => TspInstance::from_distances(dist)?,
                };
                Ok(Instance::Tsp(inst))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads and validates an instance file.
    pub fn load(path: &Path) -> Result<(Self, Instance)> {
        let file = Self::from_json(&std::fs::read_to_string(path)?)?;
        let inst = file.to_instance()?;
        Ok((file, inst))
    }
}
