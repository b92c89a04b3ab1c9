//! Differentiable projection onto positive linear constraints.
//!
//! Each constraint row is written as a two-row transport problem whose first
//! row holds the mass `a_i x_i` of every variable plus a slack ("dummy")
//! column. Entropic projection alternates over the rows; the variable scores
//! are kept in logit space so that saturated entries can still move.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{logistic, CustomOp, Tape, Tensor, Var, EPS_DIV};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Le,
    Ge,
    Eq,
}

/// One sparse row `sum_j coef_j x_{idx_j} (<=|>=|=) rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub kind: RowKind,
    pub idx: Vec<usize>,
    pub coef: Vec<f64>,
    pub rhs: f64,
}

impl Row {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.coef).map(|(&i, a)| a * x[i]).sum()
    }

    pub fn coef_sum(&self) -> f64 {
        self.coef.iter().sum()
    }

    /// Amount by which `x` violates this row (0 when satisfied).
    pub fn residual(&self, x: &[f64]) -> f64 {
        let ax = self.dot(x);
        match self.kind {
            RowKind::Le => (ax - self.rhs).max(0.0),
            RowKind::Ge => (self.rhs - ax).max(0.0),
            RowKind::Eq => (ax - self.rhs).abs(),
        }
    }
}

/// `A x <= b`, `C x >= d`, `E x = f` over `x in [0,1]^l` with nonnegative data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveLinearConstraints {
    l: usize,
    rows: Vec<Row>,
}

impl PositiveLinearConstraints {
    pub fn new(l: usize) -> Self {
        Self { l, rows: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.l
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn rows_of(&self, kind: RowKind) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    pub fn push_le(&mut self, a: &[f64], b: f64) -> Result<()> {
        self.push_dense(RowKind::Le, a, b)
    }

    pub fn push_ge(&mut self, c: &[f64], d: f64) -> Result<()> {
        self.push_dense(RowKind::Ge, c, d)
    }

    pub fn push_eq(&mut self, e: &[f64], f: f64) -> Result<()> {
        self.push_dense(RowKind::Eq, e, f)
    }

    fn push_dense(&mut self, kind: RowKind, coeffs: &[f64], rhs: f64) -> Result<()> {
        if coeffs.len() != self.l {
            return Err(Error::InvalidConstraint(format!(
                "row has {} coefficients, expected {}",
                coeffs.len(),
                self.l
            )));
        }
        if let Some(bad) = coeffs.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::InvalidConstraint(format!("coefficient {bad} is not a finite nonnegative number")));
        }
        let (idx, coef): (Vec<usize>, Vec<f64>) = coeffs
            .iter()
            .enumerate()
            .filter(|(_, a)| **a > 0.0)
            .map(|(i, a)| (i, *a))
            .unzip();
        self.push_sparse(kind, idx, coef, rhs)
    }

    /// Adds a row given by its nonzero entries. Zero coefficients are dropped.
    pub fn push_sparse(&mut self, kind: RowKind, idx: Vec<usize>, coef: Vec<f64>, rhs: f64) -> Result<()> {
        if idx.len() != coef.len() {
            return Err(Error::InvalidConstraint("index and coefficient lengths differ".into()));
        }
        let mut seen = vec![false; self.l];
        let mut row = Row {
            kind,
            idx: Vec::with_capacity(idx.len()),
            coef: Vec::with_capacity(coef.len()),
            rhs,
        };
        for (i, a) in idx.into_iter().zip(coef) {
            if i >= self.l {
                return Err(Error::InvalidConstraint(format!("variable {i} out of range {}", self.l)));
            }
            if seen[i] {
                return Err(Error::InvalidConstraint(format!("variable {i} appears twice in one row")));
            }
            seen[i] = true;
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::InvalidConstraint(format!("coefficient {a} is not a finite nonnegative number")));
            }
            if a > 0.0 {
                row.idx.push(i);
                row.coef.push(a);
            }
        }
        check_row(kind, &row.coef, rhs)?;
        self.rows.push(row);
        Ok(())
    }

    pub fn violation(&self, x: &[f64]) -> Violation {
        violation(x, self)
    }
}

fn check_row(kind: RowKind, coef: &[f64], rhs: f64) -> Result<()> {
    if coef.iter().all(|&a| a == 0.0) {
        return Err(Error::InvalidConstraint("row has no positive coefficient".into()));
    }
    if !(rhs.is_finite() && rhs >= 0.0) {
        return Err(Error::InvalidConstraint(format!("right-hand side {rhs} is not a finite nonnegative number")));
    }
    let total: f64 = coef.iter().sum();
    match kind {
        RowKind::Ge if rhs > total => Err(Error::Infeasible(format!(
            ">= row needs {rhs} but the coefficients sum to {total}"
        ))),
        RowKind::Eq if rhs > total => Err(Error::Infeasible(format!(
            "= row needs {rhs} but the coefficients sum to {total}"
        ))),
        _ => Ok(()),
    }
}

/// Marginals of the two-row transport problem encoding one constraint row.
///
/// `u` holds one column per variable (zero for inactive variables) followed by
/// the slack column when `has_dummy` is set; `v` holds the two row marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportEncoding {
    pub u: Vec<f64>,
    pub v: [f64; 2],
    pub active: Vec<usize>,
    pub has_dummy: bool,
}

impl TransportEncoding {
    /// Column indices that take part in normalization: active variables and a
    /// slack column with positive capacity.
    pub fn live_columns(&self) -> Vec<usize> {
        let mut cols = self.active.clone();
        if self.has_dummy && *self.u.last().unwrap() > 0.0 {
            cols.push(self.u.len() - 1);
        }
        cols
    }
}

fn encode(kind: RowKind, coeffs: &[f64], rhs: f64) -> Result<TransportEncoding> {
    if let Some(bad) = coeffs.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::InvalidConstraint(format!("coefficient {bad} is not a finite nonnegative number")));
    }
    check_row(kind, coeffs, rhs)?;
    let total: f64 = coeffs.iter().sum();
    let active = coeffs
        .iter()
        .enumerate()
        .filter(|(_, a)| **a > 0.0)
        .map(|(i, _)| i)
        .collect();
    let mut u = coeffs.to_vec();
    let (v, dummy) = match kind {
        RowKind::Le => ([rhs, total], Some(rhs)),
        RowKind::Ge => ([total, total - rhs], Some(total - rhs)),
        RowKind::Eq => ([rhs, total - rhs], None),
    };
    if let Some(d) = dummy {
        u.push(d);
    }
    Ok(TransportEncoding {
        u,
        v,
        active,
        has_dummy: dummy.is_some(),
    })
}

/// Encodes `a . x <= b` as column marginals `[a, b]` and row marginals `[b, sum a]`.
pub fn encode_le(a: &[f64], b: f64) -> Result<TransportEncoding> {
    encode(RowKind::Le, a, b)
}

/// Encodes `c . x >= d` as column marginals `[c, sum c - d]` and row marginals
/// `[sum c, sum c - d]`.
pub fn encode_ge(c: &[f64], d: f64) -> Result<TransportEncoding> {
    encode(RowKind::Ge, c, d)
}

/// Encodes `e . x = f` as column marginals `e` (no slack) and row marginals
/// `[f, sum e - f]`.
pub fn encode_eq(e: &[f64], f: f64) -> Result<TransportEncoding> {
    encode(RowKind::Eq, e, f)
}

/// One row normalization followed by one column normalization of a
/// `2 x u.len()` plan. Columns outside [`TransportEncoding::live_columns`] are
/// left untouched.
pub fn sinkhorn_step(plan: &Tensor, enc: &TransportEncoding) -> Tensor {
    assert_eq!(plan.shape(), (2, enc.u.len()), "plan shape must be 2 x u.len()");
    let cols = enc.live_columns();
    let mut out = plan.clone();
    for r in 0..2 {
        let s: f64 = cols.iter().map(|&c| plan.get(r, c)).sum();
        let f = enc.v[r] / s.max(EPS_DIV);
        for &c in &cols {
            out.set(r, c, plan.get(r, c) * f);
        }
    }
    for &c in &cols {
        let s = out.get(0, c) + out.get(1, c);
        let f = enc.u[c] / s.max(EPS_DIV);
        for r in 0..2 {
            out.set(r, c, out.get(r, c) * f);
        }
    }
    out
}

/// Largest absolute deviation of a plan's live row and column sums from the
/// encoding's marginals.
pub fn marginal_residual(plan: &Tensor, enc: &TransportEncoding) -> f64 {
    let cols = enc.live_columns();
    let mut worst: f64 = 0.0;
    for r in 0..2 {
        let s: f64 = cols.iter().map(|&c| plan.get(r, c)).sum();
        worst = worst.max((s - enc.v[r]).abs());
    }
    for &c in &cols {
        worst = worst.max((plan.get(0, c) + plan.get(1, c) - enc.u[c]).abs());
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    /// Residual of every row, in insertion order.
    pub per_row: Vec<f64>,
    pub max: f64,
}

/// Per-row residuals: `max(0, a.x - b)`, `max(0, d - c.x)`, `|e.x - f|`.
pub fn violation(x: &[f64], constraints: &PositiveLinearConstraints) -> Violation {
    let per_row: Vec<f64> = constraints.rows.iter().map(|r| r.residual(x)).collect();
    let max = per_row.iter().copied().fold(0.0, f64::max);
    Violation { per_row, max }
}

/// Mean binary entropy of a point in the unit box.
pub fn binary_entropy(x: &[f64]) -> f64 {
    let h = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -p * p.ln() };
    x.iter().map(|&p| h(p) + h(1.0 - p)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinSatConfig {
    /// Entropic temperature; initial logits are `y / tau`.
    pub tau: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol: f64,
    /// Run exactly `max_outer` sweeps of `max_inner` steps, with no early exit.
    /// Makes the output a fixed smooth function of `y`, as finite-difference
    /// checks require.
    pub fixed_unroll: bool,
}

impl Default for LinSatConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            max_outer: 100,
            max_inner: 20,
            tol: 1e-4,
            fixed_unroll: false,
        }
    }
}

impl LinSatConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidArgument("max_outer and max_inner must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionReport {
    pub converged: bool,
    pub sweeps: usize,
    pub violation: Violation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub x: Vec<f64>,
    pub report: ProjectionReport,
}

/// A row after pinning: live logit slots, their masses and exponents, and the
/// constant masses contributed by pinned variables.
struct LiveRow {
    slots: Vec<usize>,
    u: Vec<f64>,
    w: Vec<f64>,
    log_ratio: f64,
    c1: f64,
    c2: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pin {
    Free,
    Zero,
    One,
}

struct Prepared {
    rows: Vec<LiveRow>,
    pins: Vec<Pin>,
    n_slots: usize,
}

fn prepare(constraints: &PositiveLinearConstraints) -> Result<Prepared> {
    let l = constraints.l;
    if constraints.rows.is_empty() {
        return Err(Error::InvalidConstraint("constraint set has no rows".into()));
    }
    let mut pins = vec![Pin::Free; l];
    let mut set_pin = |i: usize, p: Pin| -> Result<()> {
        match pins[i] {
            Pin::Free => {
                pins[i] = p;
                Ok(())
            }
            q if q == p => Ok(()),
            _ => Err(Error::Infeasible(format!("variable {i} is forced to both 0 and 1"))),
        }
    };
    for r in &constraints.rows {
        let total = r.coef_sum();
        let pin = match r.kind {
            RowKind::Le | RowKind::Eq if r.rhs == 0.0 => Some(Pin::Zero),
            RowKind::Ge | RowKind::Eq if r.rhs >= total => Some(Pin::One),
            _ => None,
        };
        if let Some(p) = pin {
            for &i in &r.idx {
                set_pin(i, p)?;
            }
        }
    }

    let mut rows = Vec::new();
    let mut n_slots = l;
    for kind in [RowKind::Le, RowKind::Ge, RowKind::Eq] {
        for r in constraints.rows_of(kind) {
            let total = r.coef_sum();
            let (v1, v2, dummy) = match kind {
                RowKind::Le => (r.rhs, total, r.rhs),
                RowKind::Ge => (total, total - r.rhs, total - r.rhs),
                RowKind::Eq => (r.rhs, total - r.rhs, 0.0),
            };
            if v1 <= 0.0 || v2 <= 0.0 {
                // Pinned row: every active variable already sits at its bound.
                continue;
            }
            let amax = r.coef.iter().copied().fold(0.0, f64::max);
            let mut live = LiveRow {
                slots: Vec::new(),
                u: Vec::new(),
                w: Vec::new(),
                log_ratio: v1.ln() - v2.ln(),
                c1: 0.0,
                c2: 0.0,
            };
            for (&i, &a) in r.idx.iter().zip(&r.coef) {
                match pins[i] {
                    Pin::Free => {
                        live.slots.push(i);
                        live.u.push(a);
                        live.w.push(a / amax);
                    }
                    Pin::One => live.c1 += a,
                    Pin::Zero => live.c2 += a,
                }
            }
            if dummy > 0.0 {
                live.slots.push(n_slots);
                live.u.push(dummy);
                live.w.push(1.0);
                n_slots += 1;
            }
            if !live.slots.is_empty() {
                rows.push(live);
            }
        }
    }
    Ok(Prepared { rows, pins, n_slots })
}

fn finish_x(z: &[f64], pins: &[Pin]) -> Vec<f64> {
    pins.iter()
        .enumerate()
        .map(|(i, p)| match p {
            Pin::Free => logistic(z[i]).clamp(0.0, 1.0),
            Pin::Zero => 0.0,
            Pin::One => 1.0,
        })
        .collect()
}

/// Pre-step state of one inner iteration, kept for the reverse pass.
struct StepRecord {
    row: usize,
    r1: f64,
    r2: f64,
    clamped1: bool,
    clamped2: bool,
    z_offset: usize,
}

struct Trajectory {
    steps: Vec<StepRecord>,
    z_pre: Vec<f64>,
}

fn run(
    y: &[f64],
    constraints: &PositiveLinearConstraints,
    prep: &Prepared,
    cfg: &LinSatConfig,
    mut traj: Option<&mut Trajectory>,
) -> Result<(Vec<f64>, Vec<f64>, ProjectionReport)> {
    let l = constraints.l;
    if y.len() != l {
        return Err(Error::shape("project", format!("latent has {} entries, constraints have {l}", y.len())));
    }
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("latent entry {bad} is not finite")));
    }
    let mut z = vec![0.0; prep.n_slots];
    for (zi, yi) in z.iter_mut().zip(y) {
        *zi = yi / cfg.tau;
    }

    let mut sweeps = 0;
    let mut x;
    let mut viol;
    loop {
        for (ri, row) in prep.rows.iter().enumerate() {
            for _ in 0..cfg.max_inner {
                let mut r1 = row.c1;
                let mut r2 = row.c2;
                for (&s, &u) in row.slots.iter().zip(&row.u) {
                    r1 += u * logistic(z[s]);
                    r2 += u * logistic(-z[s]);
                }
                let clamped1 = r1 < EPS_DIV;
                let clamped2 = r2 < EPS_DIV;
                let (r1, r2) = (r1.max(EPS_DIV), r2.max(EPS_DIV));
                let shift = row.log_ratio - r1.ln() + r2.ln();
                if !cfg.fixed_unroll && shift.abs() <= 1e-14 {
                    break;
                }
                if let Some(t) = traj.as_deref_mut() {
                    t.steps.push(StepRecord {
                        row: ri,
                        r1,
                        r2,
                        clamped1,
                        clamped2,
                        z_offset: t.z_pre.len(),
                    });
                    t.z_pre.extend(row.slots.iter().map(|&s| z[s]));
                }
                for (&s, &w) in row.slots.iter().zip(&row.w) {
                    z[s] += shift * w;
                }
            }
        }
        sweeps += 1;
        x = finish_x(&z, &prep.pins);
        viol = violation(&x, constraints);
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("projection logit became {bad}")));
        }
        let done = if cfg.fixed_unroll {
            sweeps >= cfg.max_outer
        } else {
            viol.max <= cfg.tol || sweeps >= cfg.max_outer
        };
        if done {
            break;
        }
    }
    let converged = viol.max <= cfg.tol;
    if !converged && !cfg.fixed_unroll {
        log::debug!(
            "projection did not reach tolerance {} after {} sweeps; max residual {:.3e}",
            cfg.tol,
            sweeps,
            viol.max
        );
    }
    let report = ProjectionReport {
        converged,
        sweeps,
        violation: viol,
    };
    Ok((x, z, report))
}

/// Projects `y` onto the constraint set without recording gradients.
///
/// Output coordinates always lie in `[0, 1]`. When the residual tolerance is
/// not met within `max_outer` sweeps the result is still returned, with
/// `report.converged == false` and the per-row residuals filled in.
pub fn project(y: &[f64], constraints: &PositiveLinearConstraints, cfg: &LinSatConfig) -> Result<Projection> {
    cfg.validate()?;
    let prep = prepare(constraints)?;
    let (x, _, report) = run(y, constraints, &prep, cfg, None)?;
    Ok(Projection { x, report })
}

/// Differentiable projection of the vector node `y`.
pub fn project_var(
    tape: &mut Tape,
    y: Var,
    constraints: &PositiveLinearConstraints,
    cfg: &LinSatConfig,
) -> Result<(Var, ProjectionReport)> {
    cfg.validate()?;
    let prep = prepare(constraints)?;
    let yv = tape.value(y);
    if !yv.is_vector() {
        return Err(Error::shape("project", format!("latent must be a column vector, got {:?}", yv.shape())));
    }
    let y_data = yv.data().to_vec();
    let mut traj = Trajectory {
        steps: Vec::new(),
        z_pre: Vec::new(),
    };
    let (x, z, report) = run(&y_data, constraints, &prep, cfg, Some(&mut traj))?;
    let op = ProjectionOp {
        tau: cfg.tau,
        rows: Arc::new(prep.rows),
        pins: prep.pins,
        z_final: z,
        traj,
    };
    let out = tape.custom(&[y], Tensor::vector(x), Box::new(op))?;
    Ok((out, report))
}

struct ProjectionOp {
    tau: f64,
    rows: Arc<Vec<LiveRow>>,
    pins: Vec<Pin>,
    z_final: Vec<f64>,
    traj: Trajectory,
}

#[inline]
fn dlogistic(z: f64) -> f64 {
    let s = logistic(z);
    s * (1.0 - s)
}

impl CustomOp for ProjectionOp {
    fn name(&self) -> &'static str {
        "linsat_project"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let l = self.pins.len();
        let mut g = vec![0.0; self.z_final.len()];
        for i in 0..l {
            if self.pins[i] == Pin::Free {
                g[i] = grad_out.data()[i] * dlogistic(self.z_final[i]);
            }
        }
        for step in self.traj.steps.iter().rev() {
            let row = &self.rows[step.row];
            let n = row.slots.len();
            let z_pre = &self.traj.z_pre[step.z_offset..step.z_offset + n];
            // z_out = z_in + shift(z_in) * w, so g_in = g_out + (g_out . w) dshift/dz_in.
            let gw: f64 = row.slots.iter().zip(&row.w).map(|(&s, &w)| g[s] * w).sum();
            if gw == 0.0 {
                continue;
            }
            let inv1 = if step.clamped1 { 0.0 } else { 1.0 / step.r1 };
            let inv2 = if step.clamped2 { 0.0 } else { 1.0 / step.r2 };
            for (k, (&s, &u)) in row.slots.iter().zip(&row.u).enumerate() {
                let dshift = -u * dlogistic(z_pre[k]) * (inv1 + inv2);
                g[s] += gw * dshift;
            }
        }
        let gy = g[..l].iter().map(|v| v / self.tau).collect();
        vec![Tensor::vector(gy)]
    }
}
