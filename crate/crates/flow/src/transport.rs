//! Soft correspondence through entropic optimal transport.
//!
//! Features are compared by cosine similarity, the cost `1 - S` is fed to a
//! log-domain unbalanced Sinkhorn solver whose two marginals are both pulled
//! toward `1/n1` by KL penalties, and each source row keeps its `top_l`
//! strongest plan entries as soft target weights.

use std::sync::Arc;

use ffe_autodiff::{Tape, Tensor, Var};

use crate::{FlowError, Result};

/// How plan entries on a row's top-L support become weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// `W = T / sum_topL T`, the plan mass renormalised over the support
    /// (a softmax of log-plan values).
    #[default]
    PlanMass,
    /// `W = exp(T) / sum_topL exp(T)`, a softmax of raw plan values.
    ExpPlan,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OTConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    pub top_l: usize,
    pub weight_mode: WeightMode,
    /// Over-relaxation factor of each dual update; 1 is plain Sinkhorn.
    pub relaxation: f64,
    /// Re-balance the two potentials after every sweep (`u + t`, `v - t`
    /// with the optimal `t`), which removes the slow common mode of the
    /// unbalanced iteration without moving its fixed point.
    pub translation_step: bool,
    /// Value-only solves switch from sweeps to Newton steps on the
    /// fixed-point equations after this many sweeps. Ignored on the tape.
    pub newton_after: Option<usize>,
}

impl Default for OTConfig {
    fn default() -> Self {
        Self::inference()
    }
}

impl OTConfig {
    /// 100 iterations, used at estimation time.
    pub fn inference() -> Self {
        Self {
            epsilon: 0.03,
            lambda: 10.0,
            sinkhorn_iters: 100,
            top_l: 32,
            weight_mode: WeightMode::PlanMass,
            relaxation: 1.4,
            translation_step: true,
            newton_after: Some(20),
        }
    }

    /// 30 unrolled iterations, used inside the training graph.
    pub fn training() -> Self {
        Self {
            sinkhorn_iters: 30,
            newton_after: None,
            ..Self::inference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.epsilon.is_finite()
            && self.lambda > 0.0
            && self.lambda.is_finite()
            && self.sinkhorn_iters >= 1
            && self.top_l >= 1
            && self.relaxation > 0.0
            && self.relaxation < 2.0;
        if ok {
            Ok(())
        } else {
            Err(FlowError::Config(format!(
                "invalid transport settings {self:?}"
            )))
        }
    }
}

/// Cosine similarity `S[i,j] = <a_i, b_j> / (|a_i| |b_j| + 1e-12)` on the tape.
pub fn similarity(tape: &mut Tape, fx: Var, fy: Var) -> Result<Var> {
    let (wx, wy) = (tape.shape(fx)[1], tape.shape(fy)[1]);
    if wx != wy {
        return Err(FlowError::Dimension(format!(
            "feature widths differ: {wx} vs {wy}"
        )));
    }
    let dots = tape.matmul_t(fx, fy)?;
    let nx = row_norms(tape, fx);
    let ny = row_norms(tape, fy);
    let denom = tape.outer_mul(nx, ny);
    let denom = tape.add_const(denom, 1e-12);
    Ok(tape.div(dots, denom)?)
}

fn row_norms(tape: &mut Tape, a: Var) -> Var {
    let sq = tape.square(a);
    let s = tape.sum_rows(sq);
    tape.sqrt(s)
}

/// Plain-value cosine similarity.
pub fn similarity_matrix(fx: &Tensor, fy: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(fx.clone());
    let b = tape.constant(fy.clone());
    let s = similarity(&mut tape, a, b)?;
    Ok(tape.value(s).clone())
}

/// Nodes produced by [`sinkhorn`].
#[derive(Debug, Clone)]
pub struct SinkhornVars {
    /// `log T = u_i + v_j - C_ij / eps`.
    pub log_plan: Var,
    pub plan: Var,
    pub u: Var,
    pub v: Var,
    /// `max(|Δu|, |Δv|)` after every iteration.
    pub residuals: Vec<f64>,
}

/// Unrolled log-domain unbalanced Sinkhorn on the tape.
pub fn sinkhorn(tape: &mut Tape, cost: Var, cfg: &OTConfig) -> Result<SinkhornVars> {
    cfg.validate()?;
    let (n1, n2) = match tape.shape(cost) {
        [a, b] => (*a, *b),
        s => {
            return Err(FlowError::Dimension(format!(
                "cost must be a matrix, got {s:?}"
            )))
        }
    };
    if n1 == 0 || n2 == 0 {
        return Err(FlowError::Dimension("empty cost matrix".into()));
    }
    if !tape.value(cost).is_finite() {
        return Err(FlowError::NonFinite {
            stage: "transport cost",
            iteration: 0,
        });
    }
    let eps = cfg.epsilon;
    let exponent = cfg.lambda / (cfg.lambda + eps);
    let r = eps / cfg.lambda;
    let w = cfg.relaxation;
    let log_mass = (1.0 / n1 as f64).ln();
    let la = tape.constant(Tensor::vector(vec![log_mass; n1]));
    let lb = tape.constant(Tensor::vector(vec![log_mass; n2]));
    let m = tape.scale(cost, -1.0 / eps);
    let mut u = tape.constant(Tensor::vector(vec![0.0; n1]));
    let mut v = tape.constant(Tensor::vector(vec![0.0; n2]));
    let mut residuals = Vec::with_capacity(cfg.sinkhorn_iters);

    let relax = |tape: &mut Tape, old: Var, target: Var, lse: Var| -> Result<Var> {
        let diff = tape.sub(target, lse)?;
        let upd = tape.scale(diff, w * exponent);
        if w == 1.0 {
            return Ok(upd);
        }
        let keep = tape.scale(old, 1.0 - w);
        Ok(tape.add(keep, upd)?)
    };

    for it in 0..cfg.sinkhorn_iters {
        let (u0, v0) = (tape.data(u).to_vec(), tape.data(v).to_vec());
        let col = tape.lse_cols_offset(m, u)?;
        v = relax(tape, v, lb, col)?;
        let row = tape.lse_rows_offset(m, v)?;
        u = relax(tape, u, la, row)?;
        if cfg.translation_step {
            let su = tape.scale(u, -r);
            let su = tape.add(la, su)?;
            let a = tape.lse_all(su);
            let sv = tape.scale(v, -r);
            let sv = tape.add(lb, sv)?;
            let b = tape.lse_all(sv);
            let d = tape.sub(a, b)?;
            let t = tape.scale(d, 0.5 / r);
            let nt = tape.neg(t);
            u = tape.add_scalar_var(u, t)?;
            v = tape.add_scalar_var(v, nt)?;
        }
        if !tape.value(u).is_finite() || !tape.value(v).is_finite() {
            return Err(FlowError::NonFinite {
                stage: "sinkhorn",
                iteration: it + 1,
            });
        }
        let du = max_abs_diff(&u0, tape.data(u));
        let dv = max_abs_diff(&v0, tape.data(v));
        residuals.push(du.max(dv));
    }
    let uv = tape.outer_add(u, v);
    let log_plan = tape.add(uv, m)?;
    let plan = tape.exp(log_plan);
    Ok(SinkhornVars {
        log_plan,
        plan,
        u,
        v,
        residuals,
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Plan and duals of a value-only solve.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    pub plan: Tensor,
    pub log_plan: Tensor,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Fixed-point gap (see [`fixed_point_residual`]) after every iteration.
    pub residuals: Vec<f64>,
}

/// Value-only transport solve for an `n1 × n2` cost matrix.
///
/// Runs the same sweeps as [`sinkhorn`] and, when `newton_after` is set,
/// finishes with damped Newton steps on the fixed-point equations
/// `u = phi (log a - LSE_j(M + v))`, `v = phi (log b - LSE_i(M + u))`.
/// Both routes converge to the same plan.
pub fn solve_transport(cost: &Tensor, cfg: &OTConfig) -> Result<TransportSolution> {
    cfg.validate()?;
    let (n1, n2) = match cost.shape() {
        [a, b] if *a > 0 && *b > 0 => (*a, *b),
        s => {
            return Err(FlowError::Dimension(format!(
                "cost must be a non-empty matrix, got {s:?}"
            )))
        }
    };
    if !cost.is_finite() {
        return Err(FlowError::NonFinite {
            stage: "transport cost",
            iteration: 0,
        });
    }
    let duals = Duals::new(cost, n1, n2, cfg);
    let mut u = vec![0.0; n1];
    let mut v = vec![0.0; n2];
    let mut residuals = Vec::with_capacity(cfg.sinkhorn_iters);
    for it in 0..cfg.sinkhorn_iters {
        let polish = cfg
            .newton_after
            .is_some_and(|k| it >= k && residuals.last().is_some_and(|r| *r > NEWTON_FLOOR));
        if !(polish && duals.newton_step(&mut u, &mut v)) {
            duals.sweep(&mut u, &mut v, cfg);
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(FlowError::NonFinite {
                stage: "sinkhorn",
                iteration: it + 1,
            });
        }
        let (gu, gv) = duals.fixed_point_gap(&u, &v);
        residuals.push(max_abs(&gu).max(max_abs(&gv)));
    }
    let log_plan: Vec<f64> = (0..n1 * n2)
        .map(|ij| u[ij / n2] + v[ij % n2] + duals.m[ij])
        .collect();
    let plan = log_plan.iter().map(|l| l.exp()).collect();
    Ok(TransportSolution {
        plan: Tensor::new(vec![n1, n2], plan)?,
        log_plan: Tensor::new(vec![n1, n2], log_plan)?,
        u,
        v,
        residuals,
    })
}

/// Residual below which Newton steps are no longer taken.
const NEWTON_FLOOR: f64 = 1e-13;

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Plain-value state of the dual iteration.
struct Duals {
    n1: usize,
    n2: usize,
    /// `-C / eps`, row-major.
    m: Vec<f64>,
    log_mass: f64,
    phi: f64,
}

impl Duals {
    fn new(cost: &Tensor, n1: usize, n2: usize, cfg: &OTConfig) -> Self {
        Self {
            n1,
            n2,
            m: cost
                .data()
                .iter()
                .map(|c| c * (-1.0 / cfg.epsilon))
                .collect(),
            log_mass: (1.0 / n1 as f64).ln(),
            phi: cfg.lambda / (cfg.lambda + cfg.epsilon),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.m[i * self.n2..(i + 1) * self.n2]
    }

    /// `LSE_j(M_ij + v_j)` for every row.
    fn lse_rows(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n1)
            .map(|i| lse(self.row(i).iter().zip(v).map(|(m, v)| m + v)))
            .collect()
    }

    /// `LSE_i(M_ij + u_i)` for every column.
    fn lse_cols(&self, u: &[f64]) -> Vec<f64> {
        let mut mx = vec![f64::NEG_INFINITY; self.n2];
        for (i, ui) in u.iter().enumerate() {
            for (m, r) in mx.iter_mut().zip(self.row(i)) {
                *m = m.max(r + ui);
            }
        }
        let mut acc = vec![0.0; self.n2];
        for (i, ui) in u.iter().enumerate() {
            for ((a, r), m) in acc.iter_mut().zip(self.row(i)).zip(&mx) {
                *a += (r + ui - m).exp();
            }
        }
        mx.iter().zip(acc).map(|(m, a)| m + a.ln()).collect()
    }

    fn sweep(&self, u: &mut [f64], v: &mut [f64], cfg: &OTConfig) {
        let w = cfg.relaxation;
        let c = w * self.phi;
        let relax = |old: &mut f64, lse: f64| {
            let upd = c * (self.log_mass - lse);
            *old = if w == 1.0 {
                upd
            } else {
                (1.0 - w) * *old + upd
            };
        };
        for (vj, l) in v.iter_mut().zip(self.lse_cols(u)) {
            relax(vj, l);
        }
        for (ui, l) in u.iter_mut().zip(self.lse_rows(v)) {
            relax(ui, l);
        }
        if cfg.translation_step {
            let r = cfg.epsilon / cfg.lambda;
            let a = lse(u.iter().map(|x| self.log_mass + x * -r));
            let b = lse(v.iter().map(|x| self.log_mass + x * -r));
            let t = (a - b) * (0.5 / r);
            u.iter_mut().for_each(|x| *x += t);
            v.iter_mut().for_each(|x| *x -= t);
        }
    }

    /// Fixed-point residuals `(G_u, G_v)`.
    fn fixed_point_gap(&self, u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let gu = u
            .iter()
            .zip(self.lse_rows(v))
            .map(|(x, l)| x - self.phi * (self.log_mass - l))
            .collect();
        let gv = v
            .iter()
            .zip(self.lse_cols(u))
            .map(|(x, l)| x - self.phi * (self.log_mass - l))
            .collect();
        (gu, gv)
    }

    /// One damped Newton step. Returns `false` (leaving the duals untouched)
    /// when no step length reduces the fixed-point gap.
    ///
    /// Eliminating `dv` leaves `(D - phi² T C⁻¹ Tᵀ) du = D rhs` with `D`, `C`
    /// the row and column sums of the plan. In the scaled unknown
    /// `y = D^½ du` the matrix is `I - phi² A Aᵀ`, `A = D^-½ T C^-½`, whose
    /// spectrum lies in `[1 - phi², 1]`.
    fn newton_step(&self, u: &mut [f64], v: &mut [f64]) -> bool {
        let (n1, n2, phi) = (self.n1, self.n2, self.phi);
        let (gu, gv) = self.fixed_point_gap(u, v);
        let gap = max_abs(&gu).max(max_abs(&gv));
        let log_t: Vec<f64> = (0..n1 * n2)
            .map(|ij| u[ij / n2] + v[ij % n2] + self.m[ij])
            .collect();
        let lr: Vec<f64> = (0..n1)
            .map(|i| lse(log_t[i * n2..(i + 1) * n2].iter().copied()))
            .collect();
        let lc: Vec<f64> = (0..n2)
            .map(|j| lse((0..n1).map(|i| log_t[i * n2 + j])))
            .collect();
        let a = nalgebra::DMatrix::from_fn(n1, n2, |i, j| {
            (log_t[i * n2 + j] - 0.5 * (lr[i] + lc[j])).exp()
        });
        let mut s = &a * a.transpose();
        s.iter_mut().for_each(|x| *x *= -phi * phi);
        for i in 0..n1 {
            s[(i, i)] += 1.0;
        }
        let rhs = nalgebra::DVector::from_fn(n1, |i, _| {
            let pg: f64 = (0..n2)
                .map(|j| (log_t[i * n2 + j] - lr[i]).exp() * gv[j])
                .sum();
            (0.5 * lr[i]).exp() * (-gu[i] + phi * pg)
        });
        let Some(chol) = s.cholesky() else {
            return false;
        };
        let y = chol.solve(&rhs);
        let du: Vec<f64> = (0..n1).map(|i| y[i] * (-0.5 * lr[i]).exp()).collect();
        let dv: Vec<f64> = (0..n2)
            .map(|j| {
                let q: f64 = (0..n1)
                    .map(|i| (log_t[i * n2 + j] - lc[j]).exp() * du[i])
                    .sum();
                -gv[j] - phi * q
            })
            .collect();
        let mut alpha = 1.0;
        for _ in 0..12 {
            let tu: Vec<f64> = u.iter().zip(&du).map(|(x, d)| x + alpha * d).collect();
            let tv: Vec<f64> = v.iter().zip(&dv).map(|(x, d)| x + alpha * d).collect();
            let (nu, nv) = self.fixed_point_gap(&tu, &tv);
            let g = max_abs(&nu).max(max_abs(&nv));
            if g.is_finite() && g < gap {
                u.copy_from_slice(&tu);
                v.copy_from_slice(&tv);
                return true;
            }
            alpha *= 0.5;
        }
        false
    }
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest violation of the dual fixed-point equations at `(u, v)`.
pub fn fixed_point_residual(cost: &Tensor, u: &[f64], v: &[f64], cfg: &OTConfig) -> Result<f64> {
    let (n1, n2) = match cost.shape() {
        [a, b] if *a == u.len() && *b == v.len() => (*a, *b),
        s => {
            return Err(FlowError::Dimension(format!(
                "cost {s:?} with {} and {} potentials",
                u.len(),
                v.len()
            )))
        }
    };
    let (gu, gv) = Duals::new(cost, n1, n2, cfg).fixed_point_gap(u, v);
    Ok(max_abs(&gu).max(max_abs(&gv)))
}

/// Indices of each row's `top_l` largest entries, largest first, ties to the
/// lower column. Returns `n1 * min(top_l, n2)` column indices.
pub fn top_l_support(plan: &[f64], n1: usize, n2: usize, top_l: usize) -> Vec<usize> {
    let l = top_l.min(n2);
    let mut out = Vec::with_capacity(n1 * l);
    let mut cols: Vec<usize> = Vec::with_capacity(n2);
    for i in 0..n1 {
        let row = &plan[i * n2..(i + 1) * n2];
        cols.clear();
        cols.extend(0..n2);
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if l < n2 {
            cols.select_nth_unstable_by(l - 1, cmp);
        }
        cols[..l].sort_unstable_by(cmp);
        out.extend_from_slice(&cols[..l]);
    }
    out
}

/// Nodes produced by [`initial_flow`].
#[derive(Debug, Clone)]
pub struct FlowVars {
    /// `n1 × 3` initial flow `y* - x`.
    pub flow: Var,
    /// `n1 × 3` soft targets `y*`.
    pub targets: Var,
    /// `n1` confidences `max(sum_k W_ik S_ik, 0)`.
    pub confidence: Var,
    /// `n1 × L` weights on the support.
    pub weights: Var,
    /// Column index of every weight, row-major.
    pub support: Arc<[usize]>,
    pub support_size: usize,
}

/// Soft targets, confidences and initial flow from a solved plan.
///
/// `x` and `y` are the `n × 3` source and target positions.
pub fn initial_flow(
    tape: &mut Tape,
    sk: &SinkhornVars,
    similarity: Var,
    x: Var,
    y: Var,
    cfg: &OTConfig,
) -> Result<FlowVars> {
    let (n1, n2) = (tape.shape(sk.plan)[0], tape.shape(sk.plan)[1]);
    if tape.shape(x) != [n1, 3] || tape.shape(y) != [n2, 3] || tape.shape(similarity) != [n1, n2] {
        return Err(FlowError::Dimension(format!(
            "plan {n1}x{n2} does not match positions {:?}/{:?} or similarity {:?}",
            tape.shape(x),
            tape.shape(y),
            tape.shape(similarity)
        )));
    }
    if cfg.top_l == 0 {
        return Err(FlowError::Config("top_l must be at least 1".into()));
    }
    let support: Arc<[usize]> = top_l_support(tape.data(sk.plan), n1, n2, cfg.top_l).into();
    let l = support.len() / n1;
    let source = match cfg.weight_mode {
        WeightMode::PlanMass => sk.log_plan,
        WeightMode::ExpPlan => sk.plan,
    };
    let logits = tape.gather_per_row(source, support.clone())?;
    let weights = tape.softmax_rows(logits);
    let ys = tape.gather_rows(y, support.clone())?;
    let targets = tape.weighted_row_sum(weights, ys)?;
    let sims = tape.gather_per_row(similarity, support.clone())?;
    let ws = tape.mul(weights, sims)?;
    let conf = tape.sum_rows(ws);
    let confidence = tape.clamp_min(conf, 0.0);
    let flow = tape.sub(targets, x)?;
    Ok(FlowVars {
        flow,
        targets,
        confidence,
        weights,
        support,
        support_size: l,
    })
}

/// Value-only result of the full matching stage.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Tensor,
    /// Row-major `n1 × L` weights and their column indices.
    pub weights: Vec<f64>,
    pub support: Vec<usize>,
    pub support_size: usize,
    pub targets: Vec<[f64; 3]>,
    pub confidence: Vec<f64>,
    pub flow: Vec<[f64; 3]>,
    pub residuals: Vec<f64>,
}

impl TransportPlan {
    /// Dense `n1 × n2` weight matrix (zero off the support).
    pub fn dense_weights(&self) -> Tensor {
        let (n1, n2) = (self.plan.shape()[0], self.plan.shape()[1]);
        let mut w = vec![0.0; n1 * n2];
        for (r, (&c, &wt)) in self.support.iter().zip(&self.weights).enumerate() {
            w[(r / self.support_size) * n2 + c] += wt;
        }
        Tensor::new(vec![n1, n2], w).expect("dense weight shape")
    }
}

fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// Features to initial flow without gradients: similarity, cost `1 - S`,
/// value-only transport solve, support selection, soft targets and
/// confidences.
pub fn match_frames(
    fx: &Tensor,
    fy: &Tensor,
    x: &Tensor,
    y: &Tensor,
    cfg: &OTConfig,
) -> Result<TransportPlan> {
    let sim = similarity_matrix(fx, fy)?;
    let cost = Tensor::new(
        sim.shape().to_vec(),
        sim.data().iter().map(|s| 1.0 - s).collect(),
    )?;
    let sol = solve_transport(&cost, cfg)?;
    let mut tape = Tape::new();
    let sk = SinkhornVars {
        log_plan: tape.constant(sol.log_plan.clone()),
        plan: tape.constant(sol.plan.clone()),
        u: tape.constant(Tensor::vector(sol.u)),
        v: tape.constant(Tensor::vector(sol.v)),
        residuals: sol.residuals,
    };
    let s = tape.constant(sim);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let fv = initial_flow(&mut tape, &sk, s, xv, yv, cfg)?;
    Ok(TransportPlan {
        plan: sol.plan,
        weights: tape.data(fv.weights).to_vec(),
        support: fv.support.to_vec(),
        support_size: fv.support_size,
        targets: rows3(tape.value(fv.targets)),
        confidence: tape.data(fv.confidence).to_vec(),
        flow: rows3(tape.value(fv.flow)),
        residuals: sk.residuals,
    })
}

/// Weights, soft targets, confidences and flow from an already solved plan.
pub fn initial_flow_from_plan(
    plan: &Tensor,
    similarity: &Tensor,
    x: &Tensor,
    y: &Tensor,
    cfg: &OTConfig,
) -> Result<TransportPlan> {
    let mut tape = Tape::new();
    let p = tape.constant(plan.clone());
    let lp = tape.log(p);
    let sk = SinkhornVars {
        log_plan: lp,
        plan: p,
        u: p,
        v: p,
        residuals: Vec::new(),
    };
    let s = tape.constant(similarity.clone());
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let fv = initial_flow(&mut tape, &sk, s, xv, yv, cfg)?;
    Ok(TransportPlan {
        plan: plan.clone(),
        weights: tape.data(fv.weights).to_vec(),
        support: fv.support.to_vec(),
        support_size: fv.support_size,
        targets: rows3(tape.value(fv.targets)),
        confidence: tape.data(fv.confidence).to_vec(),
        flow: rows3(tape.value(fv.flow)),
        residuals: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_rows_give_identity_similarity() {
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let s = similarity_matrix(&eye, &eye).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s.data()[i * 3 + j] - want).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn antiparallel_rows() {
        let a = Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap();
        let b = Tensor::matrix(1, 2, vec![-0.3, 0.4]).unwrap();
        let s = similarity_matrix(&a, &b).unwrap();
        assert!((s.data()[0] + 1.0).abs() < 1e-11);
    }

    #[test]
    fn width_mismatch_is_error() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 4]);
        assert!(matches!(
            similarity_matrix(&a, &b),
            Err(FlowError::Dimension(_))
        ));
    }

    #[test]
    fn constant_cost_gives_uniform_plan() {
        for iters in [1, 7, 100] {
            let cfg = OTConfig {
                sinkhorn_iters: iters,
                ..OTConfig::inference()
            };
            let sol =
                solve_transport(&Tensor::new(vec![5, 5], vec![0.4; 25]).unwrap(), &cfg).unwrap();
            let p0 = sol.plan.data()[0];
            assert!(p0 > 0.0);
            for &v in sol.plan.data() {
                assert!(
                    (v - p0).abs() <= 1e-15 * p0.max(1.0),
                    "{iters}: {v} vs {p0}"
                );
            }
        }
    }

    #[test]
    fn support_ties_prefer_lower_column() {
        let s = top_l_support(&[0.2, 0.5, 0.5, 0.1], 1, 4, 2);
        assert_eq!(s, vec![1, 2]);
        assert_eq!(top_l_support(&[0.2, 0.5], 1, 2, 9), vec![1, 0]);
    }

    #[test]
    fn non_finite_cost_is_error() {
        let c = Tensor::new(vec![2, 2], vec![0.0, f64::NAN, 1.0, 0.0]).unwrap();
        assert!(matches!(
            solve_transport(&c, &OTConfig::default()),
            Err(FlowError::NonFinite { .. })
        ));
    }
}
