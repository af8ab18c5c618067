//! Self-supervised training losses: reconstruction, smoothness and the
//! splat-based zero-divergence penalty.
//!
//! For fixed source positions both the splat interpolation and the central
//! difference divergence are linear in the flow, so they are precomputed once
//! per frame as a constant sparse operator.

use std::sync::Arc;

use ffe_autodiff::{SparseRows, Tape, Tensor, Var};
use ffe_core::{dist2, FlowField, Grid, GridPlacement, ParticleFrame, SpatialIndex, Vec3};

use crate::{FlowError, Result};

/// How scattered flow vectors are interpolated at a query point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplatMode {
    /// Shepard interpolation `sum w_i f_i / sum w_i`, `w_i = 1/(d_i² + eps)`.
    #[default]
    Normalized,
    /// `(1/|N|) sum f_i / (d_i² + eps)`.
    AsWritten,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_conf: f64,
    pub lambda_smooth: f64,
    pub lambda_div: f64,
    pub smooth_k: usize,
    pub div_k: usize,
    pub eps_splat: f64,
    pub grid_g: usize,
    pub splat_mode: SplatMode,
    pub grid_placement: GridPlacement,
    pub grid_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_conf: 0.1,
            lambda_smooth: 10.0,
            lambda_div: 0.1,
            smooth_k: 32,
            div_k: 2,
            eps_splat: 1e-6,
            grid_g: 10,
            splat_mode: SplatMode::Normalized,
            grid_placement: GridPlacement::StencilInset,
            grid_margin: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_conf, self.lambda_smooth, self.lambda_div];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(FlowError::Config(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        if self.smooth_k == 0 || self.div_k == 0 {
            return Err(FlowError::Config("neighbourhood sizes must be >= 1".into()));
        }
        if !(self.eps_splat > 0.0) {
            return Err(FlowError::Config("eps_splat must be > 0".into()));
        }
        if self.grid_g < 2 {
            return Err(FlowError::Config(
                "grid needs at least 2 points per axis".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self, x: &ParticleFrame) -> Result<Grid> {
        Ok(Grid::fit(
            x,
            self.grid_g,
            self.grid_margin,
            self.grid_placement,
        )?)
    }
}

fn frame_tensor(frame: &ParticleFrame) -> Tensor {
    Tensor::new(
        vec![frame.len(), 3],
        frame
            .positions()
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect(),
    )
    .expect("frame shape")
}

/// Nearest-target bookkeeping for the reconstruction term.
#[derive(Debug, Clone)]
pub struct TargetSet {
    pub index: SpatialIndex,
    pub positions: Tensor,
}

impl TargetSet {
    pub fn new(y: &ParticleFrame) -> Self {
        Self {
            index: SpatialIndex::build(y),
            positions: frame_tensor(y),
        }
    }

    /// Nearest target of each row of an `n × 3` value buffer.
    pub fn nearest(&self, points: &[f64]) -> Vec<usize> {
        points
            .chunks_exact(3)
            .map(|p| self.index.nearest([p[0], p[1], p[2]]).index)
            .collect()
    }
}

/// `(1/n) sum p_i min_j |y'_i - y_j|² + lambda_conf (1/n) sum (1 - p_i)`.
/// The nearest-target indices are constants.
pub fn reconstruction_term(
    tape: &mut Tape,
    yprime: Var,
    targets: &TargetSet,
    p: Var,
    lambda_conf: f64,
) -> Result<Var> {
    let n = tape.shape(yprime)[0];
    if n == 0 || tape.value(p).numel() != n {
        return Err(FlowError::Dimension(format!(
            "{n} estimated points with {} confidences",
            tape.value(p).numel()
        )));
    }
    let nn: Arc<[usize]> = targets.nearest(tape.data(yprime)).into();
    let y = tape.constant(targets.positions.clone());
    let matched = tape.gather_rows(y, nn)?;
    let d = tape.sub(yprime, matched)?;
    let sq = tape.square(d);
    let sq = tape.sum_rows(sq);
    let weighted = tape.mul(p, sq)?;
    let fit = tape.mean(weighted);
    let mp = tape.mean(p);
    let miss = tape.neg(mp);
    let miss = tape.add_const(miss, 1.0);
    let miss = tape.scale(miss, lambda_conf);
    Ok(tape.add(fit, miss)?)
}

pub fn reconstruction_loss(
    yprime: &ParticleFrame,
    y: &ParticleFrame,
    p: &[f64],
    lambda_conf: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let yp = tape.constant(frame_tensor(yprime));
    let pv = tape.constant(Tensor::vector(p.to_vec()));
    let out = reconstruction_term(&mut tape, yp, &TargetSet::new(y), pv, lambda_conf)?;
    Ok(tape.item(out))
}

/// Position-space neighbourhoods with the particle itself removed.
#[derive(Debug, Clone)]
pub struct SmoothGraph {
    pub n: usize,
    pub k: usize,
    pub centres: Arc<[usize]>,
    pub neighbours: Arc<[usize]>,
}

impl SmoothGraph {
    pub fn build(x: &ParticleFrame, k: usize) -> Self {
        let n = x.len();
        let k = k.min(n.saturating_sub(1));
        let index = SpatialIndex::build(x);
        let mut neighbours = Vec::with_capacity(n * k);
        for (i, p) in x.positions().iter().enumerate() {
            let mut nb = index.knn_indices(*p, k + 1);
            match nb.iter().position(|&j| j == i) {
                Some(pos) => {
                    nb.remove(pos);
                }
                None => {
                    nb.pop();
                }
            }
            neighbours.extend(nb);
        }
        let centres = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        SmoothGraph {
            n,
            k,
            centres,
            neighbours: neighbours.into(),
        }
    }
}

/// Non-fatal conditions reported alongside a loss value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWarning {
    /// Fewer than two particles: no neighbours, smoothness is defined as 0.
    TooFewParticles,
}

/// `sum_i sum_{k in N(i)} |f_i - f_k|_1 / (n · |N|)`.
pub fn smooth_term(
    tape: &mut Tape,
    flow: Var,
    graph: &SmoothGraph,
) -> Result<(Var, Option<LossWarning>)> {
    if tape.shape(flow) != [graph.n, 3] {
        return Err(FlowError::Dimension(format!(
            "flow {:?} vs {} particles",
            tape.shape(flow),
            graph.n
        )));
    }
    if graph.k == 0 {
        log::warn!("smoothness loss needs at least two particles; returning 0");
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((zero, Some(LossWarning::TooFewParticles)));
    }
    let neg = tape.neg(flow);
    let d = tape.pair_sum(flow, graph.centres.clone(), neg, graph.neighbours.clone())?;
    let a = tape.abs(d);
    let s = tape.sum(a);
    Ok((tape.scale(s, 1.0 / (graph.n * graph.k) as f64), None))
}

pub fn smooth_loss(
    x: &ParticleFrame,
    f: &FlowField,
    smooth_k: usize,
) -> Result<(f64, Option<LossWarning>)> {
    check_rows(x, f)?;
    let mut tape = Tape::new();
    let fv = tape.constant(flow_tensor(f));
    let (v, w) = smooth_term(&mut tape, fv, &SmoothGraph::build(x, smooth_k))?;
    Ok((tape.item(v), w))
}

fn check_rows(x: &ParticleFrame, f: &FlowField) -> Result<()> {
    if x.len() != f.len() {
        return Err(FlowError::Dimension(format!(
            "{} particles but {} flow vectors",
            x.len(),
            f.len()
        )));
    }
    Ok(())
}

fn flow_tensor(f: &FlowField) -> Tensor {
    Tensor::new(vec![f.len(), 3], f.to_flat()).expect("flow shape")
}

/// Interpolation weights of the `div_k` nearest particles at `q`.
pub fn splat_weights(
    index: &SpatialIndex,
    q: Vec3,
    div_k: usize,
    eps: f64,
    mode: SplatMode,
) -> Vec<(usize, f64)> {
    let nb = index.knn_indices(q, div_k);
    let pts = index.points();
    let raw: Vec<(usize, f64)> = nb
        .iter()
        .map(|&i| (i, 1.0 / (dist2(&pts[i], &q) + eps)))
        .collect();
    let norm = match mode {
        SplatMode::Normalized => raw.iter().map(|w| w.1).sum::<f64>(),
        SplatMode::AsWritten => raw.len() as f64,
    };
    raw.into_iter().map(|(i, w)| (i, w / norm)).collect()
}

/// Splat-interpolated flow at arbitrary query points.
pub fn splat(
    x: &ParticleFrame,
    f: &FlowField,
    queries: &[Vec3],
    div_k: usize,
    eps: f64,
    mode: SplatMode,
) -> Result<Vec<Vec3>> {
    check_rows(x, f)?;
    let index = SpatialIndex::build(x);
    let fv = f.vectors();
    Ok(queries
        .iter()
        .map(|q| {
            let mut out = [0.0; 3];
            for (i, w) in splat_weights(&index, *q, div_k, eps, mode) {
                for a in 0..3 {
                    out[a] += w * fv[i][a];
                }
            }
            out
        })
        .collect())
}

/// Flow interpolated at every lattice point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: Grid,
    pub values: Vec<Vec3>,
}

pub fn splat_grid(
    x: &ParticleFrame,
    f: &FlowField,
    grid: &Grid,
    div_k: usize,
    eps: f64,
    mode: SplatMode,
) -> Result<GridField> {
    Ok(GridField {
        grid: *grid,
        values: splat(x, f, &grid.points(), div_k, eps, mode)?,
    })
}

/// Sparse linear map from a flattened `n × 3` flow to the central-difference
/// divergence at every lattice point.
#[derive(Debug, Clone)]
pub struct DivergenceOperator {
    pub grid: Grid,
    pub n: usize,
    map: Arc<SparseRows>,
}

impl DivergenceOperator {
    pub fn new(x: &ParticleFrame, weights: &LossWeights) -> Result<Self> {
        weights.validate()?;
        let grid = weights.grid(x)?;
        let index = SpatialIndex::build(x);
        let s = grid.spacing;
        let mut rows = Vec::with_capacity(grid.len());
        for g in grid.points() {
            let mut row = Vec::with_capacity(6 * weights.div_k);
            for a in 0..3 {
                for (sign, off) in [(1.0, s), (-1.0, -s)] {
                    let mut q = g;
                    q[a] += off;
                    for (i, w) in splat_weights(
                        &index,
                        q,
                        weights.div_k,
                        weights.eps_splat,
                        weights.splat_mode,
                    ) {
                        row.push((3 * i + a, sign * w / (2.0 * s)));
                    }
                }
            }
            rows.push(row);
        }
        Ok(Self {
            grid,
            n: x.len(),
            map: Arc::new(SparseRows { rows }),
        })
    }

    /// Divergence at each lattice point, `l` fastest.
    pub fn divergence(&self, f: &FlowField) -> Result<Vec<f64>> {
        if f.len() != self.n {
            return Err(FlowError::Dimension(format!(
                "operator built for {} particles, flow has {}",
                self.n,
                f.len()
            )));
        }
        Ok(self.map.apply(&f.to_flat()))
    }

    /// Mean absolute divergence over the lattice.
    pub fn loss(&self, f: &FlowField) -> Result<f64> {
        let d = self.divergence(f)?;
        Ok(d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64)
    }

    pub fn term(&self, tape: &mut Tape, flow: Var) -> Result<Var> {
        if tape.shape(flow) != [self.n, 3] {
            return Err(FlowError::Dimension(format!(
                "flow {:?} vs {} particles",
                tape.shape(flow),
                self.n
            )));
        }
        let d = tape.sparse(flow, self.map.clone())?;
        let a = tape.abs(d);
        Ok(tape.mean(a))
    }
}

pub fn divergence_loss(x: &ParticleFrame, f: &FlowField, weights: &LossWeights) -> Result<f64> {
    check_rows(x, f)?;
    DivergenceOperator::new(x, weights)?.loss(f)
}

/// Everything about one frame pair that the losses reuse across epochs.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub source: Tensor,
    pub targets: TargetSet,
    pub smooth: SmoothGraph,
    pub divergence: DivergenceOperator,
}

impl LossContext {
    pub fn new(x: &ParticleFrame, y: &ParticleFrame, weights: &LossWeights) -> Result<Self> {
        weights.validate()?;
        Ok(Self {
            source: frame_tensor(x),
            targets: TargetSet::new(y),
            smooth: SmoothGraph::build(x, weights.smooth_k),
            divergence: DivergenceOperator::new(x, weights)?,
        })
    }
}

/// Component nodes of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub smooth: Var,
    pub div: Var,
}

/// `L_recon + lambda_smooth L_smooth + lambda_div L_div` with `y' = x + F`.
pub fn train_objective(
    tape: &mut Tape,
    ctx: &LossContext,
    flow: Var,
    p: Var,
    weights: &LossWeights,
) -> Result<LossVars> {
    let x = tape.constant(ctx.source.clone());
    let yprime = tape.add(x, flow)?;
    let recon = reconstruction_term(tape, yprime, &ctx.targets, p, weights.lambda_conf)?;
    let (smooth, _) = smooth_term(tape, flow, &ctx.smooth)?;
    let div = ctx.divergence.term(tape, flow)?;
    let s = tape.scale(smooth, weights.lambda_smooth);
    let d = tape.scale(div, weights.lambda_div);
    let total = tape.add(recon, s)?;
    let total = tape.add(total, d)?;
    Ok(LossVars {
        total,
        recon,
        smooth,
        div,
    })
}

/// Scalar values of the training objective and its parts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub smooth: f64,
    pub div: f64,
}

pub fn train_loss(
    x: &ParticleFrame,
    y: &ParticleFrame,
    f: &FlowField,
    p: &[f64],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_rows(x, f)?;
    let ctx = LossContext::new(x, y, weights)?;
    let mut tape = Tape::new();
    let fv = tape.constant(flow_tensor(f));
    let pv = tape.constant(Tensor::vector(p.to_vec()));
    let l = train_objective(&mut tape, &ctx, fv, pv, weights)?;
    Ok(LossBreakdown {
        total: tape.item(l.total),
        recon: tape.item(l.recon),
        smooth: tape.item(l.smooth),
        div: tape.item(l.div),
    })
}
