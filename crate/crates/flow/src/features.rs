//! Per-particle feature extraction.
//!
//! The graph backbone stacks static-graph set convolutions over the
//! position-space k-NN graph, one dynamic edge convolution whose neighbours
//! are recomputed in feature space on every forward pass, and a closing linear
//! layer over the concatenation of all stage outputs.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use ffe_autodiff::{Tape, Tensor, Var};
use ffe_core::{ParticleFrame, SpatialIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{FlowError, Result};

pub const DESCRIPTOR_DIM: usize = 6;
const MAGIC: &[u8; 4] = b"FFE1";
const FORMAT_VERSION: u32 = 1;

/// Which network turns a frame into per-particle features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backbone {
    /// Static-graph convolutions, one dynamic-graph convolution, closing layer.
    #[default]
    Graph,
    /// The same perceptrons applied to each particle alone (no neighbourhoods).
    Pointwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub backbone: Backbone,
    pub static_widths: Vec<usize>,
    pub dynamic_width: usize,
    pub embed_dim: usize,
    /// Neighbourhood size of both the static and the dynamic graph.
    pub k: usize,
    pub leaky_slope: f64,
    /// When false the geometric descriptor is replaced by zeros, which makes
    /// the graph backbone translation invariant.
    pub use_descriptor: bool,
    /// Dropout rate on the concatenated features during training; 0 disables.
    pub dropout: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Graph,
            static_widths: vec![32, 64, 64],
            dynamic_width: 64,
            embed_dim: 128,
            k: 32,
            leaky_slope: 0.1,
            use_descriptor: true,
            dropout: 0.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowError::Config(m.to_string()));
        if self.static_widths.is_empty() || self.static_widths.contains(&0) {
            return bad("static widths must be non-empty and positive");
        }
        if self.backbone == Backbone::Graph && self.dynamic_width == 0 {
            return bad("dynamic width must be positive");
        }
        if self.embed_dim == 0 || self.k == 0 {
            return bad("embedding dimension and k must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky slope must be finite");
        }
        Ok(())
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut prev = 3;
        let mut perceptron = |name: &str, da: usize, db: usize, h: usize| {
            out.push((format!("{name}.wa"), vec![da, h]));
            out.push((format!("{name}.wb"), vec![db, h]));
            out.push((format!("{name}.b1"), vec![h]));
            out.push((format!("{name}.w2"), vec![h, h]));
            out.push((format!("{name}.b2"), vec![h]));
        };
        for (l, &w) in self.static_widths.iter().enumerate() {
            perceptron(&format!("static{l}"), DESCRIPTOR_DIM, prev, w);
            prev = w;
        }
        let mut total: usize = self.static_widths.iter().sum();
        if self.backbone == Backbone::Graph {
            perceptron("dynamic", prev, prev, self.dynamic_width);
            total += self.dynamic_width;
        }
        out.push(("closing.w".into(), vec![total, self.embed_dim]));
        out.push(("closing.b".into(), vec![self.embed_dim]));
        out
    }
}

/// `(x, y, z, r, azimuth, polar)` per particle; both angles are 0 at `r = 0`.
pub fn geometric_descriptor(frame: &ParticleFrame) -> Tensor {
    let mut data = Vec::with_capacity(frame.len() * DESCRIPTOR_DIM);
    for p in frame.positions() {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let (az, pol) = if r == 0.0 {
            (0.0, 0.0)
        } else {
            let mut az = p[1].atan2(p[0]);
            if az <= -PI {
                az = PI;
            }
            (az, (p[2] / r).clamp(-1.0, 1.0).acos())
        };
        data.extend_from_slice(&[p[0], p[1], p[2], r, az, pol]);
    }
    Tensor::new(vec![frame.len(), DESCRIPTOR_DIM], data).expect("descriptor shape")
}

/// Exact k-NN among the rows of an `n × d` matrix, self included, ties to the
/// lower index. Returns `n * min(k, n)` indices, row-major.
pub fn feature_knn(values: &[f64], n: usize, d: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let a = &values[i * d..(i + 1) * d];
        cand.clear();
        for j in 0..n {
            let b = &values[j * d..(j + 1) * d];
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            cand.push((d2, j));
        }
        let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if k < n {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        cand[..k].sort_unstable_by(cmp);
        out.extend(cand[..k].iter().map(|c| c.1));
    }
    out
}

/// Per-frame constants reused across epochs: positions, descriptor and the
/// static position-space neighbour graph.
#[derive(Debug, Clone)]
pub struct FrameGraph {
    pub n: usize,
    pub k: usize,
    pub positions: Tensor,
    pub descriptor: Tensor,
    /// Edge sources `i`, each repeated `k` times.
    pub centres: Arc<[usize]>,
    /// Edge targets: the `k` nearest particles of each `i`, self first.
    pub neighbours: Arc<[usize]>,
}

impl FrameGraph {
    pub fn build(frame: &ParticleFrame, k: usize) -> Self {
        let n = frame.len();
        let k = k.min(n).max(1);
        let index = SpatialIndex::build(frame);
        let mut neighbours = Vec::with_capacity(n * k);
        for p in frame.positions() {
            neighbours.extend(index.knn_indices(*p, k));
        }
        let positions = Tensor::new(
            vec![n, 3],
            frame
                .positions()
                .iter()
                .flat_map(|p| p.iter().copied())
                .collect(),
        )
        .expect("positions shape");
        FrameGraph {
            n,
            k,
            positions,
            descriptor: geometric_descriptor(frame),
            centres: centres(n, k),
            neighbours: neighbours.into(),
        }
    }
}

fn centres(n: usize, k: usize) -> Arc<[usize]> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

/// Trainable weights plus the configuration that fixes their shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: FeatureConfig,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn init(config: FeatureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout();
        let mut tensors = Vec::with_capacity(layout.len());
        // fan-in of the perceptron a tensor belongs to
        let mut fan_in = 1usize;
        for (name, shape) in &layout {
            if name.ends_with(".wa") {
                let next_rows = layout
                    .iter()
                    .find(|(n2, _)| *n2 == name.replace(".wa", ".wb"))
                    .map(|(_, s)| s[0])
                    .unwrap_or(0);
                fan_in = shape[0] + next_rows;
            } else if name.ends_with(".w2") || name == "closing.w" {
                fan_in = shape[0];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let numel = shape.iter().product();
            let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(FlowError::Dimension(format!(
                "flat parameter vector has {} entries, model needs {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant.
    pub fn register_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Slices one flat parameter node into per-tensor nodes.
    pub fn vars_from_flat(&self, tape: &mut Tape, flat: Var) -> Result<Vec<Var>> {
        if tape.value(flat).numel() != self.num_scalars() {
            return Err(FlowError::Dimension("flat parameter length".into()));
        }
        let mut out = Vec::with_capacity(self.tensors.len());
        let mut off = 0;
        for t in &self.tensors {
            let n = t.numel();
            let idx: Arc<[usize]> = (off..off + n).collect();
            let g = tape.gather_rows(flat, idx)?;
            out.push(tape.reshape(g, t.shape().to_vec())?);
            off += n;
        }
        Ok(out)
    }

    /// Collects the gradients of tensors registered with [`ModelParams::register`].
    pub fn flat_grad(tape: &Tape, vars: &[Var]) -> Vec<f64> {
        vars.iter().flat_map(|&v| tape.grad(v)).collect()
    }

    /// Inference-only forward pass on a private tape.
    pub fn features(&self, frame: &ParticleFrame) -> Result<Tensor> {
        let graph = FrameGraph::build(frame, self.config.k);
        let mut tape = Tape::new();
        let vars = self.register_constant(&mut tape);
        let out = extract_features(&mut tape, &graph, &vars, &self.config, None)?;
        Ok(tape.value(out).clone())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let backbone = match c.backbone {
            Backbone::Graph => 0u8,
            Backbone::Pointwise => 1u8,
        };
        w.write_all(&[backbone, c.use_descriptor as u8])?;
        for v in [c.k, c.dynamic_width, c.embed_dim, c.static_widths.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &v in &c.static_widths {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&c.leaky_slope.to_le_bytes())?;
        w.write_all(&c.dropout.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(FlowError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r, "version")?;
        if version != FORMAT_VERSION {
            return Err(FlowError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut flags = [0u8; 2];
        read_exact(r, &mut flags, "flags")?;
        let backbone = match flags[0] {
            0 => Backbone::Graph,
            1 => Backbone::Pointwise,
            b => return Err(FlowError::Checkpoint(format!("unknown backbone {b}"))),
        };
        let k = read_u32(r, "k")? as usize;
        let dynamic_width = read_u32(r, "dynamic width")? as usize;
        let embed_dim = read_u32(r, "embedding dimension")? as usize;
        let n_static = read_u32(r, "static layer count")? as usize;
        if n_static > 1024 {
            return Err(FlowError::Checkpoint(format!(
                "implausible layer count {n_static}"
            )));
        }
        let static_widths = (0..n_static)
            .map(|_| read_u32(r, "static width").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let leaky_slope = read_f64(r, "leaky slope")?;
        let dropout = read_f64(r, "dropout")?;
        let config = FeatureConfig {
            backbone,
            static_widths,
            dynamic_width,
            embed_dim,
            k,
            leaky_slope,
            use_descriptor: flags[1] != 0,
            dropout,
        };
        config
            .validate()
            .map_err(|e| FlowError::Checkpoint(e.to_string()))?;
        let layout = config.layout();
        let count = read_u32(r, "tensor count")? as usize;
        if count != layout.len() {
            return Err(FlowError::Checkpoint(format!(
                "layer table has {count} tensors, configuration implies {}",
                layout.len()
            )));
        }
        for (name, shape) in &layout {
            let ndim = read_u32(r, "tensor rank")? as usize;
            let dims = (0..ndim.min(8))
                .map(|_| read_u64(r, "tensor dimension").map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(FlowError::Checkpoint(format!(
                    "tensor {name}: table says {dims:?}, expected {shape:?}"
                )));
            }
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let v = read_f64(r, &name)?;
                if !v.is_finite() {
                    return Err(FlowError::Checkpoint(format!(
                        "non-finite weight in {name}"
                    )));
                }
                data.push(v);
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| FlowError::Checkpoint(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

/// One perceptron's parameter nodes.
#[derive(Debug, Clone, Copy)]
struct Layer {
    wa: Var,
    wb: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Layer {
    fn at(vars: &[Var], i: usize) -> Layer {
        Layer {
            wa: vars[i],
            wb: vars[i + 1],
            b1: vars[i + 2],
            w2: vars[i + 3],
            b2: vars[i + 4],
        }
    }
}

/// Two-layer perceptron on `(a_i, F_j - F_i)` for every edge `(i, j)`,
/// max-pooled over each node's `k` edges. The first layer is evaluated per
/// node and combined per edge: `a_i·Wa - F_i·Wb + b1 + F_j·Wb`.
#[allow(clippy::too_many_arguments)]
fn edge_conv(
    tape: &mut Tape,
    a: Option<Var>,
    f: Var,
    centres: Arc<[usize]>,
    neighbours: Arc<[usize]>,
    k: usize,
    layer: Layer,
    slope: f64,
) -> Result<Var> {
    let fb = tape.matmul(f, layer.wb)?;
    let neg = tape.neg(fb);
    let mut base = tape.add_row(neg, layer.b1)?;
    if let Some(a) = a {
        let aw = tape.matmul(a, layer.wa)?;
        base = tape.add(base, aw)?;
    }
    let pre = tape.pair_sum(base, centres, fb, neighbours)?;
    let h1 = tape.leaky_relu(pre, slope);
    let h2 = tape.matmul(h1, layer.w2)?;
    let h2 = tape.add_row(h2, layer.b2)?;
    let h2 = tape.leaky_relu(h2, slope);
    Ok(tape.segment_max(h2, k)?)
}

/// The same perceptron on `(a_i, F_i)` with no neighbourhood.
fn point_perceptron(
    tape: &mut Tape,
    a: Option<Var>,
    f: Var,
    layer: Layer,
    slope: f64,
) -> Result<Var> {
    let fb = tape.matmul(f, layer.wb)?;
    let mut pre = tape.add_row(fb, layer.b1)?;
    if let Some(a) = a {
        let aw = tape.matmul(a, layer.wa)?;
        pre = tape.add(pre, aw)?;
    }
    let h1 = tape.leaky_relu(pre, slope);
    let h2 = tape.matmul(h1, layer.w2)?;
    let h2 = tape.add_row(h2, layer.b2)?;
    Ok(tape.leaky_relu(h2, slope))
}

/// Forward pass producing an `n × embed_dim` feature node.
///
/// `vars` must follow [`FeatureConfig::layout`]. Dropout is applied only when
/// `training_rng` is given and the configured rate is positive.
pub fn extract_features(
    tape: &mut Tape,
    graph: &FrameGraph,
    vars: &[Var],
    cfg: &FeatureConfig,
    training_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let layout = cfg.layout();
    if vars.len() != layout.len() {
        return Err(FlowError::Dimension(format!(
            "{} parameter tensors given, layout needs {}",
            vars.len(),
            layout.len()
        )));
    }
    for (v, (name, shape)) in vars.iter().zip(&layout) {
        if tape.shape(*v) != shape.as_slice() {
            return Err(FlowError::Dimension(format!(
                "{name}: expected {shape:?}, got {:?}",
                tape.shape(*v)
            )));
        }
    }
    let slope = cfg.leaky_slope;
    let desc = if cfg.use_descriptor {
        Some(tape.constant(graph.descriptor.clone()))
    } else {
        None
    };
    let mut f = tape.constant(graph.positions.clone());
    let mut stages = Vec::with_capacity(cfg.static_widths.len() + 1);
    for l in 0..cfg.static_widths.len() {
        let layer = Layer::at(vars, 5 * l);
        f = match cfg.backbone {
            Backbone::Graph => edge_conv(
                tape,
                desc,
                f,
                graph.centres.clone(),
                graph.neighbours.clone(),
                graph.k,
                layer,
                slope,
            )?,
            Backbone::Pointwise => point_perceptron(tape, desc, f, layer, slope)?,
        };
        stages.push(f);
    }
    if cfg.backbone == Backbone::Graph {
        let (n, d) = (graph.n, *tape.shape(f).last().unwrap_or(&0));
        let k = cfg.k.min(n).max(1);
        let nb = feature_knn(tape.data(f), n, d, k);
        let layer = Layer::at(vars, 5 * cfg.static_widths.len());
        let dynamic = edge_conv(tape, Some(f), f, centres(n, k), nb.into(), k, layer, slope)?;
        stages.push(dynamic);
    }
    let mut cat = tape.concat_cols(&stages)?;
    if let Some(rng) = training_rng {
        if cfg.dropout > 0.0 {
            let keep = 1.0 - cfg.dropout;
            let n = tape.value(cat).numel();
            let mask: Arc<[f64]> = (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            cat = tape.mul_const(cat, mask)?;
        }
    }
    let nv = vars.len();
    let out = tape.matmul(cat, vars[nv - 2])?;
    Ok(tape.add_row(out, vars[nv - 1])?)
}
