//! The full-duplex GNN power allocator.
//!
//! Every vertex carries the embedding `m_v = (V_v, p_v)`. One layer computes
//!
//! ```text
//! α_v = Σ_{u ∈ N(v)} f_A(m_u, E_vu)
//! p_v = P_max · logistic(f_C(α_v, m_v))
//! ```
//!
//! starting from `p_v = P_max`. `f_A` is `8 → 16 → 32` with a rectifier
//! hidden layer and affine output, so its last affine map commutes with the
//! neighbor sum: the implementation sums the 16-wide hidden activations per
//! vertex and applies the output layer once per vertex (adding `deg_v · b`).
//! The first layer is split the same way into a per-vertex part (`m_u`) and
//! a per-edge part (`E_vu`). Neighbor sums run in the canonical order of
//! [`PairGraph::adjacency`], which makes the output equivariant to vertex
//! relabelling bit for bit.
//!
//! Training minimizes the batch mean of the negative weighted sum rate.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    adam_step, logistic, mlp_apply, Activation, AdamConfig, AutodiffError, Matrix, MlpSpec,
    ParamStore, Tape, Var,
};
use crate::graphrep::{build_pair_graph, PairGraph, EDGE_FEATURES, VERTEX_FEATURES};
use crate::netgen::NetworkInstance;
use crate::phy::{weighted_sum_rate_raw, PowerAllocation};
use crate::rng::{child_seed, rng_from_seed};

/// Width of the vertex embedding `(V_v, p_v)`.
pub const EMBED_DIM: usize = VERTEX_FEATURES + 1;

/// About one over the neighbor count at `K = 50`.
pub const DEFAULT_MESSAGE_SCALE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum FgnnError {
    #[error("config: {0}")]
    Config(String),
    #[error("graph has {graph} vertices but instance has {instance} links")]
    DimensionMismatch { graph: usize, instance: usize },
    #[error("parameter store does not match the model: {0}")]
    Params(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgnnConfig {
    pub num_mp_layers: usize,
    pub f_a_widths: Vec<usize>,
    pub f_c_widths: Vec<usize>,
    pub share_weights_across_layers: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Constant factor on the neighbor sum. Sum aggregation over tens of
    /// neighbors otherwise saturates `f_C`'s logistic at initialization.
    pub message_scale: f64,
    /// Rescale vertex and edge features by their root-mean-square over
    /// the training set.
    pub normalize_features: bool,
}

impl Default for FgnnConfig {
    fn default() -> Self {
        Self {
            num_mp_layers: 3,
            f_a_widths: vec![8, 16, 32],
            f_c_widths: vec![36, 16, 1],
            share_weights_across_layers: true,
            batch_size: 64,
            epochs: 20,
            lr: 0.005,
            patience: 3,
            message_scale: DEFAULT_MESSAGE_SCALE,
            normalize_features: true,
        }
    }
}

impl FgnnConfig {
    pub fn validate(&self) -> Result<(), FgnnError> {
        let bad = |m: String| Err(FgnnError::Config(m));
        if self.num_mp_layers == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("num_mp_layers, batch_size and epochs must be positive".into());
        }
        if self.f_a_widths.len() != 3 || self.f_c_widths.len() < 2 {
            return bad("f_A needs exactly one hidden layer; f_C at least an output layer".into());
        }
        if self
            .f_a_widths
            .iter()
            .chain(&self.f_c_widths)
            .any(|&w| w == 0)
        {
            return bad("layer widths must be positive".into());
        }
        if self.f_a_widths[0] != EMBED_DIM + EDGE_FEATURES {
            return bad(format!(
                "f_A input must be {} (embedding {EMBED_DIM} + edge features {EDGE_FEATURES})",
                EMBED_DIM + EDGE_FEATURES
            ));
        }
        if self.f_c_widths[0] != self.f_a_widths[2] + EMBED_DIM {
            return bad(format!(
                "f_C input must be {} (aggregate {} + embedding {EMBED_DIM})",
                self.f_a_widths[2] + EMBED_DIM,
                self.f_a_widths[2]
            ));
        }
        if *self.f_c_widths.last().unwrap() != 1 {
            return bad("f_C must output a single power".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive".into());
        }
        if !(self.message_scale > 0.0 && self.message_scale.is_finite()) {
            return bad("message_scale must be positive and finite".into());
        }
        Ok(())
    }

    pub fn f_a_spec(&self) -> MlpSpec {
        MlpSpec::new(self.f_a_widths.clone(), Activation::Identity)
    }

    pub fn f_c_spec(&self) -> MlpSpec {
        MlpSpec::new(self.f_c_widths.clone(), Activation::Logistic)
    }

    fn num_blocks(&self) -> usize {
        if self.share_weights_across_layers {
            1
        } else {
            self.num_mp_layers
        }
    }

    fn slots_per_block(&self) -> usize {
        4 + 2 * (self.f_c_widths.len() - 1)
    }

    fn block_of_layer(&self, layer: usize) -> usize {
        if self.share_weights_across_layers {
            0
        } else {
            layer
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Fresh parameters: per block, `f_A` then `f_C`, Glorot-uniform weights.
/// Two feature-normalization buffers follow (rows: mean, scale); they start
/// as the identity and are never differentiated.
pub fn init_params(cfg: &FgnnConfig, seed: u64) -> Result<ParamStore, FgnnError> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new();
    for b in 0..cfg.num_blocks() {
        store.push_mlp(&format!("layer{b}.f_a"), &cfg.f_a_spec(), &mut rng);
        store.push_mlp(&format!("layer{b}.f_c"), &cfg.f_c_spec(), &mut rng);
    }
    store.push("input_norm.vertex", identity_norm(VERTEX_FEATURES));
    store.push("input_norm.edge", identity_norm(EDGE_FEATURES));
    Ok(store)
}

fn identity_norm(width: usize) -> Matrix {
    let mut m = Matrix::zeros(2, width);
    m.row_mut(1).fill(1.0);
    m
}

fn norm_slots(cfg: &FgnnConfig) -> (usize, usize) {
    let base = cfg.num_blocks() * cfg.slots_per_block();
    (base, base + 1)
}

/// Root-mean-square per column as the scale, zero offset.
fn column_rms(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Matrix {
    let (mut n, mut sq) = (0.0, vec![0.0; width]);
    for r in rows {
        n += 1.0;
        for c in 0..width {
            sq[c] += r[c] * r[c];
        }
    }
    let mut m = identity_norm(width);
    for c in 0..width {
        let rms = (sq[c] / n).sqrt();
        if rms > 0.0 && rms.is_finite() {
            m.set(1, c, rms);
        }
    }
    m
}

/// Sets the normalization buffers from `samples`: every feature is divided
/// by its root-mean-square over vertices (resp. directed edges). There is
/// no centering, so a negligible interference gain stays near zero.
pub fn fit_feature_norm(params: &mut ParamStore, cfg: &FgnnConfig, samples: &[Sample]) {
    let (sv, se) = norm_slots(cfg);
    let vertex = samples
        .iter()
        .flat_map(|s| (0..s.tensors.num_vertices()).map(|r| s.tensors.vertex_feat.row(r).to_vec()));
    params.tensors[sv] = column_rms(vertex, VERTEX_FEATURES);
    let edge = samples.iter().flat_map(|s| {
        (0..s.tensors.num_directed_edges()).map(|r| s.tensors.edge_feat.row(r).to_vec())
    });
    params.tensors[se] = column_rms(edge, EDGE_FEATURES);
}

/// Per-column `(mean, 1/scale)`.
fn norm_coefficients(norm: &Matrix) -> Vec<(f64, f64)> {
    (0..norm.cols)
        .map(|c| (norm.get(0, c), 1.0 / norm.get(1, c)))
        .collect()
}

#[inline]
fn normalize_row(x: &[f64], coef: &[(f64, f64)], out: &mut [f64]) {
    for ((o, &v), &(mean, inv)) in out.iter_mut().zip(x).zip(coef) {
        *o = (v - mean) * inv;
    }
}

fn normalize(x: &Matrix, norm: &Matrix) -> Matrix {
    let coef = norm_coefficients(norm);
    let mut out = x.clone();
    for r in 0..out.rows {
        normalize_row(x.row(r), &coef, out.row_mut(r));
    }
    out
}

fn check_params(cfg: &FgnnConfig, params: &ParamStore) -> Result<(), FgnnError> {
    cfg.validate()?;
    let expected = init_params(cfg, 0)?;
    if params.len() != expected.len()
        || params
            .tensors
            .iter()
            .zip(&expected.tensors)
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(FgnnError::Params(format!(
            "expected {} tensors shaped for this config, got {}",
            expected.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Message-passing layout of a pair graph: directed edges grouped by target
/// vertex in canonical neighbor order.
#[derive(Debug, Clone)]
pub struct GraphTensors {
    pub vertex_feat: Matrix,
    pub edge_feat: Matrix,
    pub source: Arc<[usize]>,
    pub offsets: Arc<[usize]>,
    pub degree: Matrix,
}

impl GraphTensors {
    pub fn new(g: &PairGraph) -> Self {
        let k = g.num_vertices();
        let vertex_feat = Matrix::from_vec(
            k,
            VERTEX_FEATURES,
            g.vertex_feat.iter().flatten().copied().collect(),
        );
        let mut source = Vec::new();
        let mut edge = Vec::new();
        let mut offsets = vec![0];
        let mut degree = Vec::with_capacity(k);
        for v in 0..k {
            for n in &g.adjacency[v] {
                source.push(n.vertex);
                edge.extend_from_slice(&g.edges[n.edge].oriented(v));
            }
            offsets.push(source.len());
            degree.push(g.adjacency[v].len() as f64);
        }
        Self {
            vertex_feat,
            edge_feat: Matrix::from_vec(source.len(), EDGE_FEATURES, edge),
            source: source.into(),
            offsets: offsets.into(),
            degree: Matrix::column(degree),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_feat.rows
    }

    pub fn num_directed_edges(&self) -> usize {
        self.source.len()
    }
}

/// An instance with its (possibly truncated) graph, prepared for the model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub instance: NetworkInstance,
    pub graph: PairGraph,
    pub tensors: GraphTensors,
}

impl Sample {
    pub fn new(instance: NetworkInstance, graph: PairGraph) -> Result<Self, FgnnError> {
        if graph.num_vertices() != instance.num_links() {
            return Err(FgnnError::DimensionMismatch {
                graph: graph.num_vertices(),
                instance: instance.num_links(),
            });
        }
        let tensors = GraphTensors::new(&graph);
        Ok(Self {
            instance,
            graph,
            tensors,
        })
    }

    /// Full (untruncated) pair graph of `instance`.
    pub fn from_instance(instance: NetworkInstance) -> Self {
        let graph = build_pair_graph(&instance);
        Self::new(instance, graph).expect("graph built from the instance")
    }

    pub fn truncated(&self, t: f64) -> Self {
        let graph = crate::graphrep::truncate_edges(&self.graph, t);
        Self::new(self.instance.clone(), graph).expect("same vertex set")
    }
}

// ---------------------------------------------------------------------------
// Forward pass without a trace.

struct BlockView<'a> {
    fa_w0: &'a Matrix,
    fa_b0: &'a Matrix,
    fa_w1: &'a Matrix,
    fa_b1: &'a Matrix,
    fc: Vec<&'a Matrix>,
}

fn block<'a>(cfg: &FgnnConfig, params: &'a ParamStore, b: usize) -> BlockView<'a> {
    let base = b * cfg.slots_per_block();
    let t = &params.tensors;
    BlockView {
        fa_w0: &t[base],
        fa_b0: &t[base + 1],
        fa_w1: &t[base + 2],
        fa_b1: &t[base + 3],
        fc: t[base + 4..base + cfg.slots_per_block()].iter().collect(),
    }
}

fn add_row_in_place(m: &mut Matrix, bias: &Matrix) {
    for r in 0..m.rows {
        for (x, b) in m.row_mut(r).iter_mut().zip(&bias.data) {
            *x += b;
        }
    }
}

fn concat_cols(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(a.rows * (a.cols + b.cols));
    for r in 0..a.rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Matrix::from_vec(a.rows, a.cols + b.cols, data)
}

fn embedding(vertex_feat: &Matrix, p: &[f64]) -> Matrix {
    concat_cols(vertex_feat, &Matrix::column(p.to_vec()))
}

const FAST_HIDDEN: usize = 16;

/// `s_v = Σ_r relu(node_pre[src_r] + (x_r·W_e + b))` over the incoming
/// edges `r` of each vertex, with `x_r` the normalized edge features.
/// Edge pre-activations are recomputed per layer from the 4 raw features
/// rather than stored: at K = 500 the stored form is 32 MB and reading it
/// costs more than the arithmetic.
fn aggregate(
    t: &GraphTensors,
    coef: &[(f64, f64)],
    w_e: &Matrix,
    b: &Matrix,
    node_pre: &Matrix,
    s: &mut Matrix,
) {
    let mut x = [0.0; EDGE_FEATURES];
    let mut e = vec![0.0; w_e.cols];
    for v in 0..t.num_vertices() {
        let acc = s.row_mut(v);
        for r in t.offsets[v]..t.offsets[v + 1] {
            normalize_row(t.edge_feat.row(r), coef, &mut x);
            e.fill(0.0);
            for (c, &xc) in x.iter().enumerate() {
                for (ej, wj) in e.iter_mut().zip(w_e.row(c)) {
                    *ej += xc * wj;
                }
            }
            let src = node_pre.row(t.source[r]);
            for (((a, x), ej), bj) in acc.iter_mut().zip(src).zip(&e).zip(&b.data) {
                *a += (x + (ej + bj)).max(0.0);
            }
        }
    }
}

/// [`aggregate`] with the width known at compile time; same arithmetic.
fn aggregate_fixed<const H: usize>(
    t: &GraphTensors,
    coef: &[(f64, f64)],
    w_e: &Matrix,
    b: &Matrix,
    node_pre: &Matrix,
    s: &mut Matrix,
) {
    let rows: [[f64; H]; EDGE_FEATURES] =
        std::array::from_fn(|c| w_e.row(c).try_into().expect("width H"));
    let bias: [f64; H] = b.data[..].try_into().expect("width H");
    let coef: [(f64, f64); EDGE_FEATURES] = coef.try_into().expect("edge width");
    for v in 0..t.num_vertices() {
        let mut acc = [0.0; H];
        for r in t.offsets[v]..t.offsets[v + 1] {
            let raw = t.edge_feat.row(r);
            let mut e = [0.0; H];
            for c in 0..EDGE_FEATURES {
                let xc = (raw[c] - coef[c].0) * coef[c].1;
                for j in 0..H {
                    e[j] += xc * rows[c][j];
                }
            }
            let src: &[f64; H] = node_pre.row(t.source[r]).try_into().expect("width H");
            for j in 0..H {
                acc[j] += (src[j] + (e[j] + bias[j])).max(0.0);
            }
        }
        s.row_mut(v).copy_from_slice(&acc);
    }
}

/// Powers after every layer, computed with the same floating-point
/// operation order as the traced forward pass.
fn infer_tensors(t: &GraphTensors, params: &ParamStore, cfg: &FgnnConfig, p_max: f64) -> Vec<f64> {
    let k = t.num_vertices();
    let hidden = cfg.f_a_widths[1];
    let fc_spec = cfg.f_c_spec();
    let (sv, se) = norm_slots(cfg);
    let vertex_feat = normalize(&t.vertex_feat, &params.tensors[sv]);
    let edge_coef = norm_coefficients(&params.tensors[se]);
    let mut p = vec![p_max; k];
    let degree = t.degree.map(|d| cfg.message_scale * d);

    for layer in 0..cfg.num_mp_layers {
        let w = block(cfg, params, cfg.block_of_layer(layer));
        let w_e = w.fa_w0.row_slice(EMBED_DIM, EMBED_DIM + EDGE_FEATURES);
        let m = embedding(&vertex_feat, &p);
        let node_pre = m.matmul(&w.fa_w0.row_slice(0, EMBED_DIM));

        let mut s = Matrix::zeros(k, hidden);
        if hidden == FAST_HIDDEN {
            aggregate_fixed::<FAST_HIDDEN>(t, &edge_coef, &w_e, w.fa_b0, &node_pre, &mut s);
        } else {
            aggregate(t, &edge_coef, &w_e, w.fa_b0, &node_pre, &mut s);
        }
        if cfg.message_scale != 1.0 {
            s.data.iter_mut().for_each(|x| *x *= cfg.message_scale);
        }
        let mut alpha = s.matmul(w.fa_w1);
        alpha.add_assign(&degree.matmul(w.fa_b1));

        let mut x = concat_cols(&alpha, &m);
        for l in 0..fc_spec.num_layers() {
            x = x.matmul(w.fc[2 * l]);
            add_row_in_place(&mut x, w.fc[2 * l + 1]);
            let act = if l + 1 == fc_spec.num_layers() {
                fc_spec.output
            } else {
                fc_spec.hidden
            };
            x = x.map(|z| act.eval(z));
        }
        p = x.data.iter().map(|&s| p_max * s).collect();
    }
    p
}

/// Power allocation for the graph of `inst` under `params`.
pub fn forward(
    g: &PairGraph,
    inst: &NetworkInstance,
    params: &ParamStore,
    cfg: &FgnnConfig,
) -> Result<PowerAllocation, FgnnError> {
    if g.num_vertices() != inst.num_links() {
        return Err(FgnnError::DimensionMismatch {
            graph: g.num_vertices(),
            instance: inst.num_links(),
        });
    }
    check_params(cfg, params)?;
    let p = infer_tensors(&GraphTensors::new(g), params, cfg, inst.config.p_max_w);
    Ok(clip(p, inst.config.p_max_w))
}

/// Forward on a prepared sample (parameters assumed checked).
pub fn forward_sample(sample: &Sample, params: &ParamStore, cfg: &FgnnConfig) -> PowerAllocation {
    let p_max = sample.instance.config.p_max_w;
    clip(infer_tensors(&sample.tensors, params, cfg, p_max), p_max)
}

fn clip(p: Vec<f64>, p_max: f64) -> PowerAllocation {
    // logistic(z)·P_max can round to exactly P_max but never above it.
    PowerAllocation::new(p.into_iter().map(|x| x.clamp(0.0, p_max)).collect(), p_max)
        .expect("clamped into the box")
}

// ---------------------------------------------------------------------------
// Traced forward pass and loss.

/// Records the forward pass of `sample` on `tape`; returns the `K × 1`
/// power node of the last layer.
pub fn forward_traced(
    tape: &mut Tape,
    sample: &Sample,
    param_vars: &[Var],
    cfg: &FgnnConfig,
) -> Result<Var, FgnnError> {
    let t = &sample.tensors;
    let k = t.num_vertices();
    let p_max = sample.instance.config.p_max_w;
    let fc_spec = cfg.f_c_spec();
    let per_block = cfg.slots_per_block();

    let (sv, se) = norm_slots(cfg);
    let vfeat = normalize(&t.vertex_feat, tape.value(param_vars[sv]));
    let efeat = normalize(&t.edge_feat, tape.value(param_vars[se]));
    let vfeat = tape.constant(vfeat);
    let efeat = tape.constant(efeat);
    let degree = tape.constant(t.degree.map(|d| cfg.message_scale * d));
    let mut p = tape.constant(Matrix::filled(k, 1, p_max));
    let mut cached: Option<(usize, Var)> = None;

    for layer in 0..cfg.num_mp_layers {
        let b = cfg.block_of_layer(layer);
        let slots = &param_vars[b * per_block..(b + 1) * per_block];
        let (fa_w0, fa_b0, fa_w1, fa_b1) = (slots[0], slots[1], slots[2], slots[3]);
        let edge_pre = match cached {
            Some((cb, v)) if cb == b => v,
            _ => {
                let w_e = tape.row_slice(fa_w0, EMBED_DIM, EMBED_DIM + EDGE_FEATURES)?;
                let e = tape.matmul(efeat, w_e)?;
                let e = tape.add_row(e, fa_b0)?;
                cached = Some((b, e));
                e
            }
        };
        let m = tape.concat_cols(vfeat, p)?;
        let w_m = tape.row_slice(fa_w0, 0, EMBED_DIM)?;
        let node_pre = tape.matmul(m, w_m)?;
        let gathered = tape.gather(node_pre, t.source.clone())?;
        let pre = tape.add(gathered, edge_pre)?;
        let h = tape.relu(pre);
        let mut s = tape.segment_sum(h, t.offsets.clone())?;
        if cfg.message_scale != 1.0 {
            s = tape.scale(s, cfg.message_scale);
        }
        let a = tape.matmul(s, fa_w1)?;
        let bias = tape.matmul(degree, fa_b1)?;
        let alpha = tape.add(a, bias)?;
        let x = tape.concat_cols(alpha, m)?;
        let out = mlp_apply(tape, &fc_spec, &slots[4..], x)?;
        p = tape.scale(out, p_max);
    }
    Ok(p)
}

/// Records `-Σ_k w_k log₂(1 + SINR_k(p))` for one instance.
pub fn negative_rate_traced(
    tape: &mut Tape,
    inst: &NetworkInstance,
    p: Var,
) -> Result<Var, FgnnError> {
    let k = inst.num_links();
    let mut cross = Matrix::zeros(k, k);
    let mut direct = Vec::with_capacity(k);
    for i in 0..k {
        for j in 0..k {
            if j != i {
                cross.set(i, j, inst.gain(j, i));
            }
        }
        direct.push(inst.gain(i, i));
    }
    let cross = tape.constant(cross);
    let direct = tape.constant(Matrix::column(direct));
    let weights = tape.constant(Matrix::column(inst.weights.clone()));

    let mut denom = tape.matmul(cross, p)?;
    if inst.is_fd.iter().any(|&b| b) {
        let si = inst.config.si_spec();
        let partner: Vec<usize> = (0..k).map(|i| inst.fd_partner[i].unwrap_or(i)).collect();
        let mask = Matrix::column(
            (0..k)
                .map(|i| if inst.is_fd[i] { si.eta } else { 0.0 })
                .collect(),
        );
        let pp = tape.gather(p, partner.into())?;
        let pw = tape.pow_const(pp, si.lambda);
        let mask = tape.constant(mask);
        let gamma = tape.mul(pw, mask)?;
        denom = tape.add(denom, gamma)?;
    }
    let denom = tape.add_scalar(denom, inst.config.noise_var_w);
    let signal = tape.mul(direct, p)?;
    let sinr = tape.div(signal, denom)?;
    let rate = tape.log1p(sinr);
    let weighted = tape.mul(rate, weights)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / std::f64::consts::LN_2))
}

fn params_on_tape(tape: &mut Tape, params: &ParamStore) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(slot, t)| tape.param(slot, t.clone()))
        .collect()
}

/// Batch loss recorded on one tape; returns the tape, the scalar loss node
/// and the parameter handles.
pub fn loss(
    batch: &[&Sample],
    params: &ParamStore,
    cfg: &FgnnConfig,
) -> Result<(Tape, Var), FgnnError> {
    if batch.is_empty() {
        return Err(FgnnError::Empty("batch"));
    }
    check_params(cfg, params)?;
    let mut tape = Tape::new();
    let vars = params_on_tape(&mut tape, params);
    let mut total: Option<Var> = None;
    for sample in batch {
        let p = forward_traced(&mut tape, sample, &vars, cfg)?;
        let l = negative_rate_traced(&mut tape, &sample.instance, p)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / batch.len() as f64);
    Ok((tape, mean))
}

/// Mean batch loss and its parameter gradient. Instances are differentiated
/// independently (in parallel) and reduced in batch order.
pub fn loss_and_grad(
    batch: &[&Sample],
    params: &ParamStore,
    cfg: &FgnnConfig,
) -> Result<(f64, Vec<Matrix>), FgnnError> {
    if batch.is_empty() {
        return Err(FgnnError::Empty("batch"));
    }
    let per_instance: Vec<(f64, Vec<Matrix>)> = batch
        .par_iter()
        .map(|sample| {
            let mut tape = Tape::new();
            let vars = params_on_tape(&mut tape, params);
            let p = forward_traced(&mut tape, sample, &vars, cfg)?;
            let l = negative_rate_traced(&mut tape, &sample.instance, p)?;
            let value = tape.value(l).data[0];
            let mut grads = params.zero_grads();
            tape.backward(l)?.accumulate_params(&mut grads);
            Ok((value, grads))
        })
        .collect::<Result<_, FgnnError>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut grads = params.zero_grads();
    let mut total = 0.0;
    for (value, g) in &per_instance {
        total += value;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.add_assign(gi);
        }
    }
    for g in &mut grads {
        g.data.iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total * scale, grads))
}

// ---------------------------------------------------------------------------
// Training and evaluation.

/// Held-out instances with their reference (WMMSE) sum rates.
pub struct ValidationSet<'a> {
    pub samples: &'a [Sample],
    pub reference_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub validation_ratio: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
    pub wall_time_s: f64,
}

pub fn steps_per_epoch(num_samples: usize, batch_size: usize) -> usize {
    num_samples.div_ceil(batch_size)
}

/// Sample order for `epoch`; depends only on `(seed, epoch)`.
pub fn epoch_order(num_samples: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut rng_from_seed(child_seed(seed, epoch as u64)));
    order
}

pub fn train(
    train_set: &[Sample],
    validation: Option<&ValidationSet<'_>>,
    cfg: &FgnnConfig,
    seed: u64,
) -> Result<TrainOutcome, FgnnError> {
    let mut params = init_params(cfg, seed)?;
    if cfg.normalize_features {
        fit_feature_norm(&mut params, cfg, train_set);
    }
    train_from(params, train_set, validation, cfg, seed)
}

/// Continues training from `params`. The position in the schedule is
/// recovered from the optimizer step counter, so resuming a checkpoint
/// replays exactly the batches an uninterrupted run would have seen.
pub fn train_from(
    mut params: ParamStore,
    train_set: &[Sample],
    validation: Option<&ValidationSet<'_>>,
    cfg: &FgnnConfig,
    seed: u64,
) -> Result<TrainOutcome, FgnnError> {
    if train_set.is_empty() {
        return Err(FgnnError::Empty("training set"));
    }
    check_params(cfg, &params)?;
    let adam = cfg.adam();
    let steps = steps_per_epoch(train_set.len(), cfg.batch_size);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    let first_epoch = (params.adam.step as usize) / steps;
    for epoch in first_epoch..cfg.epochs {
        let order = epoch_order(train_set.len(), seed, epoch);
        let mut epoch_loss = 0.0;
        let mut counted = 0;
        let first_batch = params.adam.step as usize - epoch * steps;
        for chunk in order.chunks(cfg.batch_size).skip(first_batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (value, grads) = loss_and_grad(&batch, &params, cfg)?;
            if !value.is_finite() {
                return Err(FgnnError::NonFiniteLoss {
                    epoch,
                    step: params.adam.step,
                });
            }
            adam_step(&mut params, &grads, &adam)?;
            epoch_loss += value * batch.len() as f64;
            counted += batch.len();
        }
        let validation_ratio = match validation {
            Some(v) => Some(
                evaluate_against(&params, cfg, v.samples, &v.reference_rates)?.ratio_vs_reference,
            ),
            None => None,
        };
        log.push(EpochLog {
            epoch,
            loss: epoch_loss / counted.max(1) as f64,
            validation_ratio,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if let Some(ratio) = validation_ratio {
            let improved = best.as_ref().is_none_or(|(b, _)| ratio > *b + 1e-4);
            if improved {
                best = Some((ratio, params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stopped_early = epoch + 1 < cfg.epochs;
                    break;
                }
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    Ok(TrainOutcome {
        params,
        log,
        stopped_early,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_sum_rate: f64,
    pub mean_reference_rate: f64,
    /// `mean_sum_rate / mean_reference_rate`.
    pub ratio_vs_reference: f64,
    pub per_instance: Vec<f64>,
}

/// Scores given power allocations against baseline allocations.
pub fn evaluate_powers(
    test: &[Sample],
    powers: &[PowerAllocation],
    baseline_powers: &[PowerAllocation],
) -> Result<EvalMetrics, FgnnError> {
    if test.is_empty() {
        return Err(FgnnError::Empty("test set"));
    }
    let rate = |s: &Sample, p: &PowerAllocation| {
        weighted_sum_rate_raw(&s.instance, p.as_slice()).expect("dimensions checked")
    };
    let per_instance: Vec<f64> = test.iter().zip(powers).map(|(s, p)| rate(s, p)).collect();
    let reference: Vec<f64> = test
        .iter()
        .zip(baseline_powers)
        .map(|(s, p)| rate(s, p))
        .collect();
    Ok(metrics(per_instance, &reference))
}

fn metrics(per_instance: Vec<f64>, reference: &[f64]) -> EvalMetrics {
    let n = per_instance.len() as f64;
    let mean_sum_rate = per_instance.iter().sum::<f64>() / n;
    let mean_reference_rate = reference.iter().sum::<f64>() / n;
    EvalMetrics {
        mean_sum_rate,
        mean_reference_rate,
        ratio_vs_reference: mean_sum_rate / mean_reference_rate,
        per_instance,
    }
}

pub fn predict(params: &ParamStore, cfg: &FgnnConfig, samples: &[Sample]) -> Vec<PowerAllocation> {
    samples
        .par_iter()
        .map(|s| forward_sample(s, params, cfg))
        .collect()
}

/// F-GNN sum rates on `test` normalized by the baseline's.
pub fn evaluate(
    params: &ParamStore,
    cfg: &FgnnConfig,
    test: &[Sample],
    baseline_powers: &[PowerAllocation],
) -> Result<EvalMetrics, FgnnError> {
    check_params(cfg, params)?;
    evaluate_powers(test, &predict(params, cfg, test), baseline_powers)
}

/// Same as [`evaluate`] with the reference sum rates already computed.
pub fn evaluate_against(
    params: &ParamStore,
    cfg: &FgnnConfig,
    test: &[Sample],
    reference_rates: &[f64],
) -> Result<EvalMetrics, FgnnError> {
    if test.is_empty() {
        return Err(FgnnError::Empty("test set"));
    }
    let per_instance = test
        .par_iter()
        .map(|s| {
            let p = forward_sample(s, params, cfg);
            weighted_sum_rate_raw(&s.instance, p.as_slice()).expect("dimensions checked")
        })
        .collect();
    Ok(metrics(per_instance, reference_rates))
}

/// Output of `f_C`'s logistic for a single pre-activation; exposed for tests.
pub fn squash(z: f64, p_max: f64) -> f64 {
    p_max * logistic(z)
}
