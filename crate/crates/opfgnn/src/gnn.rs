//! Graph convolutional network mapping per-bus demand to an operating point.
//!
//! Each layer is a polynomial graph filter sum_{k=0}^{K} A^k Z H_k followed
//! by a pointwise nonlinearity on hidden layers. The four output channels
//! pass through a bound-enforcing head: generator injections and voltage
//! magnitudes go through a scaled sigmoid onto their boxes (so those limits
//! hold for any parameters), angles stay linear with the reference bus
//! pinned to zero, and net injections are generation minus demand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::grid::{BusState, GridModel};
use crate::matrix::{Matrix, SparseSym};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Input signal width: demand (2), generation box (4), voltage box (2).
pub const INPUT_WIDTH: usize = 8;
/// Output channels: generated P, generated Q, voltage magnitude, angle.
pub const OUTPUT_WIDTH: usize = 4;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    /// Number of graph-filter layers.
    pub layers: usize,
    /// Filter taps per layer beyond the identity term (polynomial order K).
    pub taps: usize,
    /// Hidden feature width.
    pub width: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self { layers: 2, taps: 8, width: 32, nonlinearity: Nonlinearity::Relu, seed: 0 }
    }
}

impl GnnConfig {
    /// Feature widths per layer boundary: input, hidden..., output.
    pub fn layer_widths(&self) -> Vec<usize> {
        assert!(self.layers >= 1 && self.width >= 1, "invalid gnn config");
        let mut w = Vec::with_capacity(self.layers + 1);
        w.push(INPUT_WIDTH);
        for _ in 1..self.layers {
            w.push(self.width);
        }
        w.push(OUTPUT_WIDTH);
        w
    }
}

/// Filter taps: `layers[l][k]` has shape widths[l] x widths[l + 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GnnParams {
    pub layers: Vec<Vec<Matrix>>,
}

impl GnnParams {
    pub fn tensor_count(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers.iter_mut().flatten()
    }
}

/// Uniform draws on (-c, c) with c = sqrt(6 / ((K + 1)(F_in + F_out))),
/// deterministic per seed.
pub fn init_params(config: &GnnConfig) -> GnnParams {
    let widths = config.layer_widths();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = widths
        .windows(2)
        .map(|w| {
            let (f_in, f_out) = (w[0], w[1]);
            let c = (6.0 / ((config.taps + 1) as f64 * (f_in + f_out) as f64)).sqrt();
            (0..=config.taps)
                .map(|_| Matrix::from_fn(f_in, f_out, |_, _| rng.random_range(-c..c)))
                .collect()
        })
        .collect();
    GnnParams { layers }
}

/// Stacks the demand sample with the per-bus constraint boxes:
/// columns [Re S^d, Im S^d, p_min, q_min, p_max, q_max, v_min, v_max].
pub fn build_input(model: &GridModel, demand: &Matrix) -> Matrix {
    assert_eq!(demand.shape(), (model.n_buses, 2), "demand shape mismatch");
    let boxes = model.generator_boxes();
    Matrix::from_fn(model.n_buses, INPUT_WIDTH, |i, c| match c {
        0 => demand.get(i, 0),
        1 => demand.get(i, 1),
        2 => boxes.p_min[i],
        3 => boxes.q_min[i],
        4 => boxes.p_max[i],
        5 => boxes.q_max[i],
        6 => model.v_min[i],
        _ => model.v_max[i],
    })
}

/// Polynomial graph filter sum_{k=0}^{K} A^k Z H_k.
pub fn graph_filter(gso: &SparseSym, z: &Matrix, taps: &[Matrix]) -> Matrix {
    assert!(!taps.is_empty(), "graph_filter needs at least the identity tap");
    assert_eq!(gso.n(), z.rows(), "graph_filter: signal has {} rows for an {}-node graph", z.rows(), gso.n());
    let mut acc = z.matmul(&taps[0]);
    let mut shifted = z.clone();
    for tap in &taps[1..] {
        shifted = gso.apply(&shifted);
        acc += &shifted.matmul(tap);
    }
    acc
}

/// Monotone map of the real line onto [a, b]: (b - a) sigmoid(x) + a.
/// The closing clamp absorbs the half-ulp overshoot the affine step can
/// pick up at saturation, so outputs stay inside the box unconditionally.
pub fn bounded_sigmoid(x: f64, a: f64, b: f64) -> f64 {
    debug_assert!(a <= b, "bounded_sigmoid needs a <= b, got [{a}, {b}]");
    ((b - a) / (1.0 + (-x).exp()) + a).clamp(a, b)
}

/// Full forward pass producing an operating point for one demand sample.
pub fn gnn_forward(
    config: &GnnConfig,
    params: &GnnParams,
    model: &GridModel,
    demand: &Matrix,
) -> BusState {
    let mut z = build_input(model, demand);
    let last = params.layers.len() - 1;
    for (l, taps) in params.layers.iter().enumerate() {
        z = graph_filter(&model.gso, &z, taps);
        if l < last {
            match config.nonlinearity {
                Nonlinearity::Relu => z.map_in_place(|x| if x > 0.0 { x } else { 0.0 }),
                Nonlinearity::Tanh => z.map_in_place(f64::tanh),
            }
        }
    }
    let boxes = model.generator_boxes();
    let n = model.n_buses;
    let gauge = z.get(model.reference_bus, 3);
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut delta = vec![0.0; n];
    for i in 0..n {
        let sg_p = bounded_sigmoid(z.get(i, 0), boxes.p_min[i], boxes.p_max[i]);
        let sg_q = bounded_sigmoid(z.get(i, 1), boxes.q_min[i], boxes.q_max[i]);
        v[i] = bounded_sigmoid(z.get(i, 2), model.v_min[i], model.v_max[i]);
        delta[i] = z.get(i, 3) - gauge;
        p[i] = sg_p - demand.get(i, 0);
        q[i] = sg_q - demand.get(i, 1);
    }
    BusState::from_parts(&p, &q, &v, &delta)
}

/// Tape handles for the head outputs of a recorded forward pass. All are
/// N x 1 column nodes.
#[derive(Clone, Copy, Debug)]
pub struct StateNodes {
    pub sg_p: NodeId,
    pub sg_q: NodeId,
    pub p: NodeId,
    pub q: NodeId,
    pub v: NodeId,
    pub delta: NodeId,
}

/// A forward pass recorded on a tape for repeated replay: swap the demand
/// leaf and parameter leaves, then run `forward`.
pub struct TapedGnn {
    pub demand: NodeId,
    /// Leaf per tap, mirroring the `GnnParams::layers` nesting.
    pub param_leaves: Vec<Vec<NodeId>>,
    pub state: StateNodes,
}

pub fn record_forward(
    tape: &mut Tape,
    model: &GridModel,
    config: &GnnConfig,
    params: &GnnParams,
    demand: &Matrix,
) -> TapedGnn {
    let n = model.n_buses;
    assert_eq!(demand.shape(), (n, 2), "demand shape mismatch");
    let demand_leaf = tape.leaf_from(demand.clone());

    // U = demand * E + B where E embeds the two demand columns into the
    // 8-wide input and B carries the constant bound columns.
    let embed = {
        let mut e = Matrix::zeros(2, INPUT_WIDTH);
        e.set(0, 0, 1.0);
        e.set(1, 1, 1.0);
        tape.constant(e)
    };
    let bounds = {
        let zero_demand = Matrix::zeros(n, 2);
        let mut b = build_input(model, &zero_demand);
        for i in 0..n {
            b.set(i, 0, 0.0);
            b.set(i, 1, 0.0);
        }
        tape.constant(b)
    };
    let embedded = tape.matmul(demand_leaf, embed);
    let mut z = tape.add(embedded, bounds);

    let gso_id = tape.register_sparse(model.gso.clone());
    let last = params.layers.len() - 1;
    let mut param_leaves = Vec::with_capacity(params.layers.len());
    for (l, taps) in params.layers.iter().enumerate() {
        let mut leaves = Vec::with_capacity(taps.len());
        let h0 = tape.leaf_from(taps[0].clone());
        leaves.push(h0);
        let mut acc = tape.matmul(z, h0);
        let mut shifted = z;
        for tap in &taps[1..] {
            let h = tape.leaf_from(tap.clone());
            leaves.push(h);
            shifted = tape.sparse_apply(gso_id, shifted);
            let term = tape.matmul(shifted, h);
            acc = tape.add(acc, term);
        }
        z = if l < last {
            match config.nonlinearity {
                Nonlinearity::Relu => tape.relu(acc),
                Nonlinearity::Tanh => tape.tanh(acc),
            }
        } else {
            acc
        };
        param_leaves.push(leaves);
    }

    let channel = |tape: &mut Tape, z: NodeId, c: usize| {
        let mut e = Matrix::zeros(OUTPUT_WIDTH, 1);
        e.set(c, 0, 1.0);
        let sel = tape.constant(e);
        tape.matmul(z, sel)
    };
    let boxes = model.generator_boxes();
    let head = |tape: &mut Tape, x: NodeId, lo: &[f64], hi: &[f64]| {
        let width = tape.constant(Matrix::from_fn(n, 1, |i, _| hi[i] - lo[i]));
        let lower = tape.constant(Matrix::column_vector(lo));
        let sig = tape.sigmoid(x);
        let scaled = tape.mul(sig, width);
        tape.add(scaled, lower)
    };

    let raw_p = channel(tape, z, 0);
    let raw_q = channel(tape, z, 1);
    let raw_v = channel(tape, z, 2);
    let raw_d = channel(tape, z, 3);
    let sg_p = head(tape, raw_p, &boxes.p_min, &boxes.p_max);
    let sg_q = head(tape, raw_q, &boxes.q_min, &boxes.q_max);
    let v = head(tape, raw_v, &model.v_min, &model.v_max);

    // delta minus ones * (e_ref^T delta) pins the reference angle to zero.
    let ref_row = {
        let mut e = Matrix::zeros(1, n);
        e.set(0, model.reference_bus, 1.0);
        tape.constant(e)
    };
    let ones = tape.constant(Matrix::from_fn(n, 1, |_, _| 1.0));
    let gauge = tape.matmul(ref_row, raw_d);
    let shift = tape.matmul(ones, gauge);
    let delta = tape.sub(raw_d, shift);

    let demand_col = |tape: &mut Tape, c: usize| {
        let mut e = Matrix::zeros(2, 1);
        e.set(c, 0, 1.0);
        let sel = tape.constant(e);
        tape.matmul(demand_leaf, sel)
    };
    let sd_p = demand_col(tape, 0);
    let sd_q = demand_col(tape, 1);
    let p = tape.sub(sg_p, sd_p);
    let q = tape.sub(sg_q, sd_q);

    TapedGnn {
        demand: demand_leaf,
        param_leaves,
        state: StateNodes { sg_p, sg_q, p, q, v, delta },
    }
}

impl TapedGnn {
    /// Copies a parameter set into the tape's leaves; call `forward` after.
    pub fn load_params(&self, tape: &mut Tape, params: &GnnParams) {
        for (leaves, taps) in self.param_leaves.iter().zip(&params.layers) {
            for (&leaf, tap) in leaves.iter().zip(taps) {
                tape.set_leaf(leaf, tap.data());
            }
        }
    }

    /// Reads the current head output values into a [`BusState`].
    pub fn state_value(&self, tape: &Tape) -> BusState {
        BusState::from_parts(
            tape.value(self.state.p).data(),
            tape.value(self.state.q).data(),
            tape.value(self.state.v).data(),
            tape.value(self.state.delta).data(),
        )
    }
}

/// Identity of the graph-shift operator a parameter set was trained against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsoFingerprint {
    pub case_name: String,
    pub alpha: f64,
    pub beta: f64,
    pub normalize: bool,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found}; this build reads version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint layer {layer} tap {tap}: expected shape {expected:?}, found {found:?}")]
    Shape { layer: usize, tap: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("checkpoint layer {layer} tap {tap}: {rows}x{cols} shape disagrees with {len} data entries")]
    Length { layer: usize, tap: usize, rows: usize, cols: usize, len: usize },
}

#[derive(Serialize, Deserialize)]
struct TapBlob {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: GnnConfig,
    gso: GsoFingerprint,
    layers: Vec<Vec<TapBlob>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: GnnConfig,
    pub gso: GsoFingerprint,
    pub params: GnnParams,
}

pub fn save_checkpoint(
    path: &Path,
    config: &GnnConfig,
    gso: &GsoFingerprint,
    params: &GnnParams,
) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        gso: gso.clone(),
        layers: params
            .layers
            .iter()
            .map(|taps| {
                taps.iter()
                    .map(|t| TapBlob { rows: t.rows(), cols: t.cols(), data: t.data().to_vec() })
                    .collect()
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: file.version, supported: CHECKPOINT_VERSION });
    }
    let widths = file.config.layer_widths();
    let mut layers = Vec::with_capacity(file.layers.len());
    for (l, taps) in file.layers.into_iter().enumerate() {
        let expected = (
            *widths.get(l).unwrap_or(&0),
            *widths.get(l + 1).unwrap_or(&0),
        );
        let mut out = Vec::with_capacity(taps.len());
        for (k, blob) in taps.into_iter().enumerate() {
            if (blob.rows, blob.cols) != expected {
                return Err(CheckpointError::Shape {
                    layer: l,
                    tap: k,
                    expected,
                    found: (blob.rows, blob.cols),
                });
            }
            if blob.data.len() != blob.rows * blob.cols {
                return Err(CheckpointError::Length {
                    layer: l,
                    tap: k,
                    rows: blob.rows,
                    cols: blob.cols,
                    len: blob.data.len(),
                });
            }
            out.push(Matrix::from_vec(blob.rows, blob.cols, blob.data));
        }
        layers.push(out);
    }
    if layers.len() != file.config.layers {
        return Err(CheckpointError::Shape {
            layer: layers.len(),
            tap: 0,
            expected: (file.config.layers, 0),
            found: (layers.len(), 0),
        });
    }
    Ok(Checkpoint { config: file.config, gso: file.gso, params: GnnParams { layers } })
}
