//! Per-instance dispatch solver: direct descent on the penalized objective
//! over one sample's free variables.
//!
//! The state is parametrized exactly like the network head so box
//! constraints hold by construction: unbounded logits pass through the
//! scaled sigmoid onto the generator and voltage boxes, and angles are free
//! with the reference bus gauge-fixed. Each attempt descends in stages with
//! the equality weight multiplied by [`MU_ESCALATION`] between stages, since
//! at any fixed weight the optimum balances cost against penalty and floors
//! the residual near (cost gradient) / (2 mu); escalation drives the
//! residual below tolerance without a tape rebuild. Converged attempts are
//! preferred across restarts; base-weight loss picks within a class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::dataset::LoadDataset;
use crate::gnn::StateNodes;
use crate::grid::{BusState, GridModel};
use crate::loss::{record_loss, LossNodes, PenaltyConfig};
use crate::matrix::Matrix;
use crate::metrics::{
    feasibility_report, FeasibilityReport, MetricsError, DEFAULT_EQUALITY_TOLERANCE,
};
use crate::train::{Optimizer, OptimizerKind};

/// Equality-weight multiplier between continuation stages.
pub const MU_ESCALATION: f64 = 10.0;
/// Ceiling on the escalated equality weight. Beyond this the restoration
/// phase owns the residual and further escalation adds nothing.
pub const MU_CAP: f64 = 1e6;
/// Iterations without relative improvement better than
/// [`STAGNATION_TOLERANCE`] before a stage stops early.
pub const STAGNATION_WINDOW: usize = 50;
pub const STAGNATION_TOLERANCE: f64 = 1e-10;
/// Restart seeds derive from this base so every instance of a batch draws
/// the same initializations.
const RESTART_SEED: u64 = 0xB45E11E;
/// Projection bound on every free coordinate. Keeping sigmoid inputs this
/// side of saturation leaves a derivative of at least ~4.5e-5, so
/// restoration can always pull a coordinate back off a box face; the face
/// itself stays reachable to within 5e-5 of the box width, well inside the
/// residual tolerance. Angles share the bound, which also rules out
/// wrapping past +-2 pi more than once.
const LOGIT_LIMIT: f64 = 10.0;

fn project(logits: &mut [Matrix; 4]) {
    for block in logits {
        block.map_in_place(|x| x.clamp(-LOGIT_LIMIT, LOGIT_LIMIT));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    /// Iteration budget per continuation stage.
    pub max_iters: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub penalty: PenaltyConfig,
    /// Convergence requires the worst residual magnitude at or below this.
    pub residual_tolerance: f64,
    /// Total attempts: attempt 0 starts flat, the rest from random logits.
    pub restarts: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            penalty: PenaltyConfig::default(),
            residual_tolerance: DEFAULT_EQUALITY_TOLERANCE,
            restarts: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub state: BusState,
    pub report: FeasibilityReport,
    pub converged: bool,
    /// Total loss of the returned state under the configured (base) penalty
    /// weights; the minimum over attempts in the winning feasibility class.
    pub loss: f64,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("dataset was sampled from a different case: {0}")]
    CaseMismatch(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// The solver's replayable graph: four logit leaves feeding the head and
/// the penalized loss for one fixed demand.
struct InstanceTape {
    tape: Tape,
    leaves: [NodeId; 4],
    state: StateNodes,
    loss: LossNodes,
}

fn record_instance(model: &GridModel, demand: &Matrix, penalty: &PenaltyConfig) -> InstanceTape {
    let n = model.n_buses;
    assert_eq!(demand.shape(), (n, 2), "demand shape mismatch");
    let mut tape = Tape::new();
    let zp = tape.leaf(n, 1);
    let zq = tape.leaf(n, 1);
    let zv = tape.leaf(n, 1);
    let dl = tape.leaf(n, 1);

    let boxes = model.generator_boxes();
    let head = |tape: &mut Tape, z: NodeId, lo: &[f64], hi: &[f64]| {
        let width = tape.constant(Matrix::from_fn(n, 1, |i, _| hi[i] - lo[i]));
        let lower = tape.constant(Matrix::column_vector(lo));
        let sig = tape.sigmoid(z);
        let scaled = tape.mul(sig, width);
        tape.add(scaled, lower)
    };
    let sg_p = head(&mut tape, zp, &boxes.p_min, &boxes.p_max);
    let sg_q = head(&mut tape, zq, &boxes.q_min, &boxes.q_max);
    let v = head(&mut tape, zv, &model.v_min, &model.v_max);

    let ref_row = {
        let mut e = Matrix::zeros(1, n);
        e.set(0, model.reference_bus, 1.0);
        tape.constant(e)
    };
    let ones = tape.constant(Matrix::from_fn(n, 1, |_, _| 1.0));
    let gauge = tape.matmul(ref_row, dl);
    let shift = tape.matmul(ones, gauge);
    let delta = tape.sub(dl, shift);

    let sd_p = tape.constant(Matrix::from_fn(n, 1, |i, _| demand.get(i, 0)));
    let sd_q = tape.constant(Matrix::from_fn(n, 1, |i, _| demand.get(i, 1)));
    let p = tape.sub(sg_p, sd_p);
    let q = tape.sub(sg_q, sd_q);

    let state = StateNodes { sg_p, sg_q, p, q, v, delta };
    let loss = record_loss(&mut tape, model, penalty, state);
    InstanceTape { tape, leaves: [zp, zq, zv, dl], state, loss }
}

impl InstanceTape {
    fn load(&mut self, logits: &[Matrix; 4]) {
        for (&leaf, m) in self.leaves.iter().zip(logits) {
            self.tape.set_leaf(leaf, m.data());
        }
        self.tape.forward();
    }

    fn state_value(&self) -> BusState {
        BusState::from_parts(
            self.tape.value(self.state.p).data(),
            self.tape.value(self.state.q).data(),
            self.tape.value(self.state.v).data(),
            self.tape.value(self.state.delta).data(),
        )
    }

    /// Fixed-step optimizer phase. A fixed step dithers once the basin is
    /// reached, so the best visited point is kept, not the last.
    fn explore(&mut self, logits: &mut [Matrix; 4], config: &SolveConfig) {
        let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
        let mut best = f64::INFINITY;
        let mut best_logits = logits.clone();
        let mut since_improvement = 0;
        for _ in 0..config.max_iters {
            self.load(logits);
            let loss = self.tape.value(self.loss.total).get(0, 0);
            if !loss.is_finite() {
                break;
            }
            if loss < best {
                best_logits = logits.clone();
            }
            if best - loss > STAGNATION_TOLERANCE * best.abs().max(1.0) {
                best = loss;
                since_improvement = 0;
            } else {
                since_improvement += 1;
                if since_improvement >= STAGNATION_WINDOW {
                    break;
                }
            }
            self.tape.backward(self.loss.total);
            let grads: Vec<Matrix> =
                self.leaves.iter().map(|&l| self.tape.grad(l).clone()).collect();
            optimizer.step(logits.as_mut_slice(), &grads);
            project(logits);
        }
        *logits = best_logits;
    }

    /// Backtracking gradient descent: monotone decrease with a self-scaled
    /// step. The equality weight makes late stages stiff, with basins far
    /// narrower than any fixed step; halving on rejection reaches them.
    /// `budget` counts loss evaluations.
    fn polish(&mut self, logits: &mut [Matrix; 4], budget: usize) {
        const SUFFICIENT_DECREASE: f64 = 1e-4;
        const MIN_STEP: f64 = 1e-18;
        let mut evals = 0;
        let mut step = f64::NAN;
        let mut flat_accepts = 0;
        'outer: while evals < budget {
            self.load(logits);
            evals += 1;
            let f0 = self.tape.value(self.loss.total).get(0, 0);
            if !f0.is_finite() {
                break;
            }
            self.tape.backward(self.loss.total);
            let grads: Vec<Matrix> =
                self.leaves.iter().map(|&l| self.tape.grad(l).clone()).collect();
            let grad_norm_sq: f64 =
                grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum();
            if grad_norm_sq <= 0.0 || !grad_norm_sq.is_finite() {
                break;
            }
            if step.is_nan() {
                step = 1.0 / (1.0 + grad_norm_sq.sqrt());
            }
            while evals < budget && step > MIN_STEP {
                let mut trial = logits.clone();
                for (t, g) in trial.iter_mut().zip(&grads) {
                    t.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(x, d)| *x -= step * d);
                }
                project(&mut trial);
                self.load(&trial);
                evals += 1;
                let f1 = self.tape.value(self.loss.total).get(0, 0);
                if f1.is_finite() && f1 <= f0 - SUFFICIENT_DECREASE * step * grad_norm_sq {
                    let improvement = f0 - f1;
                    *logits = trial;
                    step *= 2.0;
                    if improvement <= 1e-13 * f0.abs().max(1.0) {
                        flat_accepts += 1;
                        if flat_accepts >= 5 {
                            break 'outer;
                        }
                    } else {
                        flat_accepts = 0;
                    }
                    continue 'outer;
                }
                step *= 0.5;
            }
            break;
        }
        self.load(logits);
    }

    /// Violated inequality entries at the current point, each pinned to sit
    /// `epsilon` inside its boundary by the restoration rows.
    fn violated_gaps(&self, model: &GridModel) -> Vec<ClampRow> {
        let rate_margins: Vec<f64> = model
            .branches
            .iter()
            .filter_map(|b| b.rate_max)
            .map(|r| 1e-6 * (r * r).max(1e-4))
            .collect();
        let mut clamps = Vec::new();
        for node in [self.loss.rate_forward_gap, self.loss.rate_reverse_gap] {
            let Some(node) = node else { continue };
            for (index, &gap) in self.tape.value(node).data().iter().enumerate() {
                if gap > 0.0 {
                    clamps.push(ClampRow { node, index, epsilon: rate_margins[index] });
                }
            }
        }
        for node in [self.loss.angle_upper_gap, self.loss.angle_lower_gap] {
            let Some(node) = node else { continue };
            for (index, &gap) in self.tape.value(node).data().iter().enumerate() {
                if gap > 0.0 {
                    clamps.push(ClampRow { node, index, epsilon: 1e-6 });
                }
            }
        }
        clamps
    }

    /// Damped Gauss-Newton restoration of the balance residuals, with
    /// violated inequalities clamped just inside their boundaries. Descent
    /// leaves a near-uniform deficit spread across the network, the worst-
    /// conditioned direction of the flow Jacobian, which a first-order
    /// method cannot traverse in any reasonable iteration count; solving
    /// the normal equations crosses it directly. The barrier's linear tail
    /// is too soft to hold a profitably overloaded branch under its rate,
    /// so those entries join the residual system instead of the objective.
    /// The minimum-norm step in logit space keeps the correction small, so
    /// the economics set by the penalty stages barely move.
    fn restore_balance(&mut self, model: &GridModel, logits: &mut [Matrix; 4], tolerance: f64) {
        const MAX_ROUNDS: usize = 40;
        const GIVE_UP_DAMPING: f64 = 1e12;
        let n = logits[0].rows();
        let width = 4 * n;
        // The report checks the per-bus complex norm; aim below it.
        let target = 0.5 * tolerance;
        let mut damping = 1e-10;
        'rounds: for _ in 0..MAX_ROUNDS {
            self.load(logits);
            let rp = self.tape.value(self.loss.residual_p).data().to_vec();
            let rq = self.tape.value(self.loss.residual_q).data().to_vec();
            let worst = (0..n).map(|i| rp[i].hypot(rq[i])).fold(0.0, f64::max);
            let clamps = self.violated_gaps(model);
            if !worst.is_finite() || (worst <= target && clamps.is_empty()) {
                break;
            }
            let m = 2 * n + clamps.len();
            let residual = |rp: &[f64], rq: &[f64], tape: &Tape, row: usize| -> f64 {
                if row < n {
                    rp[row]
                } else if row < 2 * n {
                    rq[row - n]
                } else {
                    let clamp = &clamps[row - 2 * n];
                    tape.value(clamp.node).data()[clamp.index] + clamp.epsilon
                }
            };
            let sum_sq = |rp: &[f64], rq: &[f64], tape: &Tape| -> f64 {
                (0..m).map(|row| residual(rp, rq, tape, row).powi(2)).sum()
            };
            let sum0 = sum_sq(&rp, &rq, &self.tape);

            // One seeded reverse sweep per residual row gives its Jacobian
            // over the flattened leaves.
            let mut jac = vec![0.0; m * width];
            for row in 0..m {
                let (node, index) = if row < n {
                    (self.loss.residual_p, row)
                } else if row < 2 * n {
                    (self.loss.residual_q, row - n)
                } else {
                    let clamp = &clamps[row - 2 * n];
                    (clamp.node, clamp.index)
                };
                let mut seed = vec![0.0; self.tape.value(node).data().len()];
                seed[index] = 1.0;
                self.tape.backward_seeded(node, &seed);
                let out = &mut jac[row * width..(row + 1) * width];
                for (j, &leaf) in self.leaves.iter().enumerate() {
                    out[j * n..(j + 1) * n].copy_from_slice(self.tape.grad(leaf).data());
                }
            }

            let mut normal = vec![0.0; m * m];
            for i in 0..m {
                for j in i..m {
                    let dot: f64 = (0..width)
                        .map(|k| jac[i * width + k] * jac[j * width + k])
                        .sum();
                    normal[i * m + j] = dot;
                    normal[j * m + i] = dot;
                }
            }
            let scale = ((0..m).map(|i| normal[i * m + i]).sum::<f64>() / m as f64).max(1e-30);
            let rhs: Vec<f64> =
                (0..m).map(|row| -residual(&rp, &rq, &self.tape, row)).collect();

            while damping <= GIVE_UP_DAMPING {
                let mut damped = normal.clone();
                for i in 0..m {
                    damped[i * m + i] += damping * scale;
                }
                if let Some(y) = cholesky_solve(damped, m, &rhs) {
                    let mut trial = logits.clone();
                    for (j, block) in trial.iter_mut().enumerate() {
                        for (k, x) in block.data_mut().iter_mut().enumerate() {
                            let col = j * n + k;
                            let dz: f64 =
                                (0..m).map(|i| jac[i * width + col] * y[i]).sum();
                            *x += dz;
                        }
                    }
                    project(&mut trial);
                    self.load(&trial);
                    let rp1 = self.tape.value(self.loss.residual_p).data().to_vec();
                    let rq1 = self.tape.value(self.loss.residual_q).data().to_vec();
                    let sum1 = sum_sq(&rp1, &rq1, &self.tape);
                    if sum1.is_finite() && sum1 < sum0 {
                        *logits = trial;
                        damping = (damping / 3.0).max(1e-12);
                        continue 'rounds;
                    }
                }
                damping *= 10.0;
            }
            break;
        }
        self.load(logits);
    }
}

/// One violated inequality entry to be pinned `epsilon` inside its
/// boundary during restoration.
struct ClampRow {
    node: NodeId,
    index: usize,
    epsilon: f64,
}

/// Solves `a y = rhs` for a symmetric positive definite `a` (row-major,
/// m x m, consumed) by Cholesky factorization; `None` when the
/// factorization breaks down.
fn cholesky_solve(mut a: Vec<f64>, m: usize, rhs: &[f64]) -> Option<Vec<f64>> {
    for j in 0..m {
        let mut d = a[j * m + j] - (0..j).map(|k| a[j * m + k] * a[j * m + k]).sum::<f64>();
        if !(d > 0.0) {
            return None;
        }
        d = d.sqrt();
        a[j * m + j] = d;
        for i in j + 1..m {
            let s = a[i * m + j] - (0..j).map(|k| a[i * m + k] * a[j * m + k]).sum::<f64>();
            a[i * m + j] = s / d;
        }
    }
    let mut y = rhs.to_vec();
    for i in 0..m {
        let partial: f64 = (0..i).map(|k| a[i * m + k] * y[k]).sum();
        y[i] = (y[i] - partial) / a[i * m + i];
    }
    for i in (0..m).rev() {
        let partial: f64 = (i + 1..m).map(|k| a[k * m + i] * y[k]).sum();
        y[i] = (y[i] - partial) / a[i * m + i];
    }
    Some(y)
}

/// Flat start: midpoint boxes (zero logits) and zero angles.
fn flat_logits(n: usize) -> [Matrix; 4] {
    [Matrix::zeros(n, 1), Matrix::zeros(n, 1), Matrix::zeros(n, 1), Matrix::zeros(n, 1)]
}

fn random_logits(n: usize, attempt: usize) -> [Matrix; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED + attempt as u64);
    std::array::from_fn(|_| Matrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0)))
}

/// One attempt from the given start. Each stage pairs first-order descent
/// (which sets the economics) with Gauss-Newton restoration (which zeroes
/// the balance residuals), then the equality weight escalates tenfold; the
/// rising weight keeps later stages close to the feasible set while the
/// cost re-optimizes along it. Returns the final state with its
/// base-weight loss.
fn solve_attempt(
    instance: &mut InstanceTape,
    model: &GridModel,
    mut logits: [Matrix; 4],
    config: &SolveConfig,
) -> (BusState, f64) {
    let base_mu = config.penalty.mu;
    let mut mu = base_mu;
    let mut first_stage = true;
    loop {
        instance.tape.set_leaf(instance.loss.mu, &[mu]);
        if first_stage {
            instance.explore(&mut logits, config);
        }
        instance.polish(&mut logits, config.max_iters);
        instance.restore_balance(model, &mut logits, config.residual_tolerance);
        if mu <= 0.0 || mu >= MU_CAP {
            break;
        }
        mu *= MU_ESCALATION;
        first_stage = false;
    }
    instance.tape.set_leaf(instance.loss.mu, &[base_mu]);
    instance.load(&logits);
    let loss = instance.tape.value(instance.loss.total).get(0, 0);
    (instance.state_value(), loss)
}

/// Solves one demand instance. Converged attempts are preferred across
/// restarts and base-weight loss picks within a class; at a soft equality
/// weight the penalized loss can genuinely favor dropping generation and
/// paying the balance penalty, so ranking by loss alone would let such an
/// attempt shadow a feasible one. `converged` requires the worst residual
/// within tolerance and not a single violated inequality.
pub fn solve_instance(
    model: &GridModel,
    demand: &Matrix,
    config: &SolveConfig,
) -> Result<SolveResult, SolveError> {
    let mut instance = record_instance(model, demand, &config.penalty);
    let attempts = config.restarts.max(1);
    let mut best: Option<SolveResult> = None;
    for attempt in 0..attempts {
        let start = if attempt == 0 {
            flat_logits(model.n_buses)
        } else {
            random_logits(model.n_buses, attempt)
        };
        let (state, loss) = solve_attempt(&mut instance, model, start, config);
        let report = feasibility_report(model, &state, demand, config.residual_tolerance)?;
        let converged = report.balanced && report.violation_rate == 0.0;
        let better = best.as_ref().is_none_or(|b| {
            if converged != b.converged {
                converged
            } else {
                loss < b.loss
            }
        });
        if better {
            best = Some(SolveResult { state, report, converged, loss });
        }
    }
    Ok(best.expect("at least one attempt"))
}

/// Manifest row for one solved sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSolve {
    pub sample_id: usize,
    pub converged: bool,
    pub cost: f64,
    pub violation_rate: f64,
    pub max_residual: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BatchSolveOutcome {
    pub rows: Vec<SampleSolve>,
    pub states: Vec<BusState>,
    /// Fraction of samples that converged; vacuously 1 for an empty set.
    pub convergence_fraction: f64,
    /// Sample ids whose solve did not converge.
    pub discarded: Vec<usize>,
}

/// Solves every sample of a dataset independently. Samples are split into
/// contiguous chunks, one per worker; results are reassembled in sample
/// order, so the outcome is identical for any worker count.
pub fn batch_solve(
    model: &GridModel,
    dataset: &LoadDataset,
    config: &SolveConfig,
    workers: usize,
) -> Result<BatchSolveOutcome, SolveError> {
    assert!(workers >= 1, "need at least one worker");
    if dataset.bus_ids != model.bus_ids {
        return Err(SolveError::CaseMismatch(format!(
            "dataset indexes {} buses, model has {}",
            dataset.bus_ids.len(),
            model.n_buses
        )));
    }
    let solve_chunk = |chunk: &[Matrix]| -> Result<Vec<SolveResult>, SolveError> {
        chunk.iter().map(|demand| solve_instance(model, demand, config)).collect()
    };
    let chunk_len = dataset.samples.len().div_ceil(workers).max(1);
    let results: Vec<SolveResult> = if workers == 1 || dataset.samples.len() <= chunk_len {
        solve_chunk(&dataset.samples)?
    } else {
        let per_chunk: Vec<Result<Vec<SolveResult>, SolveError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = dataset
                .samples
                .chunks(chunk_len)
                .map(|chunk| scope.spawn(move || solve_chunk(chunk)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("solve worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(dataset.samples.len());
        for chunk in per_chunk {
            all.extend(chunk?);
        }
        all
    };
    let mut outcome = BatchSolveOutcome::default();
    for (sample_id, result) in results.into_iter().enumerate() {
        outcome.rows.push(SampleSolve {
            sample_id,
            converged: result.converged,
            cost: result.report.generation_cost,
            violation_rate: result.report.violation_rate,
            max_residual: result.report.max_equality_residual,
        });
        if !result.converged {
            outcome.discarded.push(sample_id);
        }
        outcome.states.push(result.state);
    }
    outcome.convergence_fraction = if outcome.rows.is_empty() {
        1.0
    } else {
        outcome.rows.iter().filter(|r| r.converged).count() as f64 / outcome.rows.len() as f64
    };
    Ok(outcome)
}
