//! Unsupervised training of the dispatch network over a load dataset.
//!
//! Each epoch shuffles the training split, walks it in mini-batches, and
//! takes one optimizer step per batch on the mean per-sample gradient.
//! Validation runs after every epoch and the parameters with the best
//! validation loss are the ones returned. Given the same config, dataset,
//! and worker count, training is bitwise deterministic (wall-clock columns
//! excepted): batches reduce gradients in sample order within each worker's
//! contiguous chunk and combine chunks in worker order.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::dataset::LoadDataset;
use crate::gnn::{
    gnn_forward, init_params, record_forward, GnnConfig, GnnParams, TapedGnn,
};
use crate::grid::GridModel;
use crate::loss::{record_loss, LossNodes, PenaltyConfig};
use crate::matrix::Matrix;
use crate::metrics::{
    feasibility_report, inequality_margins, relative_errors, violation_rate, ConstraintKind,
    FeasibilityReport, MetricsError, DEFAULT_EQUALITY_TOLERANCE,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a fixed list of parameter tensors. Adam keeps
/// bias-corrected moment estimates per tensor; sgd is the plain rule
/// p <- p - eta g.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: i32,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Self {
            kind,
            learning_rate,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One descent step; `params` and `grads` are aligned tensor lists.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "optimizer tensor count mismatch");
        let eta = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    assert_eq!(p.shape(), g.shape(), "optimizer shape mismatch");
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= eta * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| vec![0.0; g.data().len()]).collect();
                    self.second_moment = self.first_moment.clone();
                }
                self.step_count += 1;
                let correct1 = 1.0 - ADAM_BETA1.powi(self.step_count);
                let correct2 = 1.0 - ADAM_BETA2.powi(self.step_count);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    assert_eq!(p.shape(), g.shape(), "optimizer shape mismatch");
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gv;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = m[j] / correct1;
                        let v_hat = v[j] / correct2;
                        *pv -= eta * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub penalty: PenaltyConfig,
    pub gnn: GnnConfig,
    /// Governs the validation split and the per-epoch batch shuffles;
    /// parameter initialization uses `gnn.seed`.
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            penalty: PenaltyConfig::default(),
            gnn: GnnConfig::default(),
            seed: 0,
            validation_fraction: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the validation split is empty.
    pub val_loss: f64,
    pub val_violation_rate: f64,
    /// Wall-clock; excluded from the determinism guarantee.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_violation_rate,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_violation_rate, e.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset was sampled from a different case: {0}")]
    CaseMismatch(String),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error("dataset has no usable samples")]
    EmptyDataset,
    #[error("baseline results cover {baseline} samples but the test set has {samples}")]
    MisalignedBaseline { samples: usize, baseline: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Seed-deterministic holdout: shuffles 0..n and takes the first
/// `round(n * fraction)` indices as validation. `train` reproduces exactly
/// this split for the same `(n, fraction, seed)`.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_with_rng(&mut rng, n, fraction)
}

fn split_with_rng(rng: &mut ChaCha8Rng, n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    assert!((0.0..1.0).contains(&fraction), "validation fraction must lie in [0, 1)");
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let val_count = (n as f64 * fraction).round() as usize;
    let train = indices.split_off(val_count);
    (train, indices)
}

/// One worker's private replayable graph: forward pass plus loss, recorded
/// once and re-driven per sample through the demand and parameter leaves.
struct BatchWorker {
    tape: Tape,
    taped: TapedGnn,
    leaves: Vec<NodeId>,
    loss: LossNodes,
    grad_sum: Vec<Matrix>,
}

impl BatchWorker {
    fn new(model: &GridModel, config: &TrainConfig, template: &GnnParams) -> Self {
        let mut tape = Tape::new();
        let placeholder = Matrix::zeros(model.n_buses, 2);
        let taped = record_forward(&mut tape, model, &config.gnn, template, &placeholder);
        let loss = record_loss(&mut tape, model, &config.penalty, taped.state);
        let leaves: Vec<NodeId> = taped.param_leaves.iter().flatten().copied().collect();
        let grad_sum = leaves
            .iter()
            .map(|&l| {
                let (r, c) = tape.value(l).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self { tape, taped, leaves, loss, grad_sum }
    }

    fn load_params(&mut self, flat: &[Matrix]) {
        for (&leaf, p) in self.leaves.iter().zip(flat) {
            self.tape.set_leaf(leaf, p.data());
        }
    }

    /// Accumulates loss and parameter gradients over `samples` in order;
    /// returns the summed loss.
    fn accumulate(&mut self, flat: &[Matrix], samples: &[&Matrix]) -> f64 {
        self.load_params(flat);
        for g in &mut self.grad_sum {
            g.fill(0.0);
        }
        let mut loss_sum = 0.0;
        for sample in samples {
            self.tape.set_leaf(self.taped.demand, sample.data());
            self.tape.forward();
            self.tape.backward(self.loss.total);
            loss_sum += self.tape.value(self.loss.total).get(0, 0);
            for (acc, &leaf) in self.grad_sum.iter_mut().zip(&self.leaves) {
                *acc += self.tape.grad(leaf);
            }
        }
        loss_sum
    }

    /// Mean loss and mean violation rate over a sample set, without
    /// touching gradients.
    fn evaluate(
        &mut self,
        flat: &[Matrix],
        samples: &[&Matrix],
        model: &GridModel,
    ) -> Result<(f64, f64), MetricsError> {
        self.load_params(flat);
        let mut loss_sum = 0.0;
        let mut rate_sum = 0.0;
        for sample in samples {
            self.tape.set_leaf(self.taped.demand, sample.data());
            self.tape.forward();
            loss_sum += self.tape.value(self.loss.total).get(0, 0);
            let state = self.taped.state_value(&self.tape);
            let margins = inequality_margins(model, &state, sample);
            rate_sum += violation_rate(&relative_errors(&margins)?);
        }
        let n = samples.len() as f64;
        Ok((loss_sum / n, rate_sum / n))
    }
}

fn flatten(params: &GnnParams) -> Vec<Matrix> {
    params.tensors().cloned().collect()
}

fn unflatten(config: &GnnConfig, flat: &[Matrix]) -> GnnParams {
    let mut iter = flat.iter().cloned();
    let layers = (0..config.layers)
        .map(|_| (0..=config.taps).map(|_| iter.next().expect("tensor count")).collect())
        .collect();
    GnnParams { layers }
}

/// Runs one mini-batch over the worker pool: contiguous sample chunks, one
/// per worker, gradients summed within each chunk in sample order and chunks
/// combined in worker order. Returns the batch loss sum and the summed
/// gradient per tensor.
fn run_batch(
    workers: &mut [BatchWorker],
    flat: &[Matrix],
    samples: &[&Matrix],
) -> (f64, Vec<Matrix>) {
    let chunk_len = samples.len().div_ceil(workers.len());
    let active = samples.len().div_ceil(chunk_len);
    let mut loss_sum = 0.0;
    if active == 1 {
        loss_sum = workers[0].accumulate(flat, samples);
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = workers
                .iter_mut()
                .zip(samples.chunks(chunk_len))
                .map(|(worker, chunk)| scope.spawn(move || worker.accumulate(flat, chunk)))
                .collect();
            for handle in handles {
                loss_sum += handle.join().expect("batch worker panicked");
            }
        });
    }
    let mut grads: Vec<Matrix> =
        flat.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    for worker in workers.iter().take(active) {
        for (total, part) in grads.iter_mut().zip(&worker.grad_sum) {
            *total += part;
        }
    }
    (loss_sum, grads)
}

/// Trains the network on `dataset`, returning the parameters that achieved
/// the best validation loss together with the per-epoch history.
pub fn train(
    config: &TrainConfig,
    dataset: &LoadDataset,
    model: &GridModel,
    workers: usize,
) -> Result<(GnnParams, TrainHistory), TrainError> {
    assert!(workers >= 1, "need at least one worker");
    assert!(config.epochs >= 1 && config.batch_size >= 1, "invalid train config");
    if dataset.bus_ids != model.bus_ids {
        return Err(TrainError::CaseMismatch(format!(
            "dataset indexes {} buses, model has {}",
            dataset.bus_ids.len(),
            model.n_buses
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, val_idx) =
        split_with_rng(&mut rng, dataset.samples.len(), config.validation_fraction);
    if train_idx.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let val_samples: Vec<&Matrix> = val_idx.iter().map(|&i| &dataset.samples[i]).collect();

    let init = init_params(&config.gnn);
    let mut flat = flatten(&init);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut pool: Vec<BatchWorker> =
        (0..workers).map(|_| BatchWorker::new(model, config, &init)).collect();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Matrix>)> = None;
    let mut order = train_idx;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&Matrix> = batch.iter().map(|&i| &dataset.samples[i]).collect();
            let (batch_loss, mut grads) = run_batch(&mut pool, &flat, &samples);
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    value: batch_loss,
                });
            }
            epoch_loss_sum += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.map_in_place(|x| x * scale);
            }
            optimizer.step(&mut flat, &grads);
        }

        let (val_loss, val_violation_rate) = if val_samples.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            pool[0].evaluate(&flat, &val_samples, model)?
        };
        if !val_loss.is_nan() && best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, flat.clone()));
        }
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss_sum / order.len() as f64,
            val_loss,
            val_violation_rate,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    let chosen = best.map(|(_, p)| p).unwrap_or(flat);
    Ok((unflatten(&config.gnn, &chosen), history))
}

/// Per-kind max relative errors across samples, histogram-ready.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindErrors {
    pub kind: ConstraintKind,
    pub max_errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    /// Samples with zero network violations and a converged baseline.
    pub eligible_samples: usize,
    /// Mean of per-sample cost ratios (network / baseline) over the
    /// eligible samples; absent when none qualify.
    pub mean_cost_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestAggregate {
    pub samples: usize,
    pub mean_cost: f64,
    pub mean_violation_rate: f64,
    /// Fraction of samples with at least one violated inequality.
    pub violated_sample_fraction: f64,
    pub per_kind_max_errors: Vec<KindErrors>,
    pub baseline: Option<BaselineComparison>,
    pub reports: Vec<FeasibilityReport>,
}

/// Evaluates trained parameters on a test dataset. `baseline` pairs each
/// sample with (converged, cost) from the per-instance solver; the cost
/// ratio is restricted to samples where the network violated nothing and
/// the baseline converged.
pub fn evaluate_test_set(
    gnn: &GnnConfig,
    params: &GnnParams,
    model: &GridModel,
    test: &LoadDataset,
    baseline: Option<&[(bool, f64)]>,
) -> Result<TestAggregate, TrainError> {
    if test.samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if test.bus_ids != model.bus_ids {
        return Err(TrainError::CaseMismatch(format!(
            "dataset indexes {} buses, model has {}",
            test.bus_ids.len(),
            model.n_buses
        )));
    }
    if let Some(b) = baseline {
        if b.len() != test.samples.len() {
            return Err(TrainError::MisalignedBaseline {
                samples: test.samples.len(),
                baseline: b.len(),
            });
        }
    }

    let reports: Vec<FeasibilityReport> = test
        .samples
        .iter()
        .map(|demand| {
            let state = gnn_forward(gnn, params, model, demand);
            feasibility_report(model, &state, demand, DEFAULT_EQUALITY_TOLERANCE)
        })
        .collect::<Result<_, _>>()?;

    let n = reports.len() as f64;
    let mean_cost = reports.iter().map(|r| r.generation_cost).sum::<f64>() / n;
    let mean_violation_rate = reports.iter().map(|r| r.violation_rate).sum::<f64>() / n;
    let violated_sample_fraction =
        reports.iter().filter(|r| r.violation_rate > 0.0).count() as f64 / n;
    let per_kind_max_errors = ConstraintKind::ALL
        .into_iter()
        .filter_map(|kind| {
            let max_errors: Vec<f64> = reports
                .iter()
                .filter_map(|r| {
                    r.kinds.iter().find(|k| k.kind == kind).map(|k| k.max_relative_error)
                })
                .collect();
            (!max_errors.is_empty()).then_some(KindErrors { kind, max_errors })
        })
        .collect();
    let baseline = baseline.map(|pairs| {
        let ratios: Vec<f64> = reports
            .iter()
            .zip(pairs)
            .filter(|(r, (converged, _))| r.violation_rate == 0.0 && *converged)
            .map(|(r, (_, cost))| r.generation_cost / cost)
            .collect();
        BaselineComparison {
            eligible_samples: ratios.len(),
            mean_cost_ratio: (!ratios.is_empty())
                .then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        }
    });

    Ok(TestAggregate {
        samples: reports.len(),
        mean_cost,
        mean_violation_rate,
        violated_sample_fraction,
        per_kind_max_errors,
        baseline,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::parse_matpower;
    use crate::dataset::sample_loads;
    use crate::gnn::Nonlinearity;
    use crate::grid::build_grid_model;
    use crate::loss::total_loss;

    const PAIR: &str = "\
function mpc = pair
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0   0  0  0  1  1.0  0  135  1  1.06  0.94;
    2  1  30  8  0  0  1  1.0  0  135  1  1.05  0.95;
];
mpc.gen = [ 1  35  0  60  -40  1.0  100  1  80  0; ];
mpc.branch = [ 1  2  0.02  0.1  0.02  40  0  0  0  0  1  -25  25; ];
mpc.gencost = [ 2  0  0  3  0.05  12  0; ];
";

    fn pair_model() -> GridModel {
        build_grid_model(&parse_matpower(PAIR).unwrap(), 1.0, 0.0, true).unwrap()
    }

    fn small_config(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: lr,
            optimizer: OptimizerKind::Adam,
            penalty: PenaltyConfig::default(),
            gnn: GnnConfig {
                layers: 2,
                taps: 2,
                width: 4,
                nonlinearity: Nonlinearity::Tanh,
                seed: 5,
            },
            seed: 17,
            validation_fraction: 0.1,
        }
    }

    #[test]
    fn sgd_step_matches_hand_values() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut params = vec![Matrix::scalar(1.0)];
        opt.step(&mut params, &[Matrix::scalar(2.0)]);
        assert!((params[0].get(0, 0) - 0.8).abs() <= 1e-16);
        opt.step(&mut params, &[Matrix::scalar(0.0)]);
        assert_eq!(params[0].get(0, 0), 0.8, "zero gradient leaves params alone");
    }

    #[test]
    fn adam_first_step_has_near_unit_direction() {
        // Hand-evaluated bias-corrected update for a single constant
        // gradient: m_hat / (sqrt(v_hat) + eps) at step 1.
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.001);
        let mut params = vec![Matrix::scalar(0.7), Matrix::scalar(-0.2)];
        opt.step(&mut params, &[Matrix::scalar(2.0), Matrix::scalar(-0.5)]);
        assert!((params[0].get(0, 0) - (0.7 - 0.001 * 0.99999999500000002)).abs() <= 1e-15);
        assert!((params[1].get(0, 0) - (-0.2 + 0.001 * 0.9999999800000004)).abs() <= 1e-15);
    }

    #[test]
    fn training_reduces_the_loss() {
        let case = parse_matpower(PAIR).unwrap();
        let model = pair_model();
        let dataset = sample_loads(&case, 100, 1, 0.9, 1.1);
        let config = small_config(50, 1e-2);
        let (_, history) = train(&config, &dataset, &model, 1).unwrap();
        assert_eq!(history.epochs.len(), 50);
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < first, "no descent: first {first}, last {last}");
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let case = parse_matpower(PAIR).unwrap();
        let model = pair_model();
        let dataset = sample_loads(&case, 24, 2, 0.9, 1.1);
        let config = small_config(4, 1e-3);
        let (params_a, hist_a) = train(&config, &dataset, &model, 1).unwrap();
        let (params_b, hist_b) = train(&config, &dataset, &model, 1).unwrap();
        for (a, b) in hist_a.epochs.iter().zip(&hist_b.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
            assert_eq!(a.val_violation_rate.to_bits(), b.val_violation_rate.to_bits());
        }
        for (a, b) in params_a.tensors().zip(params_b.tensors()) {
            let bits = |m: &Matrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn two_workers_are_deterministic_too() {
        let case = parse_matpower(PAIR).unwrap();
        let model = pair_model();
        let dataset = sample_loads(&case, 24, 3, 0.9, 1.1);
        let config = small_config(3, 1e-3);
        let (params_a, hist_a) = train(&config, &dataset, &model, 2).unwrap();
        let (params_b, hist_b) = train(&config, &dataset, &model, 2).unwrap();
        for (a, b) in hist_a.epochs.iter().zip(&hist_b.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        }
        for (a, b) in params_a.tensors().zip(params_b.tensors()) {
            let bits = |m: &Matrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn cost_only_training_drifts_toward_cheap_output() {
        // With lambda = mu = 0 the objective is the generation cost alone,
        // which increases in P^g, so training pushes the generator's output
        // down from the sigmoid midpoint.
        let case = parse_matpower(PAIR).unwrap();
        let model = pair_model();
        let dataset = sample_loads(&case, 40, 4, 0.9, 1.1);
        let mut config = small_config(30, 1e-2);
        config.penalty.lambda = 0.0;
        config.penalty.mu = 0.0;
        let initial = init_params(&config.gnn);
        let (trained, _) = train(&config, &dataset, &model, 1).unwrap();
        let demand = &dataset.samples[0];
        let before = gnn_forward(&config.gnn, &initial, &model, demand);
        let after = gnn_forward(&config.gnn, &trained, &model, demand);
        let sg = |s: &crate::grid::BusState| s.p(0) + demand.get(0, 0);
        assert!(sg(&after) < sg(&before), "{} !< {}", sg(&after), sg(&before));
    }

    #[test]
    fn exploding_step_reports_epoch_and_batch() {
        let case = parse_matpower(PAIR).unwrap();
        let model = pair_model();
        // The head keeps the loss finite for any finite parameters, so the
        // abort is provoked by overflowing the update itself: the next
        // forward pass turns inf params into NaN against zero demand rows.
        let dataset = sample_loads(&case, 20, 5, 0.9, 1.1);
        let mut config = small_config(5, 1e308);
        config.optimizer = OptimizerKind::Sgd;
        let err = train(&config, &dataset, &model, 1).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { epoch, batch, value } => {
                assert!(epoch < 5);
                assert!(batch < 2);
                assert!(!value.is_finite());
            }
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
    }

    #[test]
    fn gradient_points_downhill_at_a_fixed_point() {
        // Probe the descent direction: a small sgd step along the batch
        // gradient must reduce the plain loss.
        let case = parse_matpower(PAIR).unwrap();
        let model = pair_model();
        let dataset = sample_loads(&case, 1, 42, 1.0, 1.0);
        // The equality penalty makes this point stiff; the probe step must
        // sit well inside the basin for the first-order prediction to hold.
        let config = small_config(1, 1e-7);
        let params = init_params(&config.gnn);
        let mut worker = BatchWorker::new(&model, &config, &params);
        let mut flat = flatten(&params);
        let demand = &dataset.samples[0];
        worker.accumulate(&flat, &[demand]);
        let before = total_loss(
            &model,
            &gnn_forward(&config.gnn, &params, &model, demand),
            demand,
            &config.penalty,
        );
        let mut probe = Optimizer::new(OptimizerKind::Sgd, config.learning_rate / 10.0);
        probe.step(&mut flat, &worker.grad_sum);
        let stepped = unflatten(&config.gnn, &flat);
        let after = total_loss(
            &model,
            &gnn_forward(&config.gnn, &stepped, &model, demand),
            demand,
            &config.penalty,
        );
        assert!(after.total < before.total, "{} !< {}", after.total, before.total);
    }

    #[test]
    fn returned_params_match_the_best_validation_epoch() {
        let case = parse_matpower(PAIR).unwrap();
        let model = pair_model();
        let dataset = sample_loads(&case, 30, 6, 0.9, 1.1);
        let config = small_config(6, 2e-2);
        let (params, history) = train(&config, &dataset, &model, 1).unwrap();
        let (_, val_idx) =
            validation_split(dataset.samples.len(), config.validation_fraction, config.seed);
        assert!(!val_idx.is_empty());
        let mut val_loss = 0.0;
        for &i in &val_idx {
            let demand = &dataset.samples[i];
            let state = gnn_forward(&config.gnn, &params, &model, demand);
            val_loss += total_loss(&model, &state, demand, &config.penalty).total;
        }
        val_loss /= val_idx.len() as f64;
        let best = history.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(
            (val_loss - best).abs() <= 1e-9 * best.abs().max(1.0),
            "returned params give {val_loss}, best epoch was {best}"
        );
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let history = TrainHistory {
            epochs: vec![
                EpochStats {
                    epoch: 0,
                    train_loss: 1.5,
                    val_loss: 1.25,
                    val_violation_rate: 0.5,
                    seconds: 0.25,
                },
                EpochStats {
                    epoch: 1,
                    train_loss: 1.25,
                    val_loss: 1.125,
                    val_violation_rate: 0.25,
                    seconds: 0.25,
                },
            ],
        };
        let csv = history.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,train_loss,val_loss,val_violation_rate,seconds");
        assert_eq!(lines[1], "0,1.5,1.25,0.5,0.25");
    }

    #[test]
    fn evaluation_aggregates_and_restricts_the_cost_ratio() {
        let case = parse_matpower(PAIR).unwrap();
        let model = pair_model();
        let dataset = sample_loads(&case, 5, 7, 0.95, 1.05);
        let config = small_config(1, 1e-3);
        let mut params = init_params(&config.gnn);
        for t in params.tensors_mut() {
            t.fill(0.0);
        }
        let plain = evaluate_test_set(&config.gnn, &params, &model, &dataset, None).unwrap();
        assert_eq!(plain.samples, 5);
        assert_eq!(plain.mean_violation_rate, 0.0, "midpoint state is comfortably feasible");
        assert_eq!(plain.violated_sample_fraction, 0.0);
        assert!(plain.baseline.is_none());
        assert_eq!(plain.reports.len(), 5);

        // Baseline costs double the network's: ratio 0.5 wherever eligible;
        // the non-converged sample is excluded no matter its cost.
        let mut pairs: Vec<(bool, f64)> =
            plain.reports.iter().map(|r| (true, 2.0 * r.generation_cost)).collect();
        pairs[2] = (false, 1e-9);
        let judged =
            evaluate_test_set(&config.gnn, &params, &model, &dataset, Some(&pairs)).unwrap();
        let comparison = judged.baseline.unwrap();
        assert_eq!(comparison.eligible_samples, 4);
        assert!((comparison.mean_cost_ratio.unwrap() - 0.5).abs() <= 1e-12);

        let again = evaluate_test_set(&config.gnn, &params, &model, &dataset, None).unwrap();
        assert_eq!(again, plain, "evaluation is deterministic");
    }

    #[test]
    fn evaluation_rejects_bad_inputs() {
        let case = parse_matpower(PAIR).unwrap();
        let model = pair_model();
        let config = small_config(1, 1e-3);
        let params = init_params(&config.gnn);
        let mut empty = sample_loads(&case, 1, 0, 1.0, 1.0);
        empty.samples.clear();
        let err = evaluate_test_set(&config.gnn, &params, &model, &empty, None).unwrap_err();
        assert!(matches!(err, TrainError::EmptyDataset));

        let dataset = sample_loads(&case, 4, 0, 0.9, 1.1);
        let short = [(true, 1.0); 3];
        let err = evaluate_test_set(&config.gnn, &params, &model, &dataset, Some(&short))
            .unwrap_err();
        assert!(matches!(err, TrainError::MisalignedBaseline { samples: 4, baseline: 3 }));
    }
}
