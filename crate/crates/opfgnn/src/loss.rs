//! Penalized dispatch objective: generation cost plus soft constraint terms.
//!
//! Inequality constraints g <= 0 (branch loading, angle spread) enter through
//! a barrier built on the extended logarithm, which is finite for violated
//! constraints instead of diverging, so gradient descent can start from and
//! pass through infeasible points. Power-balance equalities enter as squared
//! residuals. Generator and voltage box constraints never appear here: the
//! network head enforces them by construction.

use serde::{Deserialize, Serialize};

pub use crate::autodiff::{extended_log, extended_log_deriv};
use crate::autodiff::{NodeId, Tape};
use crate::gnn::StateNodes;
use crate::grid::{BusState, GridModel};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    /// Extended-log knot: the barrier switches from logarithmic to linear
    /// once a constraint's slack drops below 1/s.
    pub s: f64,
    /// Barrier temperature: inequality terms carry weight 1/t.
    pub t: f64,
    /// Multiplier on the summed inequality barrier.
    pub lambda: f64,
    /// Multiplier on the summed squared equality residuals.
    pub mu: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { s: 10.0, t: 500.0, lambda: 1.0, mu: 100.0 }
    }
}

/// Barrier for one inequality g <= 0: -(1/t) extlog(-g). Increasing in g,
/// logarithmic while the slack exceeds 1/s, linear beyond the knot, finite
/// everywhere.
pub fn inequality_penalty(g: f64, s: f64, t: f64) -> f64 {
    -extended_log(-g, s) / t
}

/// Penalty for one equality h = 0.
pub fn equality_penalty(h: f64) -> f64 {
    h * h
}

/// The objective split into its three ingredients. `total` is
/// `cost + lambda * inequality_sum + mu * equality_sum`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cost: f64,
    pub inequality_sum: f64,
    pub equality_sum: f64,
}

/// Evaluates the penalized objective for a concrete operating point.
pub fn total_loss(
    model: &GridModel,
    state: &BusState,
    demand: &Matrix,
    cfg: &PenaltyConfig,
) -> LossBreakdown {
    let generation = model.generation_from_state(state, demand);
    let cost = model.generation_cost(&generation);
    let v = state.column(2);
    let delta = state.column(3);
    let flows = model.branch_flows(&v, &delta);
    let mut inequality_sum = 0.0;
    for (br, (s_fwd, s_rev)) in model.branches.iter().zip(&flows) {
        if let Some(rate) = br.rate_max {
            inequality_sum += inequality_penalty(s_fwd.norm_sqr() - rate * rate, cfg.s, cfg.t);
            inequality_sum += inequality_penalty(s_rev.norm_sqr() - rate * rate, cfg.s, cfg.t);
        }
        if let Some((lo, hi)) = br.angle_bounds {
            let theta = delta[br.from] - delta[br.to];
            inequality_sum += inequality_penalty(theta - hi, cfg.s, cfg.t);
            inequality_sum += inequality_penalty(lo - theta, cfg.s, cfg.t);
        }
    }
    let equality_sum: f64 = model
        .power_balance_residual(state)
        .iter()
        .map(|r| equality_penalty(r.re) + equality_penalty(r.im))
        .sum();
    LossBreakdown {
        total: cost + cfg.lambda * inequality_sum + cfg.mu * equality_sum,
        cost,
        inequality_sum,
        equality_sum,
    }
}

/// Tape handles for a recorded loss. `lambda` and `mu` are 1 x 1 leaves, so
/// penalty continuation only needs `set_leaf` plus a replay, never a rebuild.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub cost: NodeId,
    pub inequality_sum: NodeId,
    pub equality_sum: NodeId,
    /// Per-bus active balance residuals, n x 1.
    pub residual_p: NodeId,
    /// Per-bus reactive balance residuals, n x 1.
    pub residual_q: NodeId,
    /// Loading gap |S|^2 - rate^2 at the sending end, one entry per rated
    /// branch; positive means overloaded. Absent without rated branches.
    pub rate_forward_gap: Option<NodeId>,
    /// Loading gap at the receiving end, same layout.
    pub rate_reverse_gap: Option<NodeId>,
    /// Angle spread minus upper bound per angle-bounded branch; positive
    /// means violated. Absent without angle bounds.
    pub angle_upper_gap: Option<NodeId>,
    /// Lower bound minus angle spread, same layout.
    pub angle_lower_gap: Option<NodeId>,
    pub lambda: NodeId,
    pub mu: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).get(0, 0),
            cost: tape.value(self.cost).get(0, 0),
            inequality_sum: tape.value(self.inequality_sum).get(0, 0),
            equality_sum: tape.value(self.equality_sum).get(0, 0),
        }
    }
}

/// Records the penalized objective on top of an already-recorded operating
/// point. Branch flows are expanded into real arithmetic: with per-branch
/// complex constants c1 = (y + yc)* / |T|^2, c2 = y* / T, c3 = (y + yc)*,
/// c4 = y* / T* and theta = delta_f - delta_t,
///
///   Re S_fwd = a1 vf^2 - vf vt (a2 cos - b2 sin)
///   Im S_fwd = b1 vf^2 - vf vt (b2 cos + a2 sin)
///   Re S_rev = a3 vt^2 - vf vt (a4 cos + b4 sin)
///   Im S_rev = b3 vt^2 - vf vt (b4 cos - a4 sin)
///
/// where a_k, b_k are the real and imaginary parts of c_k.
pub fn record_loss(
    tape: &mut Tape,
    model: &GridModel,
    cfg: &PenaltyConfig,
    state: StateNodes,
) -> LossNodes {
    let n = model.n_buses;
    let nb = model.branches.len();
    assert!(nb > 0, "loss needs at least one branch");
    assert_eq!(tape.value(state.p).shape(), (n, 1), "state shape mismatch");

    let lambda = tape.leaf_from(Matrix::scalar(cfg.lambda));
    let mu = tape.leaf_from(Matrix::scalar(cfg.mu));

    // Gather/scatter structure: vf = Gf v, theta = D delta, and transposes
    // push branch quantities back onto buses.
    let gather_f = tape.constant(Matrix::from_fn(nb, n, |b, i| {
        if model.branches[b].from == i { 1.0 } else { 0.0 }
    }));
    let gather_t = tape.constant(Matrix::from_fn(nb, n, |b, i| {
        if model.branches[b].to == i { 1.0 } else { 0.0 }
    }));
    let scatter_f = tape.constant(Matrix::from_fn(n, nb, |i, b| {
        if model.branches[b].from == i { 1.0 } else { 0.0 }
    }));
    let scatter_t = tape.constant(Matrix::from_fn(n, nb, |i, b| {
        if model.branches[b].to == i { 1.0 } else { 0.0 }
    }));
    let diff = tape.constant(Matrix::from_fn(nb, n, |b, i| {
        let br = &model.branches[b];
        if br.from == i {
            1.0
        } else if br.to == i {
            -1.0
        } else {
            0.0
        }
    }));

    let coeff = |tape: &mut Tape, f: &dyn Fn(usize) -> f64| {
        tape.constant(Matrix::from_fn(nb, 1, |b, _| f(b)))
    };
    let c1 = |b: usize| {
        let br = &model.branches[b];
        (br.y_series + br.y_charge).conj() / br.tap.norm_sqr()
    };
    let c2 = |b: usize| {
        let br = &model.branches[b];
        br.y_series.conj() / br.tap
    };
    let c3 = |b: usize| {
        let br = &model.branches[b];
        (br.y_series + br.y_charge).conj()
    };
    let c4 = |b: usize| {
        let br = &model.branches[b];
        br.y_series.conj() / br.tap.conj()
    };
    let a1 = coeff(tape, &|b| c1(b).re);
    let b1 = coeff(tape, &|b| c1(b).im);
    let a2 = coeff(tape, &|b| c2(b).re);
    let b2 = coeff(tape, &|b| c2(b).im);
    let a3 = coeff(tape, &|b| c3(b).re);
    let b3 = coeff(tape, &|b| c3(b).im);
    let a4 = coeff(tape, &|b| c4(b).re);
    let b4 = coeff(tape, &|b| c4(b).im);

    let vf = tape.matmul(gather_f, state.v);
    let vt = tape.matmul(gather_t, state.v);
    let theta = tape.matmul(diff, state.delta);
    let cos_t = tape.cos(theta);
    let sin_t = tape.sin(theta);
    let vf2 = tape.square(vf);
    let vt2 = tape.square(vt);
    let vfvt = tape.mul(vf, vt);

    let flow = |tape: &mut Tape, sq: NodeId, d: NodeId, c_a: NodeId, c_b: NodeId, plus: bool| {
        let term_c = tape.mul(c_a, cos_t);
        let term_s = tape.mul(c_b, sin_t);
        let trig = if plus { tape.add(term_c, term_s) } else { tape.sub(term_c, term_s) };
        let cross = tape.mul(vfvt, trig);
        let own = tape.mul(d, sq);
        tape.sub(own, cross)
    };
    let p_fwd = flow(tape, vf2, a1, a2, b2, false);
    let q_fwd = flow(tape, vf2, b1, b2, a2, true);
    let p_rev = flow(tape, vt2, a3, a4, b4, true);
    let q_rev = flow(tape, vt2, b3, b4, a4, false);

    // res_p = p - gs v^2 - Gf^T p_fwd - Gt^T p_rev, and the shunt enters the
    // reactive residual with flipped sign because consumption conjugates it.
    let gs = tape.constant(Matrix::from_fn(n, 1, |i, _| model.shunt[i].re));
    let bs = tape.constant(Matrix::from_fn(n, 1, |i, _| model.shunt[i].im));
    let v2 = tape.square(state.v);
    let res_p = {
        let shunt_p = tape.mul(gs, v2);
        let into_f = tape.matmul(scatter_f, p_fwd);
        let into_t = tape.matmul(scatter_t, p_rev);
        let a = tape.sub(state.p, shunt_p);
        let b = tape.sub(a, into_f);
        tape.sub(b, into_t)
    };
    let res_q = {
        let shunt_q = tape.mul(bs, v2);
        let into_f = tape.matmul(scatter_f, q_fwd);
        let into_t = tape.matmul(scatter_t, q_rev);
        let a = tape.add(state.q, shunt_q);
        let b = tape.sub(a, into_f);
        tape.sub(b, into_t)
    };
    let equality_sum = {
        let sq_p = tape.square(res_p);
        let sq_q = tape.square(res_q);
        let sp = tape.sum(sq_p);
        let sq = tape.sum(sq_q);
        tape.add(sp, sq)
    };

    // -(1/t) sum extlog(-g) over one column of inequality values.
    let s_knot = cfg.s;
    let t_temp = cfg.t;
    let barrier = |tape: &mut Tape, g: NodeId| {
        let neg_g = tape.neg(g);
        let el = tape.extlog(neg_g, s_knot);
        let total = tape.sum(el);
        tape.scale(total, -1.0 / t_temp)
    };

    let mut inequality_sum = tape.constant_scalar(0.0);
    let mut rate_gaps = [None, None];
    let rated: Vec<usize> =
        (0..nb).filter(|&b| model.branches[b].rate_max.is_some()).collect();
    if !rated.is_empty() {
        let select = tape.constant(Matrix::from_fn(rated.len(), nb, |r, b| {
            if rated[r] == b { 1.0 } else { 0.0 }
        }));
        let rate_sq = tape.constant(Matrix::from_fn(rated.len(), 1, |r, _| {
            let rate = model.branches[rated[r]].rate_max.unwrap();
            rate * rate
        }));
        for (end, (re, im)) in [(p_fwd, q_fwd), (p_rev, q_rev)].into_iter().enumerate() {
            let re_sel = tape.matmul(select, re);
            let im_sel = tape.matmul(select, im);
            let re_sq = tape.square(re_sel);
            let im_sq = tape.square(im_sel);
            let loading = tape.add(re_sq, im_sq);
            let g = tape.sub(loading, rate_sq);
            rate_gaps[end] = Some(g);
            let phi = barrier(tape, g);
            inequality_sum = tape.add(inequality_sum, phi);
        }
    }
    let mut angle_gaps = [None, None];
    let bounded: Vec<usize> =
        (0..nb).filter(|&b| model.branches[b].angle_bounds.is_some()).collect();
    if !bounded.is_empty() {
        let select = tape.constant(Matrix::from_fn(bounded.len(), nb, |r, b| {
            if bounded[r] == b { 1.0 } else { 0.0 }
        }));
        let lo = tape.constant(Matrix::from_fn(bounded.len(), 1, |r, _| {
            model.branches[bounded[r]].angle_bounds.unwrap().0
        }));
        let hi = tape.constant(Matrix::from_fn(bounded.len(), 1, |r, _| {
            model.branches[bounded[r]].angle_bounds.unwrap().1
        }));
        let spread = tape.matmul(select, theta);
        let g_hi = tape.sub(spread, hi);
        let g_lo = tape.sub(lo, spread);
        angle_gaps = [Some(g_hi), Some(g_lo)];
        let phi_hi = barrier(tape, g_hi);
        let phi_lo = barrier(tape, g_lo);
        let phi = tape.add(phi_hi, phi_lo);
        inequality_sum = tape.add(inequality_sum, phi);
    }

    // Polynomial cost via Horner over coefficients padded to a common
    // degree; leading zeros reproduce each generator's own polynomial
    // exactly.
    let cost = if model.gens.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        let n_gen = model.gens.len();
        let select = tape.constant(Matrix::from_fn(n_gen, n, |g, i| {
            if model.gens[g].bus == i { 1.0 } else { 0.0 }
        }));
        let x = tape.matmul(select, state.sg_p);
        let width = model.gens.iter().map(|g| g.cost.coefficients.len()).max().unwrap();
        let padded = |g: usize, k: usize| {
            let coeffs = &model.gens[g].cost.coefficients;
            let pad = width - coeffs.len();
            if k < pad { 0.0 } else { coeffs[k - pad] }
        };
        let mut acc = tape.constant(Matrix::from_fn(n_gen, 1, |g, _| padded(g, 0)));
        for k in 1..width {
            let c_k = tape.constant(Matrix::from_fn(n_gen, 1, |g, _| padded(g, k)));
            let ax = tape.mul(acc, x);
            acc = tape.add(ax, c_k);
        }
        tape.sum(acc)
    };

    let total = {
        let weighted_ineq = tape.mul(lambda, inequality_sum);
        let weighted_eq = tape.mul(mu, equality_sum);
        let partial = tape.add(cost, weighted_ineq);
        tape.add(partial, weighted_eq)
    };

    LossNodes {
        total,
        cost,
        inequality_sum,
        equality_sum,
        residual_p: res_p,
        residual_q: res_q,
        rate_forward_gap: rate_gaps[0],
        rate_reverse_gap: rate_gaps[1],
        angle_upper_gap: angle_gaps[0],
        angle_lower_gap: angle_gaps[1],
        lambda,
        mu,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::case::parse_matpower;
    use crate::gnn::{gnn_forward, init_params, record_forward, GnnConfig, Nonlinearity};
    use crate::grid::build_grid_model;
    use proptest::prelude::*;

    /// Three buses with rates, angle bounds, a transformer, line charging,
    /// a bus shunt, and two generators of different cost degree.
    const LIMITED: &str = "\
function mpc = limited
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0   0  0   0  1  1.0  0  135  1  1.06  0.94;
    2  1  40 10  0   0  1  1.0  0  135  1  1.05  0.95;
    3  2  20  5  1  -2  1  1.0  0  135  1  1.05  0.95;
];
mpc.gen = [
    1  45  0  80  -50  1.0  100  1  100  0;
    3  10  0  30  -20  1.0  100  1  50   0;
];
mpc.branch = [
    1  2  0.05  0.25  0.02  60  0  0  0     0  1  -15  15;
    2  3  0.02  0.10  0.01  40  0  0  0.98  3  1    0   0;
    1  3  0.04  0.20  0     0   0  0  0     0  1  -20  20;
];
mpc.gencost = [
    2  0  0  3  0.02  10  0;
    2  0  0  2  15  0;
];
";

    fn model() -> GridModel {
        build_grid_model(&parse_matpower(LIMITED).unwrap(), 1.0, 0.0, true).unwrap()
    }

    fn forward(seed: u64) -> (GridModel, GnnConfig, crate::gnn::GnnParams, Matrix, BusState) {
        let m = model();
        let cfg = GnnConfig { layers: 2, taps: 2, width: 6, nonlinearity: Nonlinearity::Tanh, seed };
        let params = init_params(&cfg);
        let demand = Matrix::from_vec(3, 2, vec![0.0, 0.0, 0.40, 0.10, 0.20, 0.05]);
        let state = gnn_forward(&cfg, &params, &m, &demand);
        (m, cfg, params, demand, state)
    }

    #[test]
    fn barrier_hits_frozen_values() {
        // At g = 0 the barrier sits on the linear branch: (1 + ln s) / t.
        assert!((inequality_penalty(0.0, 10.0, 500.0) - 0.0066051701859880914).abs() <= 1e-17);
        // Slack 0.1 >= 1/s keeps it logarithmic: -ln(0.1)/500.
        assert!((inequality_penalty(-0.1, 10.0, 500.0) - 0.0046051701859880914).abs() <= 1e-17);
        // Comfortable slack turns the penalty into a reward (negative).
        assert!(inequality_penalty(-2.5, 10.0, 500.0) < 0.0);
        assert!((inequality_penalty(-2.5, 10.0, 500.0) + 0.91629073187415507 / 500.0).abs() <= 1e-17);
    }

    #[test]
    fn unconstrained_network_has_zero_inequality_sum() {
        let text = LIMITED
            .replace("60  0  0  0     0  1  -15  15", "0  0  0  0     0  1  0  0")
            .replace("40  0  0  0.98  3  1    0   0", "0  0  0  0.98  3  1  0  0")
            .replace("0   0  0  0     0  1  -20  20", "0   0  0  0     0  1  0  0");
        let m = build_grid_model(&parse_matpower(&text).unwrap(), 1.0, 0.0, true).unwrap();
        let (_, cfg, params, demand, _) = forward(5);
        let state = gnn_forward(&cfg, &params, &m, &demand);
        let loss = total_loss(&m, &state, &demand, &PenaltyConfig::default());
        assert_eq!(loss.inequality_sum, 0.0);
        assert!(loss.equality_sum > 0.0, "an arbitrary state will not balance");
    }

    #[test]
    fn zero_weights_leave_only_the_cost() {
        let (m, _, _, demand, state) = forward(5);
        let cfg = PenaltyConfig { lambda: 0.0, mu: 0.0, ..PenaltyConfig::default() };
        let loss = total_loss(&m, &state, &demand, &cfg);
        assert_eq!(loss.total, loss.cost);
        assert!(loss.cost > 0.0);
    }

    #[test]
    fn plain_and_taped_losses_agree() {
        let (m, gcfg, params, demand, _) = forward(11);
        let pcfg = PenaltyConfig::default();
        let mut tape = Tape::new();
        let taped = record_forward(&mut tape, &m, &gcfg, &params, &demand);
        let nodes = record_loss(&mut tape, &m, &pcfg, taped.state);
        let from_tape = nodes.breakdown(&tape);
        let state = taped.state_value(&tape);
        let plain = total_loss(&m, &state, &demand, &pcfg);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1.0);
        assert!(rel(plain.total, from_tape.total) <= 1e-10, "{plain:?} vs {from_tape:?}");
        assert!(rel(plain.cost, from_tape.cost) <= 1e-10);
        assert!(rel(plain.inequality_sum, from_tape.inequality_sum) <= 1e-10);
        assert!(rel(plain.equality_sum, from_tape.equality_sum) <= 1e-10);
    }

    #[test]
    fn loss_is_invariant_to_a_global_angle_shift() {
        let (m, _, _, demand, state) = forward(7);
        let cfg = PenaltyConfig::default();
        let base = total_loss(&m, &state, &demand, &cfg);
        let shifted = BusState::from_parts(
            &state.column(0),
            &state.column(1),
            &state.column(2),
            &state.column(3).iter().map(|d| d + 0.37).collect::<Vec<_>>(),
        );
        let moved = total_loss(&m, &shifted, &demand, &cfg);
        assert!((base.total - moved.total).abs() <= 1e-10 * base.total.abs().max(1.0));
    }

    #[test]
    fn taped_loss_gradients_match_finite_differences() {
        let (m, gcfg, params, demand, _) = forward(3);
        let pcfg = PenaltyConfig::default();
        let mut tape = Tape::new();
        let taped = record_forward(&mut tape, &m, &gcfg, &params, &demand);
        let nodes = record_loss(&mut tape, &m, &pcfg, taped.state);
        let leaves: Vec<_> = taped.param_leaves.iter().flatten().copied().collect();
        let worst = finite_difference_check(&mut tape, nodes.total, &leaves, 1e-6);
        assert!(worst <= 1e-5, "discrepancy {worst}");
    }

    #[test]
    fn weight_leaves_expose_their_own_sums_as_gradients() {
        let (m, gcfg, params, demand, _) = forward(3);
        let pcfg = PenaltyConfig::default();
        let mut tape = Tape::new();
        let taped = record_forward(&mut tape, &m, &gcfg, &params, &demand);
        let nodes = record_loss(&mut tape, &m, &pcfg, taped.state);
        tape.backward(nodes.total);
        let b = nodes.breakdown(&tape);
        assert!((tape.grad(nodes.lambda).get(0, 0) - b.inequality_sum).abs() <= 1e-15);
        assert!((tape.grad(nodes.mu).get(0, 0) - b.equality_sum).abs() <= 1e-15);
    }

    #[test]
    fn continuation_tracks_the_weight_leaves() {
        let (m, gcfg, params, demand, _) = forward(9);
        let pcfg = PenaltyConfig::default();
        let mut tape = Tape::new();
        let taped = record_forward(&mut tape, &m, &gcfg, &params, &demand);
        let nodes = record_loss(&mut tape, &m, &pcfg, taped.state);
        let before = nodes.breakdown(&tape);
        tape.set_leaf(nodes.mu, &[pcfg.mu * 10.0]);
        tape.forward();
        let after = nodes.breakdown(&tape);
        let expected =
            before.cost + pcfg.lambda * before.inequality_sum + 10.0 * pcfg.mu * before.equality_sum;
        assert!((after.total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        assert_eq!(after.cost, before.cost);
        assert_eq!(after.equality_sum, before.equality_sum);
    }

    proptest! {
        /// Tighter violations always cost at least as much.
        #[test]
        fn barrier_is_monotone_in_the_violation(g in -50.0f64..50.0, step in 0.0f64..10.0) {
            let lo = inequality_penalty(g, 10.0, 500.0);
            let hi = inequality_penalty(g + step, 10.0, 500.0);
            prop_assert!(hi >= lo, "phi({g}) = {lo} > phi({}) = {hi}", g + step);
        }
    }
}
