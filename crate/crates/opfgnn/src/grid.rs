//! Evaluation-ready network model: branch flows, power balance, demand and
//! generation aggregation, generation cost, and the graph-shift operator.
//!
//! Buses are re-indexed 0..N in case-file order; every array here is in that
//! order. All quantities are per-unit.

use num_complex::Complex64;
use thiserror::Error;

use crate::case::{BusType, CostPolynomial, NetworkCase};
use crate::matrix::{Matrix, SparseSym, SpectralError};

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_GSO_NORMALIZE: bool = true;

/// Power-iteration tolerance for the GSO normalization; the spectral radius
/// of the normalized operator must sit within 1e-6 of 1, so the eigenvalue
/// itself is resolved three orders tighter.
const SPECTRAL_TOL: f64 = 1e-9;
const SPECTRAL_MAX_ITERS: usize = 100_000;

#[derive(Clone, Debug)]
pub struct GridGen {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: CostPolynomial,
}

#[derive(Clone, Debug)]
pub struct GridBranch {
    pub from: usize,
    pub to: usize,
    /// Series admittance 1/(r + jx).
    pub y_series: Complex64,
    /// Half the line-charging susceptance, as an admittance, at each end.
    pub y_charge: Complex64,
    /// Complex tap T = tap * e^{j shift} on the from side.
    pub tap: Complex64,
    pub rate_max: Option<f64>,
    pub angle_bounds: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GridModel {
    pub n_buses: usize,
    pub bus_ids: Vec<u32>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub shunt: Vec<Complex64>,
    pub gens: Vec<GridGen>,
    pub branches: Vec<GridBranch>,
    pub gso: SparseSym,
    pub reference_bus: usize,
}

/// Operating point as an N x 4 matrix with columns p, q, v, delta.
#[derive(Clone, Debug, PartialEq)]
pub struct BusState {
    data: Matrix,
}

impl BusState {
    pub fn new(data: Matrix) -> Self {
        assert_eq!(data.cols(), 4, "bus state needs columns p, q, v, delta");
        BusState { data }
    }

    pub fn from_parts(p: &[f64], q: &[f64], v: &[f64], delta: &[f64]) -> Self {
        let n = p.len();
        assert!(q.len() == n && v.len() == n && delta.len() == n, "bus state column lengths differ");
        let mut data = Matrix::zeros(n, 4);
        for i in 0..n {
            data.set(i, 0, p[i]);
            data.set(i, 1, q[i]);
            data.set(i, 2, v[i]);
            data.set(i, 3, delta[i]);
        }
        BusState { data }
    }

    pub fn n_buses(&self) -> usize {
        self.data.rows()
    }

    pub fn p(&self, i: usize) -> f64 {
        self.data.get(i, 0)
    }

    pub fn q(&self, i: usize) -> f64 {
        self.data.get(i, 1)
    }

    pub fn v(&self, i: usize) -> f64 {
        self.data.get(i, 2)
    }

    pub fn delta(&self, i: usize) -> f64 {
        self.data.get(i, 3)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.data.column(c)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("bus {bus_id} hosts {count} generators; at most one is supported")]
    MultipleGenerators { bus_id: u32, count: usize },
    #[error("case has no reference bus")]
    NoReferenceBus,
    #[error("case has {0} reference buses; exactly one is required")]
    MultipleReferenceBuses(usize),
    #[error("graph-shift operator has no surviving edges (alpha/beta prune everything)")]
    EmptyGraph,
    #[error("unknown bus id {0}")]
    UnknownBus(u32),
    #[error("gso normalization failed: {0}")]
    Normalization(#[from] SpectralError),
}

/// Scale-free default for the GSO decay: ln(2) times the median squared
/// series-admittance magnitude over graph edges, which puts the median edge
/// weight at exp(-ln 2) = 0.5.
pub fn default_alpha(case: &NetworkCase) -> f64 {
    let mut combined: std::collections::BTreeMap<(u32, u32), Complex64> =
        std::collections::BTreeMap::new();
    for br in &case.branches {
        let key = ordered_pair(br.from_bus, br.to_bus);
        *combined.entry(key).or_insert(Complex64::new(0.0, 0.0)) += br.series_impedance.inv();
    }
    let mut mags: Vec<f64> = combined.values().map(|y| y.norm_sqr()).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let mid = mags.len() / 2;
    let median =
        if mags.len() % 2 == 1 { mags[mid] } else { 0.5 * (mags[mid - 1] + mags[mid]) };
    std::f64::consts::LN_2 * median
}

fn ordered_pair(a: u32, b: u32) -> (u32, u32) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn build_grid_model(
    case: &NetworkCase,
    alpha: f64,
    beta: f64,
    normalize_gso: bool,
) -> Result<GridModel, GridError> {
    assert!(alpha >= 0.0, "alpha must be nonnegative, got {alpha}");
    assert!((0.0..1.0).contains(&beta), "beta must lie in [0, 1), got {beta}");
    let n = case.buses.len();
    let index = |bus_id: u32| case.bus_index(bus_id).ok_or(GridError::UnknownBus(bus_id));

    let refs: Vec<usize> = case
        .buses
        .iter()
        .enumerate()
        .filter_map(|(i, b)| (b.bus_type == BusType::Reference).then_some(i))
        .collect();
    let reference_bus = match refs.as_slice() {
        [] => return Err(GridError::NoReferenceBus),
        [one] => *one,
        many => return Err(GridError::MultipleReferenceBuses(many.len())),
    };

    let mut gens = Vec::with_capacity(case.generators.len());
    let mut gen_count = vec![0usize; n];
    for g in &case.generators {
        let bus = index(g.bus_id)?;
        gen_count[bus] += 1;
        if gen_count[bus] > 1 {
            return Err(GridError::MultipleGenerators { bus_id: g.bus_id, count: gen_count[bus] });
        }
        gens.push(GridGen {
            bus,
            p_min: g.p_min,
            p_max: g.p_max,
            q_min: g.q_min,
            q_max: g.q_max,
            cost: g.cost.clone(),
        });
    }

    let mut branches = Vec::with_capacity(case.branches.len());
    // Parallel branches stay separate in the flow equations but pool their
    // series admittance for the graph weight.
    let mut combined: std::collections::BTreeMap<(usize, usize), Complex64> =
        std::collections::BTreeMap::new();
    for br in &case.branches {
        let from = index(br.from_bus)?;
        let to = index(br.to_bus)?;
        let y_series = br.series_impedance.inv();
        branches.push(GridBranch {
            from,
            to,
            y_series,
            y_charge: Complex64::new(0.0, br.total_charging / 2.0),
            tap: Complex64::from_polar(br.tap_ratio, br.phase_shift),
            rate_max: br.rate_max,
            angle_bounds: br.angle_bounds,
        });
        let key = if from <= to { (from, to) } else { (to, from) };
        *combined.entry(key).or_insert(Complex64::new(0.0, 0.0)) += y_series;
    }

    let edges: Vec<(usize, usize, f64)> = combined
        .iter()
        .filter_map(|(&(i, j), y)| {
            let w = (-alpha / y.norm_sqr()).exp();
            (w > beta).then_some((i, j, w))
        })
        .collect();
    if edges.is_empty() {
        return Err(GridError::EmptyGraph);
    }
    let mut gso = SparseSym::from_pairs(n, &edges);
    if normalize_gso {
        let radius = gso.spectral_radius(SPECTRAL_TOL, SPECTRAL_MAX_ITERS)?;
        gso.scale(1.0 / radius);
    }

    Ok(GridModel {
        n_buses: n,
        bus_ids: case.buses.iter().map(|b| b.bus_id).collect(),
        v_min: case.buses.iter().map(|b| b.v_min).collect(),
        v_max: case.buses.iter().map(|b| b.v_max).collect(),
        shunt: case.buses.iter().map(|b| b.shunt).collect(),
        gens,
        branches,
        gso,
        reference_bus,
    })
}

/// Per-bus generation capability box: the generator's limits where one is
/// attached, the degenerate [0, 0] box everywhere else.
#[derive(Clone, Debug)]
pub struct BusBoxes {
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
}

impl GridModel {
    pub fn bus_index(&self, bus_id: u32) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == bus_id)
    }

    pub fn generator_boxes(&self) -> BusBoxes {
        let n = self.n_buses;
        let mut boxes = BusBoxes {
            p_min: vec![0.0; n],
            p_max: vec![0.0; n],
            q_min: vec![0.0; n],
            q_max: vec![0.0; n],
        };
        for g in &self.gens {
            boxes.p_min[g.bus] = g.p_min;
            boxes.p_max[g.bus] = g.p_max;
            boxes.q_min[g.bus] = g.q_min;
            boxes.q_max[g.bus] = g.q_max;
        }
        boxes
    }

    pub fn gen_at(&self, bus: usize) -> Option<&GridGen> {
        self.gens.iter().find(|g| g.bus == bus)
    }

    /// Complex sending-end and receiving-end flows (S_fwd, S_rev) for every
    /// branch, with V_k = v_k e^{j delta_k}.
    pub fn branch_flows(&self, v: &[f64], delta: &[f64]) -> Vec<(Complex64, Complex64)> {
        self.branches
            .iter()
            .map(|br| {
                let vi = Complex64::from_polar(v[br.from], delta[br.from]);
                let vj = Complex64::from_polar(v[br.to], delta[br.to]);
                branch_flow_pair(br, vi, vj)
            })
            .collect()
    }

    /// Per-bus complex power mismatch: injection minus shunt consumption
    /// minus all flows leaving through attached branches (both orientations).
    /// Zero means the state satisfies the power-flow equations.
    pub fn power_balance_residual(&self, state: &BusState) -> Vec<Complex64> {
        let v = state.column(2);
        let delta = state.column(3);
        let flows = self.branch_flows(&v, &delta);
        let mut residual: Vec<Complex64> = (0..self.n_buses)
            .map(|i| {
                Complex64::new(state.p(i), state.q(i)) - self.shunt[i].conj() * v[i] * v[i]
            })
            .collect();
        for (br, (s_fwd, s_rev)) in self.branches.iter().zip(&flows) {
            residual[br.from] -= s_fwd;
            residual[br.to] -= s_rev;
        }
        residual
    }

    /// Sums raw (bus_id, complex demand) loads into an N x 2 matrix.
    pub fn aggregate_demand(&self, loads: &[(u32, Complex64)]) -> Result<Matrix, GridError> {
        let mut out = Matrix::zeros(self.n_buses, 2);
        for &(bus_id, s) in loads {
            let i = self.bus_index(bus_id).ok_or(GridError::UnknownBus(bus_id))?;
            out.set(i, 0, out.get(i, 0) + s.re);
            out.set(i, 1, out.get(i, 1) + s.im);
        }
        Ok(out)
    }

    /// Per-bus generation implied by a state and the demand it serves:
    /// S^g = [p q] + S^d.
    pub fn generation_from_state(&self, state: &BusState, demand: &Matrix) -> Matrix {
        assert_eq!(demand.shape(), (self.n_buses, 2), "demand shape mismatch");
        Matrix::from_fn(self.n_buses, 2, |i, c| {
            let injection = if c == 0 { state.p(i) } else { state.q(i) };
            injection + demand.get(i, c)
        })
    }

    /// Total generation cost in currency per hour: each generator's
    /// polynomial evaluated at its bus's active generation.
    pub fn generation_cost(&self, generation: &Matrix) -> f64 {
        self.gens.iter().map(|g| g.cost.evaluate(generation.get(g.bus, 0))).sum()
    }
}

fn branch_flow_pair(br: &GridBranch, vi: Complex64, vj: Complex64) -> (Complex64, Complex64) {
    let y = br.y_series;
    let yc = br.y_charge;
    let t = br.tap;
    let t2 = t.norm_sqr();
    let s_fwd = (y + yc).conj() * vi.norm_sqr() / t2 - y.conj() * vi * vj.conj() / t;
    let s_rev = (y + yc).conj() * vj.norm_sqr() - y.conj() * vj * vi.conj() / t.conj();
    (s_fwd, s_rev)
}

/// The case's own bus demands as an N x 2 matrix (the load scenario the
/// file ships with).
pub fn reference_demand(case: &NetworkCase) -> Matrix {
    Matrix::from_fn(case.buses.len(), 2, |i, c| {
        if c == 0 {
            case.buses[i].demand.re
        } else {
            case.buses[i].demand.im
        }
    })
}
