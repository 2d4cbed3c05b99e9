//! Feasibility assessment: how far an operating point strays outside each
//! inequality constraint, and how often.
//!
//! Every bounded constraint instance becomes one [`ConstraintMargin`].
//! Absolute errors measure one-sided exceedance; relative errors divide by a
//! per-instance normalizer derived from the constraint's own width, falling
//! back to the mean positive width of its kind when the box is degenerate.
//! Equality (power balance) residuals are reported by magnitude but never
//! enter the violation rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BusState, GridModel};
use crate::matrix::Matrix;

/// Residual magnitude below which a state is considered balanced.
pub const DEFAULT_EQUALITY_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    GenP,
    GenQ,
    VoltageMag,
    RateFwd,
    RateRev,
    AngleDiff,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 6] = [
        ConstraintKind::GenP,
        ConstraintKind::GenQ,
        ConstraintKind::VoltageMag,
        ConstraintKind::RateFwd,
        ConstraintKind::RateRev,
        ConstraintKind::AngleDiff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintKind::GenP => "gen_p",
            ConstraintKind::GenQ => "gen_q",
            ConstraintKind::VoltageMag => "voltage_mag",
            ConstraintKind::RateFwd => "rate_fwd",
            ConstraintKind::RateRev => "rate_rev",
            ConstraintKind::AngleDiff => "angle_diff",
        }
    }
}

impl std::fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One bounded constraint instance: its measured value and its box.
/// `element_id` indexes generators (gen kinds), buses (voltage), or branches
/// (rate and angle kinds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintMargin {
    pub kind: ConstraintKind,
    pub element_id: usize,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("every {kind} constraint has zero width; no normalizer exists for relative errors")]
    NoNormalizer { kind: ConstraintKind },
}

/// One-sided exceedance: how far `value` sits outside [lower, upper].
/// An absent bound contributes nothing.
pub fn absolute_error(value: f64, lower: Option<f64>, upper: Option<f64>) -> f64 {
    let above = upper.map_or(0.0, |u| (value - u).max(0.0));
    let below = lower.map_or(0.0, |l| (l - value).max(0.0));
    above + below
}

impl ConstraintMargin {
    pub fn absolute_error(&self) -> f64 {
        absolute_error(self.value, self.lower, self.upper)
    }

    /// Box width when both bounds are present; `None` marks a width that
    /// needs the kind-level fallback normalizer.
    fn width(&self) -> Option<f64> {
        match (self.lower, self.upper) {
            (Some(l), Some(u)) if u - l > 0.0 => Some(u - l),
            _ => None,
        }
    }
}

/// Enumerates every bounded inequality instance for one operating point:
/// generator active and reactive output (S^g = [p q] + S^d at the
/// generator's bus), voltage magnitude per bus, apparent-power loading per
/// rated branch and orientation (bounded by [0, rate]), and angle spread per
/// angle-limited branch. Branches without a rate or angle limit are omitted.
pub fn inequality_margins(
    model: &GridModel,
    state: &BusState,
    demand: &Matrix,
) -> Vec<ConstraintMargin> {
    let generation = model.generation_from_state(state, demand);
    let v = state.column(2);
    let delta = state.column(3);
    let flows = model.branch_flows(&v, &delta);

    let mut out = Vec::new();
    for (g, gen) in model.gens.iter().enumerate() {
        out.push(ConstraintMargin {
            kind: ConstraintKind::GenP,
            element_id: g,
            value: generation.get(gen.bus, 0),
            lower: Some(gen.p_min),
            upper: Some(gen.p_max),
        });
    }
    for (g, gen) in model.gens.iter().enumerate() {
        out.push(ConstraintMargin {
            kind: ConstraintKind::GenQ,
            element_id: g,
            value: generation.get(gen.bus, 1),
            lower: Some(gen.q_min),
            upper: Some(gen.q_max),
        });
    }
    for i in 0..model.n_buses {
        out.push(ConstraintMargin {
            kind: ConstraintKind::VoltageMag,
            element_id: i,
            value: v[i],
            lower: Some(model.v_min[i]),
            upper: Some(model.v_max[i]),
        });
    }
    for (kind, pick) in [
        (ConstraintKind::RateFwd, 0usize),
        (ConstraintKind::RateRev, 1usize),
    ] {
        for (b, br) in model.branches.iter().enumerate() {
            if let Some(rate) = br.rate_max {
                let flow = if pick == 0 { flows[b].0 } else { flows[b].1 };
                out.push(ConstraintMargin {
                    kind,
                    element_id: b,
                    value: flow.norm(),
                    lower: Some(0.0),
                    upper: Some(rate),
                });
            }
        }
    }
    for (b, br) in model.branches.iter().enumerate() {
        if let Some((lo, hi)) = br.angle_bounds {
            out.push(ConstraintMargin {
                kind: ConstraintKind::AngleDiff,
                element_id: b,
                value: delta[br.from] - delta[br.to],
                lower: Some(lo),
                upper: Some(hi),
            });
        }
    }
    out
}

/// Divides each margin's absolute error by its normalizer: the margin's own
/// box width when positive, otherwise the mean positive width among margins
/// of the same kind. Output order matches input order.
pub fn relative_errors(margins: &[ConstraintMargin]) -> Result<Vec<f64>, MetricsError> {
    let mut width_sum = std::collections::HashMap::new();
    for m in margins {
        if let Some(w) = m.width() {
            let entry = width_sum.entry(m.kind).or_insert((0.0f64, 0usize));
            entry.0 += w;
            entry.1 += 1;
        }
    }
    margins
        .iter()
        .map(|m| {
            let eta = match m.width() {
                Some(w) => w,
                None => {
                    let (sum, count) = width_sum
                        .get(&m.kind)
                        .ok_or(MetricsError::NoNormalizer { kind: m.kind })?;
                    sum / *count as f64
                }
            };
            Ok(m.absolute_error() / eta)
        })
        .collect()
}

/// Fraction of constraint instances sitting strictly outside their bounds.
pub fn violation_rate(relative_errors: &[f64]) -> f64 {
    assert!(!relative_errors.is_empty(), "violation rate of an empty constraint set");
    let violated = relative_errors.iter().filter(|&&e| e > 0.0).count();
    violated as f64 / relative_errors.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: ConstraintKind,
    pub count: usize,
    pub violations: usize,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Fraction of inequality instances violated; equality residuals are
    /// excluded (they are tracked by magnitude below).
    pub violation_rate: f64,
    pub kinds: Vec<KindSummary>,
    /// Largest power-balance residual magnitude over all buses.
    pub max_equality_residual: f64,
    pub equality_tolerance: f64,
    pub balanced: bool,
    pub generation_cost: f64,
}

/// Full feasibility picture for one operating point. Only constraint kinds
/// that actually occur appear in `kinds`.
pub fn feasibility_report(
    model: &GridModel,
    state: &BusState,
    demand: &Matrix,
    equality_tolerance: f64,
) -> Result<FeasibilityReport, MetricsError> {
    let margins = inequality_margins(model, state, demand);
    let errors = relative_errors(&margins)?;
    let kinds = ConstraintKind::ALL
        .into_iter()
        .filter_map(|kind| {
            let entries: Vec<f64> = margins
                .iter()
                .zip(&errors)
                .filter(|(m, _)| m.kind == kind)
                .map(|(_, &e)| e)
                .collect();
            if entries.is_empty() {
                return None;
            }
            Some(KindSummary {
                kind,
                count: entries.len(),
                violations: entries.iter().filter(|&&e| e > 0.0).count(),
                max_relative_error: entries.iter().fold(0.0f64, |a, &b| a.max(b)),
                mean_relative_error: entries.iter().sum::<f64>() / entries.len() as f64,
            })
        })
        .collect();
    let max_equality_residual = model
        .power_balance_residual(state)
        .iter()
        .map(|r| r.norm())
        .fold(0.0, f64::max);
    let generation = model.generation_from_state(state, demand);
    Ok(FeasibilityReport {
        violation_rate: violation_rate(&errors),
        kinds,
        max_equality_residual,
        equality_tolerance,
        balanced: max_equality_residual <= equality_tolerance,
        generation_cost: model.generation_cost(&generation),
    })
}
