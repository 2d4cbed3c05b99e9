//! MATPOWER case-file parsing and per-unit normalization.
//!
//! All MW/MVAr quantities are divided by the system base on the way in, shunt
//! admittances become complex per-unit values, angles become radians, and
//! cost polynomials are rescaled so they take per-unit active power while
//! returning the same currency figure as the original MW polynomial.
//! Out-of-service generators and branches are dropped here; the rest of the
//! crate only ever sees live equipment.

use num_complex::Complex64;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BusType {
    Pq,
    Pv,
    Reference,
    Isolated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BusRecord {
    pub bus_id: u32,
    pub bus_type: BusType,
    /// Total complex demand at the bus (p.u.).
    pub demand: Complex64,
    /// Shunt admittance (Gs + jBs) / base (p.u.).
    pub shunt: Complex64,
    pub v_min: f64,
    pub v_max: f64,
}

/// Polynomial cost in currency per hour as a function of p.u. active power,
/// coefficients highest degree first.
#[derive(Clone, Debug, PartialEq)]
pub struct CostPolynomial {
    pub coefficients: Vec<f64>,
}

impl CostPolynomial {
    /// A free generator; used when the case file carries no cost data.
    pub fn zero() -> Self {
        CostPolynomial { coefficients: vec![0.0] }
    }

    pub fn evaluate(&self, p: f64) -> f64 {
        self.coefficients.iter().fold(0.0, |acc, &c| acc * p + c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenRecord {
    /// Row index of this generator in the source file (0-based), stable
    /// across the dropping of out-of-service units.
    pub gen_id: usize,
    pub bus_id: u32,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: CostPolynomial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchRecord {
    pub from_bus: u32,
    pub to_bus: u32,
    /// Series impedance r + jx (p.u.).
    pub series_impedance: Complex64,
    /// Total line charging susceptance b (p.u.); half sits at each end.
    pub total_charging: f64,
    /// Off-nominal tap magnitude at the from side; the file's 0 is already
    /// normalized to 1.0 here.
    pub tap_ratio: f64,
    /// Phase shift at the from side (radians).
    pub phase_shift: f64,
    /// Apparent-power limit (p.u.); `None` when the file says unconstrained.
    pub rate_max: Option<f64>,
    /// Angle-difference bounds (radians); `None` when the file says
    /// unconstrained (both entries zero).
    pub angle_bounds: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub generators: Vec<GenRecord>,
    pub branches: Vec<BranchRecord>,
    has_gencost: bool,
}

impl NetworkCase {
    /// Builds a case from already-normalized records, running the same
    /// cross-reference and bound validation as the parser.
    pub fn assemble(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<BusRecord>,
        generators: Vec<GenRecord>,
        branches: Vec<BranchRecord>,
        has_gencost: bool,
    ) -> Result<Self, CaseError> {
        let case = NetworkCase { name: name.into(), base_mva, buses, generators, branches, has_gencost };
        validate(&case)?;
        Ok(case)
    }

    /// Whether the source file carried cost data. Training and solving need
    /// it; flow evaluation does not.
    pub fn has_gencost(&self) -> bool {
        self.has_gencost
    }

    pub fn bus_index(&self, bus_id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.bus_id == bus_id)
    }
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("missing {0} section")]
    MissingSection(&'static str),
    #[error("malformed {section} row {row}: {detail}")]
    Malformed { section: &'static str, row: usize, detail: String },
    #[error("{kind} record {index} references unknown bus {bus_id}")]
    DanglingBusReference { kind: &'static str, index: usize, bus_id: u32 },
    #[error("gencost model {0} is not supported; only polynomial costs (model 2) are")]
    UnsupportedCostModel(i64),
    #[error("invalid case data: {0}")]
    Invalid(String),
}

/// Parses MATPOWER `.m` case text into a per-unit [`NetworkCase`].
pub fn parse_matpower(text: &str) -> Result<NetworkCase, CaseError> {
    let clean = strip_comments(text);
    let name = function_name(&clean)
        .ok_or(CaseError::Invalid("missing function header".into()))?;
    let base_mva = find_scalar(&clean, "baseMVA").ok_or(CaseError::MissingSection("baseMVA"))?;
    if !(base_mva > 0.0) {
        return Err(CaseError::Invalid(format!("baseMVA must be positive, got {base_mva}")));
    }
    let bus_rows = find_matrix(&clean, "bus")?.ok_or(CaseError::MissingSection("bus"))?;
    let gen_rows = find_matrix(&clean, "gen")?.ok_or(CaseError::MissingSection("gen"))?;
    let branch_rows = find_matrix(&clean, "branch")?.ok_or(CaseError::MissingSection("branch"))?;
    let gencost_rows = find_matrix(&clean, "gencost")?;

    let buses = parse_buses(&bus_rows, base_mva)?;
    let mut generators = parse_gens(&gen_rows, base_mva)?;
    let has_gencost = gencost_rows.is_some();
    if let Some(rows) = &gencost_rows {
        attach_costs(&mut generators, rows, base_mva)?;
    }
    // Status filtering happens after cost attachment so gencost rows stay
    // aligned with the gen matrix by position.
    let generators: Vec<GenRecord> =
        generators.into_iter().filter_map(|(on, g)| on.then_some(g)).collect();
    let branches = parse_branches(&branch_rows, base_mva)?;

    let case = NetworkCase { name, base_mva, buses, generators, branches, has_gencost };
    validate(&case)?;
    Ok(case)
}

fn validate(case: &NetworkCase) -> Result<(), CaseError> {
    let mut seen = std::collections::HashSet::new();
    for b in &case.buses {
        if !seen.insert(b.bus_id) {
            return Err(CaseError::Invalid(format!("duplicate bus id {}", b.bus_id)));
        }
        if !(b.v_min > 0.0) || b.v_min > b.v_max {
            return Err(CaseError::Invalid(format!(
                "bus {}: voltage bounds [{}, {}] must satisfy 0 < v_min <= v_max",
                b.bus_id, b.v_min, b.v_max
            )));
        }
    }
    for (i, g) in case.generators.iter().enumerate() {
        if case.bus_index(g.bus_id).is_none() {
            return Err(CaseError::DanglingBusReference { kind: "gen", index: i, bus_id: g.bus_id });
        }
        if g.p_min > g.p_max || g.q_min > g.q_max {
            return Err(CaseError::Invalid(format!(
                "gen {} at bus {}: inverted capability box",
                g.gen_id, g.bus_id
            )));
        }
    }
    for (i, br) in case.branches.iter().enumerate() {
        for end in [br.from_bus, br.to_bus] {
            if case.bus_index(end).is_none() {
                return Err(CaseError::DanglingBusReference { kind: "branch", index: i, bus_id: end });
            }
        }
        if br.from_bus == br.to_bus {
            return Err(CaseError::Invalid(format!("branch {i} connects bus {} to itself", br.from_bus)));
        }
        if br.series_impedance == Complex64::new(0.0, 0.0) {
            return Err(CaseError::Invalid(format!(
                "branch {i} ({} - {}) has zero series impedance",
                br.from_bus, br.to_bus
            )));
        }
    }
    Ok(())
}

fn parse_buses(rows: &[Vec<f64>], base: f64) -> Result<Vec<BusRecord>, CaseError> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() < 13 {
                return Err(CaseError::Malformed {
                    section: "bus",
                    row: i,
                    detail: format!("expected 13 columns, found {}", row.len()),
                });
            }
            let bus_type = match row[1] as i64 {
                1 => BusType::Pq,
                2 => BusType::Pv,
                3 => BusType::Reference,
                4 => BusType::Isolated,
                other => {
                    return Err(CaseError::Malformed {
                        section: "bus",
                        row: i,
                        detail: format!("unknown bus type {other}"),
                    })
                }
            };
            Ok(BusRecord {
                bus_id: int_field("bus", i, row[0])?,
                bus_type,
                demand: Complex64::new(row[2] / base, row[3] / base),
                shunt: Complex64::new(row[4] / base, row[5] / base),
                v_max: row[11],
                v_min: row[12],
            })
        })
        .collect()
}

fn parse_gens(rows: &[Vec<f64>], base: f64) -> Result<Vec<(bool, GenRecord)>, CaseError> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() < 10 {
                return Err(CaseError::Malformed {
                    section: "gen",
                    row: i,
                    detail: format!("expected at least 10 columns, found {}", row.len()),
                });
            }
            let on = row[7] > 0.0;
            Ok((
                on,
                GenRecord {
                    gen_id: i,
                    bus_id: int_field("gen", i, row[0])?,
                    q_max: row[3] / base,
                    q_min: row[4] / base,
                    p_max: row[8] / base,
                    p_min: row[9] / base,
                    cost: CostPolynomial::zero(),
                },
            ))
        })
        .collect()
}

fn attach_costs(
    gens: &mut [(bool, GenRecord)],
    rows: &[Vec<f64>],
    base: f64,
) -> Result<(), CaseError> {
    if rows.len() < gens.len() {
        return Err(CaseError::Invalid(format!(
            "gencost has {} rows for {} generators",
            rows.len(),
            gens.len()
        )));
    }
    // Rows beyond the generator count are reactive-power costs; active-power
    // polynomials are the only costs the objective evaluates.
    for (i, (_, gen)) in gens.iter_mut().enumerate() {
        let row = &rows[i];
        if row.len() < 4 {
            return Err(CaseError::Malformed {
                section: "gencost",
                row: i,
                detail: format!("expected at least 4 columns, found {}", row.len()),
            });
        }
        let model = row[0] as i64;
        if model != 2 {
            return Err(CaseError::UnsupportedCostModel(model));
        }
        let n = int_field("gencost", i, row[3])? as usize;
        if n == 0 || row.len() < 4 + n {
            return Err(CaseError::Malformed {
                section: "gencost",
                row: i,
                detail: format!("declares {n} coefficients but carries {}", row.len() - 4),
            });
        }
        // c_k MW^k = c_k (base * p.u.)^k, so the p.u. coefficient is
        // c_k * base^k; coefficients are stored highest degree first.
        let coefficients = row[4..4 + n]
            .iter()
            .enumerate()
            .map(|(j, &c)| c * base.powi((n - 1 - j) as i32))
            .collect();
        gen.cost = CostPolynomial { coefficients };
    }
    Ok(())
}

fn parse_branches(rows: &[Vec<f64>], base: f64) -> Result<Vec<BranchRecord>, CaseError> {
    let mut out = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if row.len() < 13 {
            return Err(CaseError::Malformed {
                section: "branch",
                row: i,
                detail: format!("expected 13 columns, found {}", row.len()),
            });
        }
        if row[10] == 0.0 {
            continue;
        }
        let (ang_min, ang_max) = (row[11], row[12]);
        out.push(BranchRecord {
            from_bus: int_field("branch", i, row[0])?,
            to_bus: int_field("branch", i, row[1])?,
            series_impedance: Complex64::new(row[2], row[3]),
            total_charging: row[4],
            rate_max: (row[5] != 0.0).then_some(row[5] / base),
            tap_ratio: if row[8] == 0.0 { 1.0 } else { row[8] },
            phase_shift: row[9].to_radians(),
            angle_bounds: (ang_min != 0.0 || ang_max != 0.0)
                .then_some((ang_min.to_radians(), ang_max.to_radians())),
        });
    }
    Ok(out)
}

fn int_field(section: &'static str, row: usize, v: f64) -> Result<u32, CaseError> {
    let r = v.round();
    if (v - r).abs() > 1e-9 || r < 0.0 || r > u32::MAX as f64 {
        return Err(CaseError::Malformed {
            section,
            row,
            detail: format!("expected integer id, found {v}"),
        });
    }
    Ok(r as u32)
}

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| l.split('%').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn function_name(clean: &str) -> Option<String> {
    let line = clean.lines().find(|l| l.trim_start().starts_with("function"))?;
    let rhs = line.split('=').nth(1)?;
    let name = rhs.trim().trim_end_matches(';').trim();
    (!name.is_empty()).then(|| name.to_string())
}

fn find_scalar(clean: &str, key: &str) -> Option<f64> {
    let body = section_body(clean, key)?;
    let end = body.find(';').unwrap_or(body.len());
    body[..end].trim().parse().ok()
}

fn find_matrix(clean: &str, key: &str) -> Result<Option<Vec<Vec<f64>>>, CaseError> {
    let Some(body) = section_body(clean, key) else { return Ok(None) };
    let rest = body.trim_start();
    if !rest.starts_with('[') {
        return Ok(None);
    }
    let close = rest.find(']').ok_or(CaseError::Malformed {
        section: "matrix",
        row: 0,
        detail: format!("unterminated {key} matrix"),
    })?;
    let inner = &rest[1..close];
    let mut rows = Vec::new();
    for raw in inner.split([';', '\n']) {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| CaseError::Malformed {
                section: "matrix",
                row: rows.len(),
                detail: format!("{key}: cannot parse number {tok:?}"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(Some(rows))
}

/// Finds the text following `mpc.<key> =`, requiring a hard token boundary so
/// `gen` does not match `gencost`.
fn section_body<'a>(clean: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("mpc.{key}");
    let mut start = 0;
    while let Some(pos) = clean[start..].find(&pat) {
        let after = start + pos + pat.len();
        let rest = clean[after..].trim_start();
        if let Some(stripped) = rest.strip_prefix('=') {
            return Some(stripped);
        }
        start = after;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = "\
function mpc = mini
mpc.version = '2';
mpc.baseMVA = 100;
% comments are ignored
mpc.bus = [
    1  3  0   0  0  0  1  1.0  0  135  1  1.05  0.95;
    2  1  40 10  1  5  1  1.0  0  135  1  1.05  0.95; % trailing comment
];
mpc.gen = [
    1  45  0  80  -50  1.0  100  1  100  0;
];
mpc.branch = [
    1  2  0.05  0.25  0.04  80  0  0  0.98  1  1  -30  30;
];
mpc.gencost = [
    2  0  0  3  0.005  10  10000;
];
";

    #[test]
    fn mini_case_fields_parse_to_per_unit() {
        let case = parse_matpower(MINI).unwrap();
        assert_eq!(case.name, "mini");
        assert_eq!(case.base_mva, 100.0);
        assert_eq!(case.buses.len(), 2);
        assert_eq!(case.generators.len(), 1);
        assert_eq!(case.branches.len(), 1);
        assert!(case.has_gencost());

        let b2 = &case.buses[1];
        assert_eq!(b2.demand, Complex64::new(0.4, 0.1));
        assert_eq!(b2.shunt, Complex64::new(0.01, 0.05));
        assert_eq!(b2.bus_type, BusType::Pq);
        assert_eq!((b2.v_min, b2.v_max), (0.95, 1.05));

        let g = &case.generators[0];
        assert_eq!((g.p_min, g.p_max), (0.0, 1.0));
        assert_eq!((g.q_min, g.q_max), (-0.5, 0.8));
        // 0.005 MW^-2 * 100^2, 10 MW^-1 * 100, constant unchanged.
        assert_eq!(g.cost.coefficients, vec![50.0, 1000.0, 10000.0]);

        let br = &case.branches[0];
        assert_eq!(br.series_impedance, Complex64::new(0.05, 0.25));
        assert_eq!(br.tap_ratio, 0.98);
        assert_eq!(br.rate_max, Some(0.8));
        assert_eq!(br.phase_shift, 1.0f64.to_radians());
        let (lo, hi) = br.angle_bounds.unwrap();
        assert_eq!((lo, hi), (-(30.0f64.to_radians()), 30.0f64.to_radians()));
    }

    #[test]
    fn cost_polynomial_matches_mw_polynomial() {
        let case = parse_matpower(MINI).unwrap();
        let cost = &case.generators[0].cost;
        for p_mw in [0.0, 12.5, 45.0, 100.0] {
            let original = 0.005 * p_mw * p_mw + 10.0 * p_mw + 10000.0;
            let pu = cost.evaluate(p_mw / 100.0);
            assert!((pu - original).abs() <= 1e-9 * original.abs());
        }
    }

    #[test]
    fn missing_gen_section_is_named() {
        let text = "function mpc = broken\nmpc.baseMVA = 100;\nmpc.bus = [ 1 3 0 0 0 0 1 1 0 135 1 1.05 0.95; ];\n";
        let err = parse_matpower(text).unwrap_err();
        assert_eq!(err.to_string(), "missing gen section");
    }

    #[test]
    fn piecewise_linear_cost_is_rejected() {
        let text = MINI.replace("2  0  0  3  0.005  10  10000", "1  0  0  2  0 0 100 1000");
        let err = parse_matpower(&text).unwrap_err();
        assert!(matches!(err, CaseError::UnsupportedCostModel(1)), "{err}");
    }

    #[test]
    fn out_of_service_equipment_is_dropped() {
        let text = MINI
            .replace(
                "mpc.gen = [\n    1  45  0  80  -50  1.0  100  1  100  0;\n];",
                "mpc.gen = [\n    1  45  0  80  -50  1.0  100  1  100  0;\n    2  0  0  10  -10  1.0  100  0  50  0;\n];",
            )
            .replace(
                "mpc.gencost = [\n    2  0  0  3  0.005  10  10000;\n];",
                "mpc.gencost = [\n    2  0  0  3  0.005  10  10000;\n    2  0  0  2  30  0;\n];",
            )
            .replace(
                "    1  2  0.05  0.25  0.04  80  0  0  0.98  1  1  -30  30;",
                "    1  2  0.05  0.25  0.04  80  0  0  0.98  1  1  -30  30;\n    1  2  0.1  0.4  0  0  0  0  0  0  0  0  0;",
            );
        let case = parse_matpower(&text).unwrap();
        assert_eq!(case.generators.len(), 1, "status-0 generator must be dropped");
        assert_eq!(case.branches.len(), 1, "status-0 branch must be dropped");
        assert_eq!(case.generators[0].gen_id, 0);
    }

    #[test]
    fn gen_shorter_than_gencost_keeps_reactive_rows_ignored() {
        // Two gencost blocks (active + reactive): reactive rows must not
        // overwrite the active polynomials.
        let text = MINI.replace(
            "mpc.gencost = [\n    2  0  0  3  0.005  10  10000;\n];",
            "mpc.gencost = [\n    2  0  0  3  0.005  10  10000;\n    2  0  0  3  1  1  1;\n];",
        );
        let case = parse_matpower(&text).unwrap();
        assert_eq!(case.generators[0].cost.coefficients, vec![50.0, 1000.0, 10000.0]);
    }

    #[test]
    fn dangling_branch_reference_is_reported() {
        let text = MINI.replace(
            "    1  2  0.05  0.25  0.04  80  0  0  0.98  1  1  -30  30;",
            "    1  7  0.05  0.25  0.04  80  0  0  0.98  1  1  -30  30;",
        );
        let err = parse_matpower(&text).unwrap_err();
        assert!(
            matches!(err, CaseError::DanglingBusReference { kind: "branch", bus_id: 7, .. }),
            "{err}"
        );
    }

    #[test]
    fn missing_gencost_yields_zero_costs() {
        let text = MINI.replace("mpc.gencost = [\n    2  0  0  3  0.005  10  10000;\n];", "");
        let case = parse_matpower(&text).unwrap();
        assert!(!case.has_gencost());
        assert_eq!(case.generators[0].cost, CostPolynomial::zero());
    }

    #[test]
    fn parsing_is_pure() {
        assert_eq!(parse_matpower(MINI).unwrap(), parse_matpower(MINI).unwrap());
    }

    #[test]
    fn unconstrained_sentinels_become_absent_bounds() {
        let text = MINI.replace(
            "    1  2  0.05  0.25  0.04  80  0  0  0.98  1  1  -30  30;",
            "    1  2  0.05  0.25  0.04  0  0  0  0  0  1  0  0;",
        );
        let case = parse_matpower(&text).unwrap();
        let br = &case.branches[0];
        assert_eq!(br.rate_max, None);
        assert_eq!(br.angle_bounds, None);
        assert_eq!(br.tap_ratio, 1.0);
        assert_eq!(br.phase_shift, 0.0);
    }
}
