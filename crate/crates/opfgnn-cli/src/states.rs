//! Operating-point CSV: one row per bus with the demand the point was
//! solved against and the dispatch state. `solve` writes one such file per
//! sample and `check` reads the same format back, so solver output feeds
//! straight into external verification.

use std::path::Path;

use opfgnn::case::NetworkCase;
use opfgnn::grid::BusState;
use opfgnn::matrix::Matrix;

use crate::failure::{io_failure, Failure};

pub const STATE_HEADER: &str = "bus_id,p_demand,q_demand,p,q,v,delta";

/// Renders a state with its demand; floats print shortest-round-trip, so
/// reading the file back is bit-exact.
pub fn state_csv(bus_ids: &[u32], demand: &Matrix, state: &BusState) -> String {
    let mut out = String::with_capacity(48 * bus_ids.len() + STATE_HEADER.len() + 1);
    out.push_str(STATE_HEADER);
    out.push('\n');
    for (i, &bus_id) in bus_ids.iter().enumerate() {
        out.push_str(&format!(
            "{bus_id},{},{},{},{},{},{}\n",
            demand.get(i, 0),
            demand.get(i, 1),
            state.p(i),
            state.q(i),
            state.v(i),
            state.delta(i),
        ));
    }
    out
}

/// Parses a state CSV against `case`, requiring every case bus exactly once.
pub fn read_state_csv(path: &Path, case: &NetworkCase) -> Result<(Matrix, BusState), Failure> {
    let body = std::fs::read_to_string(path).map_err(|e| io_failure("reading", path, e))?;
    let mut lines = body.lines();
    match lines.next() {
        Some(h) if h.trim() == STATE_HEADER => {}
        other => {
            return Err(Failure::runtime(format!(
                "{}: expected header {STATE_HEADER:?}, found {other:?}",
                path.display()
            )))
        }
    }
    let n = case.buses.len();
    let mut demand = Matrix::zeros(n, 2);
    let mut columns = vec![vec![0.0f64; n]; 4];
    let mut seen = vec![false; n];
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| {
            Failure::runtime(format!("{} row {}: {detail}", path.display(), row + 1))
        };
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", fields.len())));
        }
        let bus_id: u32 =
            fields[0].parse().map_err(|e| bad(format!("bus id {:?}: {e}", fields[0])))?;
        let Some(i) = case.bus_index(bus_id) else {
            return Err(Failure::usage(format!(
                "{} row {}: bus {bus_id} does not exist in case {:?}",
                path.display(),
                row + 1,
                case.name
            )));
        };
        if seen[i] {
            return Err(bad(format!("bus {bus_id} appears twice")));
        }
        seen[i] = true;
        let mut values = [0.0f64; 6];
        for (slot, field) in values.iter_mut().zip(&fields[1..]) {
            *slot = field.parse().map_err(|e| bad(format!("value {field:?}: {e}")))?;
        }
        demand.set(i, 0, values[0]);
        demand.set(i, 1, values[1]);
        for (column, &value) in columns.iter_mut().zip(&values[2..]) {
            column[i] = value;
        }
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(Failure::usage(format!(
            "{}: bus {} of case {:?} has no row",
            path.display(),
            case.buses[i].bus_id,
            case.name
        )));
    }
    let state = BusState::from_parts(&columns[0], &columns[1], &columns[2], &columns[3]);
    Ok((demand, state))
}
