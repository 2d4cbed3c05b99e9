//! One function per subcommand. Shared conventions: inputs are read-only,
//! every output directory receives exactly one run manifest, and all
//! reported numbers come from the library so the CLI adds plumbing only.

use std::fs;
use std::path::Path;

use serde_json::json;

use opfgnn::case::{parse_matpower, NetworkCase};
use opfgnn::config::{load_run_config, RunConfig};
use opfgnn::dataset::{load_dataset, sample_loads, save_dataset, LoadDataset};
use opfgnn::gnn::{load_checkpoint, save_checkpoint, GsoFingerprint};
use opfgnn::grid::{build_grid_model, GridModel};
use opfgnn::metrics::{feasibility_report, ConstraintKind, DEFAULT_EQUALITY_TOLERANCE};
use opfgnn::solve::{batch_solve, SampleSolve};
use opfgnn::train::{evaluate_test_set, train as train_network};

use crate::failure::{from_config, from_solve, from_train, io_failure, Failure};
use crate::manifest::ManifestBuilder;
use crate::states::{read_state_csv, state_csv};

/// Spectral-radius refinement for the `graph` report.
const SPECTRUM_TOLERANCE: f64 = 1e-9;
const SPECTRUM_MAX_ITERS: usize = 10_000;

fn read_case(path: &Path) -> Result<NetworkCase, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure("reading", path, e))?;
    parse_matpower(&text)
        .map_err(|e| Failure::runtime(format!("parsing {}: {e}", path.display())))
}

fn read_run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => load_run_config(p).map_err(from_config),
        None => Ok(RunConfig::default()),
    }
}

fn build_model(case: &NetworkCase, config: &RunConfig) -> Result<(GridModel, f64), Failure> {
    let alpha = config.gso.resolve_alpha(case);
    let model = build_grid_model(case, alpha, config.gso.beta, config.gso.normalize)
        .map_err(Failure::runtime)?;
    Ok((model, alpha))
}

fn read_dataset(dir: &Path, case: &NetworkCase) -> Result<LoadDataset, Failure> {
    let dataset = load_dataset(dir)
        .map_err(|e| Failure::runtime(format!("loading dataset {}: {e}", dir.display())))?;
    if let Some(warning) = dataset.case_mismatch_warning(&case.name) {
        eprintln!("warning: {warning}");
    }
    Ok(dataset)
}

fn make_out_dir(out: &Path, inputs: &[&Path]) -> Result<(), Failure> {
    if let Ok(canonical_out) = out.canonicalize() {
        for input in inputs {
            if input.canonicalize().is_ok_and(|p| p == canonical_out) {
                return Err(Failure::usage(format!(
                    "output directory {} would overwrite an input",
                    out.display()
                )));
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| io_failure("creating", out, e))
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| io_failure("writing", path, e))
}

fn total_demand(case: &NetworkCase) -> (f64, f64) {
    case.buses.iter().fold((0.0, 0.0), |(p, q), b| (p + b.demand.re, q + b.demand.im))
}

pub fn parse(case_path: &Path, json_out: Option<&Path>) -> Result<(), Failure> {
    let case = read_case(case_path)?;
    let (p, q) = total_demand(&case);
    println!(
        "parsed {}: {} buses, {} generators, {} branches, base {} MVA",
        case.name,
        case.buses.len(),
        case.generators.len(),
        case.branches.len(),
        case.base_mva,
    );
    println!(
        "total demand {p:.4} + j{q:.4} p.u. ({:.2} MW, {:.2} MVAr)",
        p * case.base_mva,
        q * case.base_mva
    );
    if let Some(path) = json_out {
        let summary = json!({
            "name": case.name,
            "base_mva": case.base_mva,
            "buses": case.buses.len(),
            "generators": case.generators.len(),
            "branches": case.branches.len(),
            "total_demand": { "p": p, "q": q },
        });
        write_file(path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    }
    Ok(())
}

pub fn graph(
    case_path: &Path,
    alpha: Option<f64>,
    beta: f64,
    normalize: bool,
    edges_out: Option<&Path>,
) -> Result<(), Failure> {
    if alpha.is_some_and(|a| !(a >= 0.0)) {
        return Err(Failure::usage("--alpha must be nonnegative"));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Failure::usage("--beta must lie in [0, 1)"));
    }
    let case = read_case(case_path)?;
    let alpha = alpha.unwrap_or_else(|| opfgnn::grid::default_alpha(&case));
    let model = build_grid_model(&case, alpha, beta, normalize).map_err(Failure::runtime)?;
    // Parallel branches between the same buses combine into one candidate.
    let candidates: std::collections::BTreeSet<(u32, u32)> = case
        .branches
        .iter()
        .map(|b| (b.from_bus.min(b.to_bus), b.from_bus.max(b.to_bus)))
        .collect();
    let kept = model.gso.edge_count();
    let radius = model
        .gso
        .spectral_radius(SPECTRUM_TOLERANCE, SPECTRUM_MAX_ITERS)
        .map_err(Failure::runtime)?;
    println!("gso for {}: alpha {alpha}, beta {beta}, normalized {normalize}", case.name);
    println!(
        "edges kept {kept} of {} candidate pairs ({} dropped)",
        candidates.len(),
        candidates.len() - kept
    );
    println!("spectral radius {radius}");
    if let Some(path) = edges_out {
        let mut body = String::from("from_bus,to_bus,weight\n");
        for (i, j, w) in model.gso.entries().filter(|&(i, j, _)| i < j) {
            body.push_str(&format!("{},{},{w}\n", model.bus_ids[i], model.bus_ids[j]));
        }
        write_file(path, &body)?;
    }
    Ok(())
}

pub fn sample(
    case_path: &Path,
    n: usize,
    seed: u64,
    low: f64,
    high: f64,
    out: &Path,
) -> Result<(), Failure> {
    if n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    if !(0.0 <= low && low <= high) {
        return Err(Failure::usage(format!("need 0 <= low <= high, got [{low}, {high}]")));
    }
    let mut builder = ManifestBuilder::new("sample");
    builder.input(case_path)?;
    let case = read_case(case_path)?;
    make_out_dir(out, &[case_path])?;
    let dataset = sample_loads(&case, n, seed, low, high);
    save_dataset(&dataset, out)
        .map_err(|e| Failure::runtime(format!("writing dataset {}: {e}", out.display())))?;
    builder.write(
        out,
        json!({ "n": n, "low": low, "high": high }),
        Some(seed),
        None,
        Some(json!({ "samples": n, "buses": dataset.bus_ids.len() })),
    )?;
    println!("wrote {n} samples for case {} to {}", case.name, out.display());
    Ok(())
}

pub fn train(
    case_path: &Path,
    data: &Path,
    config_path: Option<&Path>,
    out: &Path,
    workers: usize,
) -> Result<(), Failure> {
    let mut builder = ManifestBuilder::new("train");
    builder.input(case_path)?;
    if let Some(cfg) = config_path {
        builder.input(cfg)?;
    }
    builder.dataset_inputs(data)?;
    let case = read_case(case_path)?;
    let config = read_run_config(config_path)?;
    let (model, alpha) = build_model(&case, &config)?;
    let dataset = read_dataset(data, &case)?;
    make_out_dir(out, &[case_path, data])?;

    let train_config = config.train_config();
    let (params, history) =
        train_network(&train_config, &dataset, &model, workers).map_err(from_train)?;

    let fingerprint = GsoFingerprint {
        case_name: case.name.clone(),
        alpha,
        beta: config.gso.beta,
        normalize: config.gso.normalize,
    };
    let checkpoint_path = out.join("checkpoint.json");
    save_checkpoint(&checkpoint_path, &config.gnn, &fingerprint, &params)
        .map_err(|e| Failure::runtime(format!("writing checkpoint: {e}")))?;
    history
        .write_csv(&out.join("history.csv"))
        .map_err(|e| io_failure("writing", &out.join("history.csv"), e))?;
    let last = history.epochs.last().expect("at least one epoch");
    builder.write(
        out,
        serde_json::to_value(config).expect("config serializes"),
        Some(train_config.seed),
        Some(workers),
        Some(json!({
            "epochs": history.epochs.len(),
            "final_train_loss": last.train_loss,
            "final_val_loss": last.val_loss,
            "final_val_violation_rate": last.val_violation_rate,
        })),
    )?;
    println!(
        "trained {} epochs on {} samples; final train_loss {}, val_loss {}",
        history.epochs.len(),
        dataset.samples.len(),
        last.train_loss,
        last.val_loss,
    );
    println!("checkpoint -> {}", checkpoint_path.display());
    Ok(())
}

pub fn solve(
    case_path: &Path,
    data: &Path,
    config_path: Option<&Path>,
    out: &Path,
    workers: usize,
) -> Result<(), Failure> {
    let mut builder = ManifestBuilder::new("solve");
    builder.input(case_path)?;
    if let Some(cfg) = config_path {
        builder.input(cfg)?;
    }
    builder.dataset_inputs(data)?;
    let case = read_case(case_path)?;
    let config = read_run_config(config_path)?;
    let (model, _) = build_model(&case, &config)?;
    let dataset = read_dataset(data, &case)?;
    make_out_dir(out, &[case_path, data])?;

    let outcome =
        batch_solve(&model, &dataset, &config.solve_config(), workers).map_err(from_solve)?;

    write_file(
        &out.join("results.json"),
        &serde_json::to_string_pretty(&outcome.rows).expect("rows serialize"),
    )?;
    let states_dir = out.join("states");
    fs::create_dir_all(&states_dir).map_err(|e| io_failure("creating", &states_dir, e))?;
    for (demand, (row, state)) in
        dataset.samples.iter().zip(outcome.rows.iter().zip(&outcome.states))
    {
        let path = states_dir.join(format!("sample_{:06}.csv", row.sample_id));
        write_file(&path, &state_csv(&dataset.bus_ids, demand, state))?;
    }
    builder.write(
        out,
        serde_json::to_value(config).expect("config serializes"),
        None,
        Some(workers),
        Some(json!({
            "convergence_fraction": outcome.convergence_fraction,
            "discarded": outcome.discarded,
        })),
    )?;
    println!(
        "solved {} samples: {} converged (fraction {})",
        outcome.rows.len(),
        outcome.rows.len() - outcome.discarded.len(),
        outcome.convergence_fraction,
    );
    println!("results -> {}", out.join("results.json").display());
    Ok(())
}

pub fn eval(
    case_path: &Path,
    checkpoint_path: &Path,
    data: &Path,
    baseline: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let mut builder = ManifestBuilder::new("eval");
    builder.input(case_path)?;
    builder.input(checkpoint_path)?;
    builder.dataset_inputs(data)?;
    let case = read_case(case_path)?;
    let checkpoint = load_checkpoint(checkpoint_path)
        .map_err(|e| Failure::runtime(format!("loading checkpoint: {e}")))?;
    if checkpoint.gso.case_name != case.name {
        return Err(Failure::usage(format!(
            "checkpoint was trained on case {:?}, not {:?}",
            checkpoint.gso.case_name, case.name
        )));
    }
    let model = build_grid_model(
        &case,
        checkpoint.gso.alpha,
        checkpoint.gso.beta,
        checkpoint.gso.normalize,
    )
    .map_err(Failure::runtime)?;
    let dataset = read_dataset(data, &case)?;
    let baseline_rows: Option<Vec<(bool, f64)>> = match baseline {
        Some(dir) => {
            let path = dir.join("results.json");
            builder.input(&path)?;
            let text = fs::read_to_string(&path).map_err(|e| io_failure("reading", &path, e))?;
            let rows: Vec<SampleSolve> = serde_json::from_str(&text)
                .map_err(|e| Failure::runtime(format!("parsing {}: {e}", path.display())))?;
            Some(rows.into_iter().map(|r| (r.converged, r.cost)).collect())
        }
        None => None,
    };
    make_out_dir(out, &[case_path, data])?;

    let aggregate = evaluate_test_set(
        &checkpoint.config,
        &checkpoint.params,
        &model,
        &dataset,
        baseline_rows.as_deref(),
    )
    .map_err(from_train)?;

    write_file(
        &out.join("aggregate.json"),
        &serde_json::to_string_pretty(&aggregate).expect("aggregate serializes"),
    )?;
    let mut errors = String::from("sample_id,cost,violation_rate,max_residual,balanced");
    for kind in ConstraintKind::ALL {
        errors.push_str(&format!(",{}_max_error", kind.as_str()));
    }
    errors.push('\n');
    for (sample_id, report) in aggregate.reports.iter().enumerate() {
        errors.push_str(&format!(
            "{sample_id},{},{},{},{}",
            report.generation_cost,
            report.violation_rate,
            report.max_equality_residual,
            report.balanced,
        ));
        for kind in ConstraintKind::ALL {
            let max = report
                .kinds
                .iter()
                .find(|k| k.kind == kind)
                .map_or(0.0, |k| k.max_relative_error);
            errors.push_str(&format!(",{max}"));
        }
        errors.push('\n');
    }
    write_file(&out.join("errors.csv"), &errors)?;

    let baseline_summary = aggregate.baseline.as_ref().map(|b| {
        json!({ "eligible_samples": b.eligible_samples, "mean_cost_ratio": b.mean_cost_ratio })
    });
    builder.write(
        out,
        json!({ "gnn": checkpoint.config, "gso": checkpoint.gso }),
        None,
        None,
        Some(json!({
            "samples": aggregate.samples,
            "mean_cost": aggregate.mean_cost,
            "mean_violation_rate": aggregate.mean_violation_rate,
            "violated_sample_fraction": aggregate.violated_sample_fraction,
            "baseline": baseline_summary,
        })),
    )?;
    println!(
        "evaluated {} samples: mean cost {}, mean violation rate {}, violated fraction {}",
        aggregate.samples,
        aggregate.mean_cost,
        aggregate.mean_violation_rate,
        aggregate.violated_sample_fraction,
    );
    if let Some(comparison) = &aggregate.baseline {
        match comparison.mean_cost_ratio {
            Some(ratio) => println!(
                "cost ratio vs baseline {ratio} over {} eligible samples",
                comparison.eligible_samples
            ),
            None => println!("no samples eligible for baseline comparison"),
        }
    }
    Ok(())
}

pub fn check(case_path: &Path, state_path: &Path, json_out: Option<&Path>) -> Result<(), Failure> {
    let case = read_case(case_path)?;
    let (demand, state) = read_state_csv(state_path, &case)?;
    // Metrics ignore the GSO, so the graph knobs are irrelevant here.
    let model =
        build_grid_model(&case, 0.0, 0.0, false).map_err(Failure::runtime)?;
    let report = feasibility_report(&model, &state, &demand, DEFAULT_EQUALITY_TOLERANCE)
        .map_err(Failure::runtime)?;
    println!("cost {}", report.generation_cost);
    let instances: usize = report.kinds.iter().map(|k| k.count).sum();
    let violated: usize = report.kinds.iter().map(|k| k.violations).sum();
    println!("violation rate {} ({violated} of {instances} inequalities)", report.violation_rate);
    println!(
        "max equality residual {} (tolerance {}): {}",
        report.max_equality_residual,
        report.equality_tolerance,
        if report.balanced { "balanced" } else { "unbalanced" },
    );
    for k in &report.kinds {
        println!(
            "{}: {} instances, {} violated, max error {}",
            k.kind.as_str(),
            k.count,
            k.violations,
            k.max_relative_error,
        );
    }
    if let Some(path) = json_out {
        write_file(path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(())
}
