//! Command implementations. Every command validates its inputs before
//! writing anything, and every report embeds the resolved configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, anyhow};
use serde::Serialize;

use finegrain_core::relations::{
    CostMatrix, DEFAULT_ENUMERATION_BUDGET, RelationMatrix, RelationObjectiveValue,
    solve_relations_bruteforce, solve_relations_exact,
};
use finegrain_core::trainer::TrainReport;
use finegrain_core::{WhichParams, datagen, metrics, nn, predict_fine, trainer};

use crate::config::RunConfig;

/// Failures split by exit code: usage and validation problems exit 1,
/// failures during execution exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => format!("{e:#}"),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn usage<T>(err: anyhow::Error) -> CliResult<T> {
    Err(CliError::Usage(err))
}

trait RuntimeContext<T> {
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> RuntimeContext<T> for Result<T, E> {
    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> CliResult {
    let json = serde_json::to_string_pretty(doc).runtime()?;
    std::fs::write(path, json + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GenerateDoc<'a> {
    config: &'a RunConfig,
    fine_class_histogram: Vec<usize>,
    coarse_class_histogram: Vec<usize>,
}

/// Writes `dataset.csv`, `taxonomy.txt` and `generate_meta.json` into the
/// output directory.
pub fn cmd_generate(config: &RunConfig) -> CliResult {
    let seed = config.require_seed().or_else(usage)?;
    let section = &config.generate;
    let spec = section.taxonomy();
    spec.validate()
        .map_err(|e| CliError::Usage(anyhow!("invalid generator spec: {e}")))?;

    let dataset = datagen::generate(&spec, section.num_samples, section.dim, seed)
        .map_err(|e| CliError::Usage(anyhow!("invalid generator spec: {e}")))?;

    let out_dir = PathBuf::from(&config.output.dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .runtime()?;
    datagen::save_csv(&dataset, &out_dir.join("dataset.csv")).runtime()?;
    let taxonomy = RelationMatrix::new(spec.assignment.clone(), spec.num_coarse).runtime()?;
    taxonomy.save(&out_dir.join("taxonomy.txt")).runtime()?;

    let mut fine_hist = vec![0usize; spec.num_fine];
    for &f in dataset.fine_labels.as_ref().expect("generator emits fine labels") {
        fine_hist[f] += 1;
    }
    let mut coarse_hist = vec![0usize; spec.num_coarse];
    for &c in &dataset.coarse_labels {
        coarse_hist[c] += 1;
    }
    write_json(
        &out_dir.join("generate_meta.json"),
        &GenerateDoc {
            config,
            fine_class_histogram: fine_hist,
            coarse_class_histogram: coarse_hist,
        },
    )?;
    eprintln!(
        "generated {} samples ({} fine / {} coarse classes) into {}",
        dataset.len(),
        spec.num_fine,
        spec.num_coarse,
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainDoc<'a> {
    config: &'a RunConfig,
    data_paths: Vec<String>,
    report: &'a TrainReport,
}

/// Trains on one or more datasets; writes `checkpoint.bin`,
/// `relations_<l>.txt` per dataset and `report.json`.
pub fn cmd_train(config: &RunConfig, data_paths: &[PathBuf]) -> CliResult {
    if data_paths.is_empty() {
        return usage(anyhow!("at least one --data path is required"));
    }
    for path in data_paths {
        if !path.is_file() {
            return usage(anyhow!("dataset path {} does not exist", path.display()));
        }
    }
    let mut core_config = config.train_config().or_else(usage)?;

    let mut datasets = Vec::with_capacity(data_paths.len());
    for (l, path) in data_paths.iter().enumerate() {
        let mut dataset = datagen::load_csv(path)
            .map_err(|e| CliError::Usage(anyhow!("loading {}: {e}", path.display())))?;
        dataset.dataset_index = l;
        if core_config.num_fine < dataset.num_coarse {
            return usage(anyhow!(
                "{}: num_fine {} is smaller than the number of coarse classes {}",
                path.display(),
                core_config.num_fine,
                dataset.num_coarse
            ));
        }
        datasets.push(dataset);
    }

    // shrink the neighbor count to fit the smallest coarse class, loudly
    if core_config.switches.fine {
        let mut smallest: Option<(usize, usize, usize)> = None;
        for (l, dataset) in datasets.iter().enumerate() {
            let mut sizes = vec![0usize; dataset.num_coarse];
            for &c in &dataset.coarse_labels {
                sizes[c] += 1;
            }
            for (class, &size) in sizes.iter().enumerate() {
                if size > 0 && smallest.is_none_or(|(_, _, s)| size < s) {
                    smallest = Some((l, class, size));
                }
            }
        }
        if let Some((l, class, size)) = smallest {
            let max_neighbors = size.saturating_sub(1);
            if max_neighbors == 0 {
                return usage(anyhow!(
                    "coarse class {class} of dataset {l} has a single sample; \
                     neighbor retrieval is impossible"
                ));
            }
            if core_config.weights.num_neighbors > max_neighbors {
                eprintln!(
                    "warning: reducing neighbors from {} to {max_neighbors}: coarse class \
                     {class} of dataset {l} has only {size} members",
                    core_config.weights.num_neighbors
                );
                core_config.weights.num_neighbors = max_neighbors;
            }
        }
    }

    let report = match datasets.len() {
        1 => trainer::train_single(&datasets[0], &core_config),
        _ => trainer::train_multi(&datasets, &core_config),
    }
    .runtime()?;

    let out_dir = PathBuf::from(&config.output.dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .runtime()?;
    nn::save_checkpoint(
        &out_dir.join("checkpoint.bin"),
        &report.final_state,
        core_config.seed,
    )
    .runtime()?;
    for (l, relation) in report.final_relations.iter().enumerate() {
        relation
            .save(&out_dir.join(format!("relations_{l}.txt")))
            .runtime()?;
    }
    let data_path_strings = data_paths
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    write_json(
        &out_dir.join("report.json"),
        &TrainDoc {
            config,
            data_paths: data_path_strings,
            report: &report,
        },
    )?;
    eprintln!(
        "trained {} epochs over {} dataset(s); final total loss {:.4}; outputs in {}",
        report.epochs,
        report.final_relations.len(),
        report.trace.total.last().copied().unwrap_or(f64::NAN),
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalDoc<'a> {
    checkpoint: String,
    data: String,
    relations: String,
    reference: String,
    #[serde(flatten)]
    metrics: &'a metrics::MetricsReport,
}

/// Evaluates a checkpoint on a fine-labeled dataset against a reference
/// taxonomy. Prints the metrics JSON and optionally writes it to a file.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    relations: &Path,
    reference: &Path,
    out: Option<&Path>,
) -> CliResult {
    for path in [checkpoint, data, relations, reference] {
        if !path.is_file() {
            return usage(anyhow!("path {} does not exist", path.display()));
        }
    }
    let (state, _seed) = nn::load_checkpoint(checkpoint)
        .map_err(|e| CliError::Usage(anyhow!("loading checkpoint: {e}")))?;
    let dataset = datagen::load_csv(data)
        .map_err(|e| CliError::Usage(anyhow!("loading {}: {e}", data.display())))?;
    let truth = dataset.fine_labels.as_ref().ok_or_else(|| {
        CliError::Usage(anyhow!(
            "{} has no fine labels; evaluation requires them",
            data.display()
        ))
    })?;
    let learned = RelationMatrix::load(relations)
        .map_err(|e| CliError::Usage(anyhow!("loading relations: {e}")))?;
    let reference_m = RelationMatrix::load(reference)
        .map_err(|e| CliError::Usage(anyhow!("loading reference taxonomy: {e}")))?;

    let num_fine = state.theta.output_dim();
    if learned.num_fine() != num_fine {
        return usage(anyhow!(
            "relation file has {} fine classes, checkpoint has {num_fine}",
            learned.num_fine()
        ));
    }
    let pred = predict_fine(&state, WhichParams::Current, &dataset.features).runtime()?;
    let report = metrics::evaluate(&pred, truth, num_fine, &learned, &reference_m).runtime()?;

    let doc = EvalDoc {
        checkpoint: checkpoint.display().to_string(),
        data: data.display().to_string(),
        relations: relations.display().to_string(),
        reference: reference.display().to_string(),
        metrics: &report,
    };
    let json = serde_json::to_string_pretty(&doc).runtime()?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SolveDoc {
    cost: String,
    lambda_m: f64,
    sample_count: f64,
    oracle: bool,
    objective: RelationObjectiveValue,
    parents: Vec<usize>,
}

/// Solves the relation objective for a cost matrix read from CSV. `--oracle`
/// switches to exhaustive enumeration.
pub fn cmd_solve(
    cost_path: &Path,
    lambda_m: f64,
    sample_count: Option<f64>,
    oracle: bool,
    out: Option<&Path>,
) -> CliResult {
    if !cost_path.is_file() {
        return usage(anyhow!("cost path {} does not exist", cost_path.display()));
    }
    let text = std::fs::read_to_string(cost_path).runtime()?;
    let cost = CostMatrix::from_csv(&text, sample_count)
        .map_err(|e| CliError::Usage(anyhow!("parsing cost matrix: {e}")))?;
    let solved = if oracle {
        solve_relations_bruteforce(&cost, lambda_m, DEFAULT_ENUMERATION_BUDGET)
    } else {
        solve_relations_exact(&cost, lambda_m)
    };
    let (relation, objective) = solved
        .map_err(|e| CliError::Usage(anyhow!("solving {} failed: {e}", cost_path.display())))?;

    let mut breakdown = String::new();
    let _ = writeln!(breakdown, "linear:  {:.12}", objective.linear_term);
    let _ = writeln!(breakdown, "balance: {:.12}", objective.balance_term);
    let _ = writeln!(breakdown, "total:   {:.12}", objective.total);
    print!("{breakdown}");
    println!(
        "{}",
        serde_json::to_string_pretty(&SolveDoc {
            cost: cost_path.display().to_string(),
            lambda_m,
            sample_count: cost.sample_count,
            oracle,
            objective,
            parents: relation.parents().to_vec(),
        })
        .runtime()?
    );
    if let Some(path) = out {
        relation.save(path).runtime()?;
    }
    Ok(())
}
