//! The five subcommands: dataset generation, training, separation,
//! sensitivity sweeps, and metric aggregation.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use odfsep_core::metrics::match_fibers;
use odfsep_core::mlp::{self, MeshSampleStream, MlpModel};
use odfsep_core::sh::{Direction, ShVector};
use odfsep_core::simulate::{
    compose_multifiber, generate_dataset, sample_uniform_direction, FiberConfig, OdfSample,
};

use crate::artifacts::{
    self, Checkpoint, DatasetManifest, Provenance, ResultRow, ResultsHeader, SummaryRow,
    SweepCell,
};
use crate::config::ExperimentConfig;
use crate::methods::{hardware_string, parallel_map, run_over_dataset, Method, Separator};
use crate::CliError;

fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance::new(cfg.seed, cfg.hash())
}

/// Default artifact paths inside the output directory.
pub fn dataset_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("dataset.jsonl")
}
pub fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("dataset.manifest.json")
}
pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("checkpoint.json")
}
pub fn loss_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("loss.csv")
}
pub fn results_path(cfg: &ExperimentConfig, method: Method) -> PathBuf {
    cfg.output_dir.join(format!("results_{}.jsonl", method.name()))
}
pub fn sweep_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("sweep.csv")
}
pub fn summary_csv_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("summary.csv")
}
pub fn summary_md_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("summary.md")
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Generates the seeded validation dataset and writes it with its manifest.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(), CliError> {
    let samples = generate_dataset(cfg.seed, cfg.n_two, cfg.n_three, cfg.lmax)
        .map_err(|e| CliError::usage(format!("dataset generation: {e}")))?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dataset_path(cfg));
    let manifest_file = match out {
        Some(p) => p.with_extension("manifest.json"),
        None => manifest_path(cfg),
    };
    let manifest = DatasetManifest {
        kind: "odfsep-dataset".into(),
        provenance: provenance(cfg),
        lmax: cfg.lmax,
        n_two: cfg.n_two,
        n_three: cfg.n_three,
        n_samples: samples.len(),
    };
    artifacts::write_dataset(&path, &manifest_file, &samples, &manifest)?;
    println!(
        "wrote {} samples ({} two-fiber, {} three-fiber, lmax {}) to {}",
        samples.len(),
        cfg.n_two,
        cfg.n_three,
        cfg.lmax,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Trains the separation network and writes a checkpoint plus a loss curve.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    checkpoint_out: Option<&Path>,
    loss_out: Option<&Path>,
) -> Result<(), CliError> {
    let stream = MeshSampleStream::new(
        cfg.train_data_seed(),
        cfg.lmax,
        cfg.net.mesh_pixels,
        cfg.net.kappa,
        cfg.net.include_single,
    )
    .map_err(|e| CliError::usage(format!("training stream: {e}")))?;
    let val_stream = MeshSampleStream::new(
        cfg.validation_seed(),
        cfg.lmax,
        cfg.net.mesh_pixels,
        cfg.net.kappa,
        cfg.net.include_single,
    )
    .map_err(|e| CliError::usage(format!("validation stream: {e}")))?;
    let val = val_stream
        .collect_pairs(cfg.train.validation_samples)
        .map_err(|e| CliError::runtime(format!("validation data: {e}")))?;

    let model = MlpModel::for_mesh_with_width(
        cfg.net.mesh_pixels,
        cfg.net.hidden_width,
        cfg.train.init_seed,
    )
    .map_err(|e| CliError::usage(format!("model setup: {e}")))?;
    let train_config = cfg.train.to_core(cfg.seed);

    let mut pair_fn = |index: u64| stream.pair_at(index);
    let result = mlp::train(model, &train_config, &mut pair_fn, &val)
        .map_err(|e| CliError::runtime(format!("training failed: {e}")))?;

    let stop_reason = if result.stopped_early {
        format!(
            "early stop: validation loss stopped improving for {} batches (best at batch {})",
            cfg.train.patience, result.best_batch
        )
    } else {
        format!("sample budget exhausted after {} batches", result.batches_run)
    };

    let ckpt = Checkpoint {
        kind: "odfsep-checkpoint".into(),
        provenance: provenance(cfg),
        lmax: cfg.lmax,
        mesh_pixels: cfg.net.mesh_pixels,
        kappa: cfg.net.kappa,
        include_single: cfg.net.include_single,
        data_seed: cfg.train_data_seed(),
        validation_seed: cfg.validation_seed(),
        learning_rate: cfg.train.learning_rate,
        batch_size: cfg.train.batch_size,
        train_samples: cfg.train.train_samples,
        validation_samples: cfg.train.validation_samples,
        validate_every: cfg.train.validate_every,
        patience: cfg.train.patience,
        initial_val_loss: result.initial_val_loss,
        best_val_loss: result.best_val_loss,
        best_batch: result.best_batch,
        final_val_loss: result.final_val_loss,
        batches_run: result.batches_run,
        stopped_early: result.stopped_early,
        stop_reason: stop_reason.clone(),
        model: result.model,
    };
    let ckpt_file =
        checkpoint_out.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(cfg));
    let loss_file = loss_out.map(Path::to_path_buf).unwrap_or_else(|| loss_path(cfg));
    artifacts::write_checkpoint(&ckpt_file, &ckpt)?;
    artifacts::write_loss_csv(&loss_file, &ckpt.provenance, &stop_reason, &result.log)?;
    println!(
        "trained {} batches of {} ({} samples); validation loss {} -> best {} at batch {}",
        result.batches_run,
        cfg.train.batch_size,
        result.batches_run * cfg.train.batch_size,
        result.initial_val_loss,
        result.best_val_loss,
        result.best_batch
    );
    println!("{stop_reason}");
    println!("checkpoint: {}", ckpt_file.display());
    println!("loss curve: {}", loss_file.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// separate
// ---------------------------------------------------------------------------

/// Builds the requested separator, resolving the checkpoint for `net`.
pub fn build_separator(
    cfg: &ExperimentConfig,
    method: Method,
    checkpoint: Option<&Path>,
) -> Result<Separator, CliError> {
    match method {
        Method::Watershed => Separator::watershed(
            cfg.watershed.mesh_pixels,
            cfg.lmax,
            cfg.watershed.rel_peak_threshold,
        ),
        Method::Fissile => Separator::fissile(cfg.fissile.to_options(cfg.seed)),
        Method::Net => {
            let path =
                checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(cfg));
            let ckpt = artifacts::read_checkpoint(&path)?;
            if ckpt.lmax != cfg.lmax {
                return Err(CliError::runtime(format!(
                    "checkpoint {} was trained at lmax {}, experiment uses lmax {}",
                    path.display(),
                    ckpt.lmax,
                    cfg.lmax
                )));
            }
            Separator::net(ckpt.model, cfg.lmax)
        }
    }
}

/// Runs one separator over a dataset and writes per-voxel results.
pub fn cmd_separate(
    cfg: &ExperimentConfig,
    method: Method,
    dataset: Option<&Path>,
    checkpoint: Option<&Path>,
    max_voxels: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let dataset_file = dataset.map(Path::to_path_buf).unwrap_or_else(|| dataset_path(cfg));
    let mut samples = artifacts::read_dataset(&dataset_file, cfg.lmax)?;
    if let Some(cap) = max_voxels {
        if cap == 0 {
            return Err(CliError::usage("--max-voxels must be at least 1".into()));
        }
        samples.truncate(cap);
    }

    let separator = build_separator(cfg, method, checkpoint)?;
    let (results, total_ms) = run_over_dataset(&separator, &samples, cfg.threads)?;
    let n = results.len();
    let header = ResultsHeader {
        kind: "odfsep-results".into(),
        provenance: provenance(cfg),
        method: method.name().into(),
        n_voxels: n,
        hardware: hardware_string(),
        total_wall_ms: total_ms,
        ms_per_voxel: total_ms / n as f64,
    };
    let rows: Vec<ResultRow> = results
        .into_iter()
        .enumerate()
        .map(|(index, (fibers, record))| ResultRow { index, fibers, record })
        .collect();
    let out_file =
        out.map(Path::to_path_buf).unwrap_or_else(|| results_path(cfg, method));
    artifacts::write_results(&out_file, &header, &rows)?;
    println!(
        "{}: separated {} voxels in {:.1} ms ({:.4} ms/voxel) on {}",
        method.name(),
        n,
        total_ms,
        header.ms_per_voxel,
        header.hardware
    );
    println!("results: {}", out_file.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// A two-fiber configuration with exact angular separation and an exact
/// smaller volume fraction: the first axis is uniform, the second is offset
/// by `sep_deg` along a uniformly random tangent heading.
pub fn sweep_sample(
    seed: u64,
    cell: usize,
    index: usize,
    sep_deg: f64,
    min_fraction: f64,
    lmax: usize,
) -> Result<OdfSample, CliError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((cell as u64) << 32) | index as u64);
    let a = sample_uniform_direction(&mut rng);
    let (t1, t2) = a.tangent_basis();
    let phi: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
    let (cp, sp) = (phi.cos(), phi.sin());
    let (cs, ss) = (sep_deg.to_radians().cos(), sep_deg.to_radians().sin());
    let av = a.as_array();
    let b = Direction::new(
        av[0] * cs + ss * (cp * t1[0] + sp * t2[0]),
        av[1] * cs + ss * (cp * t1[1] + sp * t2[1]),
        av[2] * cs + ss * (cp * t1[2] + sp * t2[2]),
    )
    .map_err(|e| CliError::runtime(format!("sweep direction: {e}")))?
    .canonical();
    let config = FiberConfig::new(vec![(a, 1.0 - min_fraction), (b, min_fraction)])
        .map_err(|e| CliError::usage(format!("sweep fractions: {e}")))?;
    compose_multifiber(&config, lmax)
        .map_err(|e| CliError::runtime(format!("sweep composition: {e}")))
}

/// Minimum per-fiber ACC of one separation. Estimated fibers are matched
/// one-to-one to truth fibers by maximum total ACC; a truth fiber left
/// unmatched (the separator under-resolved the crossing) scores 0, the
/// no-correlation floor.
pub fn min_fiber_acc(fibers: &[odfsep_core::metrics::FiberEstimate], truth: &[ShVector]) -> f64 {
    let est: Vec<ShVector> = fibers.iter().map(|f| f.odf.clone()).collect();
    let assignment = match_fibers(&est, truth);
    let mut min_acc = f64::INFINITY;
    for t in 0..truth.len() {
        let score = assignment
            .pairs
            .iter()
            .position(|&(_, pt)| pt == t)
            .map(|k| assignment.pair_acc[k])
            .unwrap_or(0.0);
        min_acc = min_acc.min(score);
    }
    min_acc
}

/// Runs the sensitivity grid: separation x smaller fraction, 30+ seeded
/// samples per cell, reporting median and IQR of the per-sample minimum
/// fiber ACC for each method. Every method sees the same samples.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    methods: &[Method],
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let grid = &cfg.sweep;
    if grid.separations_deg.is_empty() || grid.min_fractions.is_empty() {
        return Err(CliError::usage(
            "degenerate sweep grid: separations and fractions must be non-empty".into(),
        ));
    }
    for &s in &grid.separations_deg {
        if !(s > 0.0 && s <= 90.0) {
            return Err(CliError::usage(format!(
                "sweep separation {s} degrees outside (0, 90]"
            )));
        }
    }
    for &f in &grid.min_fractions {
        if !(f > 0.0 && f <= 0.5) {
            return Err(CliError::usage(format!(
                "sweep minimum fraction {f} outside (0, 0.5]"
            )));
        }
    }
    if methods.is_empty() {
        return Err(CliError::usage("sweep needs at least one method".into()));
    }

    let separators: Vec<Separator> = methods
        .iter()
        .map(|&m| build_separator(cfg, m, checkpoint))
        .collect::<Result<_, _>>()?;

    let mut cells = Vec::new();
    let mut cell_index = 0usize;
    for &sep_deg in &grid.separations_deg {
        for &min_fraction in &grid.min_fractions {
            let samples: Vec<OdfSample> = (0..grid.samples_per_cell)
                .map(|i| {
                    sweep_sample(cfg.sweep_seed(), cell_index, i, sep_deg, min_fraction, cfg.lmax)
                })
                .collect::<Result<_, _>>()?;
            for separator in &separators {
                let work = |_i: usize, s: &OdfSample| -> Result<f64, CliError> {
                    let fibers = separator.separate(&s.total)?;
                    Ok(min_fiber_acc(&fibers, &s.components))
                };
                let min_accs = parallel_map(&samples, cfg.threads, work)?;
                let (median, iqr) = summarize_or_nan(&min_accs);
                cells.push(SweepCell {
                    method: separator.method().name().into(),
                    separation_deg: sep_deg,
                    min_fraction,
                    n_samples: min_accs.len(),
                    median_min_acc: median,
                    iqr_min_acc: iqr,
                });
            }
            cell_index += 1;
        }
    }

    let out_file = out.map(Path::to_path_buf).unwrap_or_else(|| sweep_path(cfg));
    artifacts::write_sweep_csv(&out_file, &provenance(cfg), &cells)?;
    println!(
        "swept {} cells x {} methods with {} samples each",
        cell_index,
        methods.len(),
        grid.samples_per_cell
    );
    println!("sweep grid: {}", out_file.display());
    Ok(())
}

fn summarize_or_nan(values: &[f64]) -> (f64, f64) {
    odfsep_core::metrics::summarize(values).unwrap_or((f64::NAN, f64::NAN))
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Aggregates one results file into a summary row.
pub fn summarize_results(
    header: &ResultsHeader,
    rows: &[ResultRow],
) -> Result<SummaryRow, CliError> {
    if rows.is_empty() {
        return Err(CliError::runtime(format!(
            "results for method {} contain no voxels",
            header.method
        )));
    }
    let mut accs = Vec::new();
    let mut angular = Vec::new();
    let mut vf = Vec::new();
    for row in rows {
        accs.extend_from_slice(&row.record.fiber_acc);
        angular.extend_from_slice(&row.record.angular_error_deg);
        vf.push(row.record.vf_rmse);
    }
    let (ang_med, ang_iqr) = summarize_or_nan(&angular);
    let (vf_med, vf_iqr) = summarize_or_nan(&vf);
    let (acc_med, acc_iqr) = summarize_or_nan(&accs);
    Ok(SummaryRow {
        method: header.method.clone(),
        n_voxels: rows.len(),
        angular_error_median_deg: ang_med,
        angular_error_iqr_deg: ang_iqr,
        vf_error_median: vf_med,
        vf_error_iqr: vf_iqr,
        acc_median: acc_med,
        acc_iqr: acc_iqr,
        ms_per_voxel: header.ms_per_voxel,
    })
}

/// Aggregates result files into the summary table (CSV and Markdown).
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    results: &[PathBuf],
    out_csv: Option<&Path>,
    out_md: Option<&Path>,
) -> Result<(), CliError> {
    if results.is_empty() {
        return Err(CliError::usage(
            "evaluate needs at least one results file (from `odfsep separate`)".into(),
        ));
    }
    let mut rows = Vec::new();
    for path in results {
        let (header, result_rows) = artifacts::read_results(path)?;
        rows.push(summarize_results(&header, &result_rows)?);
    }
    let csv_file =
        out_csv.map(Path::to_path_buf).unwrap_or_else(|| summary_csv_path(cfg));
    let md_file = out_md.map(Path::to_path_buf).unwrap_or_else(|| summary_md_path(cfg));
    let prov = provenance(cfg);
    artifacts::write_summary_csv(&csv_file, &prov, &rows)?;
    artifacts::write_summary_markdown(&md_file, &prov, &rows)?;
    for r in &rows {
        println!(
            "{}: angular {:.4} ({:.4}) deg, VF {:.4} ({:.4}), ACC {:.4} ({:.4}), \
             {:.4} ms/voxel over {} voxels",
            r.method,
            r.angular_error_median_deg,
            r.angular_error_iqr_deg,
            r.vf_error_median,
            r.vf_error_iqr,
            r.acc_median,
            r.acc_iqr,
            r.ms_per_voxel,
            r.n_voxels
        );
    }
    println!("summary: {} and {}", csv_file.display(), md_file.display());
    Ok(())
}
