//! End-to-end tests of the command-line harness: every subcommand is driven
//! through the same argument-parsing entry point the binary uses, and the
//! artifacts it writes are inspected directly.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use odfsep_cli::artifacts::{read_checkpoint, read_results};
use odfsep_cli::run;

static DIR_COUNTER: AtomicUsize = AtomicUsize::new(0);

/// A fresh scratch directory per test.
fn scratch(tag: &str) -> PathBuf {
    let n = DIR_COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!(
        "odfsep-cli-{tag}-{}-{n}",
        std::process::id()
    ));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_args(args: &[&str]) -> i32 {
    run(args.iter().map(|s| s.to_string()))
}

fn sha256_file(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).unwrap();
    let digest = Sha256::digest(&bytes);
    format!("{digest:x}")
}

/// A small experiment config written to disk for tests that need one.
fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn simulate_defaults_produce_330_samples_and_manifest() {
    let dir = scratch("simulate");
    let out = dir.to_str().unwrap();
    assert_eq!(run_args(&["odfsep", "simulate", "--output-dir", out]), 0);
    let dataset = dir.join("dataset.jsonl");
    let text = fs::read_to_string(&dataset).unwrap();
    assert_eq!(text.lines().count(), 330);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("dataset.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["lmax"], 6);
    assert_eq!(manifest["n_two"], 250);
    assert_eq!(manifest["n_three"], 80);
    assert_eq!(manifest["n_samples"], 330);
    assert_eq!(manifest["seed"], 42);
    assert!(manifest["config_hash"].as_str().unwrap().len() == 64);
    assert!(manifest["code_version"].is_string());
}

#[test]
fn simulate_same_seed_same_hash_and_different_seed_differs() {
    let dir_a = scratch("sim-a");
    let dir_b = scratch("sim-b");
    let dir_c = scratch("sim-c");
    for (dir, seed) in [(&dir_a, "7"), (&dir_b, "7"), (&dir_c, "8")] {
        assert_eq!(
            run_args(&[
                "odfsep", "simulate", "--seed", seed, "--n-two", "6", "--n-three", "2",
                "--output-dir", dir.to_str().unwrap(),
            ]),
            0
        );
    }
    let ha = sha256_file(&dir_a.join("dataset.jsonl"));
    let hb = sha256_file(&dir_b.join("dataset.jsonl"));
    let hc = sha256_file(&dir_c.join("dataset.jsonl"));
    assert_eq!(ha, hb, "same seed must produce identical files");
    assert_ne!(ha, hc, "different seed must change the dataset");
}

#[test]
fn separate_watershed_writes_one_row_per_sample() {
    let dir = scratch("sep-ws");
    let out = dir.to_str().unwrap();
    assert_eq!(
        run_args(&[
            "odfsep", "simulate", "--n-two", "8", "--n-three", "3", "--output-dir", out,
        ]),
        0
    );
    assert_eq!(
        run_args(&["odfsep", "separate", "--method", "watershed", "--output-dir", out]),
        0
    );
    let (header, rows) = read_results(&dir.join("results_watershed.jsonl")).unwrap();
    assert_eq!(header.method, "watershed");
    assert_eq!(header.n_voxels, 11);
    assert_eq!(rows.len(), 11);
    assert!(header.ms_per_voxel > 0.0);
    assert!(!header.hardware.is_empty());
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.index, i);
        assert!(!row.fibers.is_empty());
        let frac_sum: f64 = row.fibers.iter().map(|f| f.fraction).sum();
        assert!((frac_sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn separate_is_deterministic_apart_from_timing_fields() {
    let dir = scratch("sep-det");
    let out = dir.to_str().unwrap();
    assert_eq!(
        run_args(&["odfsep", "simulate", "--n-two", "5", "--n-three", "0", "--output-dir", out]),
        0
    );
    let r1 = dir.join("r1.jsonl");
    let r2 = dir.join("r2.jsonl");
    for r in [&r1, &r2] {
        assert_eq!(
            run_args(&[
                "odfsep", "separate", "--method", "watershed", "--output-dir", out, "--out",
                r.to_str().unwrap(),
            ]),
            0
        );
    }
    // Strip the declared timing fields, then demand byte identity.
    let strip = |path: &Path| -> String {
        let text = fs::read_to_string(path).unwrap();
        text.lines()
            .map(|line| {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                let obj = v.as_object_mut().unwrap();
                obj.remove("total_wall_ms");
                obj.remove("ms_per_voxel");
                if let Some(rec) = obj.get_mut("record") {
                    rec.as_object_mut().unwrap().remove("wall_ms");
                }
                serde_json::to_string(&v).unwrap()
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&r1), strip(&r2));
}

#[test]
fn separate_thread_count_never_changes_numbers() {
    let dir = scratch("sep-threads");
    let out = dir.to_str().unwrap();
    assert_eq!(
        run_args(&["odfsep", "simulate", "--n-two", "6", "--n-three", "2", "--output-dir", out]),
        0
    );
    let r1 = dir.join("t1.jsonl");
    let r4 = dir.join("t4.jsonl");
    for (r, threads) in [(&r1, "1"), (&r4, "4")] {
        assert_eq!(
            run_args(&[
                "odfsep", "separate", "--method", "watershed", "--output-dir", out,
                "--threads", threads, "--out", r.to_str().unwrap(),
            ]),
            0
        );
    }
    let numbers = |path: &Path| -> Vec<String> {
        let (_, rows) = read_results(path).unwrap();
        rows.iter()
            .map(|row| {
                format!(
                    "{:?}{:?}{}",
                    row.record.fiber_acc, row.record.angular_error_deg, row.record.vf_rmse
                )
            })
            .collect()
    };
    assert_eq!(numbers(&r1), numbers(&r4));
}

#[test]
fn separate_fissile_honors_max_voxels() {
    let dir = scratch("sep-fissile");
    let out = dir.to_str().unwrap();
    assert_eq!(
        run_args(&["odfsep", "simulate", "--n-two", "6", "--n-three", "0", "--output-dir", out]),
        0
    );
    assert_eq!(
        run_args(&[
            "odfsep", "separate", "--method", "fissile", "--max-voxels", "2", "--output-dir",
            out,
        ]),
        0
    );
    let (header, rows) = read_results(&dir.join("results_fissile.jsonl")).unwrap();
    assert_eq!(header.n_voxels, 2);
    assert_eq!(rows.len(), 2);
    // Well-posed random two-fiber voxels: the optimizer should score
    // near-perfect ACC on most; at minimum the rows must be fully formed.
    for row in &rows {
        assert_eq!(row.record.method, "fissile");
        assert!(!row.fibers.is_empty());
    }
}

#[test]
fn separate_net_without_checkpoint_is_actionable() {
    let dir = scratch("sep-net-missing");
    let out = dir.to_str().unwrap();
    assert_eq!(
        run_args(&["odfsep", "simulate", "--n-two", "2", "--n-three", "0", "--output-dir", out]),
        0
    );
    // Missing checkpoint is a runtime error (exit 2) and the message names
    // the training command.
    assert_eq!(
        run_args(&["odfsep", "separate", "--method", "net", "--output-dir", out]),
        2
    );
}

#[test]
fn train_writes_checkpoint_loss_curve_and_reloads_bit_exactly() {
    let dir = scratch("train");
    let out = dir.to_str().unwrap();
    let config = write_config(
        &dir,
        "seed = 5\n\
         [net]\n\
         mesh_pixels = 96\n\
         hidden_width = 16\n\
         [train]\n\
         batch_size = 16\n\
         train_samples = 3200\n\
         validation_samples = 64\n\
         validate_every = 50\n\
         patience = 200\n",
    );
    assert_eq!(
        run_args(&[
            "odfsep", "train", "--config", config.to_str().unwrap(), "--output-dir", out,
        ]),
        0
    );

    // Loss CSV: provenance comments, then exactly one validation row per 50
    // batches; the pre-training loss is the checkpoint's initial_val_loss.
    let loss = fs::read_to_string(dir.join("loss.csv")).unwrap();
    let comment_lines: Vec<&str> =
        loss.lines().take_while(|l| l.starts_with('#')).collect();
    assert!(comment_lines.iter().any(|l| l.starts_with("# seed=5")));
    assert!(comment_lines.iter().any(|l| l.starts_with("# config_hash=")));
    assert!(comment_lines.iter().any(|l| l.starts_with("# stop_reason=")));
    let data_lines: Vec<&str> =
        loss.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    assert_eq!(data_lines[0], "batch,train_loss,val_loss");
    let batches: Vec<usize> = data_lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(batches, vec![50, 100, 150, 200]);

    // Checkpoint reload reproduces the recorded validation loss bit-exactly.
    let ckpt = read_checkpoint(&dir.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.mesh_pixels, 96);
    assert_eq!(ckpt.lmax, 6);
    assert!(ckpt.initial_val_loss.is_finite());
    let val_stream = odfsep_core::mlp::MeshSampleStream::new(
        ckpt.validation_seed,
        ckpt.lmax,
        ckpt.mesh_pixels,
        ckpt.kappa,
        ckpt.include_single,
    )
    .unwrap();
    let val = val_stream.collect_pairs(ckpt.validation_samples).unwrap();
    let reloaded_loss = ckpt.model.mean_loss(&val).unwrap();
    assert_eq!(
        reloaded_loss.to_bits(),
        ckpt.best_val_loss.to_bits(),
        "reloaded checkpoint must reproduce its recorded validation loss bit-exactly"
    );

    // The trained checkpoint drives `net` separation, one row per sample.
    let config2 = write_config(
        &dir,
        "seed = 5\nn_two = 4\nn_three = 2\n[net]\nmesh_pixels = 96\nhidden_width = 16\n",
    );
    assert_eq!(
        run_args(&[
            "odfsep", "simulate", "--config", config2.to_str().unwrap(), "--output-dir", out,
        ]),
        0
    );
    assert_eq!(
        run_args(&[
            "odfsep", "separate", "--method", "net", "--config", config2.to_str().unwrap(),
            "--output-dir", out,
        ]),
        0
    );
    let (header, rows) = read_results(&dir.join("results_net.jsonl")).unwrap();
    assert_eq!(header.method, "net");
    assert_eq!(rows.len(), 6);
}

#[test]
fn train_records_early_stop_reason_when_patience_exhausts() {
    let dir = scratch("train-early");
    let out = dir.to_str().unwrap();
    // A large budget with tiny patience on a tiny model: the run must stop
    // early and say why.
    let config = write_config(
        &dir,
        "seed = 11\n\
         [net]\n\
         mesh_pixels = 24\n\
         hidden_width = 4\n\
         [train]\n\
         batch_size = 8\n\
         train_samples = 40000\n\
         validation_samples = 16\n\
         validate_every = 50\n\
         patience = 50\n\
         learning_rate = 0.02\n",
    );
    assert_eq!(
        run_args(&[
            "odfsep", "train", "--config", config.to_str().unwrap(), "--output-dir", out,
        ]),
        0
    );
    let ckpt = read_checkpoint(&dir.join("checkpoint.json")).unwrap();
    let loss = fs::read_to_string(dir.join("loss.csv")).unwrap();
    if ckpt.stopped_early {
        assert!(ckpt.stop_reason.contains("early stop"));
        assert!(loss.contains("# stop_reason=early stop"));
    } else {
        assert!(ckpt.stop_reason.contains("budget"));
    }
}

#[test]
fn sweep_writes_plot_ready_grid() {
    let dir = scratch("sweep");
    let out = dir.to_str().unwrap();
    let config = write_config(
        &dir,
        "seed = 3\n\
         [sweep]\n\
         separations_deg = [30.0, 60.0]\n\
         min_fractions = [0.5]\n\
         samples_per_cell = 30\n\
         methods = [\"watershed\"]\n",
    );
    assert_eq!(
        run_args(&[
            "odfsep", "sweep", "--config", config.to_str().unwrap(), "--output-dir", out,
        ]),
        0
    );
    let text = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let data: Vec<&str> =
        text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    assert_eq!(
        data[0],
        "method,separation_deg,min_fraction,n_samples,median_min_acc,iqr_min_acc"
    );
    assert_eq!(data.len(), 3, "2 cells x 1 method + header");
    // The watershed baseline collapses at 30 degrees and holds at 60.
    let parse = |line: &str| -> (f64, f64) {
        let cols: Vec<&str> = line.split(',').collect();
        (cols[1].parse().unwrap(), cols[4].parse().unwrap())
    };
    let (sep_a, acc_a) = parse(data[1]);
    let (sep_b, acc_b) = parse(data[2]);
    assert_eq!((sep_a, sep_b), (30.0, 60.0));
    assert!(acc_a < 0.5, "watershed median min-ACC at 30 deg was {acc_a}");
    assert!(acc_b > 0.9, "watershed median min-ACC at 60 deg was {acc_b}");
}

#[test]
fn sweep_rejects_degenerate_grids() {
    let dir = scratch("sweep-bad");
    let out = dir.to_str().unwrap();
    let empty = write_config(&dir, "[sweep]\nseparations_deg = []\n");
    assert_eq!(
        run_args(&["odfsep", "sweep", "--config", empty.to_str().unwrap(), "--output-dir", out]),
        1
    );
    let thin = write_config(&dir, "[sweep]\nsamples_per_cell = 5\n");
    assert_eq!(
        run_args(&["odfsep", "sweep", "--config", thin.to_str().unwrap(), "--output-dir", out]),
        1
    );
    let steep = write_config(&dir, "[sweep]\nseparations_deg = [120.0]\n");
    assert_eq!(
        run_args(&["odfsep", "sweep", "--config", steep.to_str().unwrap(), "--output-dir", out]),
        1
    );
}

#[test]
fn evaluate_produces_fixed_columns_and_is_deterministic() {
    let dir = scratch("evaluate");
    let out = dir.to_str().unwrap();
    assert_eq!(
        run_args(&["odfsep", "simulate", "--n-two", "6", "--n-three", "2", "--output-dir", out]),
        0
    );
    assert_eq!(
        run_args(&["odfsep", "separate", "--method", "watershed", "--output-dir", out]),
        0
    );
    let results = dir.join("results_watershed.jsonl");
    assert_eq!(
        run_args(&["odfsep", "evaluate", results.to_str().unwrap(), "--output-dir", out]),
        0
    );
    let csv = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let data: Vec<&str> =
        csv.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    assert_eq!(
        data[0],
        "method,n_voxels,angular_error_median_deg,angular_error_iqr_deg,vf_error_median,\
         vf_error_iqr,acc_median,acc_iqr,ms_per_voxel"
    );
    assert_eq!(data.len(), 2);
    assert!(data[1].starts_with("watershed,8,"));

    let md = fs::read_to_string(dir.join("summary.md")).unwrap();
    assert!(md.starts_with("| Method | Angular error (deg) | VF error | ACC | ms/voxel |"));
    assert!(md.contains("| watershed |"));

    // Re-evaluating the same inputs reproduces the file byte-for-byte
    // (evaluate itself adds no timing of its own).
    let again_csv = dir.join("summary2.csv");
    let again_md = dir.join("summary2.md");
    assert_eq!(
        run_args(&[
            "odfsep", "evaluate", results.to_str().unwrap(), "--output-dir", out,
            "--out-csv", again_csv.to_str().unwrap(), "--out-md", again_md.to_str().unwrap(),
        ]),
        0
    );
    assert_eq!(fs::read(dir.join("summary.csv")).unwrap(), fs::read(&again_csv).unwrap());
    assert_eq!(fs::read(dir.join("summary.md")).unwrap(), fs::read(&again_md).unwrap());
}

#[test]
fn evaluate_empty_input_is_an_error() {
    let dir = scratch("evaluate-empty");
    let out = dir.to_str().unwrap();
    assert_eq!(run_args(&["odfsep", "evaluate", "--output-dir", out]), 1);
    // A file that exists but has no rows is a runtime error.
    let empty = dir.join("results_empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(
        run_args(&["odfsep", "evaluate", empty.to_str().unwrap(), "--output-dir", out]),
        2
    );
}

#[test]
fn input_dataset_is_never_mutated() {
    let dir = scratch("immutable");
    let out = dir.to_str().unwrap();
    assert_eq!(
        run_args(&["odfsep", "simulate", "--n-two", "4", "--n-three", "1", "--output-dir", out]),
        0
    );
    let dataset = dir.join("dataset.jsonl");
    let before = sha256_file(&dataset);
    assert_eq!(
        run_args(&["odfsep", "separate", "--method", "watershed", "--output-dir", out]),
        0
    );
    assert_eq!(
        run_args(&[
            "odfsep", "evaluate",
            dir.join("results_watershed.jsonl").to_str().unwrap(),
            "--output-dir", out,
        ]),
        0
    );
    assert_eq!(sha256_file(&dataset), before);
}
