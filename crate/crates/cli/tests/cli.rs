use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command as Process;

use forgetlab_cli::commands::{
    cmd_dynamics, cmd_fpf, DynamicsOptions, FpfOptions, SensitivityFile, SENSITIVITY_FILE,
};
use forgetlab_cli::config::{parse_config, FpfSection, RunConfig};
use forgetlab_cli::manifest::{Command, RunManifest, MANIFEST_FILE};
use forgetlab_cli::metrics::METRICS_FILE;
use forgetlab_cli::pipeline::{BUFFER_FILE, FINAL_CHECKPOINT};
use forgetlab_cli::sweep::{
    aggregate, read_aggregate, read_raw, run_sweep, SweepSpec, AGGREGATE_FILE, RAW_FILE,
};
use forgetlab_cli::{execute, rerun_manifest, CliError};
use forgetlab_core::dynamics::{
    select_sensitive, sensitivity_scores, FPF_THRESHOLD, KFPF_THRESHOLD,
};
use forgetlab_core::nn::{GroupId, Model, SelectionMask};

const SMALL_STREAM: &str = r#"
[stream]
tasks = 3
epochs = 2
source = { kind = "synthetic_gaussian", num_classes = 6, dim = 8, per_class = 60, sep = 6.0 }
"#;

fn small(seed: u64, extra: &str) -> RunConfig {
    parse_config(&format!("seed = {seed}\n{SMALL_STREAM}{extra}")).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn header(p: &Path) -> String {
    read(p).lines().next().unwrap().to_string()
}

#[test]
fn minimal_config_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(&parse_config("").unwrap().resolve(0), tmp.path());
    // An empty file is a valid config: every field has a default.
    let run = run.unwrap();
    for f in [MANIFEST_FILE, METRICS_FILE, FINAL_CHECKPOINT, BUFFER_FILE] {
        assert!(run.dir.join(f).exists(), "{f}");
    }
    let m = RunManifest::load(&run.dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.command, Command::Train);
    assert_eq!(m.config.run_id.as_deref(), Some("sgd-seed0"));
    assert_eq!(m.seeds, vec![0]);
    assert!(m.rng_algorithm.starts_with("chacha8"));
    assert!(m.verify(&run.dir).unwrap().is_empty());
}

#[test]
fn config_errors_name_the_field() {
    let field = |text: &str| match parse_config(text) {
        Err(CliError::ConfigInvalid { field, .. }) => field,
        other => panic!("expected ConfigInvalid, got {other:?}"),
    };
    assert_eq!(field("[train]\nmethod = \"sgdd\"\n"), "train.method");
    assert_eq!(field("[train]\nlrr = 0.1\n"), "train.lrr");
    assert_eq!(field("[train]\nlr = -1.0\n"), "train.lr");
    assert_eq!(field("[fpf]\nmask = \"FC_LAST,NOPE\"\n"), "fpf.mask");
    assert_eq!(
        field("[stream]\nval_fraction = 1.5\n"),
        "stream.val_fraction"
    );
    assert_eq!(
        field("[train]\nmethod = \"er\"\nbuffer_capacity = 0\n"),
        "train.buffer_capacity"
    );
    assert_eq!(field("[kfpf]\nk = 3\n"), "kfpf");
}

#[test]
fn resolved_defaults_are_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(&small(1, "[train]\nmethod = \"kfpf\"\n"), tmp.path()).unwrap();
    let k = run.manifest.config.kfpf.clone().unwrap();
    assert!(k.tau.unwrap() >= 1);
    assert_eq!(k.identify_step, k.tau);
    assert_eq!(run.manifest.config.run_id.as_deref(), Some("kfpf-ce-seed1"));
    assert!(run.dir.join("identification.json").exists());
}

#[test]
fn manifest_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(
        &small(4, "[train]\nmethod = \"er\"\n[fpf]\nsteps = 20\n"),
        &tmp.path().join("a"),
    )
    .unwrap();
    let dir = rerun_manifest(&run.manifest, &tmp.path().join("b")).unwrap();
    assert_eq!(
        std::fs::read(run.dir.join(METRICS_FILE)).unwrap(),
        std::fs::read(dir.join(METRICS_FILE)).unwrap()
    );
    let again = RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(again.config, run.manifest.config);
    assert_eq!(again.outputs, run.manifest.outputs);
}

#[test]
fn metrics_header_is_pinned() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(&small(0, ""), tmp.path()).unwrap();
    assert_eq!(
        header(&run.dir.join(METRICS_FILE)),
        "run_id,method,stage,step,task,epoch,split,avg_acc,acc_t1,acc_t2,acc_t3,flops_cl,flops_replay,flops_ft"
    );
    // 3 tasks × 2 epochs of epoch rows, then the final row.
    assert_eq!(read(&run.dir.join(METRICS_FILE)).lines().count(), 1 + 6 + 1);
}

#[test]
fn dynamics_on_cnn_run_normalizes_over_all_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(2, "[model]\narch = \"cnn_bn\"\nconv_channels = [4, 6]\n");
    let mut cfg = cfg;
    cfg.stream.sample_shape = Some(vec![2, 2, 2]);
    let run = execute(&cfg, tmp.path()).unwrap();
    let d = cmd_dynamics(&run.dir, &DynamicsOptions::default()).unwrap();
    let s = &d.sensitivity;
    let groups = Model::load(&run.dir.join(FINAL_CHECKPOINT))
        .unwrap()
        .0
        .group_ids();
    assert_eq!(s.scores.len(), groups.len());
    assert_eq!(s.group_count, groups.len());
    let sum: f64 = s.scores.values().sum();
    assert!((sum - groups.len() as f64).abs() < 1e-9);
    assert!(s.masks.contains_key("1.0") && s.masks.contains_key("0.3"));
    assert!(s.finetune_masks["1.0"].contains(GroupId::BnStats));
    assert_eq!(
        header(&run.dir.join("dynamics.csv")),
        "run_id,metric,group,t,n,value,spread"
    );
}

#[test]
fn one_epoch_per_task_gives_only_boundary_transitions() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(3, "");
    cfg.stream.epochs = 1;
    let run = execute(&cfg, tmp.path()).unwrap();
    let d = cmd_dynamics(&run.dir, &DynamicsOptions::default()).unwrap();
    assert!(!d.epoch_records.is_empty());
    assert!(d.epoch_records.iter().all(|r| r.epoch == 1 && r.task >= 2));
}

/// Re-read `dynamics.csv` and recompute the threshold-1.0 mask independently.
#[test]
fn sensitivity_mask_matches_csv_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(&small(5, ""), tmp.path()).unwrap();
    cmd_dynamics(&run.dir, &DynamicsOptions::default()).unwrap();
    let report: SensitivityFile =
        serde_json::from_str(&read(&run.dir.join(SENSITIVITY_FILE))).unwrap();

    let mut rdr = csv::Reader::from_path(run.dir.join("dynamics.csv")).unwrap();
    let mut sums: BTreeMap<GroupId, (f64, usize)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let (t, n): (usize, usize) = (rec[3].parse().unwrap(), rec[4].parse().unwrap());
        if &rec[1] == "consecutive_task" && n == report.epoch && t <= report.window {
            let e = sums.entry(rec[2].parse().unwrap()).or_default();
            e.0 += rec[5].parse::<f64>().unwrap();
            e.1 += 1;
        }
    }
    let c: BTreeMap<GroupId, f64> = sums
        .into_iter()
        .map(|(g, (s, k))| (g, s / k as f64))
        .collect();
    let recomputed = select_sensitive(
        &sensitivity_scores(&c, report.window).unwrap(),
        FPF_THRESHOLD,
    );
    assert!(recomputed.is_subset(&report.masks["1.0"]));
    assert!(report.masks["1.0"].is_subset(&report.masks["0.3"]));
    let kfpf = select_sensitive(
        &sensitivity_scores(&c, report.window).unwrap(),
        KFPF_THRESHOLD,
    );
    assert_eq!(kfpf, report.masks["0.3"]);
}

#[test]
fn dynamics_without_checkpoints_reports_missing_snapshots() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(&small(0, "[output]\ncheckpoints = false\n"), tmp.path()).unwrap();
    assert!(matches!(
        cmd_dynamics(&run.dir, &DynamicsOptions::default()),
        Err(CliError::MissingSnapshots(_))
    ));
}

fn fpf_opts(mask: &str, steps: usize) -> FpfOptions {
    FpfOptions::from_section(FpfSection {
        mask: mask.into(),
        steps,
        ..FpfSection::default()
    })
}

#[test]
fn fpf_with_zero_steps_changes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(&small(6, ""), tmp.path()).unwrap();
    let out = cmd_fpf(
        &run.dir,
        &fpf_opts("BN_AFFINE,BN_STATS,FC_LAST", 0),
        tmp.path(),
    )
    .unwrap();
    assert_eq!(out.delta.before, out.delta.after);
    assert_eq!(out.delta.delta_average, 0.0);
}

#[test]
fn fpf_mask_override_only_touches_listed_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(&small(7, ""), tmp.path()).unwrap();
    let out = cmd_fpf(&run.dir, &fpf_opts("FC_LAST", 30), tmp.path()).unwrap();
    let before = Model::load(&run.dir.join(FINAL_CHECKPOINT)).unwrap().0;
    let after = Model::load(&out.dir.join(FINAL_CHECKPOINT)).unwrap().0;
    let mut changed = Vec::new();
    for (a, b) in before.params().iter().zip(after.params()) {
        if a.tensor != b.tensor {
            changed.push(a.group);
        }
    }
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|&g| g == GroupId::FcLast), "{changed:?}");
    assert_eq!(out.manifest.command, Command::Fpf);
    assert_eq!(out.manifest.finetune.as_ref().unwrap().mask, "FC_LAST");
}

#[test]
fn fpf_improves_sgd_on_average() {
    let tmp = tempfile::tempdir().unwrap();
    let mut deltas = Vec::new();
    for seed in 0..5 {
        let run = execute(
            &small(seed, "[output]\neval_each_epoch = false\n"),
            tmp.path(),
        )
        .unwrap();
        let out = cmd_fpf(
            &run.dir,
            &fpf_opts("BN_AFFINE,BN_STATS,FC_LAST", 100),
            tmp.path(),
        )
        .unwrap();
        deltas.push(out.delta.delta_average);
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!(mean > 0.0, "{deltas:?}");
}

#[test]
fn fpf_needs_buffer_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(&small(8, ""), tmp.path()).unwrap();
    std::fs::remove_file(run.dir.join(BUFFER_FILE)).unwrap();
    assert!(matches!(
        cmd_fpf(&run.dir, &FpfOptions::default(), tmp.path()),
        Err(CliError::MissingBuffer(_))
    ));
}

#[test]
fn fpf_threshold_reads_sensitivity_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = execute(&small(9, ""), tmp.path()).unwrap();
    let opts = FpfOptions {
        threshold: Some(1.0),
        ..FpfOptions::default()
    };
    assert!(matches!(
        cmd_fpf(&run.dir, &opts, tmp.path()),
        Err(CliError::MissingSnapshots(_))
    ));
    let d = cmd_dynamics(&run.dir, &DynamicsOptions::default()).unwrap();
    let out = cmd_fpf(&run.dir, &opts, tmp.path()).unwrap();
    assert_eq!(out.delta.mask, d.sensitivity.finetune_masks["1.0"]);
}

fn sweep_text(cells: &str, seeds: &str) -> String {
    format!(
        "name = \"grid\"\nseeds = {seeds}\n[base]\n{}\n[base.output]\ncheckpoints = false\neval_each_epoch = false\n{cells}",
        SMALL_STREAM.replace("[stream]", "[base.stream]")
    )
}

#[test]
fn sweep_single_cell_single_seed_aggregate_equals_row() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SweepSpec::parse(&sweep_text(
        "[[cells]]\nname = \"sgd\"\nmethod = \"sgd\"\n",
        "[3]",
    ))
    .unwrap();
    let out = run_sweep(&spec, tmp.path(), 1).unwrap();
    assert_eq!(out.raw.len(), 1);
    let (r, a) = (&out.raw[0], &out.aggregate[0]);
    assert_eq!(a.acc_mean, r.accuracy);
    assert_eq!(a.acc_std, Some(0.0));
    assert_eq!(a.flops_mean, r.flops_total.map(|f| f as f64));
    assert_eq!((a.flops_norm, r.flops_norm), (Some(1.0), Some(1.0)));
}

#[test]
fn sweep_aggregates_recompute_from_raw_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cells = "[[cells]]\nname = \"sgd\"\nmethod = \"sgd\"\n\
                 [[cells]]\nname = \"fpf-er\"\nmethod = \"er\"\nbuffer_capacity = 40\nfpf_mask = \"BN_STATS,FC_LAST\"\nfpf_steps = 20\n\
                 [[cells]]\nname = \"broken\"\nmethod = \"kfpf\"\nkfpf_mask = \"NOT_A_GROUP\"\n";
    let spec = SweepSpec::parse(&sweep_text(cells, "[0, 1, 2, 3, 4]")).unwrap();
    let out = run_sweep(&spec, tmp.path(), 3).unwrap();
    assert_eq!(out.raw.len(), 15);

    let raw = read_raw(&out.dir.join(RAW_FILE)).unwrap();
    assert_eq!(raw, out.raw);
    assert_eq!(
        read_aggregate(&out.dir.join(AGGREGATE_FILE)).unwrap(),
        aggregate(&raw)
    );
    assert!(raw
        .iter()
        .filter(|r| r.cell == "broken")
        .all(|r| !r.is_ok() && !r.error.is_empty()));
    let max_norm = raw.iter().filter_map(|r| r.flops_norm).fold(0.0, f64::max);
    assert_eq!(max_norm, 1.0);
    let agg_max = out
        .aggregate
        .iter()
        .filter_map(|r| r.flops_norm)
        .fold(0.0, f64::max);
    assert_eq!(agg_max, 1.0);

    // Independent mean and sample standard deviation from the raw rows.
    let acc: Vec<f64> = raw
        .iter()
        .filter(|r| r.cell == "fpf-er")
        .map(|r| r.accuracy.unwrap())
        .collect();
    let mean = acc.iter().sum::<f64>() / 5.0;
    let std = (acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0).sqrt();
    let row = out.aggregate.iter().find(|r| r.cell == "fpf-er").unwrap();
    assert!((row.acc_mean.unwrap() - mean).abs() < 1e-12);
    assert!((row.acc_std.unwrap() - std).abs() < 1e-12);
    assert_eq!(row.method, "fpf+er");
    let broken = out.aggregate.iter().find(|r| r.cell == "broken").unwrap();
    assert_eq!((broken.runs, broken.failed, broken.acc_mean), (5, 5, None));

    assert_eq!(
        header(&out.dir.join(RAW_FILE)),
        "cell,method,seed,status,accuracy,flops_cl,flops_replay,flops_ft,flops_total,flops_norm,error"
    );
    assert_eq!(
        header(&out.dir.join(AGGREGATE_FILE)),
        "cell,method,runs,failed,acc_mean,acc_std,flops_mean,flops_norm"
    );
}

#[test]
fn sweep_spec_validation() {
    let bad = |text: &str| matches!(SweepSpec::parse(text), Err(CliError::ConfigInvalid { .. }));
    assert!(bad(
        "seeds = []\n[[cells]]\nname = \"a\"\nmethod = \"sgd\"\n"
    ));
    assert!(bad("seeds = [1]\ncells = []\n"));
    assert!(bad(
        "seeds = [1]\n[[cells]]\nname = \"a\"\nmethod = \"sgd\"\n[[cells]]\nname = \"a\"\nmethod = \"er\"\n"
    ));
    assert!(bad(
        "seeds = [1]\n[[cells]]\nname = \"a/b\"\nmethod = \"sgd\"\n"
    ));
}

#[test]
fn masks_round_trip_through_sensitivity_json() {
    let m = SelectionMask::parse_list("BN_STATS,FC_LAST").unwrap();
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(json, r#"["BN_STATS","FC_LAST"]"#);
}

#[test]
fn binary_runs_train_and_report_with_env_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, format!("seed = 2\n{SMALL_STREAM}")).unwrap();
    let out_root = tmp.path().join("out");
    let bin = env!("CARGO_BIN_EXE_forgetlab");
    let status = Process::new(bin)
        .args(["train", "--config"])
        .arg(&cfg)
        .env("FORGETLAB_OUT", &out_root)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let run_dir = out_root.join("sgd-seed2");
    assert!(run_dir.join(MANIFEST_FILE).exists());

    let rerun_root = tmp.path().join("rerun");
    let status = Process::new(bin)
        .args(["--out"])
        .arg(&rerun_root)
        .args(["train", "--config"])
        .arg(run_dir.join(MANIFEST_FILE))
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(
        std::fs::read(run_dir.join(METRICS_FILE)).unwrap(),
        std::fs::read(rerun_root.join("sgd-seed2").join(METRICS_FILE)).unwrap()
    );

    let report = Process::new(bin)
        .arg("report")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("final accuracy"));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nmethod = \"nope\"\n").unwrap();
    let failed = Process::new(bin)
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("train.method"));
}
