//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use forgetlab_cli::commands::{cmd_dynamics, cmd_fpf, DynamicsOptions, FpfOptions};
use forgetlab_cli::config::{parse_config, FpfSection};
use forgetlab_cli::manifest::RunManifest;
use forgetlab_cli::pipeline::{BUFFER_FILE, FINAL_CHECKPOINT};
use forgetlab_cli::sweep::{run_sweep, SweepOutcome, SweepSpec};
use forgetlab_cli::{execute, rerun_manifest};
use forgetlab_core::data::{strip_boundaries, DataSource, StreamSpec};
use forgetlab_core::dynamics::{
    detect_boundaries, group_means, ranking, select_sensitive, sensitivity_from_snapshots,
    sensitivity_scores, DynamicsRecord, DEFAULT_SPIKE_FACTOR, FPF_THRESHOLD, KFPF_THRESHOLD,
};
use forgetlab_core::engine::{
    cross_entropy, fpf, kd_loss, kd_loss_node, run_kfpf, run_sgd, FinetuneConfig, FlopsLedger,
    FlopsModel, KfpfConfig, Method, Objective, TrainConfig,
};
use forgetlab_core::nn::{GroupId, Model, ModelSnapshot, ModelSpec, SelectionMask, SnapshotMember};
use forgetlab_core::replay::{BufferItem, ReplayBuffer};
use forgetlab_core::{Graph, NodeId, Rng, Tensor};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_TRIALS: usize = 50;

type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Worst relative error between backprop and central differences over every
/// element of every input. Denominators are floored at 1e-3.
fn fd_error(inputs: &[Tensor], f: &Build) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut g, &ids);
    g.backward(loss).expect("scalar loss");
    let value = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &ids);
        g.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(ids[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
            let e = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
            worst = worst.max(e);
        }
    }
    worst
}

fn random(rng: &mut Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Contract `out` with a fixed random tensor so every output element carries gradient.
fn weighted_sum(g: &mut Graph, out: NodeId, rng_seed: u64) -> NodeId {
    let shape = g.shape(out).to_vec();
    let w = random(&mut Rng::new(rng_seed), shape, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn criterion_gradients() -> Outcome {
    let mut rng = Rng::new(101);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for trial in 0..FD_TRIALS {
        let wseed = 1000 + trial as u64;

        let (b, i, o) = (
            dim(&mut rng, 1, 4),
            dim(&mut rng, 1, 5),
            dim(&mut rng, 1, 4),
        );
        let inputs = [
            random(&mut rng, vec![b, i], 1.0),
            random(&mut rng, vec![i, o], 1.0),
            random(&mut rng, vec![o], 1.0),
        ];
        let e = fd_error(&inputs, &move |g: &mut Graph, x: &[NodeId]| {
            let y = g.matmul(x[0], x[1]).unwrap();
            let y = g.add_bias(y, x[2]).unwrap();
            weighted_sum(g, y, wseed)
        });
        let w = worst.entry("dense").or_default();
        *w = w.max(e);

        let (n, c, oc) = (
            dim(&mut rng, 1, 2),
            dim(&mut rng, 1, 3),
            dim(&mut rng, 1, 3),
        );
        let (k, stride, pad) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 2), rng.below(2));
        let hw = dim(&mut rng, k.max(2), 5);
        let inputs = [
            random(&mut rng, vec![n, c, hw, hw], 1.0),
            random(&mut rng, vec![oc, c, k, k], 1.0),
        ];
        let e = fd_error(&inputs, &move |g: &mut Graph, x: &[NodeId]| {
            let y = g.conv2d(x[0], x[1], stride, pad).unwrap();
            weighted_sum(g, y, wseed)
        });
        let w = worst.entry("conv").or_default();
        *w = w.max(e);

        let (n, c) = (dim(&mut rng, 2, 5), dim(&mut rng, 1, 3));
        let shape = if rng.below(2) == 0 {
            vec![n, c]
        } else {
            vec![n, c, 2, 2]
        };
        let mut gamma = random(&mut rng, vec![c], 0.3);
        gamma.data_mut().iter_mut().for_each(|v| *v += 1.0);
        let inputs = [
            random(&mut rng, shape, 1.0),
            gamma,
            random(&mut rng, vec![c], 0.5),
        ];
        let e = fd_error(&inputs, &move |g: &mut Graph, x: &[NodeId]| {
            let (y, _) = g.batch_norm_train(x[0], x[1], x[2], 1e-5).unwrap();
            weighted_sum(g, y, wseed)
        });
        let w = worst.entry("batch_norm_train").or_default();
        *w = w.max(e);

        let (b, classes) = (dim(&mut rng, 1, 5), dim(&mut rng, 2, 6));
        let labels: Vec<usize> = (0..b).map(|_| rng.below(classes)).collect();
        let logits = random(&mut rng, vec![b, classes], 2.0);
        let l2 = labels.clone();
        let e = fd_error(
            std::slice::from_ref(&logits),
            &move |g: &mut Graph, x: &[NodeId]| g.softmax_cross_entropy(x[0], &l2).unwrap(),
        );
        let w = worst.entry("softmax_ce").or_default();
        *w = w.max(e);

        let stored: Vec<f64> = (0..b * classes).map(|_| 2.0 * rng.normal()).collect();
        let lambda = 2.0 * rng.uniform();
        let e = fd_error(&[logits], &move |g: &mut Graph, x: &[NodeId]| {
            kd_loss_node(g, x[0], &stored, &labels, lambda).unwrap()
        });
        let w = worst.entry("kd_mse").or_default();
        *w = w.max(e);
    }
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    let detail = format!(
        "{FD_TRIALS} trials each, worst rel err: {}",
        detail.join(", ")
    );
    check(worst.values().all(|&v| v < FD_TOL), detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 2. Reservoir uniformity

fn criterion_reservoir() -> Outcome {
    let (cap, m, trials) = (50usize, 10_000usize, 2_000u64);
    let mut deciles = [0u64; 10];
    let mut root = Rng::new(7);
    for t in 0..trials {
        let mut b = ReplayBuffer::new(cap, root.fork(t));
        for i in 0..m {
            b.reservoir_insert(BufferItem::new(Vec::new(), i, i as u64));
            if b.len() != (i + 1).min(cap) {
                return Err(format!("size law broken at step {} of trial {t}", i + 1));
            }
        }
        for it in b.items() {
            deciles[it.label * 10 / m] += 1;
        }
    }
    let expected = (trials as usize * cap) as f64 / 10.0;
    let chi2: f64 = deciles
        .iter()
        .map(|&d| (d as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(9.0).map_err(err)?.cdf(chi2);
    let detail = format!("chi2 {chi2:.2} on 9 dof, p {p:.3}; size law held at every step");
    check(p > 0.01, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 3. Sensitivity normalization

fn random_snapshots(rng: &mut Rng, tasks: usize, groups: &[GroupId]) -> Vec<ModelSnapshot> {
    let sizes: Vec<usize> = groups.iter().map(|_| 1 + rng.below(6)).collect();
    let drift: Vec<f64> = groups.iter().map(|_| rng.uniform() * 3.0 + 0.01).collect();
    let mut values: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&s| (0..s).map(|_| rng.normal()).collect())
        .collect();
    let mut out = Vec::new();
    for t in 1..=tasks {
        for (v, d) in values.iter_mut().zip(&drift) {
            v.iter_mut().for_each(|x| *x += d * rng.normal());
        }
        let members = groups
            .iter()
            .zip(&values)
            .enumerate()
            .map(|(i, (&g, v))| SnapshotMember {
                name: format!("p{i}"),
                group: g,
                values: v.clone(),
            })
            .collect();
        out.push(ModelSnapshot::from_members(t, 1, members));
    }
    out
}

fn criterion_sensitivity() -> Outcome {
    let mut rng = Rng::new(303);
    let all = [
        GroupId::Conv1,
        GroupId::ConvBlock(1),
        GroupId::ConvBlock(2),
        GroupId::BnAffine,
        GroupId::BnStats,
        GroupId::FcHidden,
        GroupId::FcLast,
    ];
    let mut worst_sum: f64 = 0.0;
    for _ in 0..500 {
        let g = 1 + rng.below(all.len());
        let map: BTreeMap<GroupId, f64> = all[..g]
            .iter()
            .map(|&k| (k, rng.uniform() * 10.0 + 1e-6))
            .collect();
        let r = sensitivity_scores(&map, 1).map_err(err)?;
        worst_sum = worst_sum.max((r.scores.values().sum::<f64>() - g as f64).abs());
    }
    check(
        worst_sum <= 1e-9,
        format!("|sum S - G| reached {worst_sum:e}"),
    )?;

    let two: BTreeMap<GroupId, f64> = [(GroupId::BnStats, 3.0), (GroupId::FcLast, 1.0)].into();
    let r = sensitivity_scores(&two, 1).map_err(err)?;
    let s = [r.scores[&GroupId::BnStats], r.scores[&GroupId::FcLast]];
    check(
        (s[0] - 1.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12,
        format!("C=[3,1] gave {s:?}"),
    )?;

    let mut worst_scale: f64 = 0.0;
    for _ in 0..100 {
        let tasks = 2 + rng.below(4);
        let groups = 2 + rng.below(all.len() - 1);
        let snaps = random_snapshots(&mut rng, tasks, &all[..groups]);
        let c = [1e-3, 0.5, 7.0, 1e4][rng.below(4)];
        let scaled: Vec<ModelSnapshot> = snaps.iter().map(|s| s.scaled(c)).collect();
        let a = sensitivity_from_snapshots(&snaps, None).map_err(err)?;
        let b = sensitivity_from_snapshots(&scaled, None).map_err(err)?;
        for (k, v) in &a.scores {
            worst_scale = worst_scale.max((v - b.scores[k]).abs());
        }
        for th in [FPF_THRESHOLD, KFPF_THRESHOLD] {
            let (ma, mb) = (select_sensitive(&a, th), select_sensitive(&b, th));
            // A score within rounding of the threshold may legitimately flip.
            let near = a.scores.values().any(|v| (v - th).abs() < 1e-9);
            check(
                ma == mb || near,
                format!("mask changed under scaling by {c}: {ma} vs {mb}"),
            )?;
        }
    }
    check(
        worst_scale < 1e-9,
        format!("scaling moved S by {worst_scale:e}"),
    )?;
    Ok(format!(
        "sum S = G within {worst_sum:.1e}; [3,1] -> {s:?}; scale invariance within {worst_scale:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4 & 7. Ranking and boundary detection on CNN_BN runs

fn cnn_config(seed: u64, domain: bool) -> String {
    let mode = if domain {
        "mode = \"domain_il\"\ntransform = { kind = \"permute_pixels\" }"
    } else {
        "mode = \"class_il\""
    };
    format!(
        r#"
seed = {seed}
[stream]
{mode}
tasks = 4
epochs = 5
sample_shape = [1, 4, 4]
[model]
arch = "cnn_bn"
[train]
method = "sgd"
[output]
eval_each_epoch = false
"#
    )
}

struct CnnRun {
    task_records: Vec<DynamicsRecord>,
    epoch_records: Vec<DynamicsRecord>,
}

fn cnn_runs(root: &Path, domain: bool) -> Result<Vec<CnnRun>, String> {
    (0..5)
        .map(|seed| {
            let cfg = parse_config(&cnn_config(seed, domain)).map_err(err)?;
            let out_root = root.join(if domain { "domain" } else { "class" });
            let run = execute(&cfg, &out_root).map_err(err)?;
            let d = cmd_dynamics(&run.dir, &DynamicsOptions::default()).map_err(err)?;
            Ok(CnnRun {
                task_records: d.task_records,
                epoch_records: d.epoch_records,
            })
        })
        .collect()
}

fn last_epoch_ranking(run: &CnnRun) -> Vec<GroupId> {
    let last = run.task_records.iter().map(|r| r.epoch).max().unwrap_or(0);
    let recs: Vec<DynamicsRecord> = run
        .task_records
        .iter()
        .filter(|r| r.epoch == last)
        .cloned()
        .collect();
    ranking(&group_means(&recs))
}

fn rank_of(order: &[GroupId], g: GroupId) -> f64 {
    order
        .iter()
        .position(|&x| x == g)
        .map_or(f64::NAN, |p| p as f64 + 1.0)
}

fn criterion_ranking(class: &[CnnRun], domain: &[CnnRun]) -> Outcome {
    let top2 = [GroupId::BnStats, GroupId::FcLast];
    let hits = class
        .iter()
        .filter(|r| {
            let order = last_epoch_ranking(r);
            order.len() >= 2 && top2.contains(&order[0]) && top2.contains(&order[1])
        })
        .count();
    let mean_rank = |runs: &[CnnRun]| {
        runs.iter()
            .map(|r| rank_of(&last_epoch_ranking(r), GroupId::FcLast))
            .sum::<f64>()
            / runs.len() as f64
    };
    let (rc, rd) = (mean_rank(class), mean_rank(domain));
    let detail = format!("BN_STATS+FC_LAST top-2 in {hits}/5 seeds; FC_LAST mean rank class-IL {rc:.1}, domain-IL {rd:.1}");
    check(hits >= 4 && rd > rc, detail.clone())?;
    Ok(detail)
}

fn criterion_boundaries(class: &[CnnRun]) -> Outcome {
    let truth = vec![(2, 1), (3, 1), (4, 1)];
    let mut exact = 0;
    for r in class {
        if detect_boundaries(&r.epoch_records, DEFAULT_SPIKE_FACTOR).map_err(err)? == truth {
            exact += 1;
        }
    }
    let detail = format!("exact boundaries {truth:?} in {exact}/5 seeds");
    check(exact >= 4, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 5 & 6. Method ordering and FLOPs

const METHOD_SWEEP: &str = r#"
name = "ordering"
seeds = [0, 1, 2, 3, 4]
[base.output]
checkpoints = false
eval_each_epoch = false
[[cells]]
name = "sgd"
method = "sgd"
[[cells]]
name = "fpf-sgd"
method = "sgd"
fpf_mask = "BN_AFFINE,BN_STATS,FC_LAST"
[[cells]]
name = "er"
method = "er"
[[cells]]
name = "fpf-er"
method = "er"
fpf_mask = "BN_AFFINE,BN_STATS,FC_LAST"
[[cells]]
name = "kfpf-ce"
method = "kfpf"
objective = "ce"
[[cells]]
name = "kfpf-kd"
method = "kfpf"
objective = "kd"
"#;

fn cell_mean(
    s: &SweepOutcome,
    cell: &str,
    f: impl Fn(&forgetlab_cli::sweep::AggregateRow) -> Option<f64>,
) -> Result<f64, String> {
    let row = s
        .aggregate
        .iter()
        .find(|r| r.cell == cell)
        .ok_or(format!("no cell {cell}"))?;
    if row.failed > 0 {
        return Err(format!("cell {cell} had {} failed runs", row.failed));
    }
    f(row).ok_or(format!("cell {cell} has no value"))
}

fn criterion_ordering(s: &SweepOutcome) -> Outcome {
    let acc = |c: &str| cell_mean(s, c, |r| r.acc_mean);
    let (sgd, fsgd, er, fer, kce, kkd) = (
        acc("sgd")?,
        acc("fpf-sgd")?,
        acc("er")?,
        acc("fpf-er")?,
        acc("kfpf-ce")?,
        acc("kfpf-kd")?,
    );
    let detail = format!(
        "mean acc SGD {sgd:.3}, FPF+SGD {fsgd:.3}, ER {er:.3}, FPF+ER {fer:.3}, k-FPF-CE {kce:.3}, k-FPF-KD {kkd:.3}"
    );
    let ok = sgd < 0.35
        && fsgd >= sgd + 0.20
        && fer >= er
        && kce >= fer - 0.10
        && kce >= sgd + 0.20
        && kkd >= kce - 0.02;
    check(ok, detail.clone())?;
    Ok(detail)
}

/// Samples per epoch and epochs of the reference CIFAR-10 protocol.
const REFERENCE_SAMPLES: u64 = 50_000;
const REFERENCE_EPOCHS: u64 = 5;

fn criterion_flops(s: &SweepOutcome) -> Outcome {
    let start = Instant::now();
    let model = Model::new(ModelSpec::cnn_bn([3, 32, 32], 10), &mut Rng::new(0)).map_err(err)?;
    let fm = FlopsModel::of(&model);
    let batch = 32;
    let steps = (REFERENCE_SAMPLES * REFERENCE_EPOCHS).div_ceil(batch as u64);
    let sgd = fm.sgd_total(steps, batch) as f64;
    let er = fm.er_total(steps, batch, batch) as f64;
    let tau = KfpfConfig::tau_for(steps as usize, 5) as u64;
    let passes = steps / tau + 1;
    let kfpf = fm.kfpf_total(steps, batch, passes, 100, 32) as f64;
    let (er_ratio, k_ratio) = (er / sgd, kfpf / er);
    let elapsed = start.elapsed();
    let desk = cell_mean(s, "kfpf-ce", |r| r.flops_mean)? / cell_mean(s, "er", |r| r.flops_mean)?;
    let detail = format!(
        "{steps} steps: ER/SGD {er_ratio:.3}, k-FPF/ER {k_ratio:.3} ({passes} passes); desk-scale k-FPF/ER {desk:.3} (informational)"
    );
    check(
        (er_ratio - 2.0).abs() <= 0.1 && k_ratio < 0.6 && elapsed < Duration::from_secs(1),
        detail.clone(),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. Isolation and replay-free contracts

fn small_stream(seed: u64) -> forgetlab_core::Stream {
    StreamSpec {
        source: DataSource::SyntheticGaussian {
            num_classes: 6,
            dim: 8,
            per_class: 60,
            sep: 6.0,
        },
        ..StreamSpec::synthetic_class_il(3, 2, seed)
    }
    .build()
    .expect("valid stream")
}

fn criterion_isolation() -> Outcome {
    let stream = small_stream(5);
    let batches = stream.batches(2, 16, 6);
    let spec = ModelSpec::mlp_bn(8, 6);
    let model = Model::new(spec, &mut Rng::new(8)).map_err(err)?;
    let mut cfg = TrainConfig::new(Method::Sgd, 9);
    cfg.buffer_capacity = 60;
    let base = run_sgd(&cfg, model.clone(), &batches, &mut ()).map_err(err)?;
    let masks = [
        "FC_LAST",
        "BN_AFFINE",
        "BN_STATS,FC_HIDDEN",
        "BN_AFFINE,BN_STATS,FC_LAST",
    ];
    for m in masks {
        let mask = SelectionMask::parse_list(m).map_err(err)?;
        let mut tuned = base.model.clone();
        let ft = FinetuneConfig::new(mask.clone(), 50, 0.05);
        fpf(
            &mut tuned,
            &base.buffer,
            &ft,
            Objective::Ce,
            &mut Rng::new(1),
            &mut FlopsLedger::default(),
        )
        .map_err(err)?;
        for (a, b) in base.model.params().iter().zip(tuned.params()) {
            let same = a
                .tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            check(
                mask.contains(a.group) || same,
                format!("{} changed under mask {m}", a.name),
            )?;
        }
    }

    let tau = KfpfConfig::tau_for(batches.len(), 3);
    let kc = KfpfConfig::new(tau, Objective::Kd { lambda: 0.5 });
    let ft = FinetuneConfig::new(SelectionMask::empty(), 20, 0.05);
    let tagged = run_kfpf(&cfg, model.clone(), &batches, &kc, &ft, &mut ()).map_err(err)?;
    check(
        tagged.cl_buffer_reads == 0,
        format!("k-FPF read {} items outside FPF", tagged.cl_buffer_reads),
    )?;
    let bare =
        run_kfpf(&cfg, model, &strip_boundaries(&batches), &kc, &ft, &mut ()).map_err(err)?;
    let same_params = tagged.model.params() == bare.model.params();
    let same = same_params
        && tagged.buffer == bare.buffer
        && tagged.ledger == bare.ledger
        && tagged.mask == bare.mask
        && tagged.fpf_passes == bare.fpf_passes;
    check(
        same,
        "k-FPF output changed when task boundaries were removed",
    )?;
    Ok(format!(
        "{} masks isolated bit-exactly; k-FPF reads outside FPF 0; boundary-free run identical ({} passes)",
        masks.len(),
        tagged.fpf_passes
    ))
}

// ---------------------------------------------------------------------------
// 9. Reproducibility

fn criterion_reproducibility(root: &Path) -> Outcome {
    let configs = [
        ("sgd", ""),
        ("der", ""),
        ("gdumb", ""),
        ("kfpf", "[kfpf]\nobjective = \"kd\"\n"),
    ];
    let (a, b) = (root.join("a"), root.join("b"));
    let mut checked = 0;
    let mut fpf_parent = None;
    for (i, (method, extra)) in configs.iter().enumerate() {
        let text = format!(
            "seed = {i}\n[stream]\ntasks = 3\nepochs = 2\nsource = {{ kind = \"synthetic_gaussian\", num_classes = 6, dim = 8, per_class = 60, sep = 6.0 }}\n[train]\nmethod = \"{method}\"\nbuffer_capacity = 50\n[fpf]\nsteps = 40\n{extra}"
        );
        let run = execute(&parse_config(&text).map_err(err)?, &a).map_err(err)?;
        let manifest = RunManifest::load(&run.dir.join("manifest.json")).map_err(err)?;
        let bad = manifest.verify(&run.dir).map_err(err)?;
        check(bad.is_empty(), format!("hash mismatch in {bad:?}"))?;
        let again = rerun_manifest(&manifest, &b).map_err(err)?;
        same_file(&run.dir.join("metrics.csv"), &again.join("metrics.csv"))?;
        roundtrip(&run.dir)?;
        checked += 1;
        fpf_parent.get_or_insert(run.dir);
    }
    let parent = fpf_parent.ok_or("no parent run")?;
    let opts = FpfOptions::from_section(FpfSection {
        mask: "FC_LAST".into(),
        steps: 30,
        ..FpfSection::default()
    });
    let first = cmd_fpf(&parent, &opts, &root.join("fa")).map_err(err)?;
    let again = rerun_manifest(&first.manifest, &root.join("fb")).map_err(err)?;
    same_file(&first.dir.join("metrics.csv"), &again.join("metrics.csv"))?;
    Ok(format!(
        "{checked} train manifests and 1 fpf manifest rerun to identical metrics.csv; checkpoints and buffers round-trip bit-exactly"
    ))
}

fn same_file(a: &Path, b: &Path) -> Result<(), String> {
    let (x, y) = (
        std::fs::read(a).map_err(err)?,
        std::fs::read(b).map_err(err)?,
    );
    check(
        x == y,
        format!("{} and {} differ", a.display(), b.display()),
    )
}

fn roundtrip(dir: &Path) -> Result<(), String> {
    let ckpt = dir.join(FINAL_CHECKPOINT);
    let (model, pos) = Model::load(&ckpt).map_err(err)?;
    let copy = dir.join("roundtrip.ckpt");
    model.save(&copy, pos).map_err(err)?;
    same_file(&ckpt, &copy)?;
    let buf = dir.join(BUFFER_FILE);
    let buffer = ReplayBuffer::load(&buf).map_err(err)?;
    let copy = dir.join("roundtrip.bin");
    buffer.save(&copy).map_err(err)?;
    same_file(&buf, &copy)?;
    check(
        ReplayBuffer::load(&copy).map_err(err)? == buffer,
        "buffer changed on reload",
    )
}

// ---------------------------------------------------------------------------
// 10. KD closed form

fn criterion_kd() -> Outcome {
    let zero = Tensor::new(vec![1, 2], vec![0.0, 0.0]).map_err(err)?;
    let v = kd_loss(&zero, &[1.0, -1.0], &[0], 0.5).map_err(err)?;
    let expected = std::f64::consts::LN_2 + 0.5;
    check(
        (v - expected).abs() < 1e-9,
        format!("kd_loss = {v}, expected {expected}"),
    )?;
    let mut rng = Rng::new(10);
    for _ in 0..200 {
        let (b, c) = (1 + rng.below(5), 2 + rng.below(5));
        let logits = random(&mut rng, vec![b, c], 3.0);
        let stored: Vec<f64> = (0..b * c).map(|_| rng.normal()).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let kd = kd_loss(&logits, &stored, &labels, 0.0).map_err(err)?;
        let ce = cross_entropy(&logits, &labels).map_err(err)?;
        check(
            kd.to_bits() == ce.to_bits(),
            format!("lambda 0 gave {kd} vs {ce}"),
        )?;
    }
    Ok(format!("kd_loss = {v:.9} (ln 2 + 0.5 = {expected:.9}); lambda 0 bit-identical to CE over 200 draws"))
}

// ---------------------------------------------------------------------------

struct Report {
    failures: usize,
}

impl Report {
    /// `setup` is time already spent on experiments the criterion reads.
    fn run(
        &mut self,
        n: usize,
        name: &str,
        budget: Duration,
        setup: Duration,
        f: impl FnOnce() -> Outcome,
    ) {
        let start = Instant::now();
        let outcome = f();
        let t = start.elapsed() + setup;
        let outcome = match outcome {
            Ok(d) if t > budget => Err(format!("{d}; over the {budget:?} budget")),
            o => o,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} criterion {n:>2} {name}: {detail} [{:.1}s]",
            t.as_secs_f64()
        );
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut r = Report { failures: 0 };
    r.run(
        1,
        "gradient oracle",
        Duration::from_secs(30),
        Duration::ZERO,
        criterion_gradients,
    );
    r.run(
        2,
        "reservoir uniformity",
        Duration::from_secs(60),
        Duration::ZERO,
        criterion_reservoir,
    );
    r.run(
        3,
        "sensitivity normalization",
        Duration::from_secs(30),
        Duration::ZERO,
        criterion_sensitivity,
    );

    let start = Instant::now();
    let runs = cnn_runs(root, false).and_then(|c| Ok((c, cnn_runs(root, true)?)));
    let cnn_time = start.elapsed();
    let fail = |e: &String| -> Outcome { Err(e.clone()) };
    match &runs {
        Ok((class, domain)) => r.run(
            4,
            "ranking reproduction",
            Duration::from_secs(600),
            cnn_time,
            || criterion_ranking(class, domain),
        ),
        Err(e) => r.run(
            4,
            "ranking reproduction",
            Duration::MAX,
            Duration::ZERO,
            || fail(e),
        ),
    }

    let start = Instant::now();
    let threads = std::thread::available_parallelism().map_or(1, usize::from);
    let sweep = SweepSpec::parse(METHOD_SWEEP)
        .and_then(|s| run_sweep(&s, root, threads))
        .map_err(err);
    let sweep_time = start.elapsed();
    match &sweep {
        Ok(s) => {
            r.run(
                5,
                "forgetting and FPF ordering",
                Duration::from_secs(1200),
                sweep_time,
                || criterion_ordering(s),
            );
            r.run(
                6,
                "FLOPs efficiency",
                Duration::from_secs(1),
                Duration::ZERO,
                || criterion_flops(s),
            );
        }
        Err(e) => {
            r.run(
                5,
                "forgetting and FPF ordering",
                Duration::MAX,
                Duration::ZERO,
                || fail(e),
            );
            r.run(6, "FLOPs efficiency", Duration::MAX, Duration::ZERO, || {
                fail(e)
            });
        }
    }
    match &runs {
        Ok((class, _)) => r.run(
            7,
            "boundary detection",
            Duration::from_secs(600),
            cnn_time,
            || criterion_boundaries(class),
        ),
        Err(e) => r.run(
            7,
            "boundary detection",
            Duration::MAX,
            Duration::ZERO,
            || fail(e),
        ),
    }

    r.run(
        8,
        "isolation and replay-free contracts",
        Duration::from_secs(120),
        Duration::ZERO,
        criterion_isolation,
    );
    r.run(
        9,
        "reproducibility",
        Duration::from_secs(120),
        Duration::ZERO,
        || criterion_reproducibility(root),
    );
    r.run(
        10,
        "KD closed form",
        Duration::from_secs(5),
        Duration::ZERO,
        criterion_kd,
    );

    if r.failures > 0 {
        println!("{} acceptance criteria failed", r.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
