//! Experiment runner: executes every (seed, mode) pair of a run config,
//! writes per-epoch metrics CSV, plot-ready curve files, a mean±std
//! summary table and a provenance log.
//!
//! Metrics are a pure function of the configuration, so reruns produce
//! bitwise-identical CSVs; wall-clock timings go to the provenance log
//! only. Runs may execute in parallel (capped by `LAYERWISE_LAB_THREADS`)
//! because each (seed, mode) job owns its network and optimizer state;
//! results are collected in the deterministic job order.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::config::{RunConfig, TrainMode};
use crate::data::{iterate_batches, BatchPlan, ImageDataset};
use crate::error::{Error, Result};
use crate::global::{compare_runs, train_global};
use crate::local::{
    local_loss, train_layerwise_concurrent, train_layerwise_greedy, EpochMetrics, LabelMatrix,
    TrainConfig,
};
use crate::network::{ForwardOptions, Network, Trainable};
use crate::nn::Mode;

pub struct RunResult {
    pub run_id: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub records: Vec<EpochMetrics>,
    pub wall_secs: f64,
}

pub struct ExperimentOutcome {
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub provenance_path: PathBuf,
    pub summary: String,
    pub runs: Vec<RunResult>,
}

fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        dropout: cfg.dropout,
        seed,
        local_loss: cfg.local_loss,
    }
}

fn run_one(
    cfg: &RunConfig,
    train: &ImageDataset,
    test: &ImageDataset,
    mode: TrainMode,
    seed: u64,
) -> Result<RunResult> {
    let plan = cfg.build_plan()?;
    let mut net = Network::new(plan, seed);
    let tc = train_config(cfg, seed);
    let started = Instant::now();
    let records = match mode {
        TrainMode::LayerwiseConcurrent => train_layerwise_concurrent(&mut net, train, test, &tc),
        TrainMode::LayerwiseGreedy => train_layerwise_greedy(&mut net, train, test, &tc),
        TrainMode::Global => train_global(&mut net, train, test, &tc),
    }?;
    Ok(RunResult {
        run_id: format!("{}-{}-s{}", cfg.model, mode.name(), seed),
        mode,
        seed,
        records,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

fn thread_cap() -> usize {
    std::env::var("LAYERWISE_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn write_csv(path: &Path, runs: &[&RunResult], num_blocks: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "run_id".to_string(),
        "mode".to_string(),
        "seed".to_string(),
        "epoch".to_string(),
        "lr".to_string(),
        "train_loss".to_string(),
        "train_accuracy".to_string(),
        "test_accuracy".to_string(),
    ];
    header.extend((0..num_blocks).map(|j| format!("probe_{j}")));
    w.write_record(&header)?;
    for run in runs {
        for r in &run.records {
            let mut row = vec![
                run.run_id.clone(),
                run.mode.name().to_string(),
                run.seed.to_string(),
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.train_accuracy.to_string(),
                r.test_accuracy.to_string(),
            ];
            row.extend(r.probe_accuracies.iter().map(|p| p.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn best_accuracy(records: &[EpochMetrics]) -> f64 {
    records
        .iter()
        .map(|r| r.test_accuracy)
        .fold(f64::MIN, f64::max)
}

fn render_summary(cfg: &RunConfig, runs: &[RunResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "model {}  hierarchy {:?}  ({} seeds)\n",
        cfg.model,
        cfg.hierarchy,
        cfg.seeds.len()
    ));
    out.push_str("accuracy = best-epoch test accuracy over each run\n\n");
    out.push_str(&format!("{:<24} {:>8} {:>8}\n", "mode", "mean%", "std%"));
    for &mode in &cfg.modes {
        let accs: Vec<f64> = runs
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| best_accuracy(&r.records) * 100.0)
            .collect();
        let (m, s) = mean_std(&accs);
        out.push_str(&format!("{:<24} {:>8.2} {:>8.2}\n", mode.name(), m, s));
    }
    // Paired two-column table when a layer-wise mode and the global
    // baseline are both present.
    let lw_mode = cfg
        .modes
        .iter()
        .copied()
        .find(|m| *m != TrainMode::Global);
    if let Some(lw_mode) = lw_mode {
        if cfg.modes.contains(&TrainMode::Global) {
            let mut gaps = Vec::new();
            let mut last = None;
            for &seed in &cfg.seeds {
                let lw = runs.iter().find(|r| r.mode == lw_mode && r.seed == seed);
                let gl = runs
                    .iter()
                    .find(|r| r.mode == TrainMode::Global && r.seed == seed);
                if let (Some(lw), Some(gl)) = (lw, gl) {
                    if let Ok(c) = compare_runs(&lw.records, &gl.records) {
                        gaps.push(c.gap * 100.0);
                        last = Some(c);
                    }
                }
            }
            if let Some(c) = last {
                let (gap_mean, _) = mean_std(&gaps);
                out.push('\n');
                out.push_str(&format!("{c}\n"));
                out.push_str(&format!("mean gap over seeds (points): {gap_mean:.2}\n"));
            }
        }
    }
    out
}

/// Execute every (seed, mode) job of `cfg` and write metrics.csv,
/// summary.txt, provenance.log and per-run curve files into its output
/// directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let (train, test) = cfg.load_dataset()?;
    let plan = cfg.build_plan()?;
    let num_blocks = plan.units.len();

    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        for &mode in &cfg.modes {
            jobs.push((mode, seed));
        }
    }
    let threads = thread_cap().min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunResult>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (mode, seed) = jobs[i];
                let res = run_one(cfg, &train, &test, mode, seed);
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    let results = results.into_inner().unwrap();

    // Completed runs are written even if a later job failed, so partial
    // CSVs survive a diagnostic exit.
    let mut runs = Vec::new();
    let mut first_err = None;
    for slot in results {
        match slot.expect("every job ran") {
            Ok(r) => runs.push(r),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    let csv_path = cfg.out_dir.join("metrics.csv");
    write_csv(&csv_path, &runs.iter().collect::<Vec<_>>(), num_blocks)?;
    if let Some(e) = first_err {
        return Err(e);
    }

    let summary = render_summary(cfg, &runs);
    let summary_path = cfg.out_dir.join("summary.txt");
    std::fs::write(&summary_path, &summary)?;

    let mut prov = String::new();
    prov.push_str(&format!("config (resolved): {cfg:?}\n"));
    for d in &cfg.defaults_used {
        prov.push_str(&format!("default: {d}\n"));
    }
    prov.push_str(&format!("threads: {threads}\n"));
    for r in &runs {
        prov.push_str(&format!("wall_secs {}: {:.3}\n", r.run_id, r.wall_secs));
    }
    let provenance_path = cfg.out_dir.join("provenance.log");
    std::fs::write(&provenance_path, &prov)?;

    emit_curves(&csv_path, &cfg.out_dir)?;
    Ok(ExperimentOutcome {
        csv_path,
        summary_path,
        provenance_path,
        summary,
        runs,
    })
}

/// Rewrite a metrics CSV as per-run two-column plot data
/// (`epoch test_error`), one file per run id.
pub fn emit_curves(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("metrics CSV is missing column '{name}'")))
    };
    let (id_col, epoch_col, acc_col) = (col("run_id")?, col("epoch")?, col("test_accuracy")?);
    let mut order: Vec<String> = Vec::new();
    let mut series: std::collections::HashMap<String, String> = std::collections::HashMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record[id_col].to_string();
        let epoch = &record[epoch_col];
        let acc: f64 = record[acc_col]
            .parse()
            .map_err(|_| Error::Data(format!("bad test_accuracy '{}'", &record[acc_col])))?;
        if !series.contains_key(&id) {
            order.push(id.clone());
        }
        series
            .entry(id)
            .or_default()
            .push_str(&format!("{} {}\n", epoch, 1.0 - acc));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for id in order {
        let path = out_dir.join(format!("curve_{id}.txt"));
        std::fs::write(&path, &series[&id])?;
        paths.push(path);
    }
    Ok(paths)
}

/// Result of the instrumented isolation audit.
#[derive(Debug, Clone)]
pub struct IsolationReport {
    pub batches_checked: usize,
    pub max_cross_block_grad: f32,
    /// (loss block, parameter block) of the worst leak, when nonzero.
    pub worst_pair: Option<(usize, usize)>,
    pub inference_equivalent: bool,
    pub pass: bool,
}

impl std::fmt::Display for IsolationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "batches checked: {}", self.batches_checked)?;
        writeln!(f, "max cross-block gradient: {:e}", self.max_cross_block_grad)?;
        if let Some((j, i)) = self.worst_pair {
            writeln!(f, "worst leak: loss of block {j} into params of block {i}")?;
        }
        writeln!(f, "inference equivalence: {}", self.inference_equivalent)?;
        write!(f, "audit: {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Run a 3-batch instrumented layer-wise training step set and verify
/// that every block's loss produces exactly zero gradient on the
/// parameters of every other block, then check export/inference
/// equivalence. Refuses configs without a layer-wise mode.
pub fn audit_gradient_isolation(cfg: &RunConfig) -> Result<IsolationReport> {
    audit_gradient_isolation_with(cfg, true)
}

/// Same audit with boundary detaching switchable, so tests can verify
/// the audit actually detects a removed detach.
pub fn audit_gradient_isolation_with(
    cfg: &RunConfig,
    detach_boundaries: bool,
) -> Result<IsolationReport> {
    if !cfg
        .modes
        .iter()
        .any(|m| matches!(m, TrainMode::LayerwiseConcurrent | TrainMode::LayerwiseGreedy))
    {
        return Err(Error::InvalidArgument(
            "gradient-isolation audit requires a layer-wise mode".into(),
        ));
    }
    let (train, test) = cfg.load_dataset()?;
    let plan = cfg.build_plan()?;
    let seed = cfg.seeds[0];
    let mut net = Network::new(plan, seed);
    let n_units = net.units.len();
    let res = net.plan.spec.input_resolution;
    let classes = net.plan.num_classes;
    let bplan = BatchPlan {
        seed,
        batch_size: cfg.batch_size.min(32).max(2),
    };
    let opts = ForwardOptions {
        mode: Mode::Train,
        detach_boundaries,
        compute_aux: true,
        dropout: 0.0,
        trainable: Trainable::All,
        up_to: None,
    };
    let mut max_cross = 0.0f32;
    let mut worst_pair = None;
    let batches: Vec<_> = iterate_batches(&train, &bplan, 0).into_iter().take(3).collect();
    let batches_checked = batches.len();
    for batch in &batches {
        let y = LabelMatrix::from_labels(&batch.labels, classes);
        for j in 0..n_units {
            let mut tape = Tape::new();
            let x = tape.leaf(batch.images.clone(), vec![batch.size, 3, res, res], false);
            let pass = net.forward(&mut tape, x, &opts, &mut [])?;
            let loss = if j + 1 == n_units {
                tape.softmax_cross_entropy(pass.head_logits.unwrap(), &batch.labels)?
            } else {
                let logits = pass.aux_logits[j].unwrap();
                local_loss(&mut tape, cfg.local_loss, None, logits, pass.unit_outputs[j], &y)?
            };
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut net.store);
            for i in 0..n_units {
                if i == j {
                    continue;
                }
                for pid in net.block_param_ids(i) {
                    // The head belongs to the last block; skip it when it
                    // is shared with the loss block.
                    if j + 1 == n_units && net.head_param_ids().contains(&pid) {
                        continue;
                    }
                    for &g in &net.store.get(pid).grad {
                        if g.abs() > max_cross {
                            max_cross = g.abs();
                            worst_pair = Some((j, i));
                        }
                    }
                }
            }
            net.store.zero_grads();
        }
    }

    // Inference equivalence: copy base weights into a differently seeded
    // network and compare head logits bitwise.
    let mut other = Network::new(cfg.build_plan()?, seed ^ 0x5a5a);
    net.copy_base_weights_into(&mut other)?;
    let n_check = test.len().min(100);
    let mut equivalent = true;
    for i in 0..n_check {
        let img = test.image(i).to_vec();
        let a = net.eval_logits(img.clone(), 1)?;
        let b = other.eval_logits(img, 1)?;
        if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            equivalent = false;
            break;
        }
    }
    Ok(IsolationReport {
        batches_checked,
        max_cross_block_grad: max_cross,
        worst_pair,
        inference_equivalent: equivalent,
        pass: max_cross == 0.0 && equivalent,
    })
}
