//! End-to-end backpropagation baseline over the same network plan.
//!
//! Shares every op, the optimizer and the batching code with the
//! layer-wise trainers, so a paired comparison isolates the training
//! regime. Aux branches exist (keeping initialization streams identical
//! across regimes) but neither execute nor receive gradients here.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{iterate_batches, BatchPlan, ImageDataset};
use crate::error::{Error, Result};
use crate::local::{accuracy, separability_probe, EpochMetrics, TrainConfig};
use crate::network::{ForwardOptions, Network, Trainable};
use crate::nn::Mode;
use crate::optim::{AdamState, DecaySchedule};
use crate::rng::{stream, StreamTag};

/// Single spanning optimizer over all base parameters plus the head.
pub struct GlobalTrainer {
    pub optimizer: AdamState,
}

impl GlobalTrainer {
    pub fn new(net: &Network) -> Self {
        GlobalTrainer {
            optimizer: AdamState::new(&net.store, &net.global_param_ids()),
        }
    }
}

/// Standard global training: one cross-entropy loss at the head, one
/// backward pass through every layer, one optimizer step per batch.
pub fn train_global(
    net: &mut Network,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let n_units = net.units.len();
    let res = net.plan.spec.input_resolution;
    let mut trainer = GlobalTrainer::new(net);
    let mut rngs: Vec<ChaCha8Rng> = (0..n_units)
        .map(|j| stream(cfg.seed, StreamTag::Dropout, j as u64))
        .collect();
    let schedule = DecaySchedule::quartered(cfg.epochs);
    let plan = BatchPlan {
        seed: cfg.seed,
        batch_size: cfg.batch_size,
    };
    let opts = ForwardOptions {
        mode: Mode::Train,
        detach_boundaries: false,
        compute_aux: false,
        dropout: cfg.dropout,
        trainable: Trainable::All,
        up_to: None,
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at_epoch(cfg.lr, epoch)?;
        let (mut loss_sum, mut acc_sum, mut samples) = (0.0, 0.0, 0.0);
        for batch in iterate_batches(train, &plan, epoch) {
            let mut tape = Tape::new();
            let x = tape.leaf(batch.images.clone(), vec![batch.size, 3, res, res], false);
            let pass = net.forward(&mut tape, x, &opts, &mut rngs)?;
            let logits = pass.head_logits.expect("full forward has head logits");
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let loss_value = tape.values(loss)[0] as f64;
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut net.store);
            trainer.optimizer.step(&mut net.store, lr)?;
            net.store.zero_grads();
            loss_sum += loss_value * batch.size as f64;
            acc_sum +=
                accuracy(tape.values(logits), &batch.labels, net.plan.num_classes)
                    * batch.size as f64;
            samples += batch.size as f64;
        }
        let probes = separability_probe(net, test, cfg.batch_size)?;
        let test_accuracy = *probes.last().expect("at least one block");
        records.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / samples,
            train_accuracy: acc_sum / samples,
            test_accuracy,
            probe_accuracies: probes,
        });
    }
    Ok(records)
}

/// Final/best accuracy per regime, in the two-column table layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub layerwise_final: f64,
    pub layerwise_best: f64,
    pub global_final: f64,
    pub global_best: f64,
    /// global best minus layer-wise best, in accuracy points.
    pub gap: f64,
}

pub fn compare_runs(lw: &[EpochMetrics], gl: &[EpochMetrics]) -> Result<Comparison> {
    if lw.len() != gl.len() {
        return Err(Error::InvalidArgument(format!(
            "epoch counts differ: layer-wise {} vs global {}",
            lw.len(),
            gl.len()
        )));
    }
    if lw.is_empty() {
        return Err(Error::InvalidArgument("empty metric records".into()));
    }
    let best = |m: &[EpochMetrics]| m.iter().map(|r| r.test_accuracy).fold(f64::MIN, f64::max);
    let (lb, gb) = (best(lw), best(gl));
    Ok(Comparison {
        layerwise_final: lw.last().unwrap().test_accuracy,
        layerwise_best: lb,
        global_final: gl.last().unwrap().test_accuracy,
        global_best: gb,
        gap: gb - lb,
    })
}

impl std::fmt::Display for Comparison {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<12} {:>10} {:>10}", "", "Layer-wise", "Global")?;
        writeln!(
            f,
            "{:<12} {:>10.2} {:>10.2}",
            "best acc %",
            self.layerwise_best * 100.0,
            self.global_best * 100.0
        )?;
        writeln!(
            f,
            "{:<12} {:>10.2} {:>10.2}",
            "final acc %",
            self.layerwise_final * 100.0,
            self.global_final * 100.0
        )?;
        write!(f, "gap (points): {:.2}", self.gap * 100.0)
    }
}
