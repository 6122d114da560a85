//! Layer-wise training with local error signals.
//!
//! Every unit is a local block: its base conv stack plus an auxiliary
//! classifier whose loss generates the block's gradient. Activations are
//! detached at block boundaries, so no gradient ever crosses between
//! blocks, and each block owns its own optimizer state. The last block's
//! local classifier is the network head, trained with cross-entropy.
//!
//! Two schedules are provided: `concurrent` (all blocks update on every
//! batch, the default) and `greedy` (blocks trained strictly in order,
//! earlier blocks frozen in eval mode).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{eval_batches, iterate_batches, Batch, BatchPlan, ImageDataset};
use crate::error::{Error, Result};
use crate::network::{ForwardOptions, ForwardPass, Network, Trainable};
use crate::nn::Mode;
use crate::optim::{AdamState, DecaySchedule};
use crate::rng::{stream, StreamTag};

/// One-hot label matrix `Y`, shape `[batch, num_classes]`.
#[derive(Debug, Clone)]
pub struct LabelMatrix {
    pub data: Vec<f32>,
    pub batch: usize,
    pub classes: usize,
}

impl LabelMatrix {
    pub fn from_labels(labels: &[u32], classes: usize) -> Self {
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            data[i * classes + l as usize] = 1.0;
        }
        LabelMatrix {
            data,
            batch: labels.len(),
            classes,
        }
    }

    /// Recover integer labels; errors if any row is not one-hot.
    pub fn labels(&self) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(self.batch);
        for (i, row) in self.data.chunks(self.classes).enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != self.classes {
                return Err(Error::InvalidArgument(format!(
                    "label matrix row {i} is not one-hot"
                )));
            }
            out.push(row.iter().position(|&v| v == 1.0).unwrap() as u32);
        }
        Ok(out)
    }
}

/// Which local loss drives each hidden block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalLossKind {
    /// Squared Frobenius distance between softmax outputs and Y.
    FrobeniusOnehot,
    /// Mean negative log-likelihood.
    CrossEntropy,
    /// Cross-entropy plus `alpha` times an injected similarity term;
    /// `alpha = 0` (the default) reduces to pure cross-entropy.
    PredsimStub { alpha: f64 },
}

/// Pluggable similarity-matching term for [`LocalLossKind::PredsimStub`].
pub trait SimilarityTerm {
    fn term(&self, tape: &mut Tape, features: Tensor, y: &LabelMatrix) -> Result<Tensor>;
}

/// Evaluate the configured local loss for one block.
///
/// `features` is the block output feeding the similarity term; it is
/// ignored by the two pure prediction losses.
pub fn local_loss(
    tape: &mut Tape,
    kind: LocalLossKind,
    similarity: Option<&dyn SimilarityTerm>,
    logits: Tensor,
    features: Tensor,
    y: &LabelMatrix,
) -> Result<Tensor> {
    let labels = y.labels()?;
    match kind {
        LocalLossKind::FrobeniusOnehot => tape.frobenius_onehot(logits, &y.data),
        LocalLossKind::CrossEntropy => tape.softmax_cross_entropy(logits, &labels),
        LocalLossKind::PredsimStub { alpha } => {
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            match (similarity, alpha != 0.0) {
                (Some(sim), true) => {
                    let term = sim.term(tape, features, y)?;
                    let scaled = tape.scale(term, alpha as f32);
                    tape.add(ce, scaled)
                }
                _ => Ok(ce),
            }
        }
    }
}

/// Hyper-parameters shared by all trainers.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f32,
    pub seed: u64,
    pub local_loss: LocalLossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Per-epoch measurements; wall time is reported separately so records
/// are a pure function of (config, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training objective per sample over the epoch.
    pub train_loss: f64,
    /// Accuracy of the classifier being optimized, on training batches.
    pub train_accuracy: f64,
    /// Head accuracy on the test split (eval mode).
    pub test_accuracy: f64,
    /// Probe accuracy of each block's local classifier on the test split;
    /// the last entry is the head and equals `test_accuracy`.
    pub probe_accuracies: Vec<f64>,
}

/// One local block's training state: its unit index plus a private
/// optimizer. Parameters stay in the shared store but the id sets of
/// distinct blocks are disjoint.
pub struct LocalBlock {
    pub index: usize,
    pub optimizer: AdamState,
}

/// Build the per-block optimizer states (the last block owns the head).
pub fn make_local_blocks(net: &Network) -> Vec<LocalBlock> {
    (0..net.units.len())
        .map(|j| LocalBlock {
            index: j,
            optimizer: AdamState::new(&net.store, &net.block_param_ids(j)),
        })
        .collect()
}

fn dropout_streams(seed: u64, n_units: usize) -> Vec<ChaCha8Rng> {
    (0..n_units)
        .map(|j| stream(seed, StreamTag::Dropout, j as u64))
        .collect()
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &[f32], labels: &[u32], classes: usize) -> f64 {
    let mut correct = 0usize;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == l as usize {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Head accuracy over a dataset in eval mode.
pub fn evaluate(net: &mut Network, ds: &ImageDataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0.0;
    for b in eval_batches(ds, batch_size) {
        let logits = net.eval_logits(b.images, b.size)?;
        correct += accuracy(&logits, &b.labels, ds.num_classes) * b.size as f64;
    }
    Ok(correct / ds.len() as f64)
}

/// Per-block separability profile: eval accuracy of every local
/// classifier on `ds`, the head last.
pub fn separability_probe(
    net: &mut Network,
    ds: &ImageDataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Data("separability probe needs a non-empty dataset".into()));
    }
    let n_units = net.units.len();
    let res = net.plan.spec.input_resolution;
    let mut correct = vec![0.0f64; n_units];
    for b in eval_batches(ds, batch_size) {
        let mut tape = Tape::new();
        let x = tape.leaf(b.images, vec![b.size, 3, res, res], false);
        let pass = net.forward(&mut tape, x, &ForwardOptions::eval_with_aux(), &mut [])?;
        for j in 0..n_units {
            let logits = if j + 1 == n_units {
                pass.head_logits.expect("full forward has head logits")
            } else {
                pass.aux_logits[j].expect("hidden units have aux logits")
            };
            correct[j] +=
                accuracy(tape.values(logits), &b.labels, ds.num_classes) * b.size as f64;
        }
    }
    Ok(correct.into_iter().map(|c| c / ds.len() as f64).collect())
}

struct BatchOutcome {
    loss: f64,
    train_accuracy: f64,
}

/// Forward one training batch under `opts`, assemble the block losses
/// into one scalar, run backward and harvest gradients.
///
/// Returns the objective value and the accuracy of the classifier that
/// `loss_of` selects for reporting.
fn train_batch(
    net: &mut Network,
    batch: &Batch,
    opts: &ForwardOptions,
    rngs: &mut [ChaCha8Rng],
    cfg: &TrainConfig,
    similarity: Option<&dyn SimilarityTerm>,
    loss_blocks: &[usize],
    report_block: usize,
) -> Result<BatchOutcome> {
    let n_units = net.units.len();
    let res = net.plan.spec.input_resolution;
    let classes = net.plan.num_classes;
    let y = LabelMatrix::from_labels(&batch.labels, classes);
    let mut tape = Tape::new();
    let x = tape.leaf(batch.images.clone(), vec![batch.size, 3, res, res], false);
    let pass = net.forward(&mut tape, x, opts, rngs)?;

    let block_logits = |pass: &ForwardPass, j: usize| -> Tensor {
        if j + 1 == n_units {
            pass.head_logits.expect("head logits present")
        } else {
            pass.aux_logits[j].expect("aux logits present")
        }
    };

    let mut total: Option<Tensor> = None;
    for &j in loss_blocks {
        let logits = block_logits(&pass, j);
        // The head is trained with plain cross-entropy; hidden blocks use
        // the configured local loss.
        let l = if j + 1 == n_units {
            let labels = y.labels()?;
            tape.softmax_cross_entropy(logits, &labels)
        } else {
            local_loss(&mut tape, cfg.local_loss, similarity, logits, pass.unit_outputs[j], &y)
        }
        .map_err(|e| e.in_block(j))?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no loss blocks selected".into()))?;
    let loss_value = tape.values(total)[0] as f64;
    tape.backward(total)?;
    tape.accumulate_param_grads(&mut net.store);

    let report_logits = block_logits(&pass, report_block);
    let train_accuracy = accuracy(tape.values(report_logits), &batch.labels, classes);
    Ok(BatchOutcome {
        loss: loss_value,
        train_accuracy,
    })
}

fn epoch_record(
    net: &mut Network,
    test: &ImageDataset,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
    loss_sum: f64,
    acc_sum: f64,
    samples: f64,
) -> Result<EpochMetrics> {
    let probes = separability_probe(net, test, cfg.batch_size)?;
    let test_accuracy = *probes.last().expect("at least one block");
    Ok(EpochMetrics {
        epoch,
        lr,
        train_loss: loss_sum / samples,
        train_accuracy: acc_sum / samples,
        test_accuracy,
        probe_accuracies: probes,
    })
}

/// Concurrent layer-wise training: every batch, all blocks compute their
/// local losses on detached inputs and step their own optimizers.
pub fn train_layerwise_concurrent(
    net: &mut Network,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    train_layerwise_concurrent_with(net, train, test, cfg, None)
}

pub fn train_layerwise_concurrent_with(
    net: &mut Network,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &TrainConfig,
    similarity: Option<&dyn SimilarityTerm>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let n_units = net.units.len();
    let mut blocks = make_local_blocks(net);
    let mut rngs = dropout_streams(cfg.seed, n_units);
    let schedule = DecaySchedule::quartered(cfg.epochs);
    let plan = BatchPlan {
        seed: cfg.seed,
        batch_size: cfg.batch_size,
    };
    let all_blocks: Vec<usize> = (0..n_units).collect();
    let opts = ForwardOptions {
        mode: Mode::Train,
        detach_boundaries: true,
        compute_aux: true,
        dropout: cfg.dropout,
        trainable: Trainable::All,
        up_to: None,
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at_epoch(cfg.lr, epoch)?;
        let (mut loss_sum, mut acc_sum, mut samples) = (0.0, 0.0, 0.0);
        for batch in iterate_batches(train, &plan, epoch) {
            let out = train_batch(
                net,
                &batch,
                &opts,
                &mut rngs,
                cfg,
                similarity,
                &all_blocks,
                n_units - 1,
            )?;
            // Disjoint parameter sets make the step order immaterial.
            for b in &mut blocks {
                b.optimizer.step(&mut net.store, lr)?;
            }
            net.store.zero_grads();
            loss_sum += out.loss * batch.size as f64;
            acc_sum += out.train_accuracy * batch.size as f64;
            samples += batch.size as f64;
        }
        records.push(epoch_record(net, test, cfg, epoch, lr, loss_sum, acc_sum, samples)?);
    }
    Ok(records)
}

/// Greedy layer-wise training: blocks trained strictly in order, each to
/// its own epoch budget with earlier blocks frozen in eval mode. The head
/// trains during the last block's phase. Budgets are `epochs / N` with the
/// remainder assigned to the last block, preserving total compute parity
/// with the concurrent schedule.
pub fn train_layerwise_greedy(
    net: &mut Network,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let n_units = net.units.len();
    if cfg.epochs < n_units {
        return Err(Error::InvalidArgument(format!(
            "greedy mode needs at least one epoch per block ({n_units})"
        )));
    }
    let mut blocks = make_local_blocks(net);
    let mut rngs = dropout_streams(cfg.seed, n_units);
    let plan = BatchPlan {
        seed: cfg.seed,
        batch_size: cfg.batch_size,
    };
    let base_budget = cfg.epochs / n_units;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut global_epoch = 0usize;
    for j in 0..n_units {
        let budget = if j + 1 == n_units {
            cfg.epochs - base_budget * (n_units - 1)
        } else {
            base_budget
        };
        // Each phase runs the full decay schedule over its own budget, so
        // every block's local risk is minimized with the same recipe.
        let schedule = DecaySchedule::quartered(budget);
        let opts = ForwardOptions {
            mode: Mode::Train,
            detach_boundaries: true,
            compute_aux: j + 1 < n_units,
            dropout: cfg.dropout,
            trainable: Trainable::Only(j),
            up_to: Some(j),
        };
        for phase_epoch in 0..budget {
            let lr = schedule.lr_at_epoch(cfg.lr, phase_epoch)?;
            let (mut loss_sum, mut acc_sum, mut samples) = (0.0, 0.0, 0.0);
            for batch in iterate_batches(train, &plan, global_epoch) {
                let out =
                    train_batch(net, &batch, &opts, &mut rngs, cfg, None, &[j], j)?;
                blocks[j].optimizer.step(&mut net.store, lr)?;
                net.store.zero_grads();
                loss_sum += out.loss * batch.size as f64;
                acc_sum += out.train_accuracy * batch.size as f64;
                samples += batch.size as f64;
            }
            records.push(epoch_record(
                net, test, cfg, global_epoch, lr, loss_sum, acc_sum, samples,
            )?);
            global_epoch += 1;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, BlockKind, HierarchySpec};
    use crate::data::synth_blobs;

    fn tiny_net(kind: BlockKind, seed: u64) -> Network {
        let spec = HierarchySpec::new(vec![1, 1], vec![4, 8], kind, 8).unwrap();
        Network::new(build_network(&spec, 4).unwrap(), seed)
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 3e-3,
            dropout: 0.0,
            seed: 7,
            local_loss: LocalLossKind::CrossEntropy,
        }
    }

    #[test]
    fn label_matrix_round_trip_and_validation() {
        let y = LabelMatrix::from_labels(&[2, 0, 1], 3);
        assert_eq!(y.labels().unwrap(), vec![2, 0, 1]);
        let mut bad = y.clone();
        bad.data[0] = 0.5;
        assert!(bad.labels().is_err());
    }

    #[test]
    fn predsim_stub_defaults_to_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0; 8], vec![2, 4], false);
        let y = LabelMatrix::from_labels(&[1, 3], 4);
        let a = local_loss(&mut tape, LocalLossKind::CrossEntropy, None, logits, logits, &y)
            .unwrap();
        let b = local_loss(
            &mut tape,
            LocalLossKind::PredsimStub { alpha: 0.0 },
            None,
            logits,
            logits,
            &y,
        )
        .unwrap();
        assert_eq!(tape.values(a)[0].to_bits(), tape.values(b)[0].to_bits());
    }

    #[test]
    fn predsim_stub_adds_scaled_similarity_term() {
        struct Constant;
        impl SimilarityTerm for Constant {
            fn term(&self, tape: &mut Tape, _f: Tensor, _y: &LabelMatrix) -> Result<Tensor> {
                Ok(tape.leaf(vec![2.0], vec![1], false))
            }
        }
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0; 8], vec![2, 4], false);
        let y = LabelMatrix::from_labels(&[1, 3], 4);
        let ce = local_loss(&mut tape, LocalLossKind::CrossEntropy, None, logits, logits, &y)
            .unwrap();
        let ps = local_loss(
            &mut tape,
            LocalLossKind::PredsimStub { alpha: 0.5 },
            Some(&Constant),
            logits,
            logits,
            &y,
        )
        .unwrap();
        let diff = tape.values(ps)[0] - tape.values(ce)[0];
        assert!((diff - 1.0).abs() < 1e-6);
    }

    #[test]
    fn untrained_probe_is_near_chance() {
        let mut net = tiny_net(BlockKind::Plain, 3);
        let ds = synth_blobs(4, 50, 8, 0.05, 11).unwrap();
        let probes = separability_probe(&mut net, &ds, 32).unwrap();
        assert_eq!(probes.len(), 2);
        for p in probes {
            assert!(p < 0.65, "untrained probe accuracy {p} too high");
        }
    }

    #[test]
    fn concurrent_training_reduces_loss_and_is_deterministic() {
        let train = synth_blobs(4, 20, 8, 0.05, 1).unwrap();
        let cfg = tiny_cfg(4);
        let mut n1 = tiny_net(BlockKind::Plain, 9);
        let m1 = train_layerwise_concurrent(&mut n1, &train, &train, &cfg).unwrap();
        assert!(m1.last().unwrap().train_loss < m1[0].train_loss);
        let mut n2 = tiny_net(BlockKind::Plain, 9);
        let m2 = train_layerwise_concurrent(&mut n2, &train, &train, &cfg).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn greedy_freezes_other_blocks() {
        let train = synth_blobs(4, 10, 8, 0.05, 2).unwrap();
        let mut net = tiny_net(BlockKind::Residual, 4);
        let before: Vec<Vec<f32>> = net
            .block_param_ids(1)
            .iter()
            .map(|&p| net.store.get(p).values.clone())
            .collect();
        // Run only block 0's phase by giving exactly one epoch per block
        // and checking block 1 after the records for phase 0 exist.
        let cfg = tiny_cfg(2);
        let _ = train_layerwise_greedy(&mut net, &train, &train, &cfg).unwrap();
        // After the full run block 1 must have moved; rerun to inspect the
        // intermediate state instead.
        let mut net2 = tiny_net(BlockKind::Residual, 4);
        let mut blocks = make_local_blocks(&net2);
        let mut rngs = dropout_streams(cfg.seed, 2);
        let plan = BatchPlan { seed: cfg.seed, batch_size: cfg.batch_size };
        let opts = ForwardOptions {
            mode: Mode::Train,
            detach_boundaries: true,
            compute_aux: true,
            dropout: 0.0,
            trainable: Trainable::Only(0),
            up_to: Some(0),
        };
        for batch in iterate_batches(&train, &plan, 0) {
            train_batch(&mut net2, &batch, &opts, &mut rngs, &cfg, None, &[0], 0).unwrap();
            blocks[0].optimizer.step(&mut net2.store, 1e-3).unwrap();
            net2.store.zero_grads();
        }
        let after: Vec<Vec<f32>> = net2
            .block_param_ids(1)
            .iter()
            .map(|&p| net2.store.get(p).values.clone())
            .collect();
        assert_eq!(before, after, "frozen block parameters changed");
        // And block 0 must have moved.
        let init = tiny_net(BlockKind::Residual, 4);
        let moved = net2
            .block_param_ids(0)
            .iter()
            .any(|&p| net2.store.get(p).values != init.store.get(p).values);
        assert!(moved);
    }

    #[test]
    fn frozen_blocks_are_bitwise_stable_in_eval() {
        let mut net = tiny_net(BlockKind::Plain, 8);
        let ds = synth_blobs(4, 8, 8, 0.05, 3).unwrap();
        let b = &eval_batches(&ds, 32)[0];
        let l1 = net.eval_logits(b.images.clone(), b.size).unwrap();
        let l2 = net.eval_logits(b.images.clone(), b.size).unwrap();
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn probe_rejects_empty_dataset() {
        let mut net = tiny_net(BlockKind::Plain, 8);
        let empty = ImageDataset {
            images: vec![],
            labels: vec![],
            resolution: 8,
            num_classes: 4,
            split: crate::data::Split::Test,
            stats: None,
        };
        assert!(separability_probe(&mut net, &empty, 8).is_err());
    }
}
