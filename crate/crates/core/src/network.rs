//! Materializes a [`NetworkPlan`] into parameters and runs forward passes.
//!
//! Each unit is a conv stack (conv → batch-norm → leaky-ReLU → dropout,
//! with an identity shortcut around residual pairs) plus an auxiliary
//! classifier branch (3×3 conv → adaptive average pooling → linear). The
//! last unit has no aux branch: its local classifier is the network head
//! (global average pooling → linear), which is also the inference path.
//!
//! Initialization draws from per-unit RNG streams, with aux branches on
//! separate streams, so base weights are bit-identical across training
//! modes for a given seed.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::NetworkPlan;
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, Mode};
use crate::rng::{stream, StreamTag};

pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub bn: BatchNormState,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct AuxBranch {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub lin_w: ParamId,
    pub lin_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct UnitParams {
    pub convs: Vec<ConvLayer>,
    /// 1×1 projection for shortcut on shape change.
    pub proj: Option<(ParamId, ParamId)>,
    pub shortcut: bool,
    pub aux: Option<AuxBranch>,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub lin_w: ParamId,
    pub lin_b: ParamId,
}

/// A network with all parameters allocated.
pub struct Network {
    pub plan: NetworkPlan,
    pub store: ParamStore,
    pub units: Vec<UnitParams>,
    pub head: HeadParams,
}

/// Which units lease trainable parameters in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    None,
    /// Only this unit (plus the head when it is the last unit).
    Only(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Detach unit outputs before feeding the next unit.
    pub detach_boundaries: bool,
    /// Compute aux-branch logits (heads of units 0..N-2).
    pub compute_aux: bool,
    pub dropout: f32,
    pub trainable: Trainable,
    /// Stop after this unit (inclusive). The head only runs when the last
    /// unit is included.
    pub up_to: Option<usize>,
}

impl ForwardOptions {
    pub fn eval_with_aux() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            detach_boundaries: false,
            compute_aux: true,
            dropout: 0.0,
            trainable: Trainable::None,
            up_to: None,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            compute_aux: false,
            ..Self::eval_with_aux()
        }
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    /// O_j: output of each executed unit, pre-detach.
    pub unit_outputs: Vec<Tensor>,
    /// Aux logits c_j for units that computed them.
    pub aux_logits: Vec<Option<Tensor>>,
    /// Head logits; present when the last unit executed.
    pub head_logits: Option<Tensor>,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    // Gain for leaky-ReLU with the 0.01 slope.
    let gain = (2.0 / (1.0 + LEAKY_SLOPE as f64 * LEAKY_SLOPE as f64)).sqrt();
    let bound = (gain * (3.0 / fan_in as f64).sqrt()) as f32;
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn alloc_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
) -> ConvLayer {
    let fan_in = in_c * k * k;
    let w = store.add(vec![out_c, in_c, k, k], kaiming_uniform(rng, fan_in, out_c * fan_in));
    let b = store.add(vec![out_c], vec![0.0; out_c]);
    let gamma = store.add(vec![out_c], vec![1.0; out_c]);
    let beta = store.add(vec![out_c], vec![0.0; out_c]);
    ConvLayer {
        w,
        b,
        gamma,
        beta,
        bn: BatchNormState::new(out_c),
        stride,
    }
}

fn alloc_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    out_f: usize,
    in_f: usize,
) -> (ParamId, ParamId) {
    let w = store.add(vec![out_f, in_f], kaiming_uniform(rng, in_f, out_f * in_f));
    let b = store.add(vec![out_f], vec![0.0; out_f]);
    (w, b)
}

impl Network {
    pub fn new(plan: NetworkPlan, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let n_units = plan.units.len();
        let mut units = Vec::with_capacity(n_units);
        for (j, up) in plan.units.iter().enumerate() {
            let mut rng = stream(seed, StreamTag::Init, j as u64);
            let mut convs = Vec::with_capacity(up.convs);
            let mut in_c = up.in_channels;
            for ci in 0..up.convs {
                let stride = if ci == 0 { up.stride } else { 1 };
                convs.push(alloc_conv(&mut store, &mut rng, up.out_channels, in_c, 3, stride));
                in_c = up.out_channels;
            }
            let proj = up.projection.then(|| {
                let fan_in = up.in_channels;
                let w = store.add(
                    vec![up.out_channels, up.in_channels, 1, 1],
                    kaiming_uniform(&mut rng, fan_in, up.out_channels * fan_in),
                );
                let b = store.add(vec![up.out_channels], vec![0.0; up.out_channels]);
                (w, b)
            });
            let aux = (j + 1 < n_units).then(|| {
                let mut arng = stream(seed, StreamTag::AuxInit, j as u64);
                let c = up.out_channels;
                let fan_in = c * 9;
                let conv_w = store.add(vec![c, c, 3, 3], kaiming_uniform(&mut arng, fan_in, c * fan_in));
                let conv_b = store.add(vec![c], vec![0.0; c]);
                let t = plan.aux_pool_target;
                let (lin_w, lin_b) =
                    alloc_linear(&mut store, &mut arng, plan.num_classes, c * t * t);
                AuxBranch { conv_w, conv_b, lin_w, lin_b }
            });
            units.push(UnitParams {
                convs,
                proj,
                shortcut: up.shortcut,
                aux,
            });
        }
        let mut hrng = stream(seed, StreamTag::Init, n_units as u64);
        let last_c = plan.units.last().map(|u| u.out_channels).unwrap_or(3);
        let (lin_w, lin_b) = alloc_linear(&mut store, &mut hrng, plan.num_classes, last_c);
        Network {
            plan,
            store,
            units,
            head: HeadParams { lin_w, lin_b },
        }
    }

    /// Base (inference-path) parameters of unit `j`, in a fixed order.
    pub fn base_param_ids(&self, j: usize) -> Vec<ParamId> {
        let u = &self.units[j];
        let mut ids = Vec::new();
        for c in &u.convs {
            ids.extend([c.w, c.b, c.gamma, c.beta]);
        }
        if let Some((w, b)) = u.proj {
            ids.extend([w, b]);
        }
        ids
    }

    pub fn aux_param_ids(&self, j: usize) -> Vec<ParamId> {
        match &self.units[j].aux {
            Some(a) => vec![a.conv_w, a.conv_b, a.lin_w, a.lin_b],
            None => Vec::new(),
        }
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        vec![self.head.lin_w, self.head.lin_b]
    }

    /// All parameters a local trainer for unit `j` owns: base plus aux,
    /// plus the head for the last unit.
    pub fn block_param_ids(&self, j: usize) -> Vec<ParamId> {
        let mut ids = self.base_param_ids(j);
        ids.extend(self.aux_param_ids(j));
        if j + 1 == self.units.len() {
            ids.extend(self.head_param_ids());
        }
        ids
    }

    /// All base-network parameters plus the head (the global-BP set).
    pub fn global_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for j in 0..self.units.len() {
            ids.extend(self.base_param_ids(j));
        }
        ids.extend(self.head_param_ids());
        ids
    }

    fn unit_trainable(&self, opts: &ForwardOptions, j: usize) -> bool {
        match opts.trainable {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Only(t) => t == j,
        }
    }

    /// Run the network over `x: [N,3,H,W]`.
    ///
    /// `rngs` supplies one dropout stream per unit; pass an empty slice in
    /// eval mode.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Tensor,
        opts: &ForwardOptions,
        rngs: &mut [ChaCha8Rng],
    ) -> Result<ForwardPass> {
        let n_units = self.units.len();
        let stop = opts.up_to.unwrap_or(n_units - 1).min(n_units - 1);
        let mut unit_outputs = Vec::new();
        let mut aux_logits = Vec::new();
        let mut cur = x;
        for j in 0..=stop {
            let trainable = self.unit_trainable(opts, j);
            // A frozen unit always runs in eval mode so its statistics and
            // outputs are stable while others train.
            let unit_mode = if trainable { opts.mode } else { Mode::Eval };
            let rng = rngs.get_mut(j);
            let out = self
                .unit_forward(tape, j, cur, unit_mode, trainable, opts.dropout, rng)
                .map_err(|e| e.in_block(j))?;
            unit_outputs.push(out);
            let want_aux = opts.compute_aux && j + 1 < n_units;
            let aux = if want_aux {
                Some(
                    self.aux_forward(tape, j, out, trainable)
                        .map_err(|e| e.in_block(j))?,
                )
            } else {
                None
            };
            aux_logits.push(aux);
            cur = if opts.detach_boundaries && j < stop {
                tape.detach(out)
            } else {
                out
            };
        }
        let head_logits = if stop + 1 == n_units {
            let trainable = match opts.trainable {
                Trainable::All => true,
                Trainable::None => false,
                Trainable::Only(t) => t + 1 == n_units,
            };
            Some(self.head_forward(tape, cur, trainable)?)
        } else {
            None
        };
        Ok(ForwardPass {
            unit_outputs,
            aux_logits,
            head_logits,
        })
    }

    fn unit_forward(
        &mut self,
        tape: &mut Tape,
        j: usize,
        x: Tensor,
        mode: Mode,
        trainable: bool,
        dropout: f32,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let unit = &mut self.units[j];
        let shortcut_in = x;
        let mut cur = x;
        let n_convs = unit.convs.len();
        for (ci, layer) in unit.convs.iter_mut().enumerate() {
            let w = tape.param(&self.store, layer.w, trainable);
            let b = tape.param(&self.store, layer.b, trainable);
            let gamma = tape.param(&self.store, layer.gamma, trainable);
            let beta = tape.param(&self.store, layer.beta, trainable);
            cur = tape.conv2d(cur, w, b, layer.stride, 1)?;
            cur = tape.batch_norm(cur, gamma, beta, &mut layer.bn, mode)?;
            let last_conv = ci + 1 == n_convs;
            if !(unit.shortcut && last_conv) {
                cur = tape.leaky_relu(cur, LEAKY_SLOPE);
                if mode == Mode::Train && dropout > 0.0 {
                    let r = rng.as_deref_mut().ok_or_else(|| {
                        Error::InvalidArgument("dropout requires a per-unit rng stream".into())
                    })?;
                    cur = tape.dropout(cur, dropout, mode, r)?;
                }
            }
        }
        if unit.shortcut {
            let shortcut = match unit.proj {
                Some((w, b)) => {
                    let wt = tape.param(&self.store, w, trainable);
                    let bt = tape.param(&self.store, b, trainable);
                    let stride = unit.convs[0].stride;
                    tape.conv2d(shortcut_in, wt, bt, stride, 0)?
                }
                None => shortcut_in,
            };
            cur = tape.add(cur, shortcut)?;
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
            if mode == Mode::Train && dropout > 0.0 {
                let r = rng.as_deref_mut().ok_or_else(|| {
                    Error::InvalidArgument("dropout requires a per-unit rng stream".into())
                })?;
                cur = tape.dropout(cur, dropout, mode, r)?;
            }
        }
        Ok(cur)
    }

    /// Aux branch of unit `j`: 3×3 conv → leaky-ReLU → adaptive average
    /// pool → linear classifier.
    fn aux_forward(
        &mut self,
        tape: &mut Tape,
        j: usize,
        features: Tensor,
        trainable: bool,
    ) -> Result<Tensor> {
        let aux = self.units[j]
            .aux
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("unit {j} has no aux branch")))?;
        let w = tape.param(&self.store, aux.conv_w, trainable);
        let b = tape.param(&self.store, aux.conv_b, trainable);
        let mut cur = tape.conv2d(features, w, b, 1, 1)?;
        cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        let t = self.plan.aux_pool_target;
        cur = tape.adaptive_avg_pool2d(cur, t, t)?;
        let shape = tape.shape(cur).to_vec();
        let flat = shape[1] * shape[2] * shape[3];
        cur = tape.reshape(cur, vec![shape[0], flat])?;
        let lw = tape.param(&self.store, aux.lin_w, trainable);
        let lb = tape.param(&self.store, aux.lin_b, trainable);
        tape.linear(cur, lw, lb)
    }

    /// Output head: global average pool → linear.
    fn head_forward(&mut self, tape: &mut Tape, features: Tensor, trainable: bool) -> Result<Tensor> {
        let pooled = tape.adaptive_avg_pool2d(features, 1, 1)?;
        let shape = tape.shape(pooled).to_vec();
        let flat = tape.reshape(pooled, vec![shape[0], shape[1]])?;
        let w = tape.param(&self.store, self.head.lin_w, trainable);
        let b = tape.param(&self.store, self.head.lin_b, trainable);
        tape.linear(flat, w, b)
    }

    /// Eval-mode head logits for a batch, aux branches skipped.
    pub fn eval_logits(&mut self, images: Vec<f32>, batch: usize) -> Result<Vec<f32>> {
        let res = self.plan.spec.input_resolution;
        let mut tape = Tape::new();
        let x = tape.leaf(images, vec![batch, 3, res, res], false);
        let pass = self.forward(&mut tape, x, &ForwardOptions::eval(), &mut [])?;
        let logits = pass.head_logits.expect("full forward produces head logits");
        Ok(tape.values(logits).to_vec())
    }

    // ---- weight snapshot -------------------------------------------

    /// Buffers of the inference path (convs, batch-norm affine params and
    /// running statistics, projection, head), in traversal order.
    fn base_buffers(&self) -> Vec<(Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for u in &self.units {
            for c in &u.convs {
                for pid in [c.w, c.b, c.gamma, c.beta] {
                    let p = self.store.get(pid);
                    out.push((p.shape.clone(), p.values.clone()));
                }
                out.push((vec![c.bn.running_mean.len()], c.bn.running_mean.clone()));
                out.push((vec![c.bn.running_var.len()], c.bn.running_var.clone()));
            }
            if let Some((w, b)) = u.proj {
                for pid in [w, b] {
                    let p = self.store.get(pid);
                    out.push((p.shape.clone(), p.values.clone()));
                }
            }
        }
        for pid in [self.head.lin_w, self.head.lin_b] {
            let p = self.store.get(pid);
            out.push((p.shape.clone(), p.values.clone()));
        }
        out
    }

    fn apply_base_buffers(&mut self, bufs: &[(Vec<usize>, Vec<f32>)]) -> Result<()> {
        let mut it = bufs.iter();
        let mut take = |shape: &[usize]| -> Result<Vec<f32>> {
            let (s, v) = it
                .next()
                .ok_or_else(|| Error::Data("weight snapshot too short".into()))?;
            if s != shape {
                return Err(Error::Data(format!(
                    "weight snapshot shape {s:?} does not match network {shape:?}"
                )));
            }
            Ok(v.clone())
        };
        for j in 0..self.units.len() {
            for ci in 0..self.units[j].convs.len() {
                let (w, b, gamma, beta, ch) = {
                    let c = &self.units[j].convs[ci];
                    (c.w, c.b, c.gamma, c.beta, c.bn.running_mean.len())
                };
                for pid in [w, b, gamma, beta] {
                    let shape = self.store.get(pid).shape.clone();
                    self.store.get_mut(pid).values = take(&shape)?;
                }
                self.units[j].convs[ci].bn.running_mean = take(&[ch])?;
                self.units[j].convs[ci].bn.running_var = take(&[ch])?;
            }
            if let Some((w, b)) = self.units[j].proj {
                for pid in [w, b] {
                    let shape = self.store.get(pid).shape.clone();
                    self.store.get_mut(pid).values = take(&shape)?;
                }
            }
        }
        for pid in [self.head.lin_w, self.head.lin_b] {
            let shape = self.store.get(pid).shape.clone();
            self.store.get_mut(pid).values = take(&shape)?;
        }
        if it.next().is_some() {
            return Err(Error::Data("weight snapshot has trailing buffers".into()));
        }
        Ok(())
    }

    /// Write the inference-path weights to a file, bit-exact.
    pub fn export_base_weights(&self, path: &Path) -> Result<()> {
        let bufs = self.base_buffers();
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"LWNET001")?;
        f.write_all(&(bufs.len() as u32).to_le_bytes())?;
        for (shape, values) in &bufs {
            f.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            f.write_all(&(values.len() as u32).to_le_bytes())?;
            for &v in values {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load weights written by [`Network::export_base_weights`] into this
    /// network (plans must match).
    pub fn import_base_weights(&mut self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"LWNET001" {
            return Err(Error::Data("bad weight file magic".into()));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut bufs = Vec::with_capacity(count);
        for _ in 0..count {
            f.read_exact(&mut u32buf)?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                f.read_exact(&mut u32buf)?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            f.read_exact(&mut u32buf)?;
            let n = u32::from_le_bytes(u32buf) as usize;
            let mut values = vec![0.0f32; n];
            for v in &mut values {
                f.read_exact(&mut u32buf)?;
                *v = f32::from_le_bytes(u32buf);
            }
            bufs.push((shape, values));
        }
        self.apply_base_buffers(&bufs)
    }

    /// Copy inference-path weights directly into another network.
    pub fn copy_base_weights_into(&self, other: &mut Network) -> Result<()> {
        other.apply_base_buffers(&self.base_buffers())
    }
}
