//! Neural-network layer ops: convolution, pooling, batch norm, dropout,
//! leaky-ReLU and fully-connected, each with a forward rule recorded on the
//! tape and a matching backward rule.
//!
//! Convolution is cross-correlation (no kernel flip) realized as im2col
//! plus gemm; the im2col buffer is recomputed in backward rather than
//! stored, so tape memory stays proportional to activations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gemm_nn, gemm_nt, gemm_tn, ConvDims, Op, Tape, Tensor};
use crate::error::{Error, Result};

/// Train/eval switch for ops with mode-dependent behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn max(window: usize, stride: usize) -> Self {
        PoolSpec { kind: PoolKind::Max, window, stride }
    }

    pub fn average(window: usize, stride: usize) -> Self {
        PoolSpec { kind: PoolKind::Average, window, stride }
    }
}

/// Non-learnable batch-norm state. The learnable gamma/beta live in the
/// parameter store and are passed to [`Tape::batch_norm`] as tensors.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub epsilon: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (extent + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected [N,C,H,W], got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Expand one sample into a `[C*kH*kW, outH*outW]` patch matrix.
pub(crate) fn im2col(x: &[f32], d: &ConvDims, col: &mut [f32]) {
    let (ih, iw) = (d.in_h, d.in_w);
    let ohw = d.out_h * d.out_w;
    let mut row = 0;
    for c in 0..d.in_c {
        let plane = &x[c * ih * iw..(c + 1) * ih * iw];
        for ky in 0..d.k_h {
            for kx in 0..d.k_w {
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                let mut o = 0;
                for oy in 0..d.out_h {
                    let y = (oy * d.stride + ky) as isize - d.pad as isize;
                    for ox in 0..d.out_w {
                        let xx = (ox * d.stride + kx) as isize - d.pad as isize;
                        dst[o] = if y >= 0 && (y as usize) < ih && xx >= 0 && (xx as usize) < iw {
                            plane[y as usize * iw + xx as usize]
                        } else {
                            0.0
                        };
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a patch matrix back onto the input plane.
pub(crate) fn col2im(col: &[f32], d: &ConvDims, dx: &mut [f32]) {
    let (ih, iw) = (d.in_h, d.in_w);
    let ohw = d.out_h * d.out_w;
    let mut row = 0;
    for c in 0..d.in_c {
        let plane = &mut dx[c * ih * iw..(c + 1) * ih * iw];
        for ky in 0..d.k_h {
            for kx in 0..d.k_w {
                let src = &col[row * ohw..(row + 1) * ohw];
                let mut o = 0;
                for oy in 0..d.out_h {
                    let y = (oy * d.stride + ky) as isize - d.pad as isize;
                    for ox in 0..d.out_w {
                        let xx = (ox * d.stride + kx) as isize - d.pad as isize;
                        if y >= 0 && (y as usize) < ih && xx >= 0 && (xx as usize) < iw {
                            plane[y as usize * iw + xx as usize] += src[o];
                        }
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

impl Tape {
    /// 2-D cross-correlation with bias. `w: [O,C,kH,kW]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Tensor,
        w: Tensor,
        b: Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (batch, in_c, in_h, in_w) = dims4(self.shape(x), "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != in_c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {in_c} vs weight {ws:?}"),
            });
        }
        let (out_c, k_h, k_w) = (ws[0], ws[2], ws[3]);
        let out_h = conv_out_extent(in_h, k_h, stride, pad);
        let out_w = conv_out_extent(in_w, k_w, stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {k_h}x{k_w} exceeds padded input {}x{}",
                    in_h + 2 * pad,
                    in_w + 2 * pad
                ),
            });
        };
        if self.shape(b) != [out_c] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {:?} vs out channels {out_c}", self.shape(b)),
            });
        }
        let dims = ConvDims {
            batch, in_c, in_h, in_w, out_c, k_h, k_w, stride, pad, out_h, out_w,
        };
        let ckk = in_c * k_h * k_w;
        let ohw = out_h * out_w;
        let mut values = vec![0.0; batch * out_c * ohw];
        let mut col = vec![0.0; ckk * ohw];
        let in_stride = in_c * in_h * in_w;
        for s in 0..batch {
            im2col(&self.values(x)[s * in_stride..(s + 1) * in_stride], &dims, &mut col);
            let out_s = &mut values[s * out_c * ohw..(s + 1) * out_c * ohw];
            gemm_nn(out_c, ckk, ohw, self.values(w), &col, out_s);
            for oc in 0..out_c {
                let bv = self.values(b)[oc];
                for v in &mut out_s[oc * ohw..(oc + 1) * ohw] {
                    *v += bv;
                }
            }
        }
        let rg = self.any_requires_grad(&[x.0, w.0, b.0]);
        let out = self.push_node(vec![batch, out_c, out_h, out_w], values, rg, None);
        self.record(Op::Conv2d { x: x.0, w: w.0, b: b.0, dims }, out);
        Ok(out)
    }

    /// Spatial max/average pooling over `[N,C,H,W]`.
    pub fn pool2d(&mut self, x: Tensor, spec: PoolSpec) -> Result<Tensor> {
        let (batch, ch, in_h, in_w) = dims4(self.shape(x), "pool2d")?;
        if spec.window > in_h || spec.window > in_w {
            return Err(Error::ShapeMismatch {
                op: "pool2d",
                detail: format!("window {} exceeds input {in_h}x{in_w}", spec.window),
            });
        }
        let out_h = (in_h - spec.window) / spec.stride + 1;
        let out_w = (in_w - spec.window) / spec.stride + 1;
        let mut values = vec![0.0; batch * ch * out_h * out_w];
        let mut argmax = Vec::new();
        if spec.kind == PoolKind::Max {
            argmax = vec![0u32; values.len()];
        }
        let xs = self.values(x);
        let mut o = 0;
        for s in 0..batch {
            for c in 0..ch {
                let base = (s * ch + c) * in_h * in_w;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let (y0, x0) = (oy * spec.stride, ox * spec.stride);
                        match spec.kind {
                            PoolKind::Max => {
                                // First-index (row-major) tie-break.
                                let mut best = f32::NEG_INFINITY;
                                let mut best_i = 0usize;
                                for wy in 0..spec.window {
                                    for wx in 0..spec.window {
                                        let i = base + (y0 + wy) * in_w + (x0 + wx);
                                        if xs[i] > best {
                                            best = xs[i];
                                            best_i = i;
                                        }
                                    }
                                }
                                values[o] = best;
                                argmax[o] = best_i as u32;
                            }
                            PoolKind::Average => {
                                let mut acc = 0.0;
                                for wy in 0..spec.window {
                                    for wx in 0..spec.window {
                                        acc += xs[base + (y0 + wy) * in_w + (x0 + wx)];
                                    }
                                }
                                values[o] = acc / (spec.window * spec.window) as f32;
                            }
                        }
                        o += 1;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        let out = self.push_node(vec![batch, ch, out_h, out_w], values, rg, None);
        match spec.kind {
            PoolKind::Max => self.record(Op::MaxPool { x: x.0, argmax }, out),
            PoolKind::Average => self.record(
                Op::AvgPool { x: x.0, window: spec.window, stride: spec.stride },
                out,
            ),
        }
        Ok(out)
    }

    /// Average pooling onto a fixed output grid. Output cell (oy,ox) averages
    /// input rows `floor(oy·H/OH) .. ceil((oy+1)·H/OH)` (and likewise for
    /// columns), which also covers targets larger than the input.
    pub fn adaptive_avg_pool2d(&mut self, x: Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (batch, ch, in_h, in_w) = dims4(self.shape(x), "adaptive_avg_pool2d")?;
        let mut values = vec![0.0; batch * ch * out_h * out_w];
        let xs = self.values(x);
        let mut o = 0;
        for s in 0..batch {
            for c in 0..ch {
                let base = (s * ch + c) * in_h * in_w;
                for oy in 0..out_h {
                    let (y0, y1) = pool_range(oy, in_h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1) = pool_range(ox, in_w, out_w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                acc += xs[base + y * in_w + xx];
                            }
                        }
                        values[o] = acc / ((y1 - y0) * (x1 - x0)) as f32;
                        o += 1;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        let out = self.push_node(vec![batch, ch, out_h, out_w], values, rg, None);
        self.record(Op::AdaptiveAvgPool { x: x.0, out_h, out_w }, out);
        Ok(out)
    }

    /// Batch normalization over the channel axis of `[N,C,H,W]` or `[N,C]`.
    /// Train mode normalizes by batch statistics and folds them into the
    /// running estimates; eval mode is a pure function of the stored state.
    pub fn batch_norm(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let (batch, ch, spatial) = match shape.len() {
            2 => (shape[0], shape[1], 1),
            4 => (shape[0], shape[1], shape[2] * shape[3]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!("expected [N,C] or [N,C,H,W], got {shape:?}"),
                })
            }
        };
        if state.running_mean.len() != ch || self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!("channel count {ch} does not match state/affine params"),
            });
        }
        let count = batch * spatial;
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batch_norm train mode needs at least 2 samples per channel, got {count}"
                    )));
                }
                let mut mean = vec![0.0f32; ch];
                let mut var = vec![0.0f32; ch];
                let xs = self.values(x);
                for s in 0..batch {
                    for c in 0..ch {
                        let seg = &xs[(s * ch + c) * spatial..(s * ch + c + 1) * spatial];
                        mean[c] += seg.iter().sum::<f32>();
                    }
                }
                for m in &mut mean {
                    *m /= count as f32;
                }
                let xs = self.values(x);
                for s in 0..batch {
                    for c in 0..ch {
                        let seg = &xs[(s * ch + c) * spatial..(s * ch + c + 1) * spatial];
                        var[c] += seg.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f32>();
                    }
                }
                for v in &mut var {
                    *v /= count as f32;
                }
                let unbias = count as f32 / (count as f32 - 1.0);
                for c in 0..ch {
                    state.running_mean[c] =
                        (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
                    state.running_var[c] = (1.0 - state.momentum) * state.running_var[c]
                        + state.momentum * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let gs = self.values(gamma).to_vec();
        let bs = self.values(beta).to_vec();
        let xs = self.values(x);
        let mut values = vec![0.0; xs.len()];
        for s in 0..batch {
            for c in 0..ch {
                let off = (s * ch + c) * spatial;
                for i in 0..spatial {
                    values[off + i] = gs[c] * (xs[off + i] - mean[c]) * invstd[c] + bs[c];
                }
            }
        }
        let rg = self.any_requires_grad(&[x.0, gamma.0, beta.0]);
        let out = self.push_node(shape, values, rg, None);
        self.record(
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                invstd,
                train: mode == Mode::Train,
            },
            out,
        );
        Ok(out)
    }

    /// `y = x` for `x ≥ 0`, else `slope·x`. The subgradient at 0 is 1.
    pub fn leaky_relu(&mut self, x: Tensor, slope: f32) -> Tensor {
        debug_assert!((0.0..1.0).contains(&slope));
        let values: Vec<f32> = self
            .values(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        let out = self.push_node(shape, values, rg, None);
        self.record(Op::LeakyRelu { x: x.0, slope }, out);
        out
    }

    /// Inverted dropout: train mode zeroes with probability `rate` and
    /// scales survivors by 1/(1-rate); eval mode returns `x` untouched and
    /// consumes no randomness.
    pub fn dropout(
        &mut self,
        x: Tensor,
        rate: f32,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.values(x).len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep_scale })
            .collect();
        let values: Vec<f32> = self.values(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        let out = self.push_node(shape, values, rg, None);
        self.record(Op::Dropout { x: x.0, mask }, out);
        Ok(out)
    }

    /// Fully-connected layer `y = x·Wᵀ + b` with `w: [G,F]`, `b: [G]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("x {sx:?} vs w {sw:?}"),
            });
        }
        let (n, f, g) = (sx[0], sx[1], sw[0]);
        if self.shape(b) != [g] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("bias {:?} vs out features {g}", self.shape(b)),
            });
        }
        let mut values = vec![0.0; n * g];
        gemm_nt(n, f, g, self.values(x), self.values(w), &mut values);
        for row in 0..n {
            for j in 0..g {
                values[row * g + j] += self.values(b)[j];
            }
        }
        let rg = self.any_requires_grad(&[x.0, w.0, b.0]);
        let out = self.push_node(vec![n, g], values, rg, None);
        self.record(Op::Linear { x: x.0, w: w.0, b: b.0, n, f, g }, out);
        Ok(out)
    }

    /// Mean negative log-likelihood of a softmax over `logits [N,K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Tensor, labels: &[u32]) -> Result<Tensor> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {s:?} vs {} labels", labels.len()),
            });
        }
        let (n, k) = (s[0], s[1]);
        let probs = softmax_rows(self.values(logits), n, k);
        let mut loss = 0.0f32;
        for (row, &lbl) in labels.iter().enumerate() {
            loss -= probs[row * k + lbl as usize].max(1e-30).ln();
        }
        loss /= n as f32;
        let rg = self.requires_grad(logits);
        let out = self.push_node(vec![1], vec![loss], rg, None);
        self.record(
            Op::SoftmaxXent { logits: logits.0, probs, labels: labels.to_vec() },
            out,
        );
        Ok(out)
    }

    /// Mean squared Frobenius residual `‖softmax(logits) − Y‖²` per sample,
    /// with `target` a dense one-hot matrix.
    pub fn frobenius_onehot(&mut self, logits: Tensor, target: &[f32]) -> Result<Tensor> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] * s[1] != target.len() {
            return Err(Error::ShapeMismatch {
                op: "frobenius_onehot",
                detail: format!("logits {s:?} vs target of {}", target.len()),
            });
        }
        let (n, k) = (s[0], s[1]);
        let probs = softmax_rows(self.values(logits), n, k);
        let mut loss = 0.0f32;
        for i in 0..n * k {
            let d = probs[i] - target[i];
            loss += d * d;
        }
        loss /= n as f32;
        let rg = self.requires_grad(logits);
        let out = self.push_node(vec![1], vec![loss], rg, None);
        self.record(
            Op::FrobOnehot { logits: logits.0, probs, target: target.to_vec() },
            out,
        );
        Ok(out)
    }
}

fn pool_range(o: usize, input: usize, output: usize) -> (usize, usize) {
    let start = o * input / output;
    let end = ((o + 1) * input).div_ceil(output);
    (start, end.max(start + 1).min(input.max(1)))
}

pub(crate) fn softmax_rows(logits: &[f32], n: usize, k: usize) -> Vec<f32> {
    let mut probs = vec![0.0; n * k];
    for row in 0..n {
        let seg = &logits[row * k..(row + 1) * k];
        let mx = seg.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0;
        for (j, &v) in seg.iter().enumerate() {
            let e = (v - mx).exp();
            probs[row * k + j] = e;
            z += e;
        }
        for p in &mut probs[row * k..(row + 1) * k] {
            *p /= z;
        }
    }
    probs
}

/// Backward rules for the nn ops recorded on the tape.
pub(crate) fn backward_nn_op(tape: &mut Tape, op: &Op, _out: usize, og: &[f32]) {
    match op {
        Op::LeakyRelu { x, slope } => {
            let dx: Vec<f32> = tape.node_values[*x]
                .iter()
                .zip(og)
                .map(|(&v, g)| if v >= 0.0 { *g } else { slope * g })
                .collect();
            tape.accumulate(*x, &dx);
        }
        Op::Dropout { x, mask } => {
            let dx: Vec<f32> = og.iter().zip(mask).map(|(g, m)| g * m).collect();
            tape.accumulate(*x, &dx);
        }
        Op::Conv2d { x, w, b, dims } => {
            let d = *dims;
            let ckk = d.in_c * d.k_h * d.k_w;
            let ohw = d.out_h * d.out_w;
            let in_stride = d.in_c * d.in_h * d.in_w;
            let x_rg = tape.nodes[*x].requires_grad;
            let w_rg = tape.nodes[*w].requires_grad;
            let b_rg = tape.nodes[*b].requires_grad;
            let mut dx = if x_rg { vec![0.0; d.batch * in_stride] } else { Vec::new() };
            let mut dw = if w_rg { vec![0.0; d.out_c * ckk] } else { Vec::new() };
            let mut db = if b_rg { vec![0.0; d.out_c] } else { Vec::new() };
            let mut col = vec![0.0; ckk * ohw];
            let mut dcol = vec![0.0; ckk * ohw];
            for s in 0..d.batch {
                let og_s = &og[s * d.out_c * ohw..(s + 1) * d.out_c * ohw];
                if w_rg {
                    im2col(
                        &tape.node_values[*x][s * in_stride..(s + 1) * in_stride],
                        &d,
                        &mut col,
                    );
                    gemm_nt(d.out_c, ohw, ckk, og_s, &col, &mut dw);
                }
                if x_rg {
                    dcol.fill(0.0);
                    gemm_tn(ckk, d.out_c, ohw, &tape.node_values[*w], og_s, &mut dcol);
                    col2im(&dcol, &d, &mut dx[s * in_stride..(s + 1) * in_stride]);
                }
                if b_rg {
                    for oc in 0..d.out_c {
                        db[oc] += og_s[oc * ohw..(oc + 1) * ohw].iter().sum::<f32>();
                    }
                }
            }
            if x_rg {
                tape.accumulate(*x, &dx);
            }
            if w_rg {
                tape.accumulate(*w, &dw);
            }
            if b_rg {
                tape.accumulate(*b, &db);
            }
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = vec![0.0; tape.node_values[*x].len()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src as usize] += og[o];
            }
            tape.accumulate(*x, &dx);
        }
        Op::AvgPool { x, window, stride } => {
            let shape = tape.nodes[*x].shape.clone();
            let (batch, ch, in_h, in_w) = (shape[0], shape[1], shape[2], shape[3]);
            let out_h = (in_h - window) / stride + 1;
            let out_w = (in_w - window) / stride + 1;
            let inv = 1.0 / (window * window) as f32;
            let mut dx = vec![0.0; tape.node_values[*x].len()];
            let mut o = 0;
            for s in 0..batch {
                for c in 0..ch {
                    let base = (s * ch + c) * in_h * in_w;
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let g = og[o] * inv;
                            o += 1;
                            for wy in 0..*window {
                                for wx in 0..*window {
                                    dx[base + (oy * stride + wy) * in_w + ox * stride + wx] += g;
                                }
                            }
                        }
                    }
                }
            }
            tape.accumulate(*x, &dx);
        }
        Op::AdaptiveAvgPool { x, out_h, out_w } => {
            let shape = tape.nodes[*x].shape.clone();
            let (batch, ch, in_h, in_w) = (shape[0], shape[1], shape[2], shape[3]);
            let mut dx = vec![0.0; tape.node_values[*x].len()];
            let mut o = 0;
            for s in 0..batch {
                for c in 0..ch {
                    let base = (s * ch + c) * in_h * in_w;
                    for oy in 0..*out_h {
                        let (y0, y1) = pool_range(oy, in_h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1) = pool_range(ox, in_w, *out_w);
                            let g = og[o] / ((y1 - y0) * (x1 - x0)) as f32;
                            o += 1;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dx[base + y * in_w + xx] += g;
                                }
                            }
                        }
                    }
                }
            }
            tape.accumulate(*x, &dx);
        }
        Op::BatchNorm { x, gamma, beta, mean, invstd, train } => {
            let shape = tape.nodes[*x].shape.clone();
            let (batch, ch, spatial) = if shape.len() == 2 {
                (shape[0], shape[1], 1)
            } else {
                (shape[0], shape[1], shape[2] * shape[3])
            };
            let count = (batch * spatial) as f32;
            let gs = tape.node_values[*gamma].clone();
            let xs = &tape.node_values[*x];
            // Per-channel reductions over xhat.
            let mut dgamma = vec![0.0f32; ch];
            let mut dbeta = vec![0.0f32; ch];
            for s in 0..batch {
                for c in 0..ch {
                    let off = (s * ch + c) * spatial;
                    for i in 0..spatial {
                        let xhat = (xs[off + i] - mean[c]) * invstd[c];
                        dgamma[c] += og[off + i] * xhat;
                        dbeta[c] += og[off + i];
                    }
                }
            }
            if tape.nodes[*x].requires_grad {
                let mut dx = vec![0.0; xs.len()];
                for s in 0..batch {
                    for c in 0..ch {
                        let off = (s * ch + c) * spatial;
                        for i in 0..spatial {
                            dx[off + i] = if *train {
                                let xhat = (xs[off + i] - mean[c]) * invstd[c];
                                gs[c] * invstd[c] / count
                                    * (count * og[off + i] - dbeta[c] - xhat * dgamma[c])
                            } else {
                                gs[c] * invstd[c] * og[off + i]
                            };
                        }
                    }
                }
                tape.accumulate(*x, &dx);
            }
            tape.accumulate(*gamma, &dgamma);
            tape.accumulate(*beta, &dbeta);
        }
        Op::Linear { x, w, b, n, f, g } => {
            let (n, f, g) = (*n, *f, *g);
            if tape.nodes[*x].requires_grad {
                let mut dx = vec![0.0; n * f];
                gemm_nn(n, g, f, og, &tape.node_values[*w], &mut dx);
                tape.accumulate(*x, &dx);
            }
            if tape.nodes[*w].requires_grad {
                let mut dw = vec![0.0; g * f];
                gemm_tn(g, n, f, og, &tape.node_values[*x], &mut dw);
                tape.accumulate(*w, &dw);
            }
            if tape.nodes[*b].requires_grad {
                let mut db = vec![0.0; g];
                for row in 0..n {
                    for j in 0..g {
                        db[j] += og[row * g + j];
                    }
                }
                tape.accumulate(*b, &db);
            }
        }
        Op::SoftmaxXent { logits, probs, labels } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = og[0] / n as f32;
            let mut dl = vec![0.0; probs.len()];
            for (row, &lbl) in labels.iter().enumerate() {
                for j in 0..k {
                    let y = if j == lbl as usize { 1.0 } else { 0.0 };
                    dl[row * k + j] = scale * (probs[row * k + j] - y);
                }
            }
            tape.accumulate(*logits, &dl);
        }
        Op::FrobOnehot { logits, probs, target } => {
            let total = probs.len();
            let shape = tape.nodes[*logits].shape.clone();
            let (n, k) = (shape[0], shape[1]);
            let scale = og[0] * 2.0 / n as f32;
            let mut dl = vec![0.0; total];
            for row in 0..n {
                let p = &probs[row * k..(row + 1) * k];
                let y = &target[row * k..(row + 1) * k];
                let dot: f32 = (0..k).map(|j| (p[j] - y[j]) * p[j]).sum();
                for j in 0..k {
                    dl[row * k + j] = scale * p[j] * ((p[j] - y[j]) - dot);
                }
            }
            tape.accumulate(*logits, &dl);
        }
        _ => unreachable!("basic op routed to nn backward"),
    }
}
