//! Sequence scoring network and its training mathematics.
//!
//! Each frame's features (plus the presence flag) go through a linear
//! embedding and batch normalization, then a single-layer bidirectional LSTM.
//! Three heads read the concatenated hidden states: `iou` and `lab` through a
//! sigmoid and the box shift `sft` linearly.

mod adam;
mod checkpoint;
mod gradcheck;
mod loss;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck_architecture, gradient_check, random_instance, GradCheckReport, GRADCHECK_FLOOR};
pub use loss::{loss, score, FrameLoss, FrameTargets};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor, FeatureTensor, APPEARANCE_CHANNELS, BASE_CHANNELS};
use crate::geometry::shift_box;
use crate::tracklet::{Cell, Tracklet, Trajectory};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Social-feature neighbor count `M` the model was built for.
    pub neighbors: usize,
    pub use_appearance: bool,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            neighbors: 4,
            use_appearance: false,
            embed_dim: 64,
            hidden: 300,
        }
    }
}

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        BASE_CHANNELS + 3 * self.neighbors + if self.use_appearance { APPEARANCE_CHANNELS } else { 0 }
    }

    /// Features plus the presence flag.
    pub fn input_dim(&self) -> usize {
        self.feature_dim() + 1
    }

    pub fn feature_config(&self, image_width: f64, image_height: f64) -> FeatureConfig {
        FeatureConfig {
            neighbors: self.neighbors,
            use_appearance: self.use_appearance,
            image_width,
            image_height,
        }
    }
}

/// Offsets of every parameter tensor inside the flat parameter vector.
///
/// The order here is the order of the parameter blob in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub embed_w: Range<usize>,
    pub bn_gamma: Range<usize>,
    pub bn_beta: Range<usize>,
    pub fwd: LstmLayout,
    pub bwd: LstmLayout,
    pub iou_w: Range<usize>,
    pub iou_b: Range<usize>,
    pub lab_w: Range<usize>,
    pub lab_b: Range<usize>,
    pub sft_w: Range<usize>,
    pub sft_b: Range<usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayout {
    pub w_ih: Range<usize>,
    pub w_hh: Range<usize>,
    pub bias: Range<usize>,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let (i, e, h) = (arch.input_dim(), arch.embed_dim, arch.hidden);
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let embed_w = take(e * i);
        let bn_gamma = take(e);
        let bn_beta = take(e);
        let mut lstm = || LstmLayout {
            w_ih: take(4 * h * e),
            w_hh: take(4 * h * h),
            bias: take(4 * h),
        };
        let fwd = lstm();
        let bwd = lstm();
        let iou_w = take(2 * h);
        let iou_b = take(1);
        let lab_w = take(2 * h);
        let lab_b = take(1);
        let sft_w = take(4 * 2 * h);
        let sft_b = take(4);
        Self {
            embed_w,
            bn_gamma,
            bn_beta,
            fwd,
            bwd,
            iou_w,
            iou_b,
            lab_w,
            lab_b,
            sft_w,
            sft_b,
            total: at,
        }
    }

    /// Named tensors in blob order.
    pub fn tensors(&self) -> Vec<(&'static str, Range<usize>)> {
        vec![
            ("embed.weight", self.embed_w.clone()),
            ("bn.gamma", self.bn_gamma.clone()),
            ("bn.beta", self.bn_beta.clone()),
            ("lstm_fwd.w_ih", self.fwd.w_ih.clone()),
            ("lstm_fwd.w_hh", self.fwd.w_hh.clone()),
            ("lstm_fwd.bias", self.fwd.bias.clone()),
            ("lstm_bwd.w_ih", self.bwd.w_ih.clone()),
            ("lstm_bwd.w_hh", self.bwd.w_hh.clone()),
            ("lstm_bwd.bias", self.bwd.bias.clone()),
            ("head_iou.weight", self.iou_w.clone()),
            ("head_iou.bias", self.iou_b.clone()),
            ("head_lab.weight", self.lab_w.clone()),
            ("head_lab.bias", self.lab_b.clone()),
            ("head_sft.weight", self.sft_w.clone()),
            ("head_sft.bias", self.sft_b.clone()),
        ]
    }

    /// Name and in-tensor offset of flat parameter index `i`.
    pub fn locate(&self, i: usize) -> (&'static str, usize) {
        self.tensors()
            .into_iter()
            .find(|(_, r)| r.contains(&i))
            .map(|(name, r)| (name, i - r.start))
            .unwrap_or(("?", i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FramePrediction {
    pub iou: f64,
    pub lab: f64,
    /// Box shift in image-relative units (multiply by image width/height for pixels).
    pub sft: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    arch: Architecture,
    layout: Layout,
    pub params: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

struct LstmView<'a> {
    w_ih: &'a [f64],
    w_hh: &'a [f64],
    bias: &'a [f64],
    input: usize,
    hidden: usize,
}

/// Activations of one LSTM direction, indexed by processing step.
struct LstmTrace {
    /// Post-activation gates `i, f, g, o`, `4H` per step.
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    tanh_c: Vec<f64>,
}

fn frame_of(step: usize, steps: usize, reverse: bool) -> usize {
    if reverse {
        steps - 1 - step
    } else {
        step
    }
}

fn lstm_forward(v: &LstmView, xs: &[f64], steps: usize, reverse: bool) -> LstmTrace {
    let (e, h) = (v.input, v.hidden);
    let mut tr = LstmTrace {
        gates: vec![0.0; steps * 4 * h],
        c: vec![0.0; steps * h],
        h: vec![0.0; steps * h],
        tanh_c: vec![0.0; steps * h],
    };
    let zeros = vec![0.0; h];
    let mut a = vec![0.0; 4 * h];
    for t in 0..steps {
        let x = &xs[frame_of(t, steps, reverse) * e..][..e];
        let h_prev: &[f64] = if t == 0 { &zeros } else { &tr.h[(t - 1) * h..t * h] };
        for r in 0..4 * h {
            a[r] = v.bias[r] + dot(&v.w_ih[r * e..(r + 1) * e], x) + dot(&v.w_hh[r * h..(r + 1) * h], h_prev);
        }
        let gates = &mut tr.gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            gates[k] = sigmoid(a[k]);
            gates[h + k] = sigmoid(a[h + k]);
            gates[2 * h + k] = a[2 * h + k].tanh();
            gates[3 * h + k] = sigmoid(a[3 * h + k]);
        }
        for k in 0..h {
            let c_prev = if t == 0 { 0.0 } else { tr.c[(t - 1) * h + k] };
            let c = gates[h + k] * c_prev + gates[k] * gates[2 * h + k];
            let tc = c.tanh();
            tr.c[t * h + k] = c;
            tr.tanh_c[t * h + k] = tc;
            tr.h[t * h + k] = gates[3 * h + k] * tc;
        }
    }
    tr
}

struct LstmGrads<'a> {
    w_ih: &'a mut [f64],
    w_hh: &'a mut [f64],
    bias: &'a mut [f64],
}

/// Backpropagation through time for one direction.
///
/// `dh` holds the loss gradient w.r.t. each frame's hidden state; input
/// gradients are accumulated into `dxs` (frame-indexed).
fn lstm_backward(v: &LstmView, xs: &[f64], tr: &LstmTrace, steps: usize, reverse: bool, dh: &[f64], g: &mut LstmGrads, dxs: &mut [f64]) {
    let (e, h) = (v.input, v.hidden);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    for t in (0..steps).rev() {
        let n = frame_of(t, steps, reverse);
        let gates = &tr.gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            let dht = dh[n * h + k] + dh_next[k];
            let (i, f, gg, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
            let tc = tr.tanh_c[t * h + k];
            let c_prev = if t == 0 { 0.0 } else { tr.c[(t - 1) * h + k] };
            let dc = dht * o * (1.0 - tc * tc) + dc_next[k];
            da[k] = dc * gg * i * (1.0 - i);
            da[h + k] = dc * c_prev * f * (1.0 - f);
            da[2 * h + k] = dc * i * (1.0 - gg * gg);
            da[3 * h + k] = dht * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        let x = &xs[n * e..(n + 1) * e];
        dh_next.iter_mut().for_each(|d| *d = 0.0);
        let dx = &mut dxs[n * e..(n + 1) * e];
        for r in 0..4 * h {
            let d = da[r];
            if d == 0.0 {
                continue;
            }
            g.bias[r] += d;
            axpy(d, x, &mut g.w_ih[r * e..(r + 1) * e]);
            axpy(d, &v.w_ih[r * e..(r + 1) * e], dx);
            if t > 0 {
                let h_prev = &tr.h[(t - 1) * h..t * h];
                axpy(d, h_prev, &mut g.w_hh[r * h..(r + 1) * h]);
                axpy(d, &v.w_hh[r * h..(r + 1) * h], &mut dh_next);
            }
        }
    }
}

/// Per-sequence forward activations kept for backpropagation.
struct SeqTrace {
    frames: usize,
    /// Augmented input `[features, presence]`, frame-major.
    u: Vec<f64>,
    /// Normalized embedding before scale/shift.
    zhat: Vec<f64>,
    /// Embedding-layer output fed to the LSTMs.
    y: Vec<f64>,
    fwd: LstmTrace,
    bwd: LstmTrace,
    preds: Vec<FramePrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormMode {
    /// Statistics over all frames of the mini-batch.
    Batch,
    /// Running averages.
    Running,
}

/// Loss, gradient and batch-norm statistics of one training mini-batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Mean per-sample loss.
    pub loss: f64,
    pub sample_losses: Vec<f64>,
    pub grads: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl ScorerModel {
    /// Seeded initialization: weights uniform in `±1/√fan_in`, unit batch-norm scale.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut m = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = m.layout.clone();
        let (e, h) = (arch.embed_dim as f64, arch.hidden as f64);
        let mut fill = |r: Range<usize>, fan_in: f64, p: &mut Vec<f64>| {
            let bound = 1.0 / fan_in.sqrt();
            for x in &mut p[r] {
                *x = rng.random_range(-bound..bound);
            }
        };
        fill(l.embed_w.clone(), arch.input_dim() as f64, &mut m.params);
        for lstm in [&l.fwd, &l.bwd] {
            fill(lstm.w_ih.clone(), e, &mut m.params);
            fill(lstm.w_hh.clone(), h, &mut m.params);
            fill(lstm.bias.clone(), h, &mut m.params);
        }
        for r in [&l.iou_w, &l.iou_b, &l.lab_w, &l.lab_b, &l.sft_w, &l.sft_b] {
            fill(r.clone(), 2.0 * h, &mut m.params);
        }
        for x in &mut m.params[l.bn_gamma.clone()] {
            *x = 1.0;
        }
        m
    }

    /// All parameters zero; running variance one.
    pub fn zeros(arch: Architecture) -> Self {
        let layout = Layout::new(&arch);
        Self {
            params: vec![0.0; layout.total],
            running_mean: vec![0.0; arch.embed_dim],
            running_var: vec![1.0; arch.embed_dim],
            arch,
            layout,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn lstm(&self, l: &LstmLayout) -> LstmView<'_> {
        LstmView {
            w_ih: &self.params[l.w_ih.clone()],
            w_hh: &self.params[l.w_hh.clone()],
            bias: &self.params[l.bias.clone()],
            input: self.arch.embed_dim,
            hidden: self.arch.hidden,
        }
    }

    fn check_input(&self, x: &FeatureTensor) -> Result<()> {
        if x.dim() != self.arch.feature_dim() {
            return Err(Error::Dimension(format!(
                "model expects {} feature channels, got {}",
                self.arch.feature_dim(),
                x.dim()
            )));
        }
        if x.frames() == 0 {
            return Err(Error::Empty("feature tensor has no frames"));
        }
        Ok(())
    }

    fn embed(&self, x: &FeatureTensor) -> (Vec<f64>, Vec<f64>) {
        let (i, e) = (self.arch.input_dim(), self.arch.embed_dim);
        let n = x.frames();
        let mut u = Vec::with_capacity(n * i);
        for k in 0..n {
            u.extend_from_slice(x.frame(k));
            u.push(if x.presence()[k] { 1.0 } else { 0.0 });
        }
        let w = &self.params[self.layout.embed_w.clone()];
        let mut z = vec![0.0; n * e];
        for k in 0..n {
            let uk = &u[k * i..(k + 1) * i];
            for r in 0..e {
                z[k * e + r] = dot(&w[r * i..(r + 1) * i], uk);
            }
        }
        (u, z)
    }

    fn heads(&self, hf: &[f64], hb: &[f64]) -> FramePrediction {
        let l = &self.layout;
        let h = self.arch.hidden;
        let p = &self.params;
        let lin = |w: &[f64], b: f64| dot(&w[..h], hf) + dot(&w[h..], hb) + b;
        let mut sft = [0.0; 4];
        for (k, s) in sft.iter_mut().enumerate() {
            *s = lin(&p[l.sft_w.start + k * 2 * h..l.sft_w.start + (k + 1) * 2 * h], p[l.sft_b.start + k]);
        }
        FramePrediction {
            iou: sigmoid(lin(&p[l.iou_w.clone()], p[l.iou_b.start])),
            lab: sigmoid(lin(&p[l.lab_w.clone()], p[l.lab_b.start])),
            sft,
        }
    }

    fn run(&self, batch: &[&FeatureTensor], mode: NormMode) -> Result<(Vec<SeqTrace>, Vec<f64>, Vec<f64>)> {
        let e = self.arch.embed_dim;
        let h = self.arch.hidden;
        let mut embedded = Vec::with_capacity(batch.len());
        for x in batch {
            self.check_input(x)?;
            embedded.push(self.embed(x));
        }
        let (mean, var) = match mode {
            NormMode::Running => (self.running_mean.clone(), self.running_var.clone()),
            NormMode::Batch => {
                let total: usize = batch.iter().map(|x| x.frames()).sum();
                let mut mean = vec![0.0; e];
                for (_, z) in &embedded {
                    for row in z.chunks_exact(e) {
                        axpy(1.0, row, &mut mean);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= total as f64);
                let mut var = vec![0.0; e];
                for (_, z) in &embedded {
                    for row in z.chunks_exact(e) {
                        for r in 0..e {
                            var[r] += (row[r] - mean[r]).powi(2);
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= total as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let gamma = &self.params[self.layout.bn_gamma.clone()];
        let beta = &self.params[self.layout.bn_beta.clone()];
        let fwd = self.lstm(&self.layout.fwd);
        let bwd = self.lstm(&self.layout.bwd);

        let mut traces = Vec::with_capacity(batch.len());
        for (u, z) in embedded {
            let n = z.len() / e;
            let mut zhat = z;
            let mut y = vec![0.0; n * e];
            for k in 0..n {
                for r in 0..e {
                    let zh = (zhat[k * e + r] - mean[r]) * inv_std[r];
                    zhat[k * e + r] = zh;
                    y[k * e + r] = gamma[r] * zh + beta[r];
                }
            }
            let tf = lstm_forward(&fwd, &y, n, false);
            let tb = lstm_forward(&bwd, &y, n, true);
            let preds: Vec<FramePrediction> = (0..n)
                .map(|k| self.heads(&tf.h[k * h..(k + 1) * h], &tb.h[(n - 1 - k) * h..(n - k) * h]))
                .collect();
            if preds.iter().any(|p| !(p.iou.is_finite() && p.lab.is_finite() && p.sft.iter().all(|s| s.is_finite()))) {
                return Err(Error::NonFinite("forward activations".into()));
            }
            traces.push(SeqTrace {
                frames: n,
                u,
                zhat,
                y,
                fwd: tf,
                bwd: tb,
                preds,
            });
        }
        Ok((traces, mean, var))
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, x: &FeatureTensor) -> Result<Vec<FramePrediction>> {
        let (mut traces, _, _) = self.run(&[x], NormMode::Running)?;
        Ok(traces.pop().expect("one sequence").preds)
    }

    /// Training-mode forward pass over a mini-batch.
    pub fn forward_batch(&self, batch: &[&FeatureTensor]) -> Result<Vec<Vec<FramePrediction>>> {
        let (traces, _, _) = self.run(batch, NormMode::Batch)?;
        Ok(traces.into_iter().map(|t| t.preds).collect())
    }

    /// Mean loss of a mini-batch with training-mode batch normalization.
    pub fn batch_loss(&self, batch: &[(&FeatureTensor, &FrameTargets)]) -> Result<f64> {
        let xs: Vec<&FeatureTensor> = batch.iter().map(|b| b.0).collect();
        let preds = self.forward_batch(&xs)?;
        let total: f64 = preds.iter().zip(batch).map(|(p, (_, t))| loss(p, t).0).sum();
        Ok(total / batch.len() as f64)
    }

    /// Exact gradient of the mean mini-batch loss with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[(&FeatureTensor, &FrameTargets)]) -> Result<BatchGradient> {
        if batch.is_empty() {
            return Err(Error::Empty("mini-batch"));
        }
        for (x, t) in batch {
            if x.frames() != t.frames() {
                return Err(Error::Dimension(format!(
                    "{} feature frames vs {} target frames",
                    x.frames(),
                    t.frames()
                )));
            }
        }
        let xs: Vec<&FeatureTensor> = batch.iter().map(|b| b.0).collect();
        let (traces, mean, var) = self.run(&xs, NormMode::Batch)?;
        let (e, h, i) = (self.arch.embed_dim, self.arch.hidden, self.arch.input_dim());
        let l = self.layout.clone();
        let p = &self.params;
        let scale = 1.0 / batch.len() as f64;

        let mut grads = vec![0.0; l.total];
        let mut sample_losses = Vec::with_capacity(batch.len());
        let total_frames: usize = traces.iter().map(|t| t.frames).sum();
        // Gradient w.r.t. the normalized embedding input, for every frame in the batch.
        let mut dzhat_all: Vec<Vec<f64>> = Vec::with_capacity(traces.len());

        for (tr, (_, targets)) in traces.iter().zip(batch) {
            let n = tr.frames;
            sample_losses.push(loss(&tr.preds, targets).0);
            let dpred = loss::loss_grad(&tr.preds, targets);
            let mut dh_f = vec![0.0; n * h];
            let mut dh_b = vec![0.0; n * h];
            for k in 0..n {
                let hf = &tr.fwd.h[k * h..(k + 1) * h];
                let hb = &tr.bwd.h[(n - 1 - k) * h..(n - k) * h];
                let pr = &tr.preds[k];
                let dp = &dpred[k];
                let head = |w: Range<usize>, b: usize, d: f64, grads: &mut [f64], dh_f: &mut [f64], dh_b: &mut [f64]| {
                    if d == 0.0 {
                        return;
                    }
                    grads[b] += d;
                    axpy(d, hf, &mut grads[w.start..w.start + h]);
                    axpy(d, hb, &mut grads[w.start + h..w.end]);
                    axpy(d, &p[w.start..w.start + h], &mut dh_f[k * h..(k + 1) * h]);
                    axpy(d, &p[w.start + h..w.end], &mut dh_b[k * h..(k + 1) * h]);
                };
                let d_iou = scale * dp.iou * pr.iou * (1.0 - pr.iou);
                let d_lab = scale * dp.lab * pr.lab * (1.0 - pr.lab);
                head(l.iou_w.clone(), l.iou_b.start, d_iou, &mut grads, &mut dh_f, &mut dh_b);
                head(l.lab_w.clone(), l.lab_b.start, d_lab, &mut grads, &mut dh_f, &mut dh_b);
                for c in 0..4 {
                    let w = l.sft_w.start + c * 2 * h..l.sft_w.start + (c + 1) * 2 * h;
                    head(w, l.sft_b.start + c, scale * dp.sft[c], &mut grads, &mut dh_f, &mut dh_b);
                }
            }
            // dh_b is frame-indexed: lstm_backward maps steps to frames itself.
            let mut dy = vec![0.0; n * e];
            {
                let (lf, lb) = (self.lstm(&l.fwd), self.lstm(&l.bwd));
                let (gf, gb) = split_lstm_grads(&mut grads, &l);
                let mut gf = gf;
                let mut gb = gb;
                lstm_backward(&lf, &tr.y, &tr.fwd, n, false, &dh_f, &mut gf, &mut dy);
                lstm_backward(&lb, &tr.y, &tr.bwd, n, true, &dh_b, &mut gb, &mut dy);
            }
            let gamma = &p[l.bn_gamma.clone()];
            let mut dzhat = vec![0.0; n * e];
            for k in 0..n {
                for r in 0..e {
                    let d = dy[k * e + r];
                    grads[l.bn_gamma.start + r] += d * tr.zhat[k * e + r];
                    grads[l.bn_beta.start + r] += d;
                    dzhat[k * e + r] = d * gamma[r];
                }
            }
            dzhat_all.push(dzhat);
        }

        // Batch-norm backward couples every frame of the mini-batch.
        let m = total_frames as f64;
        let mut mean_d = vec![0.0; e];
        let mut mean_dz = vec![0.0; e];
        for (tr, dzhat) in traces.iter().zip(&dzhat_all) {
            for k in 0..tr.frames {
                for r in 0..e {
                    mean_d[r] += dzhat[k * e + r];
                    mean_dz[r] += dzhat[k * e + r] * tr.zhat[k * e + r];
                }
            }
        }
        mean_d.iter_mut().for_each(|v| *v /= m);
        mean_dz.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let ew = l.embed_w.clone();
        for (tr, dzhat) in traces.iter().zip(&dzhat_all) {
            for k in 0..tr.frames {
                let uk = &tr.u[k * i..(k + 1) * i];
                for r in 0..e {
                    let dz = inv_std[r] * (dzhat[k * e + r] - mean_d[r] - tr.zhat[k * e + r] * mean_dz[r]);
                    if dz != 0.0 {
                        axpy(dz, uk, &mut grads[ew.start + r * i..ew.start + (r + 1) * i]);
                    }
                }
            }
        }

        for (name, r) in l.tensors() {
            if grads[r.clone()].iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(BatchGradient {
            loss: sample_losses.iter().sum::<f64>() * scale,
            sample_losses,
            grads,
            batch_mean: mean,
            batch_var: var,
        })
    }

    /// Blends mini-batch statistics into the running averages.
    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64]) {
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }

    /// Inference-mode loss of one sample.
    pub fn sample_loss(&self, x: &FeatureTensor, targets: &FrameTargets) -> Result<f64> {
        Ok(loss(&self.forward(x)?, targets).0)
    }
}

fn split_lstm_grads<'a>(grads: &'a mut [f64], l: &Layout) -> (LstmGrads<'a>, LstmGrads<'a>) {
    // The two directions occupy consecutive, ordered ranges.
    debug_assert!(l.fwd.w_ih.start < l.fwd.w_hh.start && l.fwd.bias.end == l.bwd.w_ih.start);
    let (_, rest) = grads.split_at_mut(l.fwd.w_ih.start);
    let (f_ih, rest) = rest.split_at_mut(l.fwd.w_ih.len());
    let (f_hh, rest) = rest.split_at_mut(l.fwd.w_hh.len());
    let (f_b, rest) = rest.split_at_mut(l.fwd.bias.len());
    let (b_ih, rest) = rest.split_at_mut(l.bwd.w_ih.len());
    let (b_hh, rest) = rest.split_at_mut(l.bwd.w_hh.len());
    let (b_b, _) = rest.split_at_mut(l.bwd.bias.len());
    (
        LstmGrads { w_ih: f_ih, w_hh: f_hh, bias: f_b },
        LstmGrads { w_ih: b_ih, w_hh: b_hh, bias: b_b },
    )
}

/// Gradient of the loss of a single tracklet against its ground truth.
pub fn backward(model: &ScorerModel, x: &FeatureTensor, t: &Tracklet, g: Option<&Trajectory>, image_width: f64, image_height: f64) -> Result<Vec<f64>> {
    let targets = FrameTargets::new(t, g, image_width, image_height);
    Ok(model.loss_and_grad(&[(x, &targets)])?.grads)
}

/// Two-pass scoring: regress box shifts, apply them on the support, then score
/// the refined tracklet with a second forward pass.
pub fn autocontext_score(
    model: &ScorerModel,
    extractor: &FeatureExtractor<'_>,
    t: &Tracklet,
    history: Option<&[f64]>,
) -> Result<(f64, Tracklet)> {
    let cfg = extractor.config();
    let first = model.forward(&extractor.features(t, history)?)?;
    let mut shifted = t.clone();
    for n in 0..t.len() {
        if let Some(cell) = t.cell(n) {
            let s = first[n].sft;
            let px = [s[0] * cfg.image_width, s[1] * cfg.image_height, s[2] * cfg.image_width, s[3] * cfg.image_height];
            shifted.set(
                n,
                Some(Cell {
                    bbox: shift_box(&cell.bbox, px)?,
                    ..*cell
                }),
            );
        }
    }
    let second = model.forward(&extractor.features(&shifted, history)?)?;
    Ok((score(&second, &shifted), shifted))
}
