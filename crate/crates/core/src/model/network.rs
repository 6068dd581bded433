use rayon::prelude::*;

use super::layers::*;
use super::{FcnParameters, FramePrediction, TensorSpec};
use crate::annotation::FrameLabelSeq;
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::matrix::Matrix;

/// Probabilities are floored here before taking the log in the loss.
pub const LOSS_PROB_FLOOR: f64 = 1e-12;

// Parameter tensor indices in layout order.
const CONV_W: [usize; 4] = [0, 2, 4, 6];
const CONV_B: [usize; 4] = [1, 3, 5, 7];
const DECONV_W: usize = 8;
const DECONV_B: usize = 9;
const HEAD_W: usize = 10;
const HEAD_B: usize = 11;

/// Intermediate values kept for the backward pass.
struct Trace {
    cols: Vec<Vec<f64>>,
    /// Post-ReLU conv outputs.
    acts: Vec<Vec<f64>>,
    pool_idx: Vec<Vec<usize>>,
    mel_idx: Vec<usize>,
    pooled: Vec<f64>,
    /// Upsampler output.
    up: Vec<f64>,
    probs: Vec<f64>,
}

/// (channels, height, width) of the input to conv block `i`.
fn conv_input_dims(params: &FcnParameters, i: usize) -> (usize, usize, usize) {
    let c = params.config();
    let ch = if i == 0 { 1 } else { c.widths[i - 1] };
    let div = 1usize << i.min(3);
    (ch, c.n_mels / div, c.n_frames / div)
}

fn run(params: &FcnParameters, input: &[f64]) -> Trace {
    let cfg = params.config();
    let mut x = input.to_vec();
    let mut cols = Vec::with_capacity(4);
    let mut acts = Vec::with_capacity(4);
    let mut pool_idx = Vec::with_capacity(3);
    for i in 0..4 {
        let (cin, h, w) = conv_input_dims(params, i);
        let col = im2col3x3(&x, cin, h, w);
        let mut a = conv3x3_forward(&col, params.slice(CONV_W[i]), params.slice(CONV_B[i]), cin, h * w);
        relu_inplace(&mut a);
        if i < 3 {
            let (p, idx) = maxpool2x2(&a, cfg.widths[i], h, w);
            x = p;
            pool_idx.push(idx);
        }
        cols.push(col);
        acts.push(a);
    }

    let c4 = cfg.widths[3];
    let (hb, tb) = (cfg.bottleneck_mels(), cfg.bottleneck_frames());
    let (pooled, mel_idx) = column_maxpool(&acts[3], c4, hb, tb);
    let up = deconv_time_forward(
        &pooled,
        params.slice(DECONV_W),
        params.slice(DECONV_B),
        c4,
        tb,
        cfg.deconv_kernel,
        cfg.deconv_stride,
    );
    let logits = pointwise_forward(&up, params.slice(HEAD_W), params.slice(HEAD_B), c4, cfg.n_frames);
    let probs = softmax_columns(&logits, cfg.k, cfg.n_frames);
    Trace {
        cols,
        acts,
        pool_idx,
        mel_idx,
        pooled,
        up,
        probs,
    }
}

fn check_input(params: &FcnParameters, mel: &MelSpectrogram) -> Result<()> {
    let cfg = params.config();
    if (mel.n_mels(), mel.n_frames()) != (cfg.n_mels, cfg.n_frames) {
        return Err(Error::Shape(format!(
            "model expects {} x {} input, got {} x {}",
            cfg.n_mels,
            cfg.n_frames,
            mel.n_mels(),
            mel.n_frames()
        )));
    }
    Ok(())
}

/// Per-frame class distributions for one normalized spectrogram.
pub fn forward(params: &FcnParameters, mel: &MelSpectrogram) -> Result<FramePrediction> {
    check_input(params, mel)?;
    let trace = run(params, mel.values().as_slice());
    if trace.probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    let cfg = params.config();
    Ok(FramePrediction::from_matrix_unchecked(Matrix::new(
        cfg.k,
        cfg.n_frames,
        trace.probs,
    )?))
}

fn check_labels(k: usize, n_frames: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n_frames {
        return Err(Error::Shape(format!(
            "{} labels for {n_frames} frames",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} outside {k} classes")));
    }
    Ok(())
}

/// Mean over frames of `-ln(max(p[true], 1e-12))`.
pub fn loss(pred: &FramePrediction, labels: &FrameLabelSeq) -> Result<f64> {
    check_labels(pred.num_classes(), pred.n_frames(), labels.as_slice())?;
    let n = pred.n_frames();
    let total: f64 = labels
        .as_slice()
        .iter()
        .enumerate()
        .map(|(t, &l)| -pred.probs().get(l, t).max(LOSS_PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f64)
}

/// Gradient of a loss with respect to every parameter, in parameter layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layout: Vec<TensorSpec>,
    values: Vec<f64>,
}

impl Gradients {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tensor(&self, name: &str) -> Option<(&[f64], &[usize])> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| (&self.values[s.offset..s.offset + s.len()], s.shape.as_slice()))
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }
}

struct SampleResult {
    loss: f64,
    correct: usize,
    grad: Vec<f64>,
}

/// Loss and gradient of one example, with the loss gradient scaled by `scale`.
fn backprop(params: &FcnParameters, input: &[f64], labels: &[usize], scale: f64) -> SampleResult {
    let cfg = params.config();
    let (k, t_out) = (cfg.k, cfg.n_frames);
    let trace = run(params, input);
    let mut grad = vec![0.0; params.num_params()];
    let layout = params.layout();
    let slot = |i: usize| -> (usize, usize) { (layout[i].offset, layout[i].len()) };

    let mut loss = 0.0;
    let mut correct = 0;
    let mut d_logits = vec![0.0; k * t_out];
    let inv = scale / t_out as f64;
    for (t, &y) in labels.iter().enumerate() {
        let mut best = 0;
        for c in 1..k {
            if trace.probs[c * t_out + t] > trace.probs[best * t_out + t] {
                best = c;
            }
        }
        correct += usize::from(best == y);
        let p_true = trace.probs[y * t_out + t];
        loss -= p_true.max(LOSS_PROB_FLOOR).ln();
        if p_true < LOSS_PROB_FLOOR {
            // floored term is constant in the parameters
            continue;
        }
        for c in 0..k {
            let target = if c == y { 1.0 } else { 0.0 };
            d_logits[c * t_out + t] = (trace.probs[c * t_out + t] - target) * inv;
        }
    }
    loss /= t_out as f64;

    let c4 = cfg.widths[3];
    let (hb, tb) = (cfg.bottleneck_mels(), cfg.bottleneck_frames());

    let d_up = {
        let ((ow, lw), (ob, lb)) = (slot(HEAD_W), slot(HEAD_B));
        let (gw, gb) = split_two(&mut grad, (ow, lw), (ob, lb));
        pointwise_backward(&trace.up, params.slice(HEAD_W), &d_logits, c4, k, t_out, gw, gb)
    };

    let d_pooled = {
        let (gw, gb) = split_two(&mut grad, slot(DECONV_W), slot(DECONV_B));
        deconv_time_backward(
            &trace.pooled,
            params.slice(DECONV_W),
            &d_up,
            c4,
            c4,
            tb,
            cfg.deconv_kernel,
            cfg.deconv_stride,
            gw,
            gb,
        )
    };
    let mut d_act = unpool(&d_pooled, &trace.mel_idx, c4 * hb * tb);

    for i in (0..4).rev() {
        let (cin, h, w) = conv_input_dims(params, i);
        let cout = cfg.widths[i];
        relu_backward_inplace(&mut d_act, &trace.acts[i]);
        let d_cols = {
            let (gw, gb) = split_two(&mut grad, slot(CONV_W[i]), slot(CONV_B[i]));
            conv3x3_backward(
                &trace.cols[i],
                params.slice(CONV_W[i]),
                &d_act,
                cin,
                cout,
                h * w,
                gw,
                gb,
                i > 0,
            )
        };
        if let Some(d_cols) = d_cols {
            let d_in = col2im3x3(&d_cols, cin, h, w);
            // input of block i is the pooled output of block i - 1
            let (_, ph, pw) = conv_input_dims(params, i - 1);
            d_act = unpool(&d_in, &trace.pool_idx[i - 1], cin * ph * pw);
        }
    }

    SampleResult { loss, correct, grad }
}

/// Disjoint mutable views of two parameter tensors (`a` precedes `b`).
fn split_two(
    grad: &mut [f64],
    (oa, la): (usize, usize),
    (ob, lb): (usize, usize),
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(oa + la <= ob);
    let (left, right) = grad.split_at_mut(ob);
    (&mut left[oa..oa + la], &mut right[..lb])
}

/// Mean loss, gradient of the mean loss, and number of correctly classified frames.
///
/// Examples are processed in parallel; per-example gradients are summed in
/// batch order so the result does not depend on the thread count.
pub fn loss_and_gradients(
    params: &FcnParameters,
    batch: &[(&MelSpectrogram, &[usize])],
) -> Result<(f64, Gradients, usize)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let cfg = params.config();
    for (mel, labels) in batch {
        check_input(params, mel)?;
        check_labels(cfg.k, cfg.n_frames, labels)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let results: Vec<SampleResult> = batch
        .par_iter()
        .map(|(mel, labels)| backprop(params, mel.values().as_slice(), labels, scale))
        .collect();

    let mut values = vec![0.0; params.num_params()];
    let mut total_loss = 0.0;
    let mut correct = 0;
    for r in &results {
        for (acc, g) in values.iter_mut().zip(&r.grad) {
            *acc += g;
        }
        total_loss += r.loss;
        correct += r.correct;
    }
    if !total_loss.is_finite() || values.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss or gradient".into()));
    }
    Ok((
        total_loss * scale,
        Gradients {
            layout: params.layout().to_vec(),
            values,
        },
        correct,
    ))
}

/// Exact gradient of the mean batch loss.
pub fn gradients(params: &FcnParameters, batch: &[(&MelSpectrogram, &FrameLabelSeq)]) -> Result<Gradients> {
    let batch: Vec<(&MelSpectrogram, &[usize])> = batch.iter().map(|(m, l)| (*m, l.as_slice())).collect();
    loss_and_gradients(params, &batch).map(|(_, g, _)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FcnConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(cfg: &FcnConfig, seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..cfg.n_mels * cfg.n_frames).map(|_| rng.random_range(-1.0..1.0)).collect();
        MelSpectrogram::new(Matrix::new(cfg.n_mels, cfg.n_frames, data).unwrap()).unwrap()
    }

    fn random_labels(cfg: &FcnConfig, seed: u64) -> FrameLabelSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameLabelSeq((0..cfg.n_frames).map(|_| rng.random_range(0..cfg.k)).collect())
    }

    #[test]
    fn output_columns_are_distributions() {
        let cfg = FcnConfig::reference(4);
        let params = FcnParameters::init(&cfg, 1).unwrap();
        let pred = forward(&params, &random_input(&cfg, 2)).unwrap();
        assert_eq!((pred.num_classes(), pred.n_frames()), (4, 200));
        FramePrediction::new(pred.probs().clone()).unwrap();
    }

    #[test]
    fn zero_network_is_uniform() {
        let cfg = FcnConfig::reference(5);
        let params = FcnParameters::from_values(&cfg, vec![0.0; FcnParameters::init(&cfg, 0).unwrap().num_params()]).unwrap();
        let pred = forward(&params, &random_input(&cfg, 3)).unwrap();
        assert!(pred.probs().as_slice().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn wrong_input_shape() {
        let cfg = FcnConfig::reference(4);
        let params = FcnParameters::init(&cfg, 1).unwrap();
        let small = random_input(&FcnConfig::miniature(4), 0);
        assert!(matches!(forward(&params, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_closed_forms() {
        let onehot = FramePrediction::new(Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert!(loss(&onehot, &FrameLabelSeq(vec![0, 1])).unwrap() <= 1e-9);

        let k = 4;
        let uniform = FramePrediction::new(Matrix::filled(k, 3, 0.25)).unwrap();
        let l = loss(&uniform, &FrameLabelSeq(vec![0, 3, 2])).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-12);

        let p = FramePrediction::new(Matrix::new(2, 1, vec![0.25, 0.75]).unwrap()).unwrap();
        let l = loss(&p, &FrameLabelSeq(vec![1])).unwrap();
        assert!((l - 0.28768207245178085).abs() < 1e-12);

        assert!(loss(&p, &FrameLabelSeq(vec![1, 0])).is_err());
        // zero probability is floored rather than infinite
        let l = loss(&onehot, &FrameLabelSeq(vec![1, 1])).unwrap();
        assert!((l - (-LOSS_PROB_FLOOR.ln()) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_network_head_bias_gradient() {
        let cfg = FcnConfig::miniature(3);
        let n = FcnParameters::init(&cfg, 0).unwrap().num_params();
        let params = FcnParameters::from_values(&cfg, vec![0.0; n]).unwrap();
        let mel = random_input(&cfg, 4);
        let labels = random_labels(&cfg, 5);
        let g = gradients(&params, &[(&mel, &labels)]).unwrap();
        let (gb, _) = g.tensor("head.bias").unwrap();
        for (c, g) in gb.iter().enumerate() {
            let freq = labels.0.iter().filter(|&&l| l == c).count() as f64 / cfg.n_frames as f64;
            assert!((g - (1.0 / 3.0 - freq)).abs() < 1e-15);
        }
        // with all-zero upstream activations only the head bias receives gradient
        let (gw, _) = g.tensor("head.weight").unwrap();
        assert!(gw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let cfg = FcnConfig::miniature(3);
        let params = FcnParameters::init(&cfg, 9).unwrap();
        let (a, la) = (random_input(&cfg, 1), random_labels(&cfg, 2));
        let (b, lb) = (random_input(&cfg, 3), random_labels(&cfg, 4));
        let single = gradients(&params, &[(&a, &la)]).unwrap();
        let double = gradients(&params, &[(&a, &la), (&a, &la)]).unwrap();
        assert_eq!(single.values(), double.values());

        let pair = gradients(&params, &[(&a, &la), (&b, &lb)]).unwrap();
        let dup = gradients(&params, &[(&a, &la), (&b, &lb), (&a, &la), (&b, &lb)]).unwrap();
        for (x, y) in pair.values().iter().zip(dup.values()) {
            assert!((x - y).abs() <= 1e-14 * x.abs().max(1e-3));
        }
    }
}
