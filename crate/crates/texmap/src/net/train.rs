use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapped::minmax_unit;
use crate::net::layers::softmax_cross_entropy;
use crate::net::model::{backward, forward_cached, FusionMode, FusionNetSpec, Params};
use crate::net::tensor::Tensor;
use crate::seed::mix_seed;

/// Salt separating the shuffle stream from parameter initialization.
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay = {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::config(format!(
                "momentum = {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Momentum SGD with decoupled-at-the-step weight decay:
/// v <- momentum*v - lr*(g + weight_decay*w); w <- w + v.
/// The gradients coming out of `backward` are the bare loss gradients;
/// the decay term enters the update exactly once, here.
pub fn sgd_step(
    params: &mut Params,
    grads: &Params,
    velocity: &mut Params,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.blocks.len() != grads.blocks.len() || params.blocks.len() != velocity.blocks.len() {
        return Err(Error::config("parameter/gradient/velocity block mismatch"));
    }
    for ((p, g), v) in params
        .blocks
        .iter_mut()
        .zip(&grads.blocks)
        .zip(velocity.blocks.iter_mut())
    {
        if p.name != g.name || p.name != v.name || p.tensor.shape() != g.tensor.shape() {
            return Err(Error::config(format!(
                "gradient block {:?} does not align with parameter block {:?}",
                g.name, p.name
            )));
        }
        if g.tensor.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient in block {:?}",
                g.name
            )));
        }
        let pd = p.tensor.data_mut();
        let gd = g.tensor.data();
        let vd = v.tensor.data_mut();
        for i in 0..pd.len() {
            vd[i] = cfg.momentum * vd[i]
                - cfg.learning_rate * (gd[i] + cfg.weight_decay * pd[i]);
            pd[i] += vd[i];
        }
    }
    Ok(())
}

/// One labeled training sample: an RGB image tensor (3, S, S) and, for
/// fusion modes that use it, the 3-channel mapped rendering of the same
/// image.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub rgb: Tensor,
    pub mapped: Option<Tensor>,
    pub label: usize,
}

/// Build the network input for one example under the given fusion mode.
/// early_4ch keeps the three RGB channels and appends the mapped
/// rendering's first channel rescaled to full [0,1] range (constant
/// channels become 0.5), mirroring the single-channel collapse used for
/// stored mapped images.
pub fn assemble_input(mode: FusionMode, example: &TrainExample, side: usize) -> Result<Tensor> {
    let want = [3, side, side];
    if example.rgb.shape() != want {
        return Err(Error::config(format!(
            "rgb tensor shape {:?}, expected {want:?}",
            example.rgb.shape()
        )));
    }
    let mapped = if mode.needs_mapped() {
        let m = example
            .mapped
            .as_ref()
            .ok_or_else(|| Error::data(format!("{} fusion requires a mapped image", mode.as_str())))?;
        if m.shape() != want {
            return Err(Error::config(format!(
                "mapped tensor shape {:?}, expected {want:?}",
                m.shape()
            )));
        }
        Some(m)
    } else {
        None
    };
    let plane = side * side;
    let out = match mode {
        FusionMode::RgbOnly => example.rgb.clone(),
        FusionMode::TexOnly => mapped.unwrap().clone(),
        FusionMode::Early6ch | FusionMode::Late => {
            let mut data = Vec::with_capacity(6 * plane);
            data.extend_from_slice(example.rgb.data());
            data.extend_from_slice(mapped.unwrap().data());
            Tensor::from_vec(&[6, side, side], data)?
        }
        FusionMode::Early4ch => {
            let mut data = Vec::with_capacity(4 * plane);
            data.extend_from_slice(example.rgb.data());
            let mut tex = mapped.unwrap().data()[..plane].to_vec();
            minmax_unit(&mut tex);
            data.extend_from_slice(&tex);
            Tensor::from_vec(&[4, side, side], data)?
        }
    };
    Ok(out)
}

fn stack_batch(inputs: &[Tensor], indices: &[usize]) -> Tensor {
    let shape = inputs[indices[0]].shape();
    let one: usize = shape.iter().product();
    let mut out = Tensor::zeros(&[indices.len(), shape[0], shape[1], shape[2]]);
    for (row, &i) in indices.iter().enumerate() {
        out.data_mut()[row * one..(row + 1) * one].copy_from_slice(inputs[i].data());
    }
    out
}

/// Mean loss over the whole dataset in fixed order, no updates.
fn dataset_loss(
    spec: &FusionNetSpec,
    params: &Params,
    inputs: &[Tensor],
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let all: Vec<usize> = (0..inputs.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(batch_size) {
        let batch = stack_batch(inputs, chunk);
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let cache = forward_cached(spec, params, &batch)?;
        let (loss, _) = softmax_cross_entropy(&cache.logits, &batch_labels)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

#[derive(Debug)]
pub struct TrainResult {
    pub params: Params,
    /// Mean loss per epoch; entry 0 is the pre-training loss of the
    /// freshly initialized network, entry e the mean over epoch e's
    /// mini-batches.
    pub loss_curve: Vec<f64>,
}

/// Shuffled mini-batch SGD from a seeded initialization. Deterministic:
/// the same spec, dataset, and config reproduce the loss curve and the
/// final parameters bit for bit.
pub fn train(spec: &FusionNetSpec, examples: &[TrainExample], cfg: &TrainConfig) -> Result<TrainResult> {
    spec.validate()?;
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.label >= spec.class_count {
            return Err(Error::data(format!(
                "example {i}: label {} out of range for {} classes",
                ex.label, spec.class_count
            )));
        }
    }
    let inputs: Vec<Tensor> = examples
        .iter()
        .map(|ex| assemble_input(spec.mode, ex, spec.input_side))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = examples.iter().map(|ex| ex.label).collect();

    let mut params = Params::init(spec, cfg.seed)?;
    let mut velocity = Params::zeros_like(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SHUFFLE_SALT));
    let mut indices: Vec<usize> = (0..inputs.len()).collect();

    let mut loss_curve = Vec::with_capacity(cfg.epochs + 1);
    loss_curve.push(dataset_loss(spec, &params, &inputs, &labels, cfg.batch_size)?);

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = stack_batch(&inputs, chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = backward(spec, &params, &batch, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged: non-finite loss at epoch {epoch}"
                )));
            }
            sgd_step(&mut params, &grads, &mut velocity, cfg)?;
            total += loss * chunk.len() as f64;
        }
        loss_curve.push(total / inputs.len() as f64);
    }
    Ok(TrainResult { params, loss_curve })
}

/// Class predictions by logit argmax; ties resolve to the smallest index.
pub fn predict(spec: &FusionNetSpec, params: &Params, batch: &Tensor) -> Result<Vec<usize>> {
    let cache = forward_cached(spec, params, batch)?;
    let logits = &cache.logits;
    let k = spec.class_count;
    Ok((0..logits.shape()[0])
        .map(|row| {
            let r = &logits.data()[row * k..(row + 1) * k];
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Penultimate activations, L2-normalized per row. An all-zero
/// activation row is left at zero.
pub fn extract_features(spec: &FusionNetSpec, params: &Params, batch: &Tensor) -> Result<Tensor> {
    let cache = forward_cached(spec, params, batch)?;
    let mut feats = cache.penultimate;
    let w = feats.shape()[1];
    let n = feats.shape()[0];
    let data = feats.data_mut();
    for row in 0..n {
        let r = &mut data[row * w..(row + 1) * w];
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            r.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(feats)
}

/// Loss curve as CSV: `epoch,mean_loss` rows, epoch 0 = pre-training.
pub fn write_loss_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(out, "epoch,mean_loss")?;
        for (epoch, loss) in curve.iter().enumerate() {
            writeln!(out, "{epoch},{loss}")?;
        }
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}
