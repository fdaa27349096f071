//! Repeated-split evaluation: stratified train/test partitions, a
//! classifier per repetition, and accuracy reported as mean and standard
//! deviation over the runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{index_dataset, DatasetIndex};
use crate::error::{Error, Result};
use crate::image::load_image;
use crate::lbp::{compute_code_image, pool_histogram, LbpConfig};
use crate::mapped::read_mapped_png;
use crate::net::{
    extract_features, predict, train, FusionNetSpec, Tensor, TrainConfig, TrainExample,
};
use crate::svm::train_linear_ova;

/// Fixed regularization for the one-vs-all classifier stage.
const OVA_REGULARIZATION: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Fraction of each class used for training, in (0, 1).
    pub train_ratio: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            train_ratio: 0.5,
            repetitions: 10,
            seed: 0,
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio.is_finite() && self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::config(format!(
                "train_ratio = {} must lie strictly between 0 and 1",
                self.train_ratio
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be positive"));
        }
        Ok(())
    }
}

/// One repetition's partition, as indices into `DatasetIndex::samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified random splits: per class, round(ratio * size) samples go to
/// training (half-up), the rest to test. Run i draws from seed + i.
pub fn make_splits(index: &DatasetIndex, plan: &SplitPlan) -> Result<Vec<Split>> {
    plan.validate()?;
    let mut splits = Vec::with_capacity(plan.repetitions);
    for run in 0..plan.repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(run as u64));
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class, name) in index.classes.iter().enumerate() {
            let mut members = index.class_members(class);
            let n = members.len();
            let n_train = (plan.train_ratio * n as f64).round() as usize;
            if n_train == 0 || n_train >= n {
                return Err(Error::data(format!(
                    "class {name:?}: {n} samples cannot give both train and test \
                     sets at ratio {}",
                    plan.train_ratio
                )));
            }
            members.shuffle(&mut rng);
            train.extend_from_slice(&members[..n_train]);
            test.extend_from_slice(&members[n_train..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        splits.push(Split { train, test });
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    /// Correct predictions (S_p).
    pub correct: usize,
    /// Test-set size (S_t).
    pub total: usize,
    pub accuracy: f64,
    /// Rows indexed by true class, columns by predicted class.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub classifier: String,
    pub train_ratio: f64,
    pub repetitions: usize,
    pub base_seed: u64,
    pub runs: Vec<RunResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Count correct predictions and fill the confusion matrix
/// (rows = true class).
pub fn tally(preds: &[usize], labels: &[usize], class_count: usize) -> Result<(usize, Vec<Vec<usize>>)> {
    if preds.len() != labels.len() {
        return Err(Error::config(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; class_count]; class_count];
    let mut correct = 0;
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= class_count || t >= class_count {
            return Err(Error::data(format!(
                "class id out of range: predicted {p}, true {t}, {class_count} classes"
            )));
        }
        confusion[t][p] += 1;
        if p == t {
            correct += 1;
        }
    }
    Ok((correct, confusion))
}

/// The per-repetition classification stage of the protocol.
#[derive(Debug, Clone)]
pub enum Classifier {
    /// Pooled code histograms (L2-normalized) into the linear one-vs-all
    /// classifier. Works on the grayscale of each image.
    LbpHistogramOva { lbp: LbpConfig },
    /// Train the fusion network end to end on each run's training split
    /// and classify test images by logit argmax.
    MicronetLogits {
        spec: FusionNetSpec,
        train: TrainConfig,
    },
    /// Train the fusion network, then feed its L2-normalized penultimate
    /// activations to the linear one-vs-all classifier.
    MicronetFeaturesOva {
        spec: FusionNetSpec,
        train: TrainConfig,
    },
}

impl Classifier {
    pub fn describe(&self) -> String {
        match self {
            Classifier::LbpHistogramOva { lbp } => format!(
                "lbp_histogram_ova(points={}, radius={}, variant={})",
                lbp.points,
                lbp.radius,
                lbp.variant.as_str()
            ),
            Classifier::MicronetLogits { spec, train } => format!(
                "micronet_logits(mode={}, epochs={})",
                spec.mode.as_str(),
                train.epochs
            ),
            Classifier::MicronetFeaturesOva { spec, train } => format!(
                "micronet_features_ova(mode={}, epochs={})",
                spec.mode.as_str(),
                train.epochs
            ),
        }
    }
}

pub struct ProtocolConfig {
    /// Folder-per-class RGB image root.
    pub rgb_root: PathBuf,
    /// Mirrored root of pre-encoded mapped images; required by fusion
    /// modes that consume the texture stream.
    pub mapped_root: Option<PathBuf>,
    pub plan: SplitPlan,
    pub classifier: Classifier,
}

fn with_run(run: usize, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("run {run}: {m}")),
        Error::Data(m) => Error::Data(format!("run {run}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("run {run}: {m}")),
        io @ Error::Io { .. } => io,
    }
}

fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Histogram features for every sample, in index order.
fn lbp_features(index: &DatasetIndex, lbp: &LbpConfig) -> Result<Vec<Vec<f64>>> {
    index
        .samples
        .par_iter()
        .map(|s| {
            let gray = load_image(&s.path)?.into_gray();
            let codes = compute_code_image(&gray, lbp)?;
            let hist = pool_histogram(&codes, lbp)?;
            Ok(l2_normalized(hist.bins))
        })
        .collect()
}

fn color_tensor(path: &Path, side: usize) -> Result<Tensor> {
    let img = load_image(path)?.into_color();
    if img.height() != side || img.width() != side {
        return Err(Error::data(format!(
            "{}: image is {}x{}, network expects {side}x{side}",
            path.display(),
            img.height(),
            img.width()
        )));
    }
    let plane = side * side;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c];
        }
    }
    Tensor::from_vec(&[3, side, side], data)
}

fn mapped_tensor(path: &Path, side: usize) -> Result<Tensor> {
    let m = read_mapped_png(path)?;
    if m.height() != side || m.width() != side || m.channels() != 3 {
        return Err(Error::data(format!(
            "{}: mapped image is {}x{}x{}, network expects 3x{side}x{side}",
            path.display(),
            m.channels(),
            m.height(),
            m.width()
        )));
    }
    let mut data = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        data.extend_from_slice(m.channel(c));
    }
    Tensor::from_vec(&[3, side, side], data)
}

/// Mirror a sample path into the mapped-image tree.
fn mapped_path(mapped_root: &Path, index: &DatasetIndex, sample: usize) -> Result<PathBuf> {
    let s = &index.samples[sample];
    let stem = s
        .path
        .file_stem()
        .ok_or_else(|| Error::data(format!("{}: no file stem", s.path.display())))?;
    let mut p = mapped_root.join(&index.classes[s.class]);
    p.push(format!("{}.png", stem.to_string_lossy()));
    Ok(p)
}

/// Load every sample as a training example for the fusion network,
/// pairing each RGB image with its pre-encoded mapped rendering when the
/// fusion mode consumes one.
pub fn load_examples(
    index: &DatasetIndex,
    spec: &FusionNetSpec,
    mapped_root: Option<&Path>,
) -> Result<Vec<TrainExample>> {
    let needs_mapped = spec.mode.needs_mapped();
    let root = match (needs_mapped, mapped_root) {
        (true, None) => {
            return Err(Error::config(format!(
                "{} fusion needs a mapped-image root; encode the dataset first",
                spec.mode.as_str()
            )))
        }
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    (0..index.samples.len())
        .into_par_iter()
        .map(|i| {
            let s = &index.samples[i];
            let rgb = color_tensor(&s.path, spec.input_side)?;
            let mapped = match root {
                Some(r) => Some(mapped_tensor(&mapped_path(r, index, i)?, spec.input_side)?),
                None => None,
            };
            Ok(TrainExample {
                rgb,
                mapped,
                label: s.class,
            })
        })
        .collect()
}

fn stack_examples(spec: &FusionNetSpec, examples: &[TrainExample], which: &[usize]) -> Result<Tensor> {
    let side = spec.input_side;
    let c = spec.mode.input_channels();
    let one = c * side * side;
    let mut data = Vec::with_capacity(which.len() * one);
    for &i in which {
        let t = crate::net::train::assemble_input(spec.mode, &examples[i], side)?;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[which.len(), c, side, side], data)
}

fn run_one(
    cfg: &ProtocolConfig,
    index: &DatasetIndex,
    split: &Split,
    run: usize,
    lbp_feats: &[Vec<f64>],
    examples: &[TrainExample],
) -> Result<RunResult> {
    let class_count = index.classes.len();
    let seed = cfg.plan.seed.wrapping_add(run as u64);
    let labels_of = |ids: &[usize]| -> Vec<usize> {
        ids.iter().map(|&i| index.samples[i].class).collect()
    };
    let train_labels = labels_of(&split.train);
    let test_labels = labels_of(&split.test);

    let preds = match &cfg.classifier {
        Classifier::LbpHistogramOva { .. } => {
            let train_feats: Vec<Vec<f64>> =
                split.train.iter().map(|&i| lbp_feats[i].clone()).collect();
            let model =
                train_linear_ova(&train_feats, &train_labels, class_count, OVA_REGULARIZATION)?;
            split
                .test
                .iter()
                .map(|&i| model.predict(&lbp_feats[i]))
                .collect::<Result<Vec<_>>>()?
        }
        Classifier::MicronetLogits { spec, train: tc } => {
            let train_set: Vec<TrainExample> =
                split.train.iter().map(|&i| examples[i].clone()).collect();
            let cfg_run = TrainConfig { seed, ..*tc };
            let outcome = train(spec, &train_set, &cfg_run)?;
            let batch = stack_examples(spec, examples, &split.test)?;
            predict(spec, &outcome.params, &batch)?
        }
        Classifier::MicronetFeaturesOva { spec, train: tc } => {
            let train_set: Vec<TrainExample> =
                split.train.iter().map(|&i| examples[i].clone()).collect();
            let cfg_run = TrainConfig { seed, ..*tc };
            let outcome = train(spec, &train_set, &cfg_run)?;
            let to_rows = |ids: &[usize]| -> Result<Vec<Vec<f64>>> {
                let batch = stack_examples(spec, examples, ids)?;
                let feats = extract_features(spec, &outcome.params, &batch)?;
                let w = feats.shape()[1];
                Ok(feats.data().chunks(w).map(|r| r.to_vec()).collect())
            };
            let model = train_linear_ova(
                &to_rows(&split.train)?,
                &train_labels,
                class_count,
                OVA_REGULARIZATION,
            )?;
            model.predict_all(&to_rows(&split.test)?)?
        }
    };

    let (correct, confusion) = tally(&preds, &test_labels, class_count)?;
    Ok(RunResult {
        run,
        seed,
        correct,
        total: split.test.len(),
        accuracy: correct as f64 / split.test.len() as f64,
        confusion,
    })
}

/// Execute the full protocol: index, split, classify per repetition,
/// aggregate. Deterministic for a fixed configuration and seed.
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<EvalReport> {
    let index = index_dataset(&cfg.rgb_root)?;
    let splits = make_splits(&index, &cfg.plan)?;

    // shared, split-independent inputs
    let (lbp_feats, examples) = match &cfg.classifier {
        Classifier::LbpHistogramOva { lbp } => {
            lbp.validate()?;
            (lbp_features(&index, lbp)?, Vec::new())
        }
        Classifier::MicronetLogits { spec, train }
        | Classifier::MicronetFeaturesOva { spec, train } => {
            spec.validate()?;
            train.validate()?;
            if index.classes.len() != spec.class_count {
                return Err(Error::config(format!(
                    "dataset has {} classes but the network spec declares {}",
                    index.classes.len(),
                    spec.class_count
                )));
            }
            (
                Vec::new(),
                load_examples(&index, spec, cfg.mapped_root.as_deref())?,
            )
        }
    };

    let mut runs = splits
        .par_iter()
        .enumerate()
        .map(|(run, split)| {
            run_one(cfg, &index, split, run, &lbp_feats, &examples).map_err(|e| with_run(run, e))
        })
        .collect::<Result<Vec<RunResult>>>()?;
    runs.sort_by_key(|r| r.run);

    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
    Ok(EvalReport {
        classes: index.classes.clone(),
        classifier: cfg.classifier.describe(),
        train_ratio: cfg.plan.train_ratio,
        repetitions: cfg.plan.repetitions,
        base_seed: cfg.plan.seed,
        runs,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
    })
}

pub fn report_to_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map(|s| s + "\n")
        .map_err(|e| Error::data(format!("report encoding: {e}")))
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, report_to_json(report)?).map_err(|e| Error::io(path, e))
}

/// Flat per-run summary: `run,s_p,s_t,accuracy`.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(out, "run,s_p,s_t,accuracy")?;
        for r in &report.runs {
            writeln!(out, "{},{},{},{}", r.run, r.correct, r.total, r.accuracy)?;
        }
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}
