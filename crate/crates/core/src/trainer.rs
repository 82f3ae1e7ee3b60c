//! Training and evaluation loops.
//!
//! Images are fed to the networks scaled by [`INPUT_SCALE`]. Every epoch
//! reshuffles the training set, redraws augmentations, runs minibatch
//! forward/backward passes with BN in train mode and takes one Adam step per
//! minibatch. Shuffling, augmentation and dropout use separate generators so
//! toggling one never shifts the others.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataforge::{background_fill, derive_seed, draw_transform, AugmentPolicy, Dataset, Sample};
use crate::engine::{AdamConfig, AdamState, Graph, Mode, Real, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{
    confusion, dice_pooled, label_frequencies, label_weights, weighted_ce_cls, weighted_ce_seg, LabelWeights,
    MetricsReport,
};
use crate::nets::FEATURES;

/// Intensities in `[0, 255]` are mapped to `[0, 1]`.
pub const INPUT_SCALE: f64 = 1.0 / 255.0;

/// Batch size used when evaluating.
pub const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSource {
    /// Square-root inverse frequency weights from the training labels.
    Frequencies,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub freeze_backbone: bool,
    pub weights: WeightSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            epochs: 50,
            seed: 0,
            augment: AugmentPolicy::default(),
            freeze_backbone: true,
            weights: WeightSource::Frequencies,
        }
    }
}

impl TrainConfig {
    /// Named presets: `brain-seg` (batch 1), `brain-cls` (4), `cardiac-seg` (5), `cardiac-cls` (64).
    pub fn preset(name: &str) -> Option<Self> {
        let batch_size = match name {
            "brain-seg" => 1,
            "brain-cls" => 4,
            "cardiac-seg" => 5,
            "cardiac-cls" => 64,
            _ => return None,
        };
        Some(TrainConfig {
            batch_size,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!(
                "batch size {} and epochs {} must be positive, learning rate {} finite and >= 0",
                self.batch_size, self.epochs, self.learning_rate
            )));
        }
        self.augment.validate()
    }
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
}

impl TrainTrace {
    pub fn csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(s, "{},{l}", i + 1);
        }
        s
    }
}

struct Rngs {
    shuffle: ChaCha8Rng,
    augment: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        let mk = |k| ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k]));
        Rngs {
            shuffle: mk(1),
            augment: mk(2),
            dropout: mk(3),
        }
    }
}

/// Stack samples into a `[batch, 1, spatial...]` network input.
pub fn batch_input<T: Real>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut shape = vec![samples.len(), 1];
    shape.extend_from_slice(first.spatial());
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        if s.spatial() != first.spatial() {
            return Err(Error::Data(format!("batch mixes shapes {:?} and {:?}", s.spatial(), first.spatial())));
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64c(v as f64 * INPUT_SCALE)));
    }
    Tensor::new(shape, data)
}

/// Minibatch index ranges. A trailing batch of one sample is merged into the
/// previous one because batch normalization of FC features is undefined for it.
fn batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if size > 1 && out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss {loss} at epoch {}, batch {}", epoch + 1, batch + 1)))
    }
}

fn output_channels<T: Real>(g: &Graph<T>) -> usize {
    g.nodes()[g.output_node()].channels
}

/// Train a segmentation network on the label maps of `data`.
pub fn fit_segmentation<T: Real>(mnet: &mut Graph<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("segmentation training set is empty".into()));
    }
    let n_labels = output_channels(mnet);
    if data.n_labels as usize > n_labels {
        return Err(Error::Data(format!("dataset has {} labels, network predicts {n_labels}", data.n_labels)));
    }
    let weights = match cfg.weights {
        WeightSource::Frequencies => {
            label_weights(&label_frequencies(data.samples.iter().map(|s| s.labels.as_slice()), n_labels)?)?
        }
        WeightSource::Uniform => LabelWeights::uniform(n_labels),
    };
    mnet.set_frozen(false);
    let mut adam = AdamState::for_graph(AdamConfig::with_lr(cfg.learning_rate), mnet);
    let mut rngs = Rngs::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rngs.shuffle);
        let mut total = 0.0;
        for (bi, range) in batches(order.len(), cfg.batch_size).into_iter().enumerate() {
            let mut samples = Vec::with_capacity(range.len());
            for &i in &order[range] {
                let s = &data.samples[i];
                samples.push(match draw_transform(&cfg.augment, s.spatial().len(), &mut rngs.augment) {
                    Some(t) => t.apply(s, background_fill(s))?,
                    None => s.clone(),
                });
            }
            let refs: Vec<&Sample> = samples.iter().collect();
            let x = batch_input::<T>(&refs)?;
            let labels: Vec<u8> = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
            let probs = mnet.forward(&x, Mode::Train, &mut rngs.dropout)?;
            let loss = weighted_ce_seg(&probs, &labels, &weights)?;
            check_finite(loss.value, epoch, bi)?;
            mnet.backward(&loss)?;
            adam.step(mnet)?;
            total += loss.value * samples.len() as f64;
        }
        mnet.clear_tape();
        trace.epoch_losses.push(total / data.len() as f64);
    }
    Ok(trace)
}

/// Classifier features of one sample from a frozen backbone (eval mode).
fn backbone_features<T: Real>(backbone: &mut Graph<T>, samples: &[&Sample]) -> Result<Tensor<T>> {
    let target = backbone
        .marked(FEATURES)
        .ok_or_else(|| Error::State("backbone has no feature tap".into()))?;
    let x = batch_input::<T>(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = backbone.forward_to(&x, target, Mode::Eval, &mut rng)?;
    backbone.clear_tape();
    Ok(f)
}

fn check_backbone<T: Real>(backbone: &Graph<T>, head: &Graph<T>, data: &Dataset) -> Result<()> {
    let (_, bspatial) = backbone.input_shape();
    if bspatial != data.spatial.as_slice() {
        return Err(Error::shape(
            "fit_classifier",
            format!("backbone expects {bspatial:?}, dataset has {:?}", data.spatial),
        ));
    }
    let f = backbone.marked(FEATURES).ok_or_else(|| Error::State("backbone has no feature tap".into()))?;
    let node = &backbone.nodes()[f];
    let (hc, hspatial) = head.input_shape();
    if node.channels != hc || node.spatial.as_slice() != hspatial {
        return Err(Error::shape(
            "fit_classifier",
            format!(
                "features {}x{:?} do not fit head input {hc}x{hspatial:?}",
                node.channels, node.spatial
            ),
        ));
    }
    Ok(())
}

/// Train a classifier, either directly on images (`backbone = None`) or on the
/// features of a frozen segmentation backbone. Features of unaugmented samples
/// are computed once and reused across epochs.
pub fn fit_classifier<T: Real>(
    head: &mut Graph<T>,
    mut backbone: Option<&mut Graph<T>>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("classification training set is empty".into()));
    }
    let classes = data.class_labels()?;
    let n_classes = output_channels(head);
    let weights = match cfg.weights {
        WeightSource::Frequencies => {
            let mut f = vec![0u64; n_classes];
            for &c in &classes {
                *f.get_mut(c as usize)
                    .ok_or_else(|| Error::Data(format!("class {c} outside [0, {n_classes})")))? += 1;
            }
            label_weights(&f)?
        }
        WeightSource::Uniform => LabelWeights::uniform(n_classes),
    };
    let mut cache: Vec<Option<Tensor<T>>> = vec![None; data.len()];
    if let Some(b) = backbone.as_deref_mut() {
        if !cfg.freeze_backbone {
            return Err(Error::Param("backbone fine-tuning is not supported; set freeze_backbone".into()));
        }
        check_backbone(b, head, data)?;
        b.set_frozen(true);
        for start in (0..data.len()).step_by(EVAL_BATCH) {
            let end = (start + EVAL_BATCH).min(data.len());
            let refs: Vec<&Sample> = data.samples[start..end].iter().collect();
            let f = backbone_features(b, &refs)?;
            for k in 0..end - start {
                cache[start + k] = Some(f.slice_batch(k, 1)?);
            }
        }
    }
    head.set_frozen(false);
    let mut adam = AdamState::for_graph(AdamConfig::with_lr(cfg.learning_rate), head);
    let mut rngs = Rngs::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rngs.shuffle);
        let mut total = 0.0;
        for (bi, range) in batches(order.len(), cfg.batch_size).into_iter().enumerate() {
            let idx = &order[range];
            // Transformed copy per batch item; `None` keeps the cached original.
            let mut drawn: Vec<Option<Sample>> = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &data.samples[i];
                drawn.push(match draw_transform(&cfg.augment, s.spatial().len(), &mut rngs.augment) {
                    Some(t) => Some(t.apply(s, background_fill(s))?),
                    None => None,
                });
            }
            let x = match backbone.as_deref_mut() {
                Some(b) => {
                    let moved: Vec<&Sample> = drawn.iter().flatten().collect();
                    let fresh = if moved.is_empty() { None } else { Some(backbone_features(b, &moved)?) };
                    let mut items = Vec::with_capacity(idx.len());
                    let mut j = 0;
                    for (k, &i) in idx.iter().enumerate() {
                        match (&drawn[k], &fresh) {
                            (Some(_), Some(f)) => {
                                items.push(f.slice_batch(j, 1)?);
                                j += 1;
                            }
                            _ => items.push(cache[i].clone().expect("cached features")),
                        }
                    }
                    let refs: Vec<&Tensor<T>> = items.iter().collect();
                    Tensor::stack(&refs)?
                }
                None => {
                    let refs: Vec<&Sample> = idx
                        .iter()
                        .zip(&drawn)
                        .map(|(&i, d)| d.as_ref().unwrap_or(&data.samples[i]))
                        .collect();
                    batch_input::<T>(&refs)?
                }
            };
            let labels: Vec<u8> = idx.iter().map(|&i| classes[i]).collect();
            let probs = head.forward(&x, Mode::Train, &mut rngs.dropout)?;
            let loss = weighted_ce_cls(&probs, &labels, &weights)?;
            check_finite(loss.value, epoch, bi)?;
            head.backward(&loss)?;
            adam.step(head)?;
            total += loss.value * idx.len() as f64;
        }
        head.clear_tape();
        trace.epoch_losses.push(total / data.len() as f64);
    }
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Classification,
}

fn argmax_channels<T: Real>(probs: &Tensor<T>) -> Vec<u8> {
    let (b, c, s) = (probs.batch(), probs.channels(), probs.spatial_size().max(1));
    let p = probs.data();
    let mut out = Vec::with_capacity(b * s);
    for bi in 0..b {
        for x in 0..s {
            let mut best = 0;
            for ch in 1..c {
                if p[(bi * c + ch) * s + x] > p[(bi * c + best) * s + x] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Model predictions for every sample: label maps (segmentation) or classes.
pub fn predict<T: Real>(model: &mut Graph<T>, mut backbone: Option<&mut Graph<T>>, data: &Dataset) -> Result<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let refs: Vec<&Sample> = data.samples[start..end].iter().collect();
        let x = match backbone.as_deref_mut() {
            Some(b) => backbone_features(b, &refs)?,
            None => batch_input::<T>(&refs)?,
        };
        let probs = model.forward(&x, Mode::Eval, &mut rng)?;
        out.extend(argmax_channels(&probs));
    }
    model.clear_tape();
    Ok(out)
}

/// Score a model in eval mode. Segmentation reports pooled Dice per label and
/// pixel-level agreement; classification reports sample-level agreement.
pub fn evaluate<T: Real>(
    model: &mut Graph<T>,
    backbone: Option<&mut Graph<T>>,
    data: &Dataset,
    task: Task,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if let Some(b) = backbone.as_deref() {
        check_backbone(b, model, data)?;
    }
    let n = output_channels(model);
    let pred = predict(model, backbone, data)?;
    match task {
        Task::Classification => {
            let truth = data.class_labels()?;
            Ok(MetricsReport::from_confusion(confusion(&pred, &truth, n)?))
        }
        Task::Segmentation => {
            let px: usize = data.spatial.iter().product();
            let truth: Vec<u8> = data.samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
            let (p, t): (Vec<u8>, Vec<u8>) = pred
                .iter()
                .zip(&truth)
                .filter(|(_, &t)| t != crate::metrics::UNLABELED)
                .map(|(&p, &t)| (p, t))
                .unzip();
            let mut report = MetricsReport::from_confusion(confusion(&p, &t, n)?);
            let preds: Vec<&[u8]> = pred.chunks(px).collect();
            let truths: Vec<&[u8]> = truth.chunks(px).collect();
            report.dice = (0..n).map(|l| dice_pooled(&preds, &truths, l as u8)).collect::<Result<_>>()?;
            Ok(report)
        }
    }
}

/// Mean pooled Dice over the foreground labels that occur in `data`.
pub fn foreground_dice(report: &MetricsReport, data: &Dataset) -> f64 {
    let mut present = vec![false; report.dice.len()];
    for s in &data.samples {
        for &l in &s.labels {
            if let Some(p) = present.get_mut(l as usize) {
                *p = true;
            }
        }
    }
    let vals: Vec<f64> = (1..report.dice.len()).filter(|&l| present[l]).map(|l| report.dice[l]).collect();
    if vals.is_empty() {
        1.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_merge_single_tail() {
        assert_eq!(batches(9, 4), vec![0..4, 4..9]);
        assert_eq!(batches(8, 4), vec![0..4, 4..8]);
        assert_eq!(batches(3, 1), vec![0..1, 1..2, 2..3]);
        assert_eq!(batches(1, 4), vec![0..1]);
        assert_eq!(batches(7, 4), vec![0..4, 4..7]);
    }

    #[test]
    fn presets_exist() {
        assert_eq!(TrainConfig::preset("brain-seg").unwrap().batch_size, 1);
        assert_eq!(TrainConfig::preset("cardiac-cls").unwrap().batch_size, 64);
        assert!(TrainConfig::preset("lung").is_none());
    }

    #[test]
    fn trace_csv() {
        let t = TrainTrace { epoch_losses: vec![1.5, 0.25] };
        assert_eq!(t.csv(), "epoch,mean_loss\n1,1.5\n2,0.25\n");
    }
}
