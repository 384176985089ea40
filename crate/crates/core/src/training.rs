//! Joint optimization of adapter, encoder and decoder.
//!
//! Training uses AdamW with a warm-restart cosine schedule: each restart
//! interval opens with a linear warmup to the cycle's peak, then decays to
//! zero along a half cosine. The peak shrinks geometrically from cycle to
//! cycle.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ViewFeatureSet};
use crate::params::ParamId;
use crate::tensor::Matrix;

/// Offset from the run seed for the shuffling/sampling/dropout stream.
pub const TRAIN_STREAM_OFFSET: u64 = 1;
/// Offset from the run seed for fixed evaluation view subsets.
pub const EVAL_STREAM_OFFSET: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub restart_interval: usize,
    pub warmup_epochs: usize,
    /// Fraction by which the peak shrinks after every restart interval.
    pub peak_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Views sampled per shape; `None` uses every stored view.
    pub views_per_shape: Option<usize>,
    /// Keep the feature adapter fixed (frozen-initializer setting).
    pub freeze_adapter: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            peak_lr: 1e-3,
            restart_interval: 100,
            warmup_epochs: 5,
            peak_decay: 0.4,
            weight_decay: 1e-2,
            batch_size: 32,
            seed: 0,
            views_per_shape: None,
            freeze_adapter: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.restart_interval == 0 {
            return fail("restart_interval must be positive".into());
        }
        if self.warmup_epochs >= self.restart_interval {
            return fail(format!(
                "warmup_epochs {} must be below restart_interval {}",
                self.warmup_epochs, self.restart_interval
            ));
        }
        if !(0.0..1.0).contains(&self.peak_decay) {
            return fail(format!("peak_decay {} not in [0, 1)", self.peak_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.peak_lr <= 0.0 || self.weight_decay < 0.0 {
            return fail("peak_lr must be positive and weight_decay non-negative".into());
        }
        if self.views_per_shape == Some(0) {
            return fail("views per shape must be at least 1".into());
        }
        Ok(())
    }
}

/// Learning rate for a (zero-based) epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let cycle = epoch / cfg.restart_interval;
    let e = epoch % cfg.restart_interval;
    let peak = cfg.peak_lr * (1.0 - cfg.peak_decay).powi(cycle as i32);
    if e < cfg.warmup_epochs {
        peak * ((e + 1) as f64 / cfg.warmup_epochs as f64)
    } else {
        let span = (cfg.restart_interval - cfg.warmup_epochs) as f64;
        let frac = (e - cfg.warmup_epochs) as f64 / span;
        peak * 0.5 * (1.0 + (PI * frac).cos())
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamW {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Matrix> = model
            .params()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update of every parameter that has a gradient and is not frozen.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &[Option<Matrix>],
        lr: f64,
        frozen: &HashSet<ParamId>,
    ) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<ParamId> = model.params().ids().collect();
        for id in ids {
            if frozen.contains(&id) {
                continue;
            }
            let Some(g) = &grads[id.index()] else {
                continue;
            };
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = model.params_mut().get_mut(id);
            for (((p, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * self.weight_decay * *p;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Uniform sample of `m` views without replacement.
pub fn sample_views(
    shape: &ViewFeatureSet,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ViewFeatureSet> {
    let available = shape.num_views();
    if m == 0 || m > available {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} views from shape {} with {available}",
            shape.shape_id
        )));
    }
    let idx = index::sample(rng, available, m).into_vec();
    Ok(ViewFeatureSet {
        features: shape.features.select_rows(&idx),
        ..shape.clone()
    })
}

/// Seed for the fixed evaluation-time view subset of one shape.
fn shape_seed(base: u64, shape_id: &str) -> u64 {
    // FNV-1a, so the subset depends on the id and not on dataset order
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in shape_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub instance_accuracy: f64,
    /// Mean of `per_class` over classes that have at least one item.
    pub class_accuracy: f64,
    /// Accuracy per class index; `None` for classes absent from the data.
    pub per_class: Vec<Option<f64>>,
}

impl AccuracyReport {
    /// Builds a report from `(label, predicted)` pairs over `num_classes`.
    pub fn from_pairs(pairs: &[(usize, usize)], num_classes: usize) -> Self {
        let mut totals = vec![0usize; num_classes];
        let mut correct = vec![0usize; num_classes];
        for &(label, pred) in pairs {
            totals[label] += 1;
            if label == pred {
                correct[label] += 1;
            }
        }
        let hits: usize = correct.iter().sum();
        let instance_accuracy = if pairs.is_empty() {
            0.0
        } else {
            hits as f64 / pairs.len() as f64
        };
        let per_class: Vec<Option<f64>> = totals
            .iter()
            .zip(&correct)
            .map(|(&t, &c)| (t > 0).then(|| c as f64 / t as f64))
            .collect();
        let missing = per_class.iter().filter(|p| p.is_none()).count();
        if missing > 0 && !pairs.is_empty() {
            warn!("{missing} classes have no evaluation items; excluded from class accuracy");
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let class_accuracy = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self {
            instance_accuracy,
            class_accuracy,
            per_class,
        }
    }
}

impl fmt::Display for AccuracyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "instance_accuracy\t{:.4}", self.instance_accuracy)?;
        write!(f, "class_accuracy\t{:.4}", self.class_accuracy)
    }
}

/// Eval-mode accuracy. With `views` set, each shape is evaluated on a fixed
/// subset of that many views, seeded by `seed` and the shape id.
pub fn evaluate(
    dataset: &[ViewFeatureSet],
    model: &Model,
    views: Option<usize>,
    seed: u64,
) -> Result<AccuracyReport> {
    let k = model.config().num_classes;
    let mut pairs = Vec::with_capacity(dataset.len());
    for shape in dataset {
        if shape.label >= k {
            return Err(Error::InvalidArgument(format!(
                "shape {} has label {} but the model has {k} classes",
                shape.shape_id, shape.label
            )));
        }
        let pred = match views {
            Some(m) if m < shape.num_views() => {
                let mut rng = ChaCha8Rng::seed_from_u64(shape_seed(seed, &shape.shape_id));
                model.forward(&sample_views(shape, m, &mut rng)?)?
            }
            Some(m) if m > shape.num_views() => {
                return Err(Error::InvalidArgument(format!(
                    "shape {} has {} views, {m} requested",
                    shape.shape_id,
                    shape.num_views()
                )))
            }
            _ => model.forward(shape)?,
        };
        pairs.push((shape.label, pred.class()));
    }
    Ok(AccuracyReport::from_pairs(&pairs, k))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval: AccuracyReport,
}

impl EpochRecord {
    /// Tab-separated log line: epoch, lr, loss, instance acc, class acc.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.8e}\t{:.6}\t{:.4}\t{:.4}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.eval.instance_accuracy,
            self.eval.class_accuracy
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Snapshot from the epoch with the highest eval instance accuracy
    /// (earliest on ties).
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_instance_accuracy: f64,
    pub best_class_accuracy: f64,
}

/// Splits a shuffled order into batches, folding a trailing singleton into
/// the previous batch so every batch norm sees at least two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let n = order.len();
        out.pop();
        let start = n - 1 - out.last().unwrap().len();
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Trains `model` in place; see [`train_with`].
pub fn train(
    model: &mut Model,
    train_set: &[ViewFeatureSet],
    eval_set: Option<&[ViewFeatureSet]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, eval_set, cfg, |_| {})
}

/// Trains `model` in place, calling `on_epoch` after every epoch. Without an
/// eval set, accuracy is measured on the training set.
pub fn train_with(
    model: &mut Model,
    train_set: &[ViewFeatureSet],
    eval_set: Option<&[ViewFeatureSet]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let k = model.config().num_classes;
    if let Some(bad) = train_set.iter().find(|s| s.label >= k) {
        return Err(Error::InvalidArgument(format!(
            "shape {} has label {} but the model has {k} classes",
            bad.shape_id, bad.label
        )));
    }
    if let Some(m) = cfg.views_per_shape {
        if let Some(bad) = train_set.iter().find(|s| s.num_views() < m) {
            return Err(Error::InvalidArgument(format!(
                "shape {} has {} views, {m} requested",
                bad.shape_id,
                bad.num_views()
            )));
        }
    }

    let frozen: HashSet<ParamId> = if cfg.freeze_adapter {
        let (w, b) = model.adapter();
        [w, b].into_iter().collect()
    } else {
        HashSet::new()
    };
    let eval_set = eval_set.unwrap_or(train_set);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(TRAIN_STREAM_OFFSET));
    let mut opt = AdamW::new(model, cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, AccuracyReport, Model)> = None;
    let mut best_class = 0.0f64;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let shapes: Vec<ViewFeatureSet> = batch
                .iter()
                .map(|&i| match cfg.views_per_shape {
                    Some(m) => sample_views(&train_set[i], m, &mut rng),
                    None => Ok(train_set[i].clone()),
                })
                .collect::<Result<_>>()?;
            let feats: Vec<&Matrix> = shapes.iter().map(|s| &s.features).collect();
            let labels: Vec<usize> = shapes.iter().map(|s| s.label).collect();

            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let out = model.forward_batch(&mut tape, &bound, &feats, Mode::Train, &mut rng)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let loss_value = tape.value(loss).get(0, 0);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    shapes: shapes
                        .iter()
                        .map(|s| s.shape_id.as_str())
                        .collect::<Vec<_>>()
                        .join(","),
                });
            }
            loss_sum += loss_value * batch.len() as f64;

            let mut grads = tape.backward(loss)?;
            let per_param: Vec<Option<Matrix>> =
                bound.vars().iter().map(|&v| grads.take(v)).collect();
            opt.step(model, &per_param, lr, &frozen);
            model.update_running_stats(&out.norm_stats);
        }

        let eval = evaluate(
            eval_set,
            model,
            cfg.views_per_shape,
            cfg.seed.wrapping_add(EVAL_STREAM_OFFSET),
        )?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            eval,
        };
        best_class = best_class.max(record.eval.class_accuracy);
        if best
            .as_ref()
            .is_none_or(|(_, r, _)| record.eval.instance_accuracy > r.instance_accuracy)
        {
            best = Some((epoch, record.eval.clone(), model.clone()));
        }
        on_epoch(&record);
        log.push(record);
    }

    let (best_epoch, best_report, best_model) = match best {
        Some(b) => b,
        None => (
            0,
            evaluate(
                eval_set,
                model,
                cfg.views_per_shape,
                cfg.seed.wrapping_add(EVAL_STREAM_OFFSET),
            )?,
            model.clone(),
        ),
    };
    Ok(TrainOutcome {
        log,
        best_model,
        best_epoch,
        best_instance_accuracy: best_report.instance_accuracy,
        best_class_accuracy: best_class,
    })
}

/// Per-class counts, handy for summarizing a dataset.
pub fn class_histogram(dataset: &[ViewFeatureSet]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for s in dataset {
        *out.entry(s.label).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn schedule_reference_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(4, &cfg), 0.001);
        assert_eq!(lr_at(0, &cfg), 0.001 / 5.0);
        assert_eq!(lr_at(104, &cfg), 0.0006);
        let want = 0.001 * 0.5 * (1.0 + (47.0 * PI / 95.0).cos());
        assert!((lr_at(52, &cfg) - want).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous_and_ends_near_zero() {
        let cfg = TrainConfig::default();
        for cycle in 0..3 {
            let base = cycle * cfg.restart_interval;
            let peak = 0.001 * 0.6f64.powi(cycle as i32);
            assert!((lr_at(base + cfg.warmup_epochs - 1, &cfg) - peak).abs() < 1e-15);
            assert!((lr_at(base + cfg.warmup_epochs, &cfg) - peak).abs() < 1e-15);
            assert!(lr_at(base + cfg.restart_interval - 1, &cfg) < 0.01 * peak);
        }
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            warmup_epochs: 100,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            peak_decay: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            views_per_shape: Some(0),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn accuracy_hand_enumeration() {
        let mut pairs = vec![(0, 0); 10];
        pairs.extend([(1, 1), (1, 0)]);
        let r = AccuracyReport::from_pairs(&pairs, 2);
        assert!((r.instance_accuracy - 11.0 / 12.0).abs() < 1e-15);
        assert!((r.class_accuracy - 0.75).abs() < 1e-15);
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.5)]);

        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|c| [(c, 0), (c, 0)]).collect();
        let r = AccuracyReport::from_pairs(&pairs, 4);
        assert_eq!(r.instance_accuracy, 0.25);
        assert_eq!(r.class_accuracy, 0.25);
    }

    #[test]
    fn absent_classes_excluded() {
        let r = AccuracyReport::from_pairs(&[(0, 0), (2, 1)], 3);
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(0.0)]);
        assert_eq!(r.class_accuracy, 0.5);
    }

    #[test]
    fn batching_never_leaves_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
        let one = [0usize];
        assert_eq!(batches(&one, 4).len(), 1);
    }

    fn shape(id: &str, views: usize) -> ViewFeatureSet {
        let data = (0..views * 2).map(|v| v as f64).collect();
        ViewFeatureSet {
            shape_id: id.into(),
            features: Matrix::from_vec(views, 2, data).unwrap(),
            label: 0,
            sublabel: None,
        }
    }

    #[test]
    fn sampling_contract() {
        let s = shape("a", 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_views(&s, 6, &mut rng).is_err());
        assert!(sample_views(&s, 0, &mut rng).is_err());

        let all = sample_views(&s, 5, &mut rng).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..5)
            .map(|r| all.features.row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        let mut want: Vec<Vec<u64>> = (0..5)
            .map(|r| s.features.row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        want.sort();
        assert_eq!(rows, want);

        let a = sample_views(&s, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_views(&s, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_view_draws_cover_every_view() {
        // coupon collector: 12 views, expected ~37 draws; 400 leaves a
        // vanishing miss probability
        let s = shape("a", 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = HashSet::new();
        for _ in 0..400 {
            let v = sample_views(&s, 1, &mut rng).unwrap();
            seen.insert(v.features.get(0, 0) as i64);
        }
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn train_rejects_bad_labels() {
        let cfg = ModelConfig {
            dim_in: 2,
            dim_view: 4,
            num_blocks: 1,
            num_heads: 2,
            num_classes: 2,
            decoder_hidden: 4,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, 0).unwrap();
        let mut s = shape("a", 3);
        s.label = 5;
        let err = train(&mut model, &[s], None, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("label 5"));
        assert!(train(&mut model, &[], None, &TrainConfig::default()).is_err());
    }
}
