//! Loss, the multi-branch training loop, evaluation and reference scorers.
//!
//! Every batch runs the original traces forward in training mode, derives
//! attention-cropped and attention-masked copies from that pass's maps, and runs
//! each active branch through the same network. The branch losses are averaged
//! and one optimiser step is taken. Branches are back-propagated one after another
//! with their gradients scaled by `1 / branches`, which accumulates exactly the
//! gradient of the averaged loss while only one branch's activations are alive.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, random_augment};
use crate::baseline::{DfConfig, DfModel};
use crate::error::{Error, Result};
use crate::head::sigmoid;
use crate::metrics::{MetricsReport, ReportSpec};
use crate::model::{Adwpf, AnyModel, MultiLabelModel, traces_to_input};
use crate::nn::{Adam, AdamConfig, Real};
use crate::synth::derive_seed;
use crate::types::{AugmentConfig, Dataset, DirectionTrace, ModelConfig};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

/// Mean binary cross-entropy over all `(sample, class)` cells, in the stable
/// form `max(l, 0) - l y + ln(1 + exp(-|l|))`.
pub fn bce_multilabel(logits: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits.iter().zip(labels).map(|(l, y)| bce_cell(*l, *y)).sum();
    total / logits.len() as f64
}

fn bce_cell(l: f64, y: f64) -> f64 {
    l.max(0.0) - l * y + (-l.abs()).exp().ln_1p()
}

/// Loss and its gradient with respect to the logits.
pub fn bce_with_grad<T: Real>(logits: &[T], labels: &[f64]) -> (f64, Vec<T>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(l, y)| {
            let l = l.f64();
            loss += bce_cell(l, *y);
            T::c((sigmoid(l) - y) / n)
        })
        .collect();
    (loss / n, grad)
}

/// Unweighted mean of the active branch losses.
pub fn combined_loss(orig: f64, crop: f64, mask: f64, flags: &AblationFlags) -> f64 {
    let mut losses = vec![orig];
    if flags.use_random_aug {
        // The random branch's loss is passed in the crop slot.
        losses.push(crop);
    } else {
        if flags.use_crop {
            losses.push(crop);
        }
        if flags.use_mask {
            losses.push(mask);
        }
    }
    losses.iter().sum::<f64>() / losses.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_crop: bool,
    pub use_mask: bool,
    pub use_random_aug: bool,
    pub use_residual_attention: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_crop: true, use_mask: true, use_random_aug: false, use_residual_attention: true }
    }
}

impl AblationFlags {
    pub fn none() -> Self {
        Self { use_crop: false, use_mask: false, use_random_aug: false, use_residual_attention: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_random_aug && (self.use_crop || self.use_mask) {
            return Err(Error::Config("random augmentation excludes attention cropping and masking".into()));
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        1 + if self.use_random_aug { 1 } else { self.use_crop as usize + self.use_mask as usize }
    }

    /// Parses grid tokens such as `ac+am+ratt`; `none` or `base` selects no option.
    pub fn parse(token: &str) -> Result<Self> {
        let mut f = Self::none();
        for part in token.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "ac" | "crop" => f.use_crop = true,
                "am" | "mask" => f.use_mask = true,
                "ra" | "random" => f.use_random_aug = true,
                "ratt" | "csra" => f.use_residual_attention = true,
                "none" | "base" => {}
                other => return Err(Error::Config(format!("unknown ablation token {other:?}"))),
            }
        }
        f.validate()?;
        Ok(f)
    }

    pub fn label(&self) -> String {
        let mut parts = vec![];
        if self.use_random_aug {
            parts.push("ra");
        }
        if self.use_crop {
            parts.push("ac");
        }
        if self.use_mask {
            parts.push("am");
        }
        if self.use_residual_attention {
            parts.push("ratt");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            ablation: AblationFlags::default(),
            model,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.ablation.validate()?;
        self.augment.validate()?;
        self.model.validate()
    }

    /// The architecture actually trained: residual attention off means `lambda = 0`.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if !self.ablation.use_residual_attention {
            m.lambda = 0.0;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean loss per branch, original first.
    pub branch_losses: Vec<f64>,
    pub val_map: f64,
    pub val_recall_at_5: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serialisable record") + "\n")
            .collect()
    }
}

pub struct TrainOutcome<M> {
    /// Parameters from the epoch with the best validation mAP.
    pub best: M,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub history: TrainHistory,
}

/// Anything that maps a trace batch to per-class logits.
pub trait Predictor<T: Real> {
    fn class_count(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn predict_logits(&self, x: &[T], batch: usize) -> Result<Vec<T>>;
}

impl<T: Real> Predictor<T> for Adwpf<T> {
    fn class_count(&self) -> usize {
        self.config.class_count
    }
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }
    fn predict_logits(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        self.predict(x, batch)
    }
}

impl<T: Real> Predictor<T> for DfModel<T> {
    fn class_count(&self) -> usize {
        self.config.class_count
    }
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }
    fn predict_logits(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        self.predict(x, batch)
    }
}

impl<T: Real> Predictor<T> for AnyModel<T> {
    fn class_count(&self) -> usize {
        self.spec().class_count()
    }
    fn seq_len(&self) -> usize {
        self.spec().seq_len()
    }
    fn predict_logits(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        self.predict(x, batch)
    }
}

fn check_compatible(ds: &Dataset, class_count: usize, seq_len: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.class_count() != class_count {
        return Err(Error::Config(format!(
            "class-count mismatch: model has {class_count}, dataset has {}",
            ds.class_count()
        )));
    }
    if ds.seq_len() != seq_len {
        return Err(Error::Config(format!(
            "trace length mismatch: model expects {seq_len}, dataset has {}",
            ds.seq_len()
        )));
    }
    Ok(())
}

/// Sigmoid probabilities for every sample, from unaugmented inference passes.
pub fn score_dataset<T: Real, P: Predictor<T> + ?Sized>(model: &P, ds: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    check_compatible(ds, model.class_count(), model.seq_len())?;
    let w = model.class_count();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.samples().chunks(batch_size.max(1)) {
        let traces: Vec<&DirectionTrace> = chunk.iter().map(|s| &s.trace).collect();
        let logits = model.predict_logits(&traces_to_input::<T>(&traces), chunk.len())?;
        for row in logits.chunks(w) {
            out.push(row.iter().map(|l| sigmoid(l.f64())).collect());
        }
    }
    Ok(out)
}

pub fn report_for_scores(ds: &Dataset, scores: &[Vec<f64>]) -> Result<MetricsReport> {
    let labels: Vec<_> = ds.samples().iter().map(|s| s.labels.clone()).collect();
    let tabs: Vec<usize> = ds.samples().iter().map(|s| s.tab_count).collect();
    MetricsReport::compute(&labels, scores, Some(&tabs), &ReportSpec::default())
}

pub fn evaluate<T: Real, P: Predictor<T> + ?Sized>(model: &P, ds: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let scores = score_dataset(model, ds, batch_size)?;
    report_for_scores(ds, &scores)
}

/// Independent uniform scores, the chance-level reference.
pub fn random_scores(samples: usize, classes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples).map(|_| (0..classes).map(|_| rng.gen::<f64>()).collect()).collect()
}

fn labels_matrix(ds: &Dataset, idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .flat_map(|&i| ds.samples()[i].labels.bits().iter().map(|b| *b as f64))
        .collect()
}

/// Trains the attention-driven model described by `cfg`.
pub fn train(cfg: &TrainConfig, train_ds: &Dataset, val_ds: &Dataset) -> Result<TrainOutcome<Adwpf<f32>>> {
    cfg.validate()?;
    let model = Adwpf::<f32>::new(&cfg.effective_model(), cfg.seed)?;
    fit(model, cfg, train_ds, val_ds)
}

/// Trains the DF baseline with the optimiser settings of `cfg`; augmentation is not used.
pub fn train_baseline(cfg: &TrainConfig, df: &DfConfig, train_ds: &Dataset, val_ds: &Dataset) -> Result<TrainOutcome<DfModel<f32>>> {
    let mut cfg = cfg.clone();
    cfg.ablation = AblationFlags::none();
    let model = DfModel::<f32>::new(df, cfg.seed)?;
    fit(model, &cfg, train_ds, val_ds)
}

/// Generic loop over any [`MultiLabelModel`].
pub fn fit<M>(mut model: M, cfg: &TrainConfig, train_ds: &Dataset, val_ds: &Dataset) -> Result<TrainOutcome<M>>
where
    M: MultiLabelModel<f32> + Predictor<f32> + Clone,
{
    cfg.ablation.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be at least 1".into()));
    }
    let (w, l) = (MultiLabelModel::class_count(&model), MultiLabelModel::seq_len(&model));
    check_compatible(train_ds, w, l)?;
    check_compatible(val_ds, w, l)?;

    let flags = cfg.ablation;
    let n_branches = flags.branch_count();
    let branch_scale = 1.0 / n_branches as f64;
    let mut opt = Adam::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM, 0));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, AUGMENT_STREAM, 0));

    let mut history = TrainHistory::default();
    let mut best: Option<(M, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut batch_id = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut branch_sums = vec![0.0; n_branches];
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let b = idx.len();
            let traces: Vec<&DirectionTrace> = idx.iter().map(|&i| &train_ds.samples()[i].trace).collect();
            let y = labels_matrix(train_ds, idx);
            model.zero_grad();

            let fwd = model.forward_train(&traces_to_input::<f32>(&traces), b)?;
            let (l_orig, mut g) = bce_with_grad(&fwd.logits, &y);
            if !l_orig.is_finite() {
                return Err(Error::NonFinite { what: "training loss", batch: Some(batch_id) });
            }
            scale(&mut g, branch_scale);
            model.backward(&fwd.cache, &g);
            let maps = fwd.maps;
            drop(fwd.cache);

            let mut branch_inputs: Vec<Vec<DirectionTrace>> = Vec::new();
            if flags.use_crop || flags.use_mask {
                let maps = maps.as_ref().ok_or_else(|| Error::Config("attention augmentation needs a model with attention maps".into()))?;
                let mut crops = Vec::with_capacity(b);
                let mut masks = Vec::with_capacity(b);
                for (k, t) in traces.iter().enumerate() {
                    let pair = augment_pair(t, &maps.sample(k), &cfg.augment, &mut aug_rng)?;
                    crops.push(pair.crop.trace);
                    masks.push(pair.mask.trace);
                }
                if flags.use_crop {
                    branch_inputs.push(crops);
                }
                if flags.use_mask {
                    branch_inputs.push(masks);
                }
            } else if flags.use_random_aug {
                let mut aug = Vec::with_capacity(b);
                for t in &traces {
                    aug.push(random_augment(t, &mut aug_rng)?.trace);
                }
                branch_inputs.push(aug);
            }

            let mut losses = vec![l_orig];
            for inputs in &branch_inputs {
                let refs: Vec<&DirectionTrace> = inputs.iter().collect();
                let fwd = model.forward_train(&traces_to_input::<f32>(&refs), b)?;
                let (loss, mut g) = bce_with_grad(&fwd.logits, &y);
                if !loss.is_finite() {
                    return Err(Error::NonFinite { what: "training loss", batch: Some(batch_id) });
                }
                scale(&mut g, branch_scale);
                model.backward(&fwd.cache, &g);
                losses.push(loss);
            }
            opt.step(&mut model);

            let batch_loss = losses.iter().sum::<f64>() / losses.len() as f64;
            loss_sum += batch_loss;
            for (s, l) in branch_sums.iter_mut().zip(&losses) {
                *s += l;
            }
            batches += 1;
            batch_id += 1;
        }

        let report = evaluate(&model, val_ds, cfg.batch_size)?;
        let nb = batches.max(1) as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / nb,
            branch_losses: branch_sums.iter().map(|s| s / nb).collect(),
            val_map: report.map,
            val_recall_at_5: report.recall(5).unwrap_or(f64::NAN),
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(_, _, m)| report.map > *m) {
            best = Some((model.clone(), epoch, report.map));
        }
    }
    let (best, best_epoch, best_val_map) = best.expect("at least one epoch");
    Ok(TrainOutcome { best, best_epoch, best_val_map, history })
}

fn scale(g: &mut [f32], s: f64) {
    let s = s as f32;
    g.iter_mut().for_each(|v| *v *= s);
}
