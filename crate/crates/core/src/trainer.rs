//! Losses, class weighting, early stopping and the training loop.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, LabelVector, Tag};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::network::{Checkpoint, HeadMode, Model, ModelConfig, Session};
use crate::numerics::{adam_step, AdamConfig, AdamState, Array};

/// Class weights are clamped into this range.
pub const WEIGHT_RANGE: (f64, f64) = (1.0, 50.0);

/// Targets, logits and positive-class weights for a batch of `n` samples,
/// each contributing `width` loss entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBatch {
    pub n: usize,
    pub width: usize,
    pub targets: Vec<f64>,
    pub logits: Vec<f64>,
    /// Weight on the `y = 1` term, one per entry column.
    pub pos_weight: Vec<f64>,
}

impl LossBatch {
    pub fn new(n: usize, width: usize, targets: Vec<f64>, logits: Vec<f64>, pos_weight: Vec<f64>) -> Result<Self> {
        let b = Self {
            n,
            width,
            targets,
            logits,
            pos_weight,
        };
        b.validate()?;
        Ok(b)
    }

    /// Unweighted batch.
    pub fn plain(targets: Vec<f64>, logits: Vec<f64>) -> Result<Self> {
        let n = targets.len();
        Self::new(n, 1, targets, logits, vec![1.0])
    }

    /// Expands clip labels into head targets: one-hot pairs in two-logit
    /// mode (weight on the positive column), single targets otherwise.
    pub fn from_labels(
        tasks: &[Tag],
        mode: HeadMode,
        labels: &[LabelVector],
        logits: Vec<f64>,
        task_weights: &[f64],
    ) -> Result<Self> {
        if task_weights.len() != tasks.len() {
            return Err(Error::shape(
                "loss",
                format!("{} task weights for {} tasks", task_weights.len(), tasks.len()),
            ));
        }
        let width = tasks.len() * mode.width();
        let mut targets = Vec::with_capacity(labels.len() * width);
        for l in labels {
            for &t in tasks {
                let y = if l.get(t) { 1.0 } else { 0.0 };
                match mode {
                    HeadMode::TwoLogit => targets.extend([1.0 - y, y]),
                    HeadMode::OneLogit => targets.push(y),
                }
            }
        }
        let pos_weight = task_weights
            .iter()
            .flat_map(|&w| match mode {
                HeadMode::TwoLogit => vec![1.0, w],
                HeadMode::OneLogit => vec![w],
            })
            .collect();
        Self::new(labels.len(), width, targets, logits, pos_weight)
    }

    pub fn validate(&self) -> Result<()> {
        let entries = self.n * self.width;
        if self.n == 0 || self.width == 0 {
            return Err(Error::Contract("empty loss batch".into()));
        }
        if self.targets.len() != entries || self.logits.len() != entries {
            return Err(Error::shape(
                "loss",
                format!(
                    "{} targets and {} logits for {} x {} entries",
                    self.targets.len(),
                    self.logits.len(),
                    self.n,
                    self.width
                ),
            ));
        }
        if self.pos_weight.len() != self.width {
            return Err(Error::shape(
                "loss",
                format!("{} weights for width {}", self.pos_weight.len(), self.width),
            ));
        }
        if let Some(y) = self.targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Contract(format!("target {y} is not 0 or 1")));
        }
        if let Some(w) = self.pos_weight.iter().find(|&&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Contract(format!("class weight {w} is not positive")));
        }
        if self.logits.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("loss logits"));
        }
        Ok(())
    }

    fn entries(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.targets
            .iter()
            .zip(&self.logits)
            .enumerate()
            .map(|(i, (&y, &p))| (y, p, self.pos_weight[i % self.width]))
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over entries of `w·y·softplus(-p) + (1-y)·softplus(p)`.
pub fn bce_with_logits(batch: &LossBatch) -> Result<f64> {
    bce_with_logits_grad(batch).map(|(l, _)| l)
}

/// Loss and its derivative with respect to every logit.
pub fn bce_with_logits_grad(batch: &LossBatch) -> Result<(f64, Vec<f64>)> {
    batch.validate()?;
    let scale = 1.0 / batch.targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(batch.targets.len());
    for (y, p, w) in batch.entries() {
        total += w * y * softplus(-p) + (1.0 - y) * softplus(p);
        grad.push(scale * (-w * y * sigmoid(-p) + (1.0 - y) * sigmoid(p)));
    }
    Ok((total * scale, grad))
}

/// Focal loss. `alpha = None` weights both classes by 1; otherwise the
/// positive class gets `alpha` and the negative `1 - alpha`. The batch's
/// positive weights multiply the `y = 1` entries.
pub fn focal_loss(batch: &LossBatch, gamma: f64, alpha: Option<f64>) -> Result<f64> {
    focal_loss_grad(batch, gamma, alpha).map(|(l, _)| l)
}

pub fn focal_loss_grad(batch: &LossBatch, gamma: f64, alpha: Option<f64>) -> Result<(f64, Vec<f64>)> {
    batch.validate()?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("focal gamma {gamma} must be >= 0")));
    }
    if let Some(a) = alpha {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Config(format!("focal alpha {a} outside (0, 1]")));
        }
    }
    let scale = 1.0 / batch.targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(batch.targets.len());
    for (y, p, w) in batch.entries() {
        let positive = y == 1.0;
        let (z, sign) = if positive { (p, 1.0) } else { (-p, -1.0) };
        let a = match alpha {
            None => 1.0,
            Some(a) if positive => a,
            Some(a) => 1.0 - a,
        };
        let c = if positive { a * w } else { a };
        let q = sigmoid(z);
        let one_minus_q = sigmoid(-z);
        let log_q = -softplus(-z);
        let modulator = one_minus_q.powf(gamma);
        total += c * modulator * -log_q;
        let dz = c * modulator * (gamma * q * log_q - one_minus_q);
        grad.push(scale * sign * dz);
    }
    Ok((total * scale, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    WeightedBce,
    Focal,
    /// Focal loss with class weights on the positive entries.
    WeightedFocal,
}

impl LossKind {
    pub fn weighted(self) -> bool {
        matches!(self, LossKind::WeightedBce | LossKind::WeightedFocal)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub warnings: Vec<String>,
}

/// `clamp(negatives / positives, 1, 50)` per task.
pub fn class_weights(labels: &[LabelVector], tasks: &[Tag]) -> Result<ClassWeights> {
    if labels.is_empty() {
        return Err(Error::Contract("class weights of an empty dataset".into()));
    }
    let mut out = ClassWeights::default();
    for &t in tasks {
        let pos = labels.iter().filter(|l| l.get(t)).count();
        let neg = labels.len() - pos;
        let w = if pos == 0 {
            out.warnings.push(format!("task {t} has no positives; weight set to {}", WEIGHT_RANGE.1));
            WEIGHT_RANGE.1
        } else {
            (neg as f64 / pos as f64).clamp(WEIGHT_RANGE.0, WEIGHT_RANGE.1)
        };
        out.weights.push(w);
    }
    Ok(out)
}

/// Resolves a task strategy: `five`, `three` (/p, [], /i), `single:<tag>`,
/// or a list of tags separated by `,` or `+`. Returned in canonical order.
pub fn build_task_config(spec: &str) -> Result<Vec<Tag>> {
    let spec = spec.trim();
    match spec {
        "five" => return Ok(Tag::ALL.to_vec()),
        "three" => return Ok(vec![Tag::Prolongation, Tag::WordRepetition, Tag::Interjection]),
        _ => {}
    }
    if let Some(tag) = spec.strip_prefix("single:") {
        return Ok(vec![tag.parse()?]);
    }
    let set: BTreeSet<Tag> = spec
        .split([',', '+'])
        .map(str::parse)
        .collect::<Result<BTreeSet<Tag>>>()
        .map_err(|e| Error::Config(format!("task strategy '{spec}': {e}")))?;
    Ok(set.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub focal_alpha: Option<f64>,
    /// Overrides the model config's task subset when set.
    pub task_subset: Option<Vec<Tag>>,
    pub seed: u64,
    /// Parameters copied (by matching name and shape) before training.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            loss: LossKind::Bce,
            focal_gamma: 2.0,
            focal_alpha: Some(0.25),
            task_subset: None,
            seed: 0,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be a non-negative number", self.lr)));
        }
        Ok(())
    }

    fn loss_value(&self, batch: &LossBatch) -> Result<(f64, Vec<f64>)> {
        match self.loss {
            LossKind::Bce | LossKind::WeightedBce => bce_with_logits_grad(batch),
            LossKind::Focal | LossKind::WeightedFocal => focal_loss_grad(batch, self.focal_gamma, self.focal_alpha),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub tasks: Vec<Tag>,
    pub dev_f1: Vec<f64>,
    pub dev_f1_final: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the first strictly best dev F1-final.
    pub best: Option<usize>,
}

impl History {
    pub fn push(&mut self, record: EpochRecord) {
        let better = match self.best {
            None => true,
            Some(b) => record.dev_f1_final > self.epochs[b].dev_f1_final,
        };
        self.epochs.push(record);
        if better {
            self.best = Some(self.epochs.len() - 1);
        }
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.best.map(|b| &self.epochs[b])
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// True once `patience` epochs have passed since the best one without a
/// strict improvement.
pub fn should_stop(history: &History, patience: usize) -> bool {
    match history.best {
        Some(b) => history.epochs.len() - 1 - b >= patience,
        None => false,
    }
}

/// Optional side outputs of [`train`].
#[derive(Default)]
pub struct TrainIo<'a> {
    /// Receives one JSON line per epoch.
    pub history: Option<&'a mut dyn Write>,
    /// Rewritten whenever dev F1-final improves.
    pub checkpoint: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub checkpoint: Checkpoint,
    pub history: History,
    pub class_weights: ClassWeights,
}

/// Derives an independent stream seed from a base seed and indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and parameter gradients for one example, with the loss already
/// divided by `batch_len`.
fn example_gradients(
    model: &Model<f32>,
    cfg: &TrainConfig,
    ex: &Example,
    weights: &[f64],
    seed: u64,
    batch_len: usize,
) -> Result<(f64, Vec<Array<f32>>)> {
    let mut s = Session::new(model, true, seed);
    let logits = s.logits(&ex.features)?;
    let values = s.graph().value(logits).to_f64_vec();
    let mc = &model.config;
    let batch = LossBatch::from_labels(&mc.task_subset, mc.head_mode, &[ex.labels], values, weights)?;
    let (loss, grad) = cfg.loss_value(&batch)?;
    let scale = 1.0 / batch_len as f64;
    let node = s
        .graph_mut()
        .loss_from_entries(logits, loss * scale, grad.into_iter().map(|g| g * scale).collect())?;
    let mut grads = s.graph().backward(node)?;
    Ok((loss * scale, s.param_grads(&mut grads)))
}

fn as_abort(e: Error, epoch: usize, batch: usize) -> Error {
    match e.root() {
        Error::NonFinite(_) => Error::NumericalAbort { epoch, batch },
        _ => e,
    }
}

/// Mini-batch Adam training with per-epoch dev evaluation and early
/// stopping; returns the best dev checkpoint.
pub fn train(
    model_config: &ModelConfig,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
    io: &mut TrainIo,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Contract("train and dev sets must be non-empty".into()));
    }
    let train_speakers: BTreeSet<&str> = train_set.iter().map(|e| e.speaker_id.as_str()).collect();
    if let Some(shared) = dev_set.iter().find(|e| train_speakers.contains(e.speaker_id.as_str())) {
        return Err(Error::Contract(format!(
            "speaker {} appears in both train and dev",
            shared.speaker_id
        )));
    }
    let mut mc = model_config.clone();
    if let Some(tasks) = &cfg.task_subset {
        mc.task_subset = tasks.clone();
    }
    let mut model = Model::<f32>::new(mc, derive_seed(cfg.seed, &[0]))?;
    if let Some(path) = &cfg.init_checkpoint {
        let source = Checkpoint::load(path)?;
        let copied = model.init_from(&source.model.params);
        if io.verbose {
            eprintln!("initialised {copied}/{} parameters from {}", model.params.len(), path.display());
        }
    }
    let tasks = model.config.task_subset.clone();
    let labels: Vec<LabelVector> = train_set.iter().map(|e| e.labels).collect();
    let cw = class_weights(&labels, &tasks)?;
    if io.verbose {
        cw.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
    }
    let weights = if cfg.loss.weighted() {
        cw.weights.clone()
    } else {
        vec![1.0; tasks.len()]
    };
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model.params, adam_cfg);
    let mut history = History::default();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let chunk = rayon::current_num_threads().max(1);

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64]));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut sum: Option<Vec<Array<f32>>> = None;
            let mut batch_loss = 0.0;
            for group in batch.chunks(chunk) {
                let results = group
                    .par_iter()
                    .map(|&i| {
                        let seed = derive_seed(cfg.seed, &[2, epoch as u64, i as u64]);
                        example_gradients(&model, cfg, &train_set[i], &weights, seed, batch.len())
                            .map_err(|e| e.in_clip(&train_set[i].id))
                    })
                    .collect::<Vec<_>>();
                for r in results {
                    let (loss, grads) = r.map_err(|e| as_abort(e, epoch, b))?;
                    batch_loss += loss;
                    match &mut sum {
                        None => sum = Some(grads),
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grads) {
                                a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y);
                            }
                        }
                    }
                }
            }
            let grads = sum.expect("batches are non-empty");
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NumericalAbort { epoch, batch: b });
            }
            adam_step(&mut model.params, &grads, &mut adam)?;
            epoch_loss += batch_loss * batch.len() as f64;
        }
        let report = evaluate(&model, dev_set, &tasks).map_err(|e| as_abort(e, epoch, 0))?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            tasks: tasks.clone(),
            dev_f1: report.scores.iter().map(|s| s.f1).collect(),
            dev_f1_final: report.f1_final,
        };
        if io.verbose {
            let per_task: Vec<String> = tasks
                .iter()
                .zip(&record.dev_f1)
                .map(|(t, f)| format!("{t} {:.1}", 100.0 * f))
                .collect();
            eprintln!(
                "epoch {epoch:>3}  loss {:.4}  dev F1-final {:.2}  [{}]  ({:.1}s)",
                record.train_loss,
                100.0 * record.dev_f1_final,
                per_task.join(", "),
                started.elapsed().as_secs_f64()
            );
        }
        if let Some(w) = io.history.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("<history>", e))?;
        }
        history.push(record);
        if history.best == Some(history.epochs.len() - 1) {
            let ckpt = Checkpoint {
                model: model.clone(),
                adam: Some(adam.clone()),
                epoch,
                best_dev_f1: report.f1_final,
            };
            if let Some(path) = &io.checkpoint {
                ckpt.save(path)?;
            }
            best = Some(ckpt);
        }
        if should_stop(&history, cfg.patience) {
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        history,
        class_weights: cw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(bits: [u8; 5]) -> LabelVector {
        LabelVector::from_bits(bits)
    }

    #[test]
    fn bce_reference_values() {
        let b = LossBatch::plain(vec![1.0, 0.0, 1.0], vec![0.0; 3]).unwrap();
        assert!((bce_with_logits(&b).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let b = LossBatch::plain(vec![1.0], vec![10.0]).unwrap();
        assert!((bce_with_logits(&b).unwrap() - (-10f64).exp().ln_1p()).abs() < 1e-15);
        let b = LossBatch::plain(vec![0.0, 1.0], vec![500.0, -500.0]).unwrap();
        let l = bce_with_logits(&b).unwrap();
        assert!(l.is_finite() && (l - 500.0).abs() < 1e-9);
        assert!(matches!(LossBatch::plain(vec![0.5], vec![0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn focal_reductions() {
        let b = LossBatch::plain(vec![1.0, 0.0, 0.0, 1.0], vec![0.3, -1.2, 2.0, -0.4]).unwrap();
        let bce = bce_with_logits(&b).unwrap();
        assert!((focal_loss(&b, 0.0, None).unwrap() - bce).abs() < 1e-12);
        let sure = LossBatch::plain(vec![1.0], vec![10.0]).unwrap();
        let ratio = focal_loss(&sure, 2.0, None).unwrap() / bce_with_logits(&sure).unwrap();
        assert!((ratio - (1.0 - sigmoid(10.0)).powi(2)).abs() < 1e-18);
        assert!(focal_loss(&b, -1.0, None).is_err());
        assert!(focal_loss(&b, 2.0, Some(0.0)).is_err());
    }

    #[test]
    fn weighting_scales_positive_entries() {
        let plain = LossBatch::new(1, 2, vec![1.0, 0.0], vec![0.4, 0.7], vec![1.0, 1.0]).unwrap();
        let weighted = LossBatch::new(1, 2, vec![1.0, 0.0], vec![0.4, 0.7], vec![3.0, 3.0]).unwrap();
        let want = (3.0 * softplus(-0.4) + softplus(0.7)) / 2.0;
        assert!((bce_with_logits(&weighted).unwrap() - want).abs() < 1e-12);
        assert!(bce_with_logits(&plain).unwrap() < want);
    }

    #[test]
    fn two_logit_targets_are_one_hot() {
        let b = LossBatch::from_labels(
            &[Tag::Block, Tag::Interjection],
            HeadMode::TwoLogit,
            &[lv([0, 1, 0, 0, 0])],
            vec![0.0; 4],
            &[2.0, 5.0],
        )
        .unwrap();
        assert_eq!(b.targets, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(b.pos_weight, vec![1.0, 2.0, 1.0, 5.0]);
    }

    #[test]
    fn class_weight_rules() {
        let mut labels = vec![lv([0, 0, 0, 0, 0]); 90];
        labels.extend(vec![lv([1, 1, 0, 0, 0]); 10]);
        labels.extend(vec![lv([0, 1, 0, 0, 0]); 40]);
        let w = class_weights(&labels, &Tag::ALL).unwrap();
        assert_eq!(w.weights[0], 13.0);
        assert_eq!(w.weights[1], 90.0 / 50.0);
        assert_eq!(w.weights[2], 50.0);
        assert_eq!(w.warnings.len(), 3);
        let balanced = [lv([1, 0, 0, 0, 0]), lv([0, 0, 0, 0, 0])];
        assert_eq!(class_weights(&balanced, &[Tag::Prolongation]).unwrap().weights, vec![1.0]);
        let nine = [vec![lv([0; 5]); 90], vec![lv([1, 0, 0, 0, 0]); 10]].concat();
        assert_eq!(class_weights(&nine, &[Tag::Prolongation]).unwrap().weights, vec![9.0]);
        assert!(class_weights(&[], &Tag::ALL).is_err());
    }

    #[test]
    fn task_strategies() {
        assert_eq!(build_task_config("five").unwrap(), Tag::ALL.to_vec());
        assert_eq!(
            build_task_config("three").unwrap(),
            vec![Tag::Prolongation, Tag::WordRepetition, Tag::Interjection]
        );
        assert_eq!(build_task_config("single:/b").unwrap(), vec![Tag::Block]);
        assert_eq!(build_task_config("/i,/p").unwrap(), vec![Tag::Prolongation, Tag::Interjection]);
        assert_eq!(build_task_config("/b+[]").unwrap(), vec![Tag::Block, Tag::WordRepetition]);
        assert!(build_task_config("single:/x").is_err());
        assert!(build_task_config("four").is_err());
    }

    fn record(epoch: usize, f1: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 0.0,
            tasks: vec![],
            dev_f1: vec![],
            dev_f1_final: f1,
        }
    }

    #[test]
    fn early_stopping_rule() {
        let mut h = History::default();
        for e in 1..=20 {
            h.push(record(e, e as f64));
            assert!(!should_stop(&h, 10));
        }
        let mut h = History::default();
        for e in 0..=13 {
            h.push(record(e, if e <= 3 { e as f64 } else { 3.0 }));
            assert_eq!(should_stop(&h, 10), e == 13, "epoch {e}");
        }
        assert_eq!(h.best, Some(3));
        let mut h = History::default();
        (0..5).for_each(|e| h.push(record(e, 0.0)));
        assert!(!should_stop(&h, 10));
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
    }
}
