//! Adam training with early stopping on validation NDCG@10.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batch, Batch, Example, SequenceDataset, Split, Width};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RankingReport};
use crate::gradcheck::finite_diff_report;
use crate::model::{Bound, Model, ModelConfig, ParamStore, EMBEDDING};
use crate::ops::DropoutRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip: Option<f64>,
    pub eval_batch: usize,
    pub mask_seen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 100,
            patience: 10,
            seed: 42,
            clip: None,
            eval_batch: 256,
            mask_seen: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. A non-finite gradient aborts before anything changes.
    /// The embedding pad row is reset to zero afterwards.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("one gradient per parameter expected"));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("{name}: gradient shape {:?}", g.shape())));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at {name}[{i}], step {}",
                    g.data()[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        if let Some(e) = params.get_mut(EMBEDDING) {
            let d = e.dim(1);
            e.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }
}

fn clip_grads(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub hr10: f64,
    pub ndcg10: f64,
    pub mrr10: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// `epoch,loss,hr10,ndcg10,mrr10` with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,hr10,ndcg10,mrr10\n");
        for r in &self.records {
            writeln!(s, "{},{},{},{},{}", r.epoch, r.loss, r.hr10, r.ndcg10, r.mrr10).unwrap();
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation NDCG@10.
    pub model: Model,
    pub history: History,
    pub best_epoch: usize,
    /// Evaluation-mode training loss before the first update.
    pub initial_loss: f64,
    /// Set when training stopped on a non-finite loss or gradient; `model`
    /// then holds the last good best checkpoint.
    pub diverged: Option<String>,
}

fn mean_loss(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64> {
    let refs: Vec<&Example> = examples.iter().collect();
    let mut total = 0.0;
    for c in refs.chunks(batch_size) {
        let b = make_batch(c, model.config.max_len, Width::Trimmed)?;
        total += model.eval_loss(&b)? * c.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Trains on prefix examples of `ds`, validating after every epoch.
pub fn train(model: Model, ds: &SequenceDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_on(model, &ds.train_examples(), &ds.eval_examples(Split::Valid), cfg)
}

pub fn train_on(mut model: Model, train: &[Example], valid: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut adam = Adam::from_config(&model.params, cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_loss = mean_loss(&model, train, cfg.eval_batch)?;
    let mut history = History::default();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut diverged = None;

    'epochs: for epoch in 1..=cfg.max_epochs.max(1) {
        order.shuffle(&mut shuffle_rng);
        let mut drop_rng = DropoutRng::new(cfg.seed, epoch as u64);
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let batch: Batch = make_batch(&refs, model.config.max_len, Width::Trimmed)?;
            let (loss, mut grads) = model.loss_and_grads(&batch, true, &mut drop_rng)?;
            if !loss.is_finite() {
                diverged = Some(format!("loss became {loss} in epoch {epoch}"));
                break 'epochs;
            }
            if let Some(c) = cfg.clip {
                clip_grads(&mut grads, c);
            }
            if let Err(e) = adam.update(&mut model.params, &grads) {
                diverged = Some(e.to_string());
                break 'epochs;
            }
            sum += loss * batch.size() as f64;
            count += batch.size();
        }
        let report = evaluate(&model, valid, cfg.eval_batch, cfg.mask_seen)?;
        let m = report.at(10).expect("K=10 is always reported");
        history.records.push(EpochRecord {
            epoch,
            loss: sum / count as f64,
            hr10: m.hr,
            ndcg10: m.ndcg,
            mrr10: m.mrr,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} valid HR@10 {:.4} NDCG@10 {:.4}",
            sum / count as f64,
            m.hr,
            m.ndcg
        );
        match &best {
            Some((score, _, _)) if m.ndcg <= *score => {}
            _ => best = Some((m.ndcg, epoch, model.params.clone())),
        }
        let since_best = epoch - best.as_ref().map_or(0, |b| b.1);
        if since_best >= cfg.patience {
            break;
        }
    }
    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, model.params.clone()),
    };
    Ok(TrainOutcome {
        model: Model::from_parts(model.config.clone(), params),
        history,
        best_epoch,
        initial_loss,
        diverged,
    })
}

/// Worst finite-difference error per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub groups: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|(_, e)| *e < self.tolerance)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.groups
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, e)| (n.as_str(), *e))
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

/// Finite-difference check of the full loss with respect to every
/// parameter, dropout disabled.
pub fn check_model_gradients(model: &Model, batch: &Batch) -> Result<GradReport> {
    let names = model.params.names();
    if names.is_empty() {
        return Ok(GradReport {
            groups: Vec::new(),
            tolerance: GRAD_TOLERANCE,
        });
    }
    let errs = finite_diff_report(
        |tape, vars| {
            let p = Bound::from_vars(&model.params, vars.to_vec())?;
            model.loss(tape, &p, batch, false, &mut DropoutRng::new(0, 0))
        },
        &model.params.values(),
        GRAD_STEP,
    )?;
    Ok(GradReport {
        groups: names.into_iter().zip(errs).collect(),
        tolerance: GRAD_TOLERANCE,
    })
}

/// The tiny configuration used for gradient verification.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab: 21,
        d_model: 8,
        expand: 2,
        state_size: 4,
        heads: 2,
        conv_kernel: 4,
        layers: 2,
        max_len: 8,
        dropout: 0.0,
        chunk: 3,
        ..ModelConfig::default()
    }
}

/// Random left-padded batch for `cfg`: `n` sequences of varying length
/// with irregular timestamps.
pub fn toy_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Batch> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<Example> = (0..n)
        .map(|i| {
            let len = if i == 0 { cfg.max_len } else { rng.random_range(1..=cfg.max_len) };
            let mut t = 1_000_000i64;
            let timestamps = (0..len)
                .map(|_| {
                    t += rng.random_range(0..5_000);
                    t
                })
                .collect();
            Example {
                items: (0..len).map(|_| rng.random_range(1..cfg.vocab)).collect(),
                timestamps,
                target: rng.random_range(1..cfg.vocab),
            }
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    make_batch(&refs, cfg.max_len, Width::Full)
}

/// Gradient check of a freshly initialized model on a toy batch.
pub fn verify_gradients(cfg: &ModelConfig, seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..cfg.clone()
    };
    let model = Model::new(cfg.clone(), seed)?;
    check_model_gradients(&model, &toy_batch(&cfg, 3, seed)?)
}

/// Validation report of a trained model (convenience for callers).
pub fn validation_report(model: &Model, ds: &SequenceDataset, cfg: &TrainConfig) -> Result<RankingReport> {
    evaluate(model, &ds.eval_examples(Split::Valid), cfg.eval_batch, cfg.mask_seen)
}
