//! Siamese training: sampled pair batches, Adam under an SGDR schedule,
//! best-validation checkpoint retention.

mod adam;
mod checkpoint;
mod schedule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, EpochRecord, RngState, ALIGN_A, ALIGN_B, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MANIFEST};
pub use schedule::{cosine_lr, sgdr_cycle, sgdr_lr};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{crop_all, realize, require_two_classes, Case, PairSample, PairSampler};
use crate::error::{Error, Result};
use crate::inference::{encode_cases, roc_auc, vote, SupportIndex};
use crate::losses::{pair_loss, LossConfig};
use crate::model::{siamese_forward, AlignDistHead, UNetModel};
use crate::seeds::stream_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub sgdr_t0: usize,
    pub sgdr_tmult: usize,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    /// Neighbour count of the per-epoch validation k-NN.
    pub val_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-5,
            sgdr_t0: 10,
            sgdr_tmult: 2,
            epochs: 20,
            pairs_per_epoch: 128,
            batch_size: 8,
            val_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.sgdr_t0 < 1 || self.sgdr_tmult < 1 {
            return Err(Error::Config("sgdr_t0 and sgdr_tmult must be >= 1".into()));
        }
        if self.epochs < 1 || self.pairs_per_epoch < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs, pairs_per_epoch and batch_size must be >= 1".into()));
        }
        if self.val_k.is_multiple_of(2) {
            return Err(Error::Config(format!("val_k must be odd, got {}", self.val_k)));
        }
        Ok(())
    }
}

/// Pair loss and, when `with_grads`, gradients for every model parameter
/// followed by AlignDist `A` and `b`.
pub fn pair_objective(
    model: &UNetModel,
    head: &AlignDistHead,
    pair: &PairSample,
    loss: &LossConfig,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, with_grads);
    let bh = head.bind(&mut g, with_grads);
    let p1 = g.constant(pair.patch1.clone());
    let p2 = g.constant(pair.patch2.clone());
    let with_decoder = loss.omega != 0.0;
    let out = siamese_forward(&mut g, model, &bound, bh, p1, p2, with_decoder)?;
    let total = if with_decoder {
        let logits = [out.branches[0].logits.unwrap(), out.branches[1].logits.unwrap()];
        pair_loss(&mut g, out.d, pair.y, logits, [&pair.mask1, &pair.mask2], loss)?.total
    } else {
        g.contrastive(out.d, pair.y, loss.margin)?
    };
    let value = g.value(total).item();
    if !with_grads || !value.is_finite() {
        return Ok((value, None));
    }
    g.backward(total)?;
    let grads = bound
        .ids()
        .iter()
        .chain([&bh.a, &bh.b])
        .map(|&id| g.grad(id).expect("parameter leaf").to_vec())
        .collect();
    Ok((value, Some(grads)))
}

/// ROC-AUC of soft k-NN scores for `queries` against `support`.
pub fn knn_auc(model: &UNetModel, head: &AlignDistHead, support: &[Case], queries: &[Case], k: usize) -> Result<f64> {
    let index = SupportIndex::from_entries(encode_cases(model, support)?, head.clone(), k)?;
    let codes = encode_cases(model, queries)?;
    let mut scores = Vec::with_capacity(codes.len());
    for q in &codes {
        scores.push(vote(&index.knn_query(&q.code, k)?).1);
    }
    let labels: Vec<_> = codes.iter().map(|q| q.label).collect();
    roc_auc(&scores, &labels)
}

struct Trainee<'a> {
    config: &'a RunConfig,
    model: UNetModel,
    head: AlignDistHead,
    rng_seed: u64,
}

impl Trainee<'_> {
    fn snapshot(&self, epoch: usize, history: &[EpochRecord], rng: &ChaCha8Rng) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            head: self.head.clone(),
            config: self.config.clone(),
            epoch,
            history: history.to_vec(),
            rng: RngState {
                seed: self.rng_seed,
                word_pos: rng.get_word_pos(),
            },
        }
    }

    fn apply(&mut self, grads: &[Vec<f64>], adam: &mut AdamState, lr: f64) -> Result<()> {
        let Trainee { model, head, .. } = self;
        let mut names: Vec<&str> = Vec::new();
        let mut weights: Vec<&mut [f64]> = Vec::new();
        for (name, t) in model.params_mut() {
            names.push(name);
            weights.push(&mut t.data);
        }
        names.extend([ALIGN_A, ALIGN_B]);
        weights.push(&mut head.a.data);
        weights.push(&mut head.b.data);
        let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(&mut weights, &grads, &names, adam, lr)
    }
}

/// Trains from scratch and returns the best-validation checkpoint (earliest
/// epoch on ties) carrying the full epoch history. `on_epoch` sees each
/// record as it is produced.
pub fn train(
    config: &RunConfig,
    train_cases: &[Case],
    val_cases: &[Case],
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Checkpoint> {
    config.validate()?;
    require_two_classes(train_cases, "training split")?;
    require_two_classes(val_cases, "validation split")?;
    let tc = &config.train;
    if tc.val_k > train_cases.len() {
        return Err(Error::Config(format!(
            "val_k = {} exceeds the {} training cases used as validation support",
            tc.val_k,
            train_cases.len()
        )));
    }
    let items = crop_all(train_cases, config.unet.patch_shape)?;
    let sampler = PairSampler::new(&items)?;

    let rng_seed = stream_seed(config.seed, "train");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut state = Trainee {
        config,
        model: UNetModel::build(config.unet.clone(), stream_seed(config.seed, "init"))?,
        head: AlignDistHead::identity(config.unet.latent_dim),
        rng_seed,
    };
    let sizes: Vec<usize> = state
        .model
        .params()
        .iter()
        .map(|(_, t)| t.numel())
        .chain([config.unet.latent_dim; 2])
        .collect();
    let mut adam = AdamState::new(&sizes);

    let mut history: Vec<EpochRecord> = Vec::with_capacity(tc.epochs);
    let mut best = state.snapshot(0, &history, &rng);
    let mut best_auc = f64::NEG_INFINITY;
    let batches = tc.pairs_per_epoch.div_ceil(tc.batch_size);

    for epoch in 0..tc.epochs {
        let epoch_lr = sgdr_lr(epoch as f64, tc);
        let mut loss_sum = 0.0;
        let mut pairs_done = 0usize;
        for b in 0..batches {
            let lr = sgdr_lr(epoch as f64 + b as f64 / batches as f64, tc);
            let n = tc.batch_size.min(tc.pairs_per_epoch - b * tc.batch_size);
            let plans: Vec<_> = (0..n).map(|_| sampler.plan(&mut rng)).collect();
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            let mut batch_loss = 0.0;
            for plan in &plans {
                let pair = realize(&items, plan, &config.augment)?;
                let (loss, grads) = pair_objective(&state.model, &state.head, &pair, &config.loss, true)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        reason: format!("pair loss is {loss} ({} vs {})", pair.ids[0], pair.ids[1]),
                        last_good: Box::new(best),
                    });
                }
                batch_loss += loss;
                for (a, g) in acc.iter_mut().zip(grads.unwrap()) {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
            let inv = 1.0 / n as f64;
            acc.iter_mut().flatten().for_each(|v| *v *= inv);
            if let Err(e) = state.apply(&acc, &mut adam, lr) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    reason: e.to_string(),
                    last_good: Box::new(best),
                });
            }
            loss_sum += batch_loss;
            pairs_done += n;
        }
        let val_auc = knn_auc(&state.model, &state.head, train_cases, val_cases, tc.val_k)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: epoch_lr,
            train_loss: loss_sum / pairs_done as f64,
            val_auc,
        };
        log::info!(
            "epoch {} lr {:.3e} train_loss {:.5} val_auc {:.4}",
            record.epoch,
            record.lr,
            record.train_loss,
            record.val_auc
        );
        history.push(record.clone());
        on_epoch(&record)?;
        if val_auc > best_auc {
            best_auc = val_auc;
            best = state.snapshot(epoch + 1, &history, &rng);
        }
    }
    best.history = history;
    Ok(best)
}

/// One plain gradient step `w -= lr·∇` on every trainable tensor; used to
/// probe descent directions.
pub fn sgd_step(model: &mut UNetModel, head: &mut AlignDistHead, grads: &[Vec<f64>], lr: f64) {
    let mut tensors: Vec<&mut Tensor> = model.params_mut().map(|(_, t)| t).collect();
    tensors.push(&mut head.a);
    tensors.push(&mut head.b);
    for (t, g) in tensors.into_iter().zip(grads) {
        t.data.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
    }
}
