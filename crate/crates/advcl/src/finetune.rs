//! Finetuning protocols over a pretrained encoder: standard linear (SLF),
//! adversarial linear (ALF) and adversarial full (AFF).
//!
//! SLF and ALF freeze the encoder completely, parameters and normalization
//! statistics alike; only the classifier head trains. AFF trains every
//! parameter with the TRADES objective, generating its adversarial examples
//! by maximizing the KL term.

use crate::attack::{eval_attack, pgd, PerturbBudget};
use crate::data::{rng_for, shuffle_order, stream, Dataset};
use crate::error::{Error, Result};
use crate::eval::{eval_ra, eval_sa};
use crate::loss::{cross_entropy_tape, trades_loss_tape};
use crate::model::{BnRoute, ForwardCtx, Mode, ModelState, RobustModel};
use crate::optim::{Sgd, StepDrops};
use crate::tensor::{Tape, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Slf,
    Alf,
    Aff,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slf" => Ok(FinetuneMode::Slf),
            "alf" => Ok(FinetuneMode::Alf),
            "aff" => Ok(FinetuneMode::Aff),
            other => Err(Error::Config(format!("unknown finetune mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    /// Attack budget for ALF/AFF training; unused by SLF.
    pub budget: PerturbBudget,
    pub trades_beta: f64,
    pub seed: u64,
    /// Validation samples used for best-epoch selection (0 = whole set).
    pub val_limit: usize,
}

impl FinetuneConfig {
    pub fn standard(mode: FinetuneMode) -> Self {
        FinetuneConfig {
            mode,
            epochs: 25,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            drop_epochs: vec![15, 20],
            drop_factor: 0.1,
            budget: PerturbBudget {
                epsilon: 8.0 / 255.0,
                steps: 10,
                step_size: 2.0 / 255.0,
                init: crate::attack::AttackInit::Zero,
                norm: crate::attack::AttackNorm::LInf,
            },
            trades_beta: 6.0,
            seed: 0,
            val_limit: 0,
        }
    }

    pub fn schedule(&self) -> StepDrops {
        StepDrops {
            base_lr: self.lr,
            drop_epochs: self.drop_epochs.clone(),
            factor: self.drop_factor,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation metric used for model selection (SA for SLF, RA otherwise).
    pub val_metric: f64,
}

/// A finetuned model plus provenance needed by the frozen-encoder checks.
pub struct FinetunedModel {
    pub model: RobustModel,
    pub mode: FinetuneMode,
    pub best_epoch: usize,
    pub metrics: Vec<FinetuneEpoch>,
    pub encoder_frozen: bool,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

fn val_subset(data: &Dataset, limit: usize) -> Dataset {
    if limit == 0 || limit >= data.len() {
        data.subset(&(0..data.len()).collect::<Vec<_>>())
    } else {
        data.take(limit)
    }
}

/// Linear finetuning (SLF/ALF). The encoder is frozen bit-for-bit: SLF
/// trains the head on cached clean features; ALF recomputes features of
/// attacked inputs through the frozen encoder each step.
fn finetune_linear(
    model: &mut RobustModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<(usize, Vec<FinetuneEpoch>)> {
    let adversarial = cfg.mode == FinetuneMode::Alf;
    model.reset_classifier(train.num_classes);
    let head_ids = model.classifier_param_ids();
    let encoder_ids = model.encoder_param_ids();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let schedule = cfg.schedule();
    let val_data = val_subset(val, cfg.val_limit);

    // clean features never change under a frozen encoder; cache per sample
    let feature_cache: Option<Array2<f64>> = if adversarial {
        None
    } else {
        Some(crate::cluster::extract_raw_features(model, train, cfg.batch_size)?)
    };

    let mut best: Option<(usize, f64, ModelState)> = None;
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let order = shuffle_order(train.len(), cfg.seed, epoch);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let feats;
            let labels: Vec<usize>;
            match &feature_cache {
                Some(cache) => {
                    let mut block = Array2::<f64>::zeros((chunk.len(), cache.ncols()));
                    for (bi, &i) in chunk.iter().enumerate() {
                        block.row_mut(bi).assign(&cache.row(i));
                    }
                    feats = block;
                    labels = train.gather(chunk).labels;
                }
                None => {
                    let batch = train.gather(chunk);
                    let mut rng = rng_for(
                        cfg.seed,
                        &[stream::ATTACK, 0xF7, epoch as u64, step as u64],
                    );
                    let delta = eval_attack(
                        &*model,
                        &batch.images,
                        &batch.labels,
                        &cfg.budget,
                        &mut rng,
                    )?;
                    let adv = delta.apply(&batch.images.data);
                    // frozen encoder: eval-mode features, constant parameters
                    feats = model.extract_features(&adv)?;
                    labels = batch.labels;
                }
            }
            loss_sum += head_step(model, &mut opt, &feats, &labels, lr, &head_ids)?;
            steps += 1;
        }
        debug_assert!(encoder_ids.iter().all(|id| !head_ids.contains(id)));

        let val_metric = if adversarial {
            eval_ra(&*model, &val_data, &cfg.budget, cfg.batch_size, cfg.seed)?
        } else {
            eval_sa(&*model, &val_data, cfg.batch_size)?
        };
        metrics.push(FinetuneEpoch {
            epoch,
            lr,
            train_loss: loss_sum / steps.max(1) as f64,
            val_metric,
        });
        if best.as_ref().map_or(true, |(_, m, _)| val_metric > *m) {
            best = Some((epoch, val_metric, ModelState::capture(model, "")));
        }
    }
    let (best_epoch, _, state) = best.expect("at least one epoch");
    *model = state.restore()?;
    Ok((best_epoch, metrics))
}

/// One SGD step on the classifier head over fixed `[B, F]` features.
fn head_step(
    model: &mut RobustModel,
    opt: &mut Sgd,
    features: &Array2<f64>,
    labels: &[usize],
    lr: f64,
    head_ids: &[u32],
) -> Result<f64> {
    let tape = Tape::new();
    let ctx = ForwardCtx::new(&tape, Mode::Eval, BnRoute::Normal);
    let feats = tape.constant(features.clone().into_dyn());
    let logits = model.classifier_from_features(&ctx, feats)?;
    let loss = cross_entropy_tape(&tape, logits, labels)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite finetune loss {value}")));
    }
    let grads = tape.backward(loss);
    let mut grad_map = HashMap::new();
    for (pid, var) in ctx.bindings() {
        if let Some(g) = grads.wrt(var) {
            debug_assert!(head_ids.contains(&pid), "gradient on non-head parameter");
            grad_map.insert(pid, g.clone());
        }
    }
    opt.step(model.params_mut(), &grad_map, lr);
    Ok(value)
}

/// Adversarial full finetuning with the TRADES loss. The inner PGD
/// maximizes the KL term against frozen clean logits.
fn finetune_aff(
    model: &mut RobustModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<(usize, Vec<FinetuneEpoch>)> {
    model.reset_classifier(train.num_classes);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let schedule = cfg.schedule();
    let val_data = val_subset(val, cfg.val_limit);
    let mut best: Option<(usize, f64, ModelState)> = None;
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let order = shuffle_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.gather(chunk);
            // inner maximization of KL(p_clean || p_adv) w.r.t. delta
            let clean_logits = model.predict_logits(&batch.images.data)?;
            let log_p = log_softmax(&clean_logits);
            let mut kl_fn = |tape: &Tape, x_adv: Var| -> Result<Var> {
                let ctx = ForwardCtx::attack(tape, BnRoute::Normal);
                let adv_logits = model.forward_classifier(&ctx, x_adv)?;
                let lsq = tape.log_softmax_rows(adv_logits);
                let lsp = tape.constant(log_p.clone().into_dyn());
                let p = tape.exp(lsp);
                Ok(tape.scale(
                    tape.sum(tape.mul(p, tape.sub(lsp, lsq))),
                    1.0 / batch.labels.len() as f64,
                ))
            };
            let mut rng = rng_for(
                cfg.seed,
                &[stream::ATTACK, 0xAF, epoch as u64, step as u64],
            );
            let delta = pgd(&mut kl_fn, &batch.images.data, &cfg.budget, &mut rng)?;
            let adv = delta.apply(&batch.images.data);

            // joint update on the TRADES objective
            let tape = Tape::new();
            let ctx = ForwardCtx::new(&tape, Mode::Train, BnRoute::Normal);
            let logits_clean = model
                .forward_classifier(&ctx, tape.constant(batch.images.data.clone().into_dyn()))?;
            let logits_adv =
                model.forward_classifier(&ctx, tape.constant(adv.into_dyn()))?;
            let loss = trades_loss_tape(
                &tape,
                logits_clean,
                logits_adv,
                &batch.labels,
                cfg.trades_beta,
            )?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite AFF loss {value}")));
            }
            let grads = tape.backward(loss);
            let mut grad_map = HashMap::new();
            for (pid, var) in ctx.bindings() {
                if let Some(g) = grads.wrt(var) {
                    grad_map.insert(pid, g.clone());
                }
            }
            opt.step(model.params_mut(), &grad_map, lr);
            loss_sum += value;
            steps += 1;
        }
        let val_metric = eval_ra(&*model, &val_data, &cfg.budget, cfg.batch_size, cfg.seed)?;
        metrics.push(FinetuneEpoch {
            epoch,
            lr,
            train_loss: loss_sum / steps.max(1) as f64,
            val_metric,
        });
        if best.as_ref().map_or(true, |(_, m, _)| val_metric > *m) {
            best = Some((epoch, val_metric, ModelState::capture(model, "")));
        }
    }
    let (best_epoch, _, state) = best.expect("at least one epoch");
    *model = state.restore()?;
    Ok((best_epoch, metrics))
}

fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Runs the configured finetuning protocol on a pretrained model.
pub fn finetune(
    mut model: RobustModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetunedModel> {
    if train.channels != model.config.input_channels
        || train.image_size != model.config.input_size
    {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{}x{} inputs, dataset provides {}x{}x{}",
            model.config.input_channels,
            model.config.input_size,
            model.config.input_size,
            train.channels,
            train.image_size,
            train.image_size,
        )));
    }
    let encoder_ids = model.encoder_param_ids();
    let hash_before = model.param_hash(Some(&encoder_ids));
    let (best_epoch, metrics) = match cfg.mode {
        FinetuneMode::Slf | FinetuneMode::Alf => finetune_linear(&mut model, train, val, cfg)?,
        FinetuneMode::Aff => finetune_aff(&mut model, train, val, cfg)?,
    };
    let encoder_ids = model.encoder_param_ids();
    let hash_after = model.param_hash(Some(&encoder_ids));
    Ok(FinetunedModel {
        mode: cfg.mode,
        best_epoch,
        metrics,
        encoder_frozen: hash_before == hash_after,
        encoder_hash_before: hash_before,
        encoder_hash_after: hash_after,
        model,
    })
}

/// Loads a checkpoint from disk and finetunes it, with optional
/// resolution-adaptive resizing for cross-dataset transfer.
pub fn finetune_checkpoint(
    ckpt: &Path,
    train: &Dataset,
    val: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetunedModel> {
    let (model, _) = crate::model::load_model(ckpt)?;
    let needs_resize = train.image_size != model.config.input_size;
    if needs_resize {
        let train = resize_dataset(train, model.config.input_size)?;
        let val = resize_dataset(val, model.config.input_size)?;
        return finetune(model, &train, &val, cfg);
    }
    finetune(model, train, val, cfg)
}

/// Bilinear-resizes every image in a dataset to `size × size`.
pub fn resize_dataset(data: &Dataset, size: usize) -> Result<Dataset> {
    let mut pixels = Vec::with_capacity(data.len() * data.channels * size * size);
    let mut labels = Vec::with_capacity(data.len());
    for batch in data.batches(256) {
        for (i, &label) in batch.labels.iter().enumerate() {
            let img = batch.images.data.index_axis(ndarray::Axis(0), i);
            let resized = crate::data::resize_bilinear(&img, size, size);
            pixels.extend(resized.iter().copied());
            labels.push(label as u16);
        }
    }
    Ok(Dataset::from_f64(
        &data.name,
        data.num_classes,
        data.channels,
        size,
        pixels,
        labels,
    ))
}
