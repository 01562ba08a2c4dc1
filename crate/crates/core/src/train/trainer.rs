use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::data::{AugmentParams, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{ActivationKind, Architecture, Model};
use crate::quant::QuantSpec;
use crate::rng::{self, purpose};
use crate::saliency::{adaptive_threshold, input_gradient, mask_adaptive, record_objective};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::checkpoint::Checkpoint;
use crate::train::loss::record_hybrid_loss;
use crate::train::metrics::{evaluate_metrics, Metrics};
use crate::train::optim::{adam_step, update_alpha, AdamState};
use crate::train::{Mode, TrainConfig};

/// One row of the per-epoch CSV log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_sensitivity: f64,
    pub val_specificity: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,val_accuracy,val_sensitivity,val_specificity";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9}",
            self.epoch,
            self.train_loss,
            self.val_accuracy,
            self.val_sensitivity,
            self.val_specificity
        )
    }
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for row in log {
        let _ = writeln!(s, "{}", row.csv_row());
    }
    s
}

pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    fs::write(path, log_to_csv(log)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: Model,
    /// 0 when no epoch was run.
    pub best_epoch: usize,
    pub val_metrics: Metrics,
    /// `None` when the dataset has no test split.
    pub test_metrics: Option<Metrics>,
    pub log: Vec<EpochLog>,
    /// Loss of every batch in order.
    pub loss_trace: Vec<f32>,
}

impl TrainOutcome {
    /// Checkpoint of the selected model with config, metrics and class names.
    pub fn checkpoint(&self, config: &TrainConfig, class_names: &[String]) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone())
            .with_config(config)
            .with_metrics("val", &self.val_metrics)
            .with_class_names(class_names);
        if let Some(m) = &self.test_metrics {
            ck = ck.with_metrics("test", m);
        }
        ck.metadata
            .insert("best_epoch".into(), self.best_epoch.to_string());
        ck
    }
}

/// Fresh model for `config`: ReLU for the float baseline, PACT otherwise,
/// with k-bit fake quantization in `sgt_pact` mode.
pub fn initial_model(config: &TrainConfig, data: &Dataset) -> Result<Model> {
    let arch = config
        .arch
        .clone()
        .unwrap_or_else(|| Architecture::default_cnn(data.num_classes()));
    let activation = match config.mode {
        Mode::FloatBaseline => ActivationKind::Relu,
        _ => ActivationKind::Pact,
    };
    let quant =
        (config.mode == Mode::SgtPact && config.fake_quant).then(|| QuantSpec::full(config.bits));
    Ok(Model::new(
        arch,
        data.input,
        data.num_classes(),
        activation,
        config.alpha_init,
        config.seed,
    )?
    .with_quant(quant))
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with_progress(config, data, |_| {})
}

/// Runs training, calling `on_epoch` after each epoch's validation pass.
pub fn train_with_progress(
    config: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if data.indices(Split::Val).is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }

    let mut model = initial_model(config, data)?;
    let mut adam = AdamState::new(model.params());
    let mut best = (
        model.clone(),
        0usize,
        evaluate_metrics(&model, data, Split::Val)?,
    );
    let mut log = Vec::with_capacity(config.epochs);
    let mut loss_trace = Vec::new();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(
            config.seed,
            &[purpose::SHUFFLE, epoch as u64],
        ));
        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = batch(data, chunk, config, epoch)?;
            let loss = step(&mut model, &mut adam, config, x, &labels)?;
            if !loss.is_finite() || !model.params().iter().all(|p| p.is_finite()) {
                return Err(Error::Divergence { epoch, batch: b });
            }
            loss_trace.push(loss);
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let val = evaluate_metrics(&model, data, Split::Val)?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_accuracy: val.accuracy,
            val_sensitivity: val.macro_sensitivity,
            val_specificity: val.macro_specificity,
        };
        info!(
            "epoch {epoch}: loss {:.4}, val acc {:.4} ({:.1}s)",
            row.train_loss,
            row.val_accuracy,
            start.elapsed().as_secs_f64()
        );
        debug!("alphas after epoch {epoch}: {:?}", model.alphas());
        on_epoch(&row);
        log.push(row);
        // Ties go to the later, longer-trained epoch.
        if best.1 == 0 || val.accuracy >= best.2.accuracy {
            best = (model.clone(), epoch, val);
        }
    }

    let (model, best_epoch, val_metrics) = best;
    let test_metrics = if data.indices(Split::Test).is_empty() {
        None
    } else {
        Some(evaluate_metrics(&model, data, Split::Test)?)
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        val_metrics,
        test_metrics,
        log,
        loss_trace,
    })
}

/// Stacks (and optionally augments) the samples at `idx`.
fn batch(
    data: &Dataset,
    idx: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if !config.augment {
        return data.batch(idx);
    }
    let images: Vec<Tensor> = idx
        .iter()
        .map(|&i| {
            let img = &data.samples[i].image;
            let mut r = rng::stream(config.seed, &[purpose::AUGMENT, epoch as u64, i as u64]);
            AugmentParams::sample(&mut r, img.shape()[0]).apply(img)
        })
        .collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    Ok((
        Tensor::stack(&refs)?,
        idx.iter().map(|&i| data.samples[i].label).collect(),
    ))
}

/// One optimization step; returns the batch loss.
fn step(
    model: &mut Model,
    adam: &mut AdamState,
    config: &TrainConfig,
    x: Tensor,
    labels: &[usize],
) -> Result<f32> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let loss = if config.mode.is_saliency_guided() {
        let xv = tape.leaf(x.clone(), true)?;
        let logits = model.forward(&mut tape, &bound, xv)?;
        let objective = record_objective(&mut tape, logits, labels, config.saliency_target())?;
        let s = input_gradient(&tape, objective, xv)?;
        let thresholds = adaptive_threshold(&s, config.mask_ratio)?;
        let masked = tape.constant(mask_adaptive(&x, &s, &thresholds)?)?;
        let masked_logits = model.forward(&mut tape, &bound, masked)?;
        record_hybrid_loss(
            &mut tape,
            logits,
            masked_logits,
            labels,
            &s,
            config.lambda1,
            config.lambda2,
        )?
    } else {
        let xv = tape.constant(x)?;
        let logits = model.forward(&mut tape, &bound, xv)?;
        tape.cross_entropy(logits, labels)?
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }

    let params = bound.params();
    let alphas = if model.activation() == ActivationKind::Pact {
        bound.alphas()
    } else {
        Vec::new()
    };
    let targets: Vec<_> = params.iter().chain(&alphas).copied().collect();
    let mut grads = tape.backward_wrt(loss, &targets)?;
    let param_grads: Vec<Tensor> = params
        .iter()
        .map(|&p| {
            grads
                .take(p)
                .unwrap_or_else(|| Tensor::zeros(tape.value(p).shape().to_vec()))
        })
        .collect();
    let alpha_grads: Vec<f32> = alphas
        .iter()
        .map(|&a| grads.get(a).map_or(0.0, |g| g.data()[0]))
        .collect();
    drop(tape);

    adam_step(&mut model.params_mut(), &param_grads, adam, config.lr)?;
    for (a, g) in model.alphas_mut().into_iter().zip(alpha_grads) {
        *a = update_alpha(*a, g, config.alpha_lr, config.alpha_reg);
    }
    Ok(value)
}
