//! Fine-tuning and masked-language-model pretraining loops.

use crate::datasets::{shuffled_by_class, stratified_allocation, LabeledDataset};
use crate::encoder::ForwardMode;
use crate::error::{Error, Result};
use crate::heads::{self, MlmHead};
use crate::metrics;
use crate::model::Model;
use crate::optim::{lr_schedule_with, Adam};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{TokenSequence, Vocabulary, MASK, NUM_SPECIALS};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Minimum decrease in validation loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub early_stop_patience: usize,
    /// Defaults to `max(1, ⌈total_steps / 30⌉)`.
    pub eval_every_steps: Option<usize>,
    pub split_ratio: f64,
    pub seed: u64,
    /// Decay linearly to zero after warmup instead of holding the rate.
    pub linear_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 3,
            batch_size: 8,
            warmup_fraction: 0.1,
            early_stop_patience: 10,
            eval_every_steps: None,
            split_ratio: 0.8,
            seed: 0,
            linear_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".to_string());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} outside (0, 1)", self.split_ratio));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".to_string());
        }
        if self.eval_every_steps == Some(0) {
            return bad("eval_every_steps must be positive".to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        Ok(())
    }
}

/// One tokenized, labeled sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: TokenSequence,
    pub label: usize,
}

pub fn encode_examples(dataset: &LabeledDataset, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
    dataset
        .instances
        .iter()
        .map(|inst| {
            Ok(Example {
                tokens: vocab.encode(&inst.text, max_len)?,
                label: inst.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundEval {
    pub loss: f64,
    pub macro_f1: f64,
}

/// Scores the model on the validation split at every evaluation round.
pub trait Evaluator {
    fn evaluate(&mut self, model: &Model, validation: &[Example]) -> Result<RoundEval>;
}

/// Mean cross-entropy and macro F1 on the validation examples.
#[derive(Debug, Clone, Copy)]
pub struct ValidationEvaluator {
    pub batch_size: usize,
}

impl Default for ValidationEvaluator {
    fn default() -> Self {
        Self { batch_size: 64 }
    }
}

impl Evaluator for ValidationEvaluator {
    fn evaluate(&mut self, model: &Model, validation: &[Example]) -> Result<RoundEval> {
        let seqs: Vec<TokenSequence> = validation.iter().map(|e| e.tokens.clone()).collect();
        let gold: Vec<usize> = validation.iter().map(|e| e.label).collect();
        let (loss, preds) = model.evaluate_loss(&seqs, &gold, self.batch_size)?;
        let classes = model.num_classes().unwrap_or(0);
        let cm = metrics::confusion_matrix(&gold, &preds, classes)?;
        let report = metrics::compute_report(&cm, Default::default())?;
        Ok(RoundEval {
            loss,
            macro_f1: report.macro_f1,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRound {
    pub round: usize,
    /// Optimizer updates completed before this evaluation.
    pub step: usize,
    /// Mean training loss since the previous round; `None` for the baseline.
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub eval_macro_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EpochsExhausted,
    EarlyStopped,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EpochsExhausted => "epochs-exhausted",
            StopReason::EarlyStopped => "early-stopped",
        }
    }
}

/// Evaluation rounds of one run. Round 0 scores the initial weights; with
/// an empty validation split there are no rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub rounds: Vec<TrainRound>,
    pub stop_reason: StopReason,
    pub total_steps: usize,
    pub steps_taken: usize,
    /// Round whose weights were returned.
    pub best_round: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,step,train_loss,eval_loss,eval_macro_f1\n");
        for r in &self.rounds {
            let tl = r.train_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.round, r.step, tl, r.eval_loss, r.eval_macro_f1);
        }
        out
    }

    /// Rounds after the baseline.
    pub fn training_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| r.train_loss.is_some()).count()
    }
}

/// Stratified split into `(train, validation)`; validation gets
/// `round((1 - ratio) · N)` instances, at least one when `N ≥ 2`.
pub fn split_dataset(dataset: &LabeledDataset, ratio: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
    let n = dataset.len();
    if n < 2 {
        return (
            dataset.with_instances(dataset.instances.clone(), format!("{} (train)", dataset.provenance)),
            dataset.with_instances(Vec::new(), format!("{} (validation)", dataset.provenance)),
        );
    }
    let n_val = (((1.0 - ratio) * n as f64).round() as usize).clamp(1, n - 1);
    let counts = dataset.class_counts();
    let stratify = counts.iter().all(|&c| c == 0 || c >= 2);
    let mut val_idx: Vec<usize> = if stratify {
        let groups = shuffled_by_class(dataset, seed, 21);
        let alloc = stratified_allocation(&counts, n_val);
        groups
            .iter()
            .zip(&alloc)
            .flat_map(|(g, &k)| g[..k].iter().copied())
            .collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng::seeded(seed, 22));
        all.truncate(n_val);
        all
    };
    val_idx.sort_unstable();
    let mut is_val = vec![false; n];
    for &i in &val_idx {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (inst, &v) in dataset.instances.iter().zip(&is_val) {
        if v {
            val.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    (
        dataset.with_instances(train, format!("{} (train)", dataset.provenance)),
        dataset.with_instances(val, format!("{} (validation)", dataset.provenance)),
    )
}

/// Splits, encodes and trains with the standard validation evaluator.
pub fn train_classifier(
    model: Model,
    dataset: &LabeledDataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    train_classifier_with(model, dataset, vocab, config, &mut ValidationEvaluator::default())
}

pub fn train_classifier_with(
    model: Model,
    dataset: &LabeledDataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    evaluator: &mut dyn Evaluator,
) -> Result<(Model, TrainHistory)> {
    let classes = model
        .num_classes()
        .ok_or_else(|| Error::Training("model has no classifier head".to_string()))?;
    if dataset.schema.len() != classes {
        return Err(Error::Training(format!(
            "dataset labels {:?} do not fit a {classes}-class head",
            dataset.schema.labels
        )));
    }
    let (train, val) = split_dataset(dataset, config.split_ratio, config.seed);
    let max_len = model.config.max_len;
    let train = encode_examples(&train, vocab, max_len)?;
    let val = encode_examples(&val, vocab, max_len)?;
    train_on_examples(model, &train, &val, config, evaluator)
}

/// The optimization loop on pre-split examples.
pub fn train_on_examples(
    mut model: Model,
    train: &[Example],
    validation: &[Example],
    config: &TrainConfig,
    evaluator: &mut dyn Evaluator,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    let classes = model
        .num_classes()
        .ok_or_else(|| Error::Training("model has no classifier head".to_string()))?;
    if train.is_empty() {
        return Err(Error::Training(
            "empty training split: evaluate the initialized model directly for the zero-instance setting".to_string(),
        ));
    }
    if let Some(e) = train.iter().chain(validation).find(|e| e.label >= classes) {
        return Err(Error::Training(format!(
            "label index {} outside the {classes}-class head",
            e.label
        )));
    }
    // The MLM head is not part of classifier training.
    let mlm = model.mlm.take();

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let eval_every = config
        .eval_every_steps
        .unwrap_or_else(|| total_steps.div_ceil(30).max(1));
    let use_validation = !validation.is_empty();

    let mut rounds = Vec::new();
    let mut best: Option<(f64, Model, usize)> = None;
    if use_validation {
        let ev = evaluator.evaluate(&model, validation)?;
        rounds.push(TrainRound {
            round: 0,
            step: 0,
            train_loss: None,
            eval_loss: ev.loss,
            eval_macro_f1: ev.macro_f1,
        });
        best = Some((ev.loss, model.clone(), 0));
    }

    let mut adam = Adam::default();
    let mut step = 0usize;
    let mut bad_rounds = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stop = StopReason::EpochsExhausted;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::seeded(config.seed, 100 + epoch as u64));
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let seqs: Vec<&TokenSequence> = batch.iter().map(|&i| &train[i].tokens).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let logits = model.classifier_logits(&mut tape, &bound, &seqs, ForwardMode::train(config.seed, step as u64))?;
            let loss = tape.cross_entropy(logits, &labels)?;
            loss_sum += tape.value(loss).data()[0];
            loss_count += 1;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(&tape, v)).collect();
            let lr = lr_schedule_with(step, total_steps, config.learning_rate, config.warmup_fraction, config.linear_decay)?;
            let mut params: Vec<&mut Tensor> = model.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut params, &grads, lr)?;
            if !model.is_finite() {
                return Err(Error::Training(format!("weights became non-finite at step {step}")));
            }

            if use_validation && (step % eval_every == 0 || step == total_steps) {
                let ev = evaluator.evaluate(&model, validation)?;
                let round = rounds.len();
                rounds.push(TrainRound {
                    round,
                    step,
                    train_loss: Some(loss_sum / loss_count as f64),
                    eval_loss: ev.loss,
                    eval_macro_f1: ev.macro_f1,
                });
                loss_sum = 0.0;
                loss_count = 0;
                let (best_loss, _, _) = best.as_ref().expect("baseline recorded");
                if ev.loss < best_loss - MIN_IMPROVEMENT {
                    best = Some((ev.loss, model.clone(), round));
                    bad_rounds = 0;
                } else {
                    bad_rounds += 1;
                    if bad_rounds >= config.early_stop_patience {
                        stop = StopReason::EarlyStopped;
                        break 'epochs;
                    }
                }
            }
        }
    }

    let best_round = match best {
        Some((_, best_model, round)) => {
            model = best_model;
            Some(round)
        }
        None => None,
    };
    model.mlm = mlm;
    Ok((
        model,
        TrainHistory {
            rounds,
            stop_reason: stop,
            total_steps,
            steps_taken: step,
            best_round,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 16,
            warmup_fraction: 0.1,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".to_string()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!("mask_prob {} outside (0, 1)", self.mask_prob)));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        Ok(())
    }
}

/// How a selected position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// A sequence prepared for the masked-token objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: TokenSequence,
    /// `(position, original id, corruption)` for every selected position.
    pub targets: Vec<(usize, usize, Corruption)>,
}

/// Selects each real non-special position with probability `mask_prob`; of
/// those, 80% become `[MASK]`, 10% a random non-special token, 10% stay.
/// Draws are keyed by `key` plus the position, so they are reproducible.
pub fn mask_tokens(seq: &TokenSequence, vocab_size: usize, mask_prob: f64, key: [u64; 3]) -> MaskedSequence {
    let mut input = seq.clone();
    let mut targets = Vec::new();
    for p in 0..seq.ids.len() {
        let id = seq.ids[p];
        if seq.mask[p] == 0 || id < NUM_SPECIALS {
            continue;
        }
        let k = [key[0], key[1], key[2], p as u64];
        if rng::uniform(&[k[0], k[1], k[2], k[3], 0]) >= mask_prob {
            continue;
        }
        let action = rng::uniform(&[k[0], k[1], k[2], k[3], 1]);
        let how = if action < 0.8 {
            input.ids[p] = MASK;
            Corruption::Mask
        } else if action < 0.9 && vocab_size > NUM_SPECIALS {
            let span = (vocab_size - NUM_SPECIALS) as f64;
            let r = NUM_SPECIALS + (rng::uniform(&[k[0], k[1], k[2], k[3], 2]) * span) as usize;
            input.ids[p] = r.min(vocab_size - 1);
            Corruption::Random
        } else {
            Corruption::Keep
        };
        targets.push((p, id, how));
    }
    MaskedSequence { input, targets }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmHistory {
    /// Mean masked-token loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Masked-token pretraining of the encoder. Adds an MLM head when the model
/// has none; any classifier head is left untouched.
pub fn pretrain_mlm<S: AsRef<str>>(
    mut model: Model,
    corpus: &[S],
    vocab: &Vocabulary,
    config: &MlmConfig,
) -> Result<(Model, MlmHistory)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Training("empty pretraining corpus".to_string()));
    }
    let vocab_size = model.config.vocab_size;
    if vocab.len() > vocab_size {
        return Err(Error::Training(format!(
            "vocabulary has {} tokens but the model embeds only {vocab_size}",
            vocab.len()
        )));
    }
    let seqs = corpus
        .iter()
        .map(|t| vocab.encode(t.as_ref(), model.config.max_len))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let classifier = model.classifier.take();
    if model.mlm.is_none() {
        model.mlm = Some(MlmHead::init(vocab_size, model.config.hidden_size, config.seed));
    }

    let steps_per_epoch = seqs.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut adam = Adam::default();
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::seeded(config.seed, 300 + epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let masked: Vec<MaskedSequence> = batch
                .iter()
                .map(|&i| mask_tokens(&seqs[i], vocab_size, config.mask_prob, [config.seed, epoch as u64, i as u64]))
                .collect();
            if masked.iter().all(|m| m.targets.is_empty()) {
                continue;
            }
            let inputs: Vec<&TokenSequence> = masked.iter().map(|m| &m.input).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let out = crate::encoder::forward_batch(
                &mut tape,
                &bound.encoder,
                &model.config,
                &inputs,
                ForwardMode::train(config.seed, step as u64),
                true,
            )?;
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for (b, m) in masked.iter().enumerate() {
                for &(p, id, _) in &m.targets {
                    rows.push(b * out.seq_len + p);
                    targets.push(id);
                }
            }
            let (w, bias) = bound.mlm.expect("mlm head bound");
            let logits = heads::mlm_logits_on_tape(&mut tape, w, bias, out.hidden, &rows)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            sum += tape.value(loss).data()[0];
            count += 1;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(&tape, v)).collect();
            let lr = lr_schedule_with(step, total_steps, config.learning_rate, config.warmup_fraction, false)?;
            let mut params: Vec<&mut Tensor> = model.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut params, &grads, lr)?;
            if !model.is_finite() {
                return Err(Error::Training(format!("weights became non-finite at pretraining step {step}")));
            }
        }
        epoch_losses.push(if count == 0 { 0.0 } else { sum / count as f64 });
    }
    model.classifier = classifier;
    Ok((model, MlmHistory { epoch_losses, steps: step }))
}

/// Mean masked-token loss of the model on `corpus` (eval mode, fixed masks).
pub fn mlm_loss<S: AsRef<str>>(model: &Model, corpus: &[S], vocab: &Vocabulary, mask_prob: f64, seed: u64) -> Result<f64> {
    let head = model
        .mlm
        .as_ref()
        .ok_or_else(|| Error::Training("model has no MLM head".to_string()))?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, text) in corpus.iter().enumerate() {
        let seq = vocab.encode(text.as_ref(), model.config.max_len)?;
        let m = mask_tokens(&seq, model.config.vocab_size, mask_prob, [seed, u64::MAX, i as u64]);
        if m.targets.is_empty() {
            continue;
        }
        let hidden = crate::encoder::encode_sequence(&model.encoder, &model.config, &m.input, ForwardMode::eval())?;
        let positions: Vec<usize> = m.targets.iter().map(|t| t.0).collect();
        let logits = heads::mlm_logits(head, &hidden, &positions)?;
        let mut tape = Tape::new();
        let z = tape.leaf(logits);
        let targets: Vec<usize> = m.targets.iter().map(|t| t.1).collect();
        let ce = tape.cross_entropy(z, &targets)?;
        sum += tape.value(ce).data()[0] * targets.len() as f64;
        count += targets.len();
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Instance, LabelSchema};
    use crate::encoder::EncoderConfig;

    fn dataset(labels: &[usize]) -> LabeledDataset {
        let schema = LabelSchema::new("t", vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let instances = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Instance {
                id: format!("i{i}"),
                text: format!("t{i}"),
                label: l,
            })
            .collect();
        LabeledDataset::new(instances, schema, "x").unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = dataset(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let (tr, va) = split_dataset(&ds, 0.8, 3);
        assert_eq!((tr.len(), va.len()), (8, 2));
        assert_eq!(va.class_counts(), vec![1, 1, 0]);
        let (tr2, va2) = split_dataset(&ds, 0.8, 3);
        assert_eq!((tr.instances.clone(), va.instances.clone()), (tr2.instances, va2.instances));
        let mut ids: Vec<String> = tr.instances.iter().chain(&va.instances).map(|i| i.id.clone()).collect();
        ids.sort();
        let mut want: Vec<String> = ds.instances.iter().map(|i| i.id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
    }

    #[test]
    fn split_tiny_datasets() {
        let (tr, va) = split_dataset(&dataset(&[1]), 0.8, 0);
        assert_eq!((tr.len(), va.len()), (1, 0));
        let (tr, va) = split_dataset(&dataset(&[1, 0]), 0.8, 0);
        assert_eq!((tr.len(), va.len()), (1, 1));
    }

    #[test]
    fn split_stratification_oracle() {
        use rand::Rng;
        let mut r = rng::seeded(9, 9);
        for trial in 0..200 {
            let n = r.gen_range(10..120);
            let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
            let ds = dataset(&labels);
            let counts = ds.class_counts();
            if counts.iter().any(|&c| c == 1) {
                continue;
            }
            let (tr, va) = split_dataset(&ds, 0.8, trial);
            assert_eq!(tr.len() + va.len(), n);
            for (c, &total) in counts.iter().enumerate() {
                let ideal = total as f64 * va.len() as f64 / n as f64;
                assert!((va.class_counts()[c] as f64 - ideal).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn masking_fractions() {
        let seq = TokenSequence {
            ids: (0..100).map(|i| 5 + i % 40).collect(),
            mask: vec![1; 100],
            original_len: 100,
        };
        let (mut selected, mut counts) = (0usize, [0usize; 3]);
        let mut real = 0usize;
        for i in 0..400u64 {
            let m = mask_tokens(&seq, 50, 0.15, [1, 0, i]);
            real += 100;
            selected += m.targets.len();
            for t in &m.targets {
                counts[t.2 as usize] += 1;
                assert_eq!(seq.ids[t.0], t.1);
            }
            assert_eq!(m, mask_tokens(&seq, 50, 0.15, [1, 0, i]));
        }
        let frac = |k: usize| counts[k] as f64 / selected as f64;
        assert!((selected as f64 / real as f64 - 0.15).abs() < 0.01);
        assert!((frac(0) - 0.8).abs() < 0.01, "{counts:?}");
        assert!((frac(1) - 0.1).abs() < 0.01, "{counts:?}");
        assert!((frac(2) - 0.1).abs() < 0.01, "{counts:?}");
    }

    #[test]
    fn masking_skips_specials_and_padding() {
        let seq = TokenSequence {
            ids: vec![0, 7, 1, 2, 2],
            mask: vec![1, 1, 1, 0, 0],
            original_len: 1,
        };
        for i in 0..200 {
            let m = mask_tokens(&seq, 10, 0.5, [0, 0, i]);
            assert!(m.targets.iter().all(|t| t.0 == 1));
        }
    }

    fn tiny_model(classes: usize, seed: u64) -> Model {
        let cfg = EncoderConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            ff_size: 16,
            max_len: 5,
            vocab_size: 12,
            dropout_rate: 0.0,
        };
        Model::new(cfg, Some(classes), seed).unwrap()
    }

    fn separable(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let tok = if label == 0 { 6 + i % 3 } else { 9 + i % 3 };
                Example {
                    tokens: TokenSequence {
                        ids: vec![0, tok, 1, 2, 2],
                        mask: vec![1, 1, 1, 0, 0],
                        original_len: 1,
                    },
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn step_count_without_plateau() {
        let ex = separable(20);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (_, h) = train_on_examples(tiny_model(2, 1), &ex, &[], &cfg, &mut ValidationEvaluator::default()).unwrap();
        assert_eq!(h.stop_reason, StopReason::EpochsExhausted);
        assert_eq!(h.steps_taken, 3 * 20usize.div_ceil(8));
        assert!(h.rounds.is_empty());
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let ex = separable(16);
        let m = tiny_model(2, 3);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (out, _) = train_on_examples(m.clone(), &ex, &ex[..4], &cfg, &mut ValidationEvaluator::default()).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let err = train_on_examples(tiny_model(2, 0), &[], &[], &TrainConfig::default(), &mut ValidationEvaluator::default())
            .unwrap_err();
        assert!(err.to_string().contains("zero-instance"));
    }

    #[test]
    fn unknown_label_is_an_error() {
        let mut ex = separable(4);
        ex[0].label = 5;
        assert!(train_on_examples(tiny_model(2, 0), &ex, &[], &TrainConfig::default(), &mut ValidationEvaluator::default()).is_err());
    }

    #[test]
    fn history_csv_shape() {
        let h = TrainHistory {
            rounds: vec![
                TrainRound {
                    round: 0,
                    step: 0,
                    train_loss: None,
                    eval_loss: 0.7,
                    eval_macro_f1: 0.3,
                },
                TrainRound {
                    round: 1,
                    step: 4,
                    train_loss: Some(0.6),
                    eval_loss: 0.5,
                    eval_macro_f1: 0.8,
                },
            ],
            stop_reason: StopReason::EpochsExhausted,
            total_steps: 4,
            steps_taken: 4,
            best_round: Some(1),
        };
        assert_eq!(
            h.to_csv(),
            "round,step,train_loss,eval_loss,eval_macro_f1\n0,0,,0.7,0.3\n1,4,0.6,0.5,0.8\n"
        );
    }
}
