//! Strategy runs and learning-curve experiments on top of the trainer.

use crate::datasets::{subsample, LabeledDataset};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, CurvePoint, CurveSeries, EvalReport, RunMetadata};
use crate::model::Model;
use crate::tokenizer::Vocabulary;
use crate::trainer::{self, TrainConfig, TrainHistory};
use crate::transfer::{self, Checkpoint};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Pretrained encoder (when given) with a fresh head, trained on the target only.
    Scratch,
    /// Encoder and classifier from the source checkpoint.
    TransferFull,
    /// Encoder from the source checkpoint, fresh classifier.
    TransferEncoderOnly,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Scratch => "scratch",
            Strategy::TransferFull => "transfer-full",
            Strategy::TransferEncoderOnly => "transfer-encoder-only",
        }
    }

    pub fn is_transfer(self) -> bool {
        self != Strategy::Scratch
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Strategy::Scratch),
            "transfer-full" => Ok(Strategy::TransferFull),
            "transfer-encoder-only" => Ok(Strategy::TransferEncoderOnly),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected scratch, transfer-full or transfer-encoder-only)"
            ))),
        }
    }
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub vocab: &'a Vocabulary,
    /// Architecture of the target model.
    pub config: &'a EncoderConfig,
    pub train: &'a TrainConfig,
    /// Source-task checkpoint for the transfer strategies.
    pub source: Option<&'a Checkpoint>,
    /// Pretrained encoder for the scratch strategy; random init when absent.
    pub init: Option<&'a Checkpoint>,
    pub model_name: &'a str,
    pub eval_batch: usize,
}

/// Result of one (strategy, n_train, seed) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    /// `None` when no training happened (n_train = 0).
    pub history: Option<TrainHistory>,
    pub confusion: ConfusionMatrix,
    pub report: EvalReport,
}

/// Confusion matrix and report of `model` on `dataset`.
pub fn evaluate(
    model: &Model,
    dataset: &LabeledDataset,
    vocab: &Vocabulary,
    metadata: RunMetadata,
    batch_size: usize,
) -> Result<(ConfusionMatrix, EvalReport)> {
    let classes = model
        .num_classes()
        .ok_or_else(|| Error::Config("model has no classifier head".to_string()))?;
    if classes != dataset.schema.len() {
        return Err(Error::Config(format!(
            "model predicts {classes} classes but dataset {} has labels {:?}",
            dataset.provenance, dataset.schema.labels
        )));
    }
    let seqs = dataset
        .instances
        .iter()
        .map(|i| vocab.encode(&i.text, model.config.max_len))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let preds = model.predict(&seqs, batch_size)?;
    let cm = metrics::confusion_matrix(&dataset.labels(), &preds, classes)?.with_labels(dataset.schema.labels.clone())?;
    let report = metrics::compute_report(&cm, metadata)?;
    Ok((cm, report))
}

impl Pipeline<'_> {
    /// The model a strategy starts from, before any target training.
    pub fn initial_model(&self, strategy: Strategy, num_classes: usize, seed: u64) -> Result<Model> {
        let hash = self.vocab.content_hash();
        if self.config.vocab_size < self.vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} is smaller than the vocabulary ({} tokens)",
                self.config.vocab_size,
                self.vocab.len()
            )));
        }
        match strategy {
            Strategy::Scratch => match self.init {
                Some(ck) => {
                    ck.check_vocabulary(&hash)?;
                    transfer::load_encoder_only(ck, self.config, num_classes, seed)
                }
                None => Model::new(self.config.clone(), Some(num_classes), seed),
            },
            Strategy::TransferFull | Strategy::TransferEncoderOnly => {
                let ck = self.source.ok_or_else(|| {
                    Error::Config(format!("strategy {strategy} needs a source checkpoint"))
                })?;
                ck.check_vocabulary(&hash)?;
                if strategy == Strategy::TransferFull {
                    let mut m = transfer::load_full(ck, num_classes)?;
                    // keep the requested dropout; the architecture must agree
                    let report = transfer::compatibility_check(ck, self.config);
                    if let Some(bad) = report.mismatches.iter().find(|m| m.field != "dropout_rate") {
                        return Err(Error::Transfer(format!(
                            "encoder config mismatch: {} (checkpoint {}, requested {})",
                            bad.field, bad.checkpoint, bad.requested
                        )));
                    }
                    m.config = self.config.clone();
                    Ok(m)
                } else {
                    transfer::load_encoder_only(ck, self.config, num_classes, seed)
                }
            }
        }
    }

    /// Subsamples `n_train` target instances with `seed`, trains (unless
    /// `n_train` is 0) and evaluates on `test`.
    pub fn run(
        &self,
        strategy: Strategy,
        train: &LabeledDataset,
        test: &LabeledDataset,
        n_train: usize,
        seed: u64,
    ) -> Result<RunOutcome> {
        if train.schema.labels != test.schema.labels {
            return Err(Error::Config(format!(
                "train labels {:?} differ from test labels {:?}",
                train.schema.labels, test.schema.labels
            )));
        }
        let model = self.initial_model(strategy, train.schema.len(), seed)?;
        let sample = subsample(train, n_train, seed)?;
        let (model, history) = if sample.is_empty() {
            (model, None)
        } else {
            let cfg = TrainConfig {
                seed,
                ..self.train.clone()
            };
            let (m, h) = trainer::train_classifier(model, &sample, self.vocab, &cfg)?;
            (m, Some(h))
        };
        let metadata = RunMetadata {
            model: self.model_name.to_string(),
            strategy: strategy.to_string(),
            n_train,
            seed,
        };
        let (confusion, report) = evaluate(&model, test, self.vocab, metadata, self.eval_batch)?;
        Ok(RunOutcome {
            model,
            history,
            confusion,
            report,
        })
    }

    /// Macro F1 on `test` for every strategy × size × seed.
    pub fn progress_test(
        &self,
        strategies: &[Strategy],
        train: &LabeledDataset,
        test: &LabeledDataset,
        sizes: &[usize],
        seeds: &[u64],
    ) -> Result<ProgressResult> {
        let mut sorted = sizes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut series = Vec::new();
        let mut reports = Vec::new();
        for &strategy in strategies {
            let mut points = Vec::new();
            for &n in &sorted {
                for &seed in seeds {
                    let out = self.run(strategy, train, test, n, seed)?;
                    points.push(CurvePoint {
                        n_train: n,
                        seed,
                        macro_f1: out.report.macro_f1,
                    });
                    reports.push(out.report);
                }
            }
            series.push(CurveSeries {
                strategy: strategy.to_string(),
                points,
            });
        }
        Ok(ProgressResult { series, reports })
    }
}

#[derive(Debug, Clone)]
pub struct ProgressResult {
    pub series: Vec<CurveSeries>,
    pub reports: Vec<EvalReport>,
}

impl ProgressResult {
    /// Mean macro F1 of `strategy` at `n_train` over seeds.
    pub fn mean_f1(&self, strategy: Strategy, n_train: usize) -> Option<f64> {
        let s = self.series.iter().find(|s| s.strategy == strategy.as_str())?;
        let v: Vec<f64> = s
            .points
            .iter()
            .filter(|p| p.n_train == n_train)
            .map(|p| p.macro_f1)
            .collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn curve_csv(&self) -> Result<String> {
        metrics::render_learning_curve(&self.series)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::Scratch, Strategy::TransferFull, Strategy::TransferEncoderOnly] {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("transfer".parse::<Strategy>().is_err());
    }
}
