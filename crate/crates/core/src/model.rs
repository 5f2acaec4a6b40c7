//! Encoder plus optional heads, as one trainable unit.

use crate::encoder::{self, EncoderConfig, EncoderParams, EncoderWeights, ForwardMode};
use crate::error::{Error, Result};
use crate::heads::{self, ClassifierHead, MlmHead};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub encoder: EncoderWeights,
    pub classifier: Option<ClassifierHead>,
    pub mlm: Option<MlmHead>,
}

/// Model parameters bound to tape leaves.
pub struct BoundModel {
    pub encoder: EncoderParams<Var>,
    pub classifier: Option<(Var, Var)>,
    pub mlm: Option<(Var, Var)>,
}

impl BoundModel {
    /// Same order as [`Model::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.named().into_iter().map(|(_, v)| *v).collect();
        if let Some((w, b)) = self.classifier {
            out.extend([w, b]);
        }
        if let Some((w, b)) = self.mlm {
            out.extend([w, b]);
        }
        out
    }
}

impl Model {
    /// Fresh encoder (and classifier when `num_classes` is given).
    pub fn new(config: EncoderConfig, num_classes: Option<usize>, seed: u64) -> Result<Self> {
        let encoder = EncoderWeights::init(&config, seed)?;
        let classifier = num_classes
            .map(|c| ClassifierHead::init(c, config.hidden_size, seed))
            .transpose()?;
        Ok(Self {
            config,
            encoder,
            classifier,
            mlm: None,
        })
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.as_ref().map(ClassifierHead::num_classes)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        if let Some(h) = &self.classifier {
            out.push(("classifier.weight".to_string(), &h.weight));
            out.push(("classifier.bias".to_string(), &h.bias));
        }
        if let Some(h) = &self.mlm {
            out.push(("mlm.weight".to_string(), &h.weight));
            out.push(("mlm.bias".to_string(), &h.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_mut();
        if let Some(h) = &mut self.classifier {
            out.push(("classifier.weight".to_string(), &mut h.weight));
            out.push(("classifier.bias".to_string(), &mut h.bias));
        }
        if let Some(h) = &mut self.mlm {
            out.push(("mlm.weight".to_string(), &mut h.weight));
            out.push(("mlm.bias".to_string(), &mut h.bias));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let encoder = encoder::bind(tape, &self.encoder, trainable);
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().with_grad(trainable));
        let classifier = self.classifier.as_ref().map(|h| (leaf(&h.weight), leaf(&h.bias)));
        let mlm = self.mlm.as_ref().map(|h| (leaf(&h.weight), leaf(&h.bias)));
        BoundModel {
            encoder,
            classifier,
            mlm,
        }
    }

    fn require_classifier(&self) -> Result<&ClassifierHead> {
        self.classifier
            .as_ref()
            .ok_or_else(|| Error::Config("model has no classifier head".to_string()))
    }

    /// Classification logits `[batch, classes]` on a tape.
    pub fn classifier_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        seqs: &[&TokenSequence],
        mode: ForwardMode,
    ) -> Result<Var> {
        let (w, b) = bound
            .classifier
            .ok_or_else(|| Error::Config("model has no classifier head".to_string()))?;
        let out = encoder::forward_batch(tape, &bound.encoder, &self.config, seqs, mode, true)?;
        heads::classifier_logits(tape, w, b, out.hidden, &out.cls_rows())
    }

    /// Class distributions for each sequence (eval mode).
    pub fn predict_proba(&self, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let classes = self.require_classifier()?.num_classes();
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let z = self.classifier_logits(&mut tape, &bound, &refs, ForwardMode::eval())?;
            let p = tape.softmax(z)?;
            out.extend(tape.value(p).data().chunks(classes).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn predict(&self, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<usize>> {
        self.predict_proba(seqs, batch_size)?
            .iter()
            .map(|p| heads::predict_label(p))
            .collect()
    }

    /// Mean cross-entropy and predictions over labeled sequences (eval mode).
    pub fn evaluate_loss(
        &self,
        seqs: &[TokenSequence],
        labels: &[usize],
        batch_size: usize,
    ) -> Result<(f64, Vec<usize>)> {
        let probs = self.predict_proba(seqs, batch_size)?;
        let mut loss = 0.0;
        let mut preds = Vec::with_capacity(probs.len());
        for (p, &y) in probs.iter().zip(labels) {
            let py = *p
                .get(y)
                .ok_or_else(|| Error::Training(format!("label index {y} outside head with {} classes", p.len())))?;
            loss -= py.max(f64::MIN_POSITIVE).ln();
            preds.push(heads::predict_label(p)?);
        }
        Ok((loss / probs.len().max(1) as f64, preds))
    }
}
