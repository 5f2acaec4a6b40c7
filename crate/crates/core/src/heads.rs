//! Task heads on top of the encoder: the softmax classifier over the `[CLS]`
//! state and the masked-language-model projection.

use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// `p(c | h) = softmax(W h + b)` with `W: [classes, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Vocabulary projection `[V, H]` plus bias `[V]`. Not tied to the input embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

fn normal_matrix(rows: usize, cols: usize, seed: u64, stream: u64) -> Tensor {
    let mut rng = rng::seeded(seed, stream);
    let data = (0..rows * cols).map(|_| 0.02 * rng::normal(&mut rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape and data agree")
}

impl ClassifierHead {
    /// normal(0, 0.02) weights and zero bias, deterministic in `seed`.
    pub fn init(num_classes: usize, hidden: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {num_classes}")));
        }
        Ok(Self {
            weight: normal_matrix(num_classes, hidden, seed, 2),
            bias: Tensor::zeros(&[num_classes]),
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || s[0] < 2 || bias.shape() != [s[0]] {
            return Err(Error::Config(format!(
                "classifier head shapes {:?} / {:?} are inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl MlmHead {
    pub fn init(vocab_size: usize, hidden: usize, seed: u64) -> Self {
        Self {
            weight: normal_matrix(vocab_size, hidden, seed, 3),
            bias: Tensor::zeros(&[vocab_size]),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Class logits for the given rows (typically the `[CLS]` rows) of `hidden`.
pub fn classifier_logits(tape: &mut Tape, weight: Var, bias: Var, hidden: Var, rows: &[usize]) -> Result<Var> {
    let h = tape.gather_rows(hidden, rows)?;
    linear(tape, h, weight, bias)
}

/// Class distribution for a single representation `h`.
pub fn classify(head: &ClassifierHead, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != head.hidden() {
        return Err(Error::Config(format!(
            "classify: h has length {}, head expects {}",
            h.len(),
            head.hidden()
        )));
    }
    let mut tape = Tape::new();
    let w = tape.leaf(head.weight.clone());
    let b = tape.leaf(head.bias.clone());
    let x = tape.leaf(Tensor::new(vec![1, h.len()], h.to_vec())?);
    let z = linear(&mut tape, x, w, b)?;
    let p = tape.softmax(z)?;
    Ok(tape.value(p).data().to_vec())
}

/// Argmax with ties going to the lowest index.
pub fn predict_label(probs: &[f64]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Config("predict_label: empty distribution".to_string()));
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Vocabulary logits `[k, V]` at the masked positions of one sequence's
/// hidden states `[seq_len, H]`.
pub fn mlm_logits(head: &MlmHead, hidden: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = tape.leaf(head.weight.clone());
    let b = tape.leaf(head.bias.clone());
    let hv = tape.leaf(hidden.clone());
    let out = mlm_logits_on_tape(&mut tape, w, b, hv, positions)?;
    Ok(tape.value(out).clone())
}

pub fn mlm_logits_on_tape(tape: &mut Tape, weight: Var, bias: Var, hidden: Var, rows: &[usize]) -> Result<Var> {
    let bound = tape.value(hidden).rows();
    if let Some(&bad) = rows.iter().find(|&&r| r >= bound) {
        return Err(Error::Config(format!(
            "mlm_logits: masked position {bad} out of range (sequence length {bound})"
        )));
    }
    let h = tape.gather_rows(hidden, rows)?;
    linear(tape, h, weight, bias)
}
