//! Pre-norm transformer encoder with learned positions.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{DropoutKey, Tape, Tensor, Var};
use crate::tokenizer::TokenSequence;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// CPU-sized default: 2 layers, H=64, 4 heads, FF=128, 64 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ff_size: 128,
            max_len: 64,
            vocab_size,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ff_size", self.ff_size),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_len > 512 || self.max_len < 3 {
            return Err(Error::Config(format!("max_len {} outside [3, 512]", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// `(field, self value, other value)` for every differing field.
    pub fn differences(&self, other: &EncoderConfig) -> Vec<(&'static str, String, String)> {
        let mut out = Vec::new();
        let mut cmp = |name: &'static str, a: String, b: String| {
            if a != b {
                out.push((name, a, b));
            }
        };
        cmp("num_layers", self.num_layers.to_string(), other.num_layers.to_string());
        cmp("hidden_size", self.hidden_size.to_string(), other.hidden_size.to_string());
        cmp("num_heads", self.num_heads.to_string(), other.num_heads.to_string());
        cmp("ff_size", self.ff_size.to_string(), other.ff_size.to_string());
        cmp("max_len", self.max_len.to_string(), other.max_len.to_string());
        cmp("vocab_size", self.vocab_size.to_string(), other.vocab_size.to_string());
        cmp("dropout_rate", self.dropout_rate.to_string(), other.dropout_rate.to_string());
        out
    }
}

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn named(&self) -> Vec<(&'static str, &T)> {
                vec![$((stringify!($field), &self.$field),)*]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$((stringify!($field), &mut self.$field),)*]
            }

            pub fn splat(v: T) -> Self
            where
                T: Clone,
            {
                $name { $($field: v.clone(),)* }
            }

            pub fn try_map<U, E>(&self, mut f: impl FnMut(&'static str, &T) -> std::result::Result<U, E>) -> std::result::Result<$name<U>, E> {
                Ok($name { $($field: f(stringify!($field), &self.$field)?,)* })
            }
        }
    };
}

param_struct!(
    /// One encoder block. Weights are `[out, in]`.
    LayerParams {
        attn_norm_gain,
        attn_norm_bias,
        query_weight,
        query_bias,
        key_weight,
        key_bias,
        value_weight,
        value_bias,
        output_weight,
        output_bias,
        ff_norm_gain,
        ff_norm_bias,
        ff_in_weight,
        ff_in_bias,
        ff_out_weight,
        ff_out_bias,
    }
);

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_gain: T,
    pub final_norm_bias: T,
}

pub type EncoderWeights = EncoderParams<Tensor>;

impl<T> EncoderParams<T> {
    /// Parameters with fully qualified names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("encoder.token_embedding".to_string(), &self.token_embedding),
            ("encoder.position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (n, t) in layer.named() {
                out.push((format!("encoder.layer{i}.{n}"), t));
            }
        }
        out.push(("encoder.final_norm_gain".to_string(), &self.final_norm_gain));
        out.push(("encoder.final_norm_bias".to_string(), &self.final_norm_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("encoder.token_embedding".to_string(), &mut self.token_embedding),
            ("encoder.position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (n, t) in layer.named_mut() {
                out.push((format!("encoder.layer{i}.{n}"), t));
            }
        }
        out.push(("encoder.final_norm_gain".to_string(), &mut self.final_norm_gain));
        out.push(("encoder.final_norm_bias".to_string(), &mut self.final_norm_bias));
        out
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<EncoderParams<U>, E> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(layer.try_map(|n, t| f(&format!("encoder.layer{i}.{n}"), t))?);
        }
        Ok(EncoderParams {
            token_embedding: f("encoder.token_embedding", &self.token_embedding)?,
            position_embedding: f("encoder.position_embedding", &self.position_embedding)?,
            layers,
            final_norm_gain: f("encoder.final_norm_gain", &self.final_norm_gain)?,
            final_norm_bias: f("encoder.final_norm_bias", &self.final_norm_bias)?,
        })
    }
}

/// Expected shape of every encoder tensor, by name.
pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_size;
    let f = config.ff_size;
    let layer = |n: &str| -> Vec<usize> {
        match n {
            "query_weight" | "key_weight" | "value_weight" | "output_weight" => vec![h, h],
            "ff_in_weight" => vec![f, h],
            "ff_in_bias" => vec![f],
            "ff_out_weight" => vec![h, f],
            _ => vec![h],
        }
    };
    let shapes = EncoderParams {
        token_embedding: vec![config.vocab_size, h],
        position_embedding: vec![config.max_len, h],
        layers: (0..config.num_layers)
            .map(|_| {
                LayerParams::splat(())
                .try_map::<_, ()>(|n, _| Ok(layer(n)))
                .expect("infallible")
            })
            .collect(),
        final_norm_gain: vec![h],
        final_norm_bias: vec![h],
    };
    shapes.named().into_iter().map(|(n, s)| (n, s.clone())).collect()
}

fn skeleton(config: &EncoderConfig) -> EncoderParams<()> {
    EncoderParams {
        token_embedding: (),
        position_embedding: (),
        layers: vec![LayerParams::splat(()); config.num_layers],
        final_norm_gain: (),
        final_norm_bias: (),
    }
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    if name.ends_with("_gain") {
        Tensor::ones(shape)
    } else if name.ends_with("_bias") {
        Tensor::zeros(shape)
    } else {
        let len = shape.iter().product();
        let data = (0..len).map(|_| 0.02 * rng::normal(rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape and data agree")
    }
}

impl EncoderWeights {
    /// normal(0, 0.02) embeddings and projections, unit gains, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed, 1);
        let shapes = expected_shapes(config);
        let mut tensors = shapes
            .iter()
            .map(|(n, s)| init_tensor(n, s, &mut rng))
            .collect::<Vec<_>>()
            .into_iter();
        Self::from_ordered(config, &mut tensors)
    }

    /// Every tensor set to zero (norm gains included).
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = expected_shapes(config)
            .into_iter()
            .map(|(_, s)| Tensor::zeros(&s))
            .collect::<Vec<_>>()
            .into_iter();
        Self::from_ordered(config, &mut tensors)
    }

    fn from_ordered(config: &EncoderConfig, tensors: &mut impl Iterator<Item = Tensor>) -> Result<Self> {
        let template = expected_shapes(config);
        let skeleton = skeleton(config);
        // try_map visits fields in a different order than `named`, so fill by name.
        let mut by_name: std::collections::HashMap<String, Tensor> = template
            .iter()
            .map(|(n, _)| (n.clone(), tensors.next().expect("one tensor per shape")))
            .collect();
        skeleton.try_map(|n, _| {
            by_name
                .remove(n)
                .ok_or_else(|| Error::Config(format!("missing tensor {n}")))
        })
    }

    /// Builds weights from named tensors, checking every shape against `config`.
    pub fn from_named(
        config: &EncoderConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut ordered = Vec::new();
        for (name, shape) in expected_shapes(config) {
            let t = lookup(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, config requires {:?}",
                    t.shape(),
                    shape
                )));
            }
            ordered.push(t);
        }
        Self::from_ordered(config, &mut ordered.into_iter())
    }
}

/// Dropout and step context for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub train: bool,
    pub seed: u64,
    pub step: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        Self {
            train: false,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            train: true,
            seed,
            step,
        }
    }
}

/// Encoder output for a batch: rows `b * seq_len .. (b + 1) * seq_len` belong
/// to sequence `b`.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    pub hidden: Var,
    pub batch: usize,
    pub seq_len: usize,
}

impl BatchOutput {
    /// Row index of the `[CLS]` state of every sequence.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len).collect()
    }
}

fn check_sequence(config: &EncoderConfig, seq: &TokenSequence) -> Result<()> {
    if seq.ids.len() != config.max_len || seq.mask.len() != config.max_len {
        return Err(Error::Config(format!(
            "sequence length {} does not equal max_len {}",
            seq.ids.len(),
            config.max_len
        )));
    }
    if let Some((position, &id)) = seq.ids.iter().enumerate().find(|(_, &id)| id >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            position,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

/// Runs the encoder on a batch.
///
/// When `trim` is set, positions past the longest real sequence in the batch
/// are dropped: they are padding everywhere and masked out of attention, so
/// the real rows are unchanged.
pub fn forward_batch(
    tape: &mut Tape,
    params: &EncoderParams<Var>,
    config: &EncoderConfig,
    seqs: &[&TokenSequence],
    mode: ForwardMode,
    trim: bool,
) -> Result<BatchOutput> {
    if seqs.is_empty() {
        return Err(Error::Config("empty batch".to_string()));
    }
    for s in seqs {
        check_sequence(config, s)?;
    }
    let seq_len = if trim {
        seqs.iter().map(|s| s.real_len()).max().unwrap_or(1).max(1)
    } else {
        config.max_len
    };
    let batch = seqs.len();
    let mut ids = Vec::with_capacity(batch * seq_len);
    let mut positions = Vec::with_capacity(batch * seq_len);
    let mut key_mask = Vec::with_capacity(batch * seq_len);
    for s in seqs {
        ids.extend_from_slice(&s.ids[..seq_len]);
        positions.extend(0..seq_len);
        key_mask.extend(s.mask[..seq_len].iter().map(|&m| m == 1));
    }
    let rate = config.dropout_rate;
    let mut site = 0u64;
    let mut key = || {
        site += 1;
        DropoutKey {
            seed: mode.seed,
            step: mode.step,
            site,
        }
    };

    let tok = tape.gather_rows(params.token_embedding, &ids)?;
    let pos = tape.gather_rows(params.position_embedding, &positions)?;
    let mut x = tape.add(tok, pos)?;
    x = tape.dropout(x, rate, mode.train, key())?;
    for layer in &params.layers {
        let a = tape.layer_norm(x, layer.attn_norm_gain, layer.attn_norm_bias)?;
        let q = linear(tape, a, layer.query_weight, layer.query_bias)?;
        let k = linear(tape, a, layer.key_weight, layer.key_bias)?;
        let v = linear(tape, a, layer.value_weight, layer.value_bias)?;
        let att = tape.attention(q, k, v, config.num_heads, seq_len, &key_mask)?;
        let o = linear(tape, att, layer.output_weight, layer.output_bias)?;
        let o = tape.dropout(o, rate, mode.train, key())?;
        x = tape.add(x, o)?;

        let f = tape.layer_norm(x, layer.ff_norm_gain, layer.ff_norm_bias)?;
        let f = linear(tape, f, layer.ff_in_weight, layer.ff_in_bias)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, layer.ff_out_weight, layer.ff_out_bias)?;
        let f = tape.dropout(f, rate, mode.train, key())?;
        x = tape.add(x, f)?;
    }
    let hidden = tape.layer_norm(x, params.final_norm_gain, params.final_norm_bias)?;
    Ok(BatchOutput {
        hidden,
        batch,
        seq_len,
    })
}

/// `x @ wᵀ + b`
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul_t(x, weight)?;
    Ok(tape.add_row(y, bias)?)
}

/// Binds weights as tape leaves.
pub fn bind(tape: &mut Tape, weights: &EncoderWeights, trainable: bool) -> EncoderParams<Var> {
    weights
        .try_map::<_, std::convert::Infallible>(|_, t| Ok(tape.leaf(t.clone().with_grad(trainable))))
        .expect("infallible")
}

/// Hidden states `[max_len, H]` for one sequence.
pub fn encode_sequence(
    weights: &EncoderWeights,
    config: &EncoderConfig,
    tokens: &TokenSequence,
    mode: ForwardMode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = bind(&mut tape, weights, false);
    let out = forward_batch(&mut tape, &params, config, &[tokens], mode, false)?;
    Ok(tape.value(out.hidden).clone())
}

/// Row 0 of the hidden states: the `[CLS]` representation.
pub fn cls_state(hidden: &Tensor) -> Result<Vec<f64>> {
    if hidden.is_empty() {
        return Err(Error::Config("cls_state of empty hidden states".to_string()));
    }
    Ok(hidden.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ff_size: 16,
            max_len: 8,
            vocab_size: 20,
            dropout_rate: 0.1,
        }
    }

    fn seq(ids: &[usize], max_len: usize, pad_id: usize) -> TokenSequence {
        let mut v = ids.to_vec();
        let real = v.len();
        v.resize(max_len, pad_id);
        let mut mask = vec![1u8; real];
        mask.resize(max_len, 0);
        TokenSequence {
            ids: v,
            mask,
            original_len: real - 2,
        }
    }

    #[test]
    fn output_shape_is_max_len_by_hidden() {
        let c = tiny();
        let w = EncoderWeights::init(&c, 3).unwrap();
        let h = encode_sequence(&w, &c, &seq(&[0, 7, 9, 1], 8, 2), ForwardMode::eval()).unwrap();
        assert_eq!(h.shape(), &[8, 8]);
    }

    #[test]
    fn padding_content_does_not_reach_cls() {
        let c = tiny();
        let w = EncoderWeights::init(&c, 5).unwrap();
        let a = seq(&[0, 7, 9, 1], 8, 2);
        let b = seq(&[0, 7, 9, 1], 8, 13);
        let ha = encode_sequence(&w, &c, &a, ForwardMode::eval()).unwrap();
        let hb = encode_sequence(&w, &c, &b, ForwardMode::eval()).unwrap();
        for (x, y) in ha.row(0).iter().zip(hb.row(0)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn trimming_leaves_real_rows_bitwise_equal() {
        let c = tiny();
        let w = EncoderWeights::init(&c, 5).unwrap();
        let a = seq(&[0, 7, 9, 1], 8, 2);
        let b = seq(&[0, 3, 1], 8, 2);
        let run = |trim| {
            let mut tape = Tape::new();
            let p = bind(&mut tape, &w, false);
            let out = forward_batch(&mut tape, &p, &c, &[&a, &b], ForwardMode::eval(), trim).unwrap();
            let h = tape.value(out.hidden).clone();
            out.cls_rows().iter().map(|&r| h.row(r).to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn zero_weights_give_zero_cls() {
        let c = tiny();
        let w = EncoderWeights::zeros(&c).unwrap();
        let h = encode_sequence(&w, &c, &seq(&[0, 4, 1], 8, 2), ForwardMode::eval()).unwrap();
        assert!(cls_state(&h).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_id_rejected() {
        let c = tiny();
        let w = EncoderWeights::init(&c, 1).unwrap();
        let err = encode_sequence(&w, &c, &seq(&[0, 25, 1], 8, 2), ForwardMode::eval()).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 25, .. }));
    }

    #[test]
    fn cls_state_extracts_row_zero() {
        let h = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let first = cls_state(&h).unwrap();
        assert_eq!(first, vec![1.0, 2.0, 3.0]);
        assert_eq!(first, h.data()[..3].to_vec());
        assert_eq!(cls_state(&h).unwrap(), first);
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let c = tiny();
        let a = EncoderWeights::init(&c, 11).unwrap();
        assert_eq!(a, EncoderWeights::init(&c, 11).unwrap());
        assert_ne!(a, EncoderWeights::init(&c, 12).unwrap());
        for ((n, t), (en, shape)) in a.named().into_iter().zip(expected_shapes(&c)) {
            assert_eq!(n, en);
            assert_eq!(t.shape(), shape.as_slice(), "{n}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.max_len = 600;
        assert!(c.validate().is_err());
        let mut other = tiny();
        other.vocab_size = 99;
        assert_eq!(tiny().differences(&other).len(), 1);
    }
}
