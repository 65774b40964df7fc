//! Learnable tensors of the encoder-decoder and their initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::float::Float;
use super::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `y = x · weight (+ bias)`, weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub inner: Linear<T>,
    pub outer: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub self_attn: Attention<T>,
    pub self_attn_norm: LayerNorm<T>,
    pub ff: FeedForward<T>,
    pub ff_norm: LayerNorm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attn: Attention<T>,
    pub self_attn_norm: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub cross_attn_norm: LayerNorm<T>,
    pub ff: FeedForward<T>,
    pub ff_norm: LayerNorm<T>,
}

/// Every learnable tensor of the model. Gradients and optimizer moments use
/// the same structure, so they always line up with the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub src_embed: Tensor<T>,
    pub tgt_embed: Tensor<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub out_proj: Linear<T>,
}

/// Collects `(name, tensor)` pairs in a fixed order.
pub trait Visit<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> Visit<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

impl<T> Visit<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "gain"), &self.gain));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "gain"), &mut self.gain));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

macro_rules! visit_fields {
    ($ty:ident { $($field:ident),* }) => {
        impl<T> Visit<T> for $ty<T> {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
                $( self.$field.visit(&join(prefix, stringify!($field)), out); )*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
                $( self.$field.visit_mut(&join(prefix, stringify!($field)), out); )*
            }
        }
    };
}

visit_fields!(Attention { query, key, value, output });
visit_fields!(FeedForward { inner, outer });
visit_fields!(EncoderLayer { self_attn, self_attn_norm, ff, ff_norm });
visit_fields!(DecoderLayer { self_attn, self_attn_norm, cross_attn, cross_attn_norm, ff, ff_norm });

impl<T> Visit<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "src_embed"), &self.src_embed));
        out.push((join(prefix, "tgt_embed"), &self.tgt_embed));
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("encoder.{i}")), out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("decoder.{i}")), out);
        }
        self.out_proj.visit(&join(prefix, "out_proj"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "src_embed"), &mut self.src_embed));
        out.push((join(prefix, "tgt_embed"), &mut self.tgt_embed));
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("encoder.{i}")), out);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("decoder.{i}")), out);
        }
        self.out_proj.visit_mut(&join(prefix, "out_proj"), out);
    }
}

impl<T: Float> ModelParams<T> {
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        let lin = |l: &Linear<T>| Linear { weight: l.weight.cast(), bias: l.bias.as_ref().map(Tensor::cast) };
        let ln = |l: &LayerNorm<T>| LayerNorm { gain: l.gain.cast(), bias: l.bias.cast() };
        let attn = |a: &Attention<T>| Attention {
            query: lin(&a.query),
            key: lin(&a.key),
            value: lin(&a.value),
            output: lin(&a.output),
        };
        let ff = |f: &FeedForward<T>| FeedForward { inner: lin(&f.inner), outer: lin(&f.outer) };
        ModelParams {
            src_embed: self.src_embed.cast(),
            tgt_embed: self.tgt_embed.cast(),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayer {
                    self_attn: attn(&l.self_attn),
                    self_attn_norm: ln(&l.self_attn_norm),
                    ff: ff(&l.ff),
                    ff_norm: ln(&l.ff_norm),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    self_attn: attn(&l.self_attn),
                    self_attn_norm: ln(&l.self_attn_norm),
                    cross_attn: attn(&l.cross_attn),
                    cross_attn_norm: ln(&l.cross_attn_norm),
                    ff: ff(&l.ff),
                    ff_norm: ln(&l.ff_norm),
                })
                .collect(),
            out_proj: lin(&self.out_proj),
        }
    }

    /// Xavier-uniform projections, N(0, d^-1/2) embeddings with a zero pad row,
    /// zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(cfg: &ModelConfig, pad_id: usize, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let src_embed = embedding(cfg.vocab_size, d, pad_id, rng);
        let tgt_embed = embedding(cfg.vocab_size, d, pad_id, rng);
        let encoder = (0..cfg.enc_layers)
            .map(|_| EncoderLayer {
                self_attn: attention(d, rng),
                self_attn_norm: layer_norm(d),
                ff: feed_forward(d, cfg.d_ff, rng),
                ff_norm: layer_norm(d),
            })
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|_| DecoderLayer {
                self_attn: attention(d, rng),
                self_attn_norm: layer_norm(d),
                cross_attn: attention(d, rng),
                cross_attn_norm: layer_norm(d),
                ff: feed_forward(d, cfg.d_ff, rng),
                ff_norm: layer_norm(d),
            })
            .collect();
        let out_proj = xavier_linear(d, cfg.vocab_size, false, rng);
        ModelParams { src_embed, tgt_embed, encoder, decoder, out_proj }
    }
}

fn xavier_linear<T: Float, R: Rng>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Linear<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
    Linear {
        weight: Tensor {
            shape: vec![fan_in, fan_out],
            data: (0..fan_in * fan_out).map(|_| T::from_f64_lossy(dist.sample(rng))).collect(),
        },
        bias: bias.then(|| Tensor::zeros(&[fan_out])),
    }
}

fn layer_norm<T: Float>(d: usize) -> LayerNorm<T> {
    LayerNorm { gain: Tensor::filled(&[d], T::one()), bias: Tensor::zeros(&[d]) }
}

fn attention<T: Float, R: Rng>(d: usize, rng: &mut R) -> Attention<T> {
    Attention {
        query: xavier_linear(d, d, true, rng),
        key: xavier_linear(d, d, true, rng),
        value: xavier_linear(d, d, true, rng),
        output: xavier_linear(d, d, true, rng),
    }
}

fn feed_forward<T: Float, R: Rng>(d: usize, d_ff: usize, rng: &mut R) -> FeedForward<T> {
    FeedForward { inner: xavier_linear(d, d_ff, true, rng), outer: xavier_linear(d_ff, d, true, rng) }
}

fn embedding<T: Float, R: Rng>(vocab: usize, d: usize, pad_id: usize, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid std");
    let mut t = Tensor { shape: vec![vocab, d], data: (0..vocab * d).map(|_| T::from_f64_lossy(dist.sample(rng))).collect() };
    if pad_id < vocab {
        t.data[pad_id * d..(pad_id + 1) * d].iter_mut().for_each(|v| *v = T::zero());
    }
    t
}
