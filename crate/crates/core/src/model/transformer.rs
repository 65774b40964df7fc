//! Post-LN encoder-decoder: forward pass with a tape, loss, and exact backward.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    apply_mask, attention_backward, attention_forward, dropout_mask, feed_forward_backward, feed_forward_forward,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, log_softmax_rows, AttnCache, FfCache,
    NormCache, Segments,
};
use super::params::{DecoderLayer, EncoderLayer, ModelParams, Tensor};
use super::vocab::{BOS, EOS, PAD};
use super::{Float, Mode, ModelConfig, ModelError, Result};
use crate::seed;

/// Sinusoidal encoding: `sin` at even indices, `cos` at odd ones.
pub fn positional_encoding(position: usize, d_model: usize, max_positions: usize) -> Result<Vec<f64>> {
    if position >= max_positions {
        return Err(ModelError::TooLong { len: position + 1, max_positions });
    }
    Ok((0..d_model)
        .map(|j| {
            let angle = position as f64 / 10000f64.powf((j - j % 2) as f64 / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect())
}

/// Mean negative log-likelihood of `gold` over non-pad positions.
///
/// `log_probs` holds one row of `vocab` log-probabilities per position.
pub fn cross_entropy<T: Float>(log_probs: &[T], vocab: usize, gold: &[u32], pad: u32) -> Result<(f64, usize)> {
    assert_eq!(log_probs.len(), gold.len() * vocab, "one distribution per gold token");
    let mut sum = 0.0;
    let mut count = 0;
    for (row, &g) in log_probs.chunks_exact(vocab).zip(gold) {
        if g == pad {
            continue;
        }
        sum -= row[g as usize].as_f64();
        count += 1;
    }
    if count == 0 {
        return Err(ModelError::AllPad);
    }
    Ok((sum / count as f64, count))
}

/// Source ids (ending in eos) and target ids (no bos/eos).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl EncodedPair {
    /// Appends eos to `src`.
    pub fn new(mut src: Vec<u32>, tgt: Vec<u32>) -> Self {
        src.push(EOS);
        EncodedPair { src, tgt }
    }

    /// Tokens the pair occupies in a batch: source, plus target with bos (input) or eos (gold).
    pub fn num_tokens(&self) -> usize {
        self.src.len() + self.tgt.len() + 1
    }

    pub fn tgt_in(&self) -> Vec<u32> {
        std::iter::once(BOS).chain(self.tgt.iter().copied()).collect()
    }

    pub fn gold(&self) -> Vec<u32> {
        self.tgt.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

/// Examples concatenated row-wise; `*_offsets[b]..*_offsets[b+1]` are example `b`'s rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<u32>,
    pub src_offsets: Vec<usize>,
    pub tgt_in: Vec<u32>,
    pub gold: Vec<u32>,
    pub tgt_offsets: Vec<usize>,
}

impl Default for Batch {
    fn default() -> Self {
        Batch { src: vec![], src_offsets: vec![0], tgt_in: vec![], gold: vec![], tgt_offsets: vec![0] }
    }
}

impl Batch {
    pub fn push(&mut self, src: &[u32], tgt_in: &[u32], gold: &[u32]) {
        assert_eq!(tgt_in.len(), gold.len(), "teacher forcing needs one gold token per input");
        self.src.extend_from_slice(src);
        self.src_offsets.push(self.src.len());
        self.tgt_in.extend_from_slice(tgt_in);
        self.gold.extend_from_slice(gold);
        self.tgt_offsets.push(self.tgt_in.len());
    }

    pub fn teacher_forced<'a>(pairs: impl IntoIterator<Item = &'a EncodedPair>) -> Self {
        let mut b = Batch::default();
        for p in pairs {
            b.push(&p.src, &p.tgt_in(), &p.gold());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.src_offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub(super) struct EncLayerTape<T> {
    x: Vec<T>,
    attn: AttnCache<T>,
    attn_drop: Option<Vec<T>>,
    norm1: NormCache<T>,
    x1: Vec<T>,
    ff: FfCache<T>,
    ff_drop: Option<Vec<T>>,
    norm2: NormCache<T>,
}

#[derive(Clone, Debug)]
struct DecLayerTape<T> {
    x: Vec<T>,
    self_attn: AttnCache<T>,
    self_drop: Option<Vec<T>>,
    norm1: NormCache<T>,
    x1: Vec<T>,
    cross: AttnCache<T>,
    cross_drop: Option<Vec<T>>,
    norm2: NormCache<T>,
    x2: Vec<T>,
    ff: FfCache<T>,
    ff_drop: Option<Vec<T>>,
    norm3: NormCache<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    /// `[target rows, vocab]` log-probabilities.
    pub log_probs: Vec<T>,
    pub memory: Vec<T>,
    src_drop: Option<Vec<T>>,
    tgt_drop: Option<Vec<T>>,
    enc: Vec<EncLayerTape<T>>,
    dec: Vec<DecLayerTape<T>>,
    dec_out: Vec<T>,
}

pub(super) fn dynr(rng: &mut Option<ChaCha8Rng>) -> Option<&mut dyn RngCore> {
    rng.as_mut().map(|r| r as &mut dyn RngCore)
}

pub(super) fn add_into<T: Float>(acc: &mut [T], x: &[T]) {
    acc.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
}

fn masked<T: Float>(x: &[T], mask: Option<&Vec<T>>) -> Vec<T> {
    let mut out = x.to_vec();
    apply_mask(&mut out, mask);
    out
}

pub(super) fn enc_layer_forward<T: Float>(
    layer: &EncoderLayer<T>,
    heads: usize,
    x: Vec<T>,
    seg: Segments<'_>,
    rng: &mut Option<ChaCha8Rng>,
    p: f64,
) -> (Vec<T>, EncLayerTape<T>) {
    let d = layer.self_attn_norm.gain.numel();
    let rows = x.len() / d;
    let (mut a, attn) = attention_forward(&layer.self_attn, heads, &x, &x, seg, false, dynr(rng), p);
    let attn_drop = dropout_mask(dynr(rng), a.len(), p);
    apply_mask(&mut a, attn_drop.as_ref());
    add_into(&mut a, &x);
    let (x1, norm1) = layer_norm_forward(&layer.self_attn_norm, &a, d);
    let (mut f, ff) = feed_forward_forward(&layer.ff, &x1, rows, dynr(rng), p);
    let ff_drop = dropout_mask(dynr(rng), f.len(), p);
    apply_mask(&mut f, ff_drop.as_ref());
    add_into(&mut f, &x1);
    let (out, norm2) = layer_norm_forward(&layer.ff_norm, &f, d);
    (out, EncLayerTape { x, attn, attn_drop, norm1, x1, ff, ff_drop, norm2 })
}

fn enc_layer_backward<T: Float>(
    layer: &EncoderLayer<T>,
    grad: &mut EncoderLayer<T>,
    heads: usize,
    t: &EncLayerTape<T>,
    seg: Segments<'_>,
    dout: &[T],
) -> Vec<T> {
    let rows = t.norm1.rstd.len();
    let mut dx1 = layer_norm_backward(&layer.ff_norm, &mut grad.ff_norm, &t.norm2, dout);
    let df = masked(&dx1, t.ff_drop.as_ref());
    add_into(&mut dx1, &feed_forward_backward(&layer.ff, &mut grad.ff, &t.ff, &t.x1, &df, rows));
    let mut dx = layer_norm_backward(&layer.self_attn_norm, &mut grad.self_attn_norm, &t.norm1, &dx1);
    let da = masked(&dx, t.attn_drop.as_ref());
    let (dq, dkv) = attention_backward(&layer.self_attn, &mut grad.self_attn, heads, &t.attn, &t.x, &t.x, seg, false, &da);
    add_into(&mut dx, &dq);
    add_into(&mut dx, &dkv);
    dx
}

#[allow(clippy::too_many_arguments)]
fn dec_layer_forward<T: Float>(
    layer: &DecoderLayer<T>,
    heads: usize,
    x: Vec<T>,
    memory: &[T],
    self_seg: Segments<'_>,
    cross_seg: Segments<'_>,
    rng: &mut Option<ChaCha8Rng>,
    p: f64,
) -> (Vec<T>, DecLayerTape<T>) {
    let d = layer.self_attn_norm.gain.numel();
    let rows = x.len() / d;
    let (mut a, self_attn) = attention_forward(&layer.self_attn, heads, &x, &x, self_seg, true, dynr(rng), p);
    let self_drop = dropout_mask(dynr(rng), a.len(), p);
    apply_mask(&mut a, self_drop.as_ref());
    add_into(&mut a, &x);
    let (x1, norm1) = layer_norm_forward(&layer.self_attn_norm, &a, d);
    let (mut c, cross) = attention_forward(&layer.cross_attn, heads, &x1, memory, cross_seg, false, dynr(rng), p);
    let cross_drop = dropout_mask(dynr(rng), c.len(), p);
    apply_mask(&mut c, cross_drop.as_ref());
    add_into(&mut c, &x1);
    let (x2, norm2) = layer_norm_forward(&layer.cross_attn_norm, &c, d);
    let (mut f, ff) = feed_forward_forward(&layer.ff, &x2, rows, dynr(rng), p);
    let ff_drop = dropout_mask(dynr(rng), f.len(), p);
    apply_mask(&mut f, ff_drop.as_ref());
    add_into(&mut f, &x2);
    let (out, norm3) = layer_norm_forward(&layer.ff_norm, &f, d);
    (out, DecLayerTape { x, self_attn, self_drop, norm1, x1, cross, cross_drop, norm2, x2, ff, ff_drop, norm3 })
}

/// Returns `(dL/dx, dL/dmemory)`.
#[allow(clippy::too_many_arguments)]
fn dec_layer_backward<T: Float>(
    layer: &DecoderLayer<T>,
    grad: &mut DecoderLayer<T>,
    heads: usize,
    t: &DecLayerTape<T>,
    memory: &[T],
    self_seg: Segments<'_>,
    cross_seg: Segments<'_>,
    dout: &[T],
) -> (Vec<T>, Vec<T>) {
    let rows = t.norm1.rstd.len();
    let mut dx2 = layer_norm_backward(&layer.ff_norm, &mut grad.ff_norm, &t.norm3, dout);
    let df = masked(&dx2, t.ff_drop.as_ref());
    add_into(&mut dx2, &feed_forward_backward(&layer.ff, &mut grad.ff, &t.ff, &t.x2, &df, rows));
    let mut dx1 = layer_norm_backward(&layer.cross_attn_norm, &mut grad.cross_attn_norm, &t.norm2, &dx2);
    let dc = masked(&dx1, t.cross_drop.as_ref());
    let (dq, dmem) = attention_backward(&layer.cross_attn, &mut grad.cross_attn, heads, &t.cross, &t.x1, memory, cross_seg, false, &dc);
    add_into(&mut dx1, &dq);
    let mut dx = layer_norm_backward(&layer.self_attn_norm, &mut grad.self_attn_norm, &t.norm1, &dx1);
    let da = masked(&dx, t.self_drop.as_ref());
    let (dq, dkv) = attention_backward(&layer.self_attn, &mut grad.self_attn, heads, &t.self_attn, &t.x, &t.x, self_seg, true, &da);
    add_into(&mut dx, &dq);
    add_into(&mut dx, &dkv);
    (dx, dmem)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    /// `[max_positions, d_model]` sinusoid table.
    pub(crate) pe: Vec<T>,
}

impl<T: Float> Model<T> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[seed::tag("init")]);
        let params = ModelParams::init(&config, PAD as usize, &mut rng);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::<T>::init(&config, PAD as usize, &mut seed::rng(0, &[]));
        let shapes = |p: &ModelParams<T>| p.named().into_iter().map(|(n, t)| (n, t.shape.clone())).collect::<Vec<_>>();
        if shapes(&expected) != shapes(&params) {
            return Err(ModelError::InvalidConfig("parameter shapes do not match the config".into()));
        }
        let mut pe = Vec::with_capacity(config.max_positions * config.d_model);
        for pos in 0..config.max_positions {
            let row = positional_encoding(pos, config.d_model, config.max_positions)?;
            pe.extend(row.into_iter().map(T::from_f64_lossy));
        }
        Ok(Model { config, params, pe })
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            pe: self.pe.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab_size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn check_offsets(&self, offsets: &[usize]) -> Result<()> {
        for w in offsets.windows(2) {
            let len = w[1] - w[0];
            if len == 0 {
                return Err(ModelError::EmptyInput);
            }
            if len > self.config.max_positions {
                return Err(ModelError::TooLong { len, max_positions: self.config.max_positions });
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() || batch.tgt_offsets.len() != batch.src_offsets.len() {
            return Err(ModelError::EmptyInput);
        }
        self.check_offsets(&batch.src_offsets)?;
        self.check_offsets(&batch.tgt_offsets)?;
        self.check_ids(&batch.src)?;
        self.check_ids(&batch.tgt_in)?;
        self.check_ids(&batch.gold)
    }

    /// `table[id] · sqrt(d) + pe[position]` for every row.
    pub(crate) fn embed(&self, table: &Tensor<T>, ids: &[u32], offsets: &[usize]) -> Vec<T> {
        let d = self.config.d_model;
        let scale = T::from_usize(d).expect("width").sqrt();
        let mut x = vec![T::zero(); ids.len() * d];
        for w in offsets.windows(2) {
            for (pos, r) in (w[0]..w[1]).enumerate() {
                let id = ids[r] as usize;
                let (e, pe) = (&table.data[id * d..(id + 1) * d], &self.pe[pos * d..(pos + 1) * d]);
                for (o, (&a, &b)) in x[r * d..(r + 1) * d].iter_mut().zip(e.iter().zip(pe)) {
                    *o = a * scale + b;
                }
            }
        }
        x
    }

    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<Tape<T>> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let p = cfg.dropout;
        let mut rng = match mode {
            Mode::Train { seed: s } if p > 0.0 => Some(seed::rng(s, &[seed::tag("dropout")])),
            _ => None,
        };
        let enc_seg = Segments { query: &batch.src_offsets, key: &batch.src_offsets };
        let self_seg = Segments { query: &batch.tgt_offsets, key: &batch.tgt_offsets };
        let cross_seg = Segments { query: &batch.tgt_offsets, key: &batch.src_offsets };

        let mut x = self.embed(&self.params.src_embed, &batch.src, &batch.src_offsets);
        let src_drop = dropout_mask(dynr(&mut rng), x.len(), p);
        apply_mask(&mut x, src_drop.as_ref());
        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for layer in &self.params.encoder {
            let (out, t) = enc_layer_forward(layer, cfg.heads, x, enc_seg, &mut rng, p);
            enc.push(t);
            x = out;
        }
        let memory = x;

        let mut y = self.embed(&self.params.tgt_embed, &batch.tgt_in, &batch.tgt_offsets);
        let tgt_drop = dropout_mask(dynr(&mut rng), y.len(), p);
        apply_mask(&mut y, tgt_drop.as_ref());
        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for layer in &self.params.decoder {
            let (out, t) = dec_layer_forward(layer, cfg.heads, y, &memory, self_seg, cross_seg, &mut rng, p);
            dec.push(t);
            y = out;
        }
        let mut log_probs = linear_forward(&self.params.out_proj, &y, batch.tgt_in.len());
        if !log_softmax_rows(&mut log_probs, cfg.vocab_size) {
            return Err(ModelError::NonFinite("log_probs".into()));
        }
        Ok(Tape { log_probs, memory, src_drop, tgt_drop, enc, dec, dec_out: y })
    }

    /// Mean token NLL and the number of scored tokens.
    pub fn loss(&self, batch: &Batch, mode: Mode) -> Result<(f64, usize)> {
        let tape = self.forward(batch, mode)?;
        cross_entropy(&tape.log_probs, self.config.vocab_size, &batch.gold, PAD)
    }

    /// Gradient of the mean token NLL for the forward pass recorded in `tape`.
    pub fn backward(&self, batch: &Batch, tape: &Tape<T>) -> Result<ModelParams<T>> {
        let cfg = &self.config;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let count = batch.gold.iter().filter(|&&g| g != PAD).count();
        if count == 0 {
            return Err(ModelError::AllPad);
        }
        let inv = T::one() / T::from_usize(count).expect("count");
        let mut g = self.params.zeros_like();

        let mut dlogits = vec![T::zero(); tape.log_probs.len()];
        for (r, &gold) in batch.gold.iter().enumerate() {
            if gold == PAD {
                continue;
            }
            let row = &mut dlogits[r * v..(r + 1) * v];
            for (o, &lp) in row.iter_mut().zip(&tape.log_probs[r * v..(r + 1) * v]) {
                *o = lp.exp() * inv;
            }
            row[gold as usize] -= inv;
        }
        let nt = batch.tgt_in.len();
        let mut dy = linear_backward(&self.params.out_proj, &mut g.out_proj, &tape.dec_out, &dlogits, nt, true)
            .expect("dx requested");

        let enc_seg = Segments { query: &batch.src_offsets, key: &batch.src_offsets };
        let self_seg = Segments { query: &batch.tgt_offsets, key: &batch.tgt_offsets };
        let cross_seg = Segments { query: &batch.tgt_offsets, key: &batch.src_offsets };
        let mut dmem = vec![T::zero(); batch.src.len() * d];
        for ((layer, gl), t) in self.params.decoder.iter().zip(g.decoder.iter_mut()).zip(&tape.dec).rev() {
            let (dx, dm) = dec_layer_backward(layer, gl, cfg.heads, t, &tape.memory, self_seg, cross_seg, &dy);
            dy = dx;
            add_into(&mut dmem, &dm);
        }
        self.embed_backward(&mut g.tgt_embed, &batch.tgt_in, dy, tape.tgt_drop.as_ref());

        let mut dx = dmem;
        for ((layer, gl), t) in self.params.encoder.iter().zip(g.encoder.iter_mut()).zip(&tape.enc).rev() {
            dx = enc_layer_backward(layer, gl, cfg.heads, t, enc_seg, &dx);
        }
        self.embed_backward(&mut g.src_embed, &batch.src, dx, tape.src_drop.as_ref());

        for (name, t) in g.named() {
            if !t.is_finite() {
                return Err(ModelError::NonFinite(format!("grad {name}")));
            }
        }
        Ok(g)
    }

    fn embed_backward(&self, grad: &mut Tensor<T>, ids: &[u32], mut dx: Vec<T>, mask: Option<&Vec<T>>) {
        let d = self.config.d_model;
        let scale = T::from_usize(d).expect("width").sqrt();
        apply_mask(&mut dx, mask);
        for (r, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for (o, &v) in grad.data[id * d..(id + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *o += v * scale;
            }
        }
    }

    /// Loss, token count and gradient in one call.
    pub fn loss_and_grad(&self, batch: &Batch, mode: Mode) -> Result<(f64, usize, ModelParams<T>)> {
        let tape = self.forward(batch, mode)?;
        let (loss, n) = cross_entropy(&tape.log_probs, self.config.vocab_size, &batch.gold, PAD)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFinite("loss".into()));
        }
        let grad = self.backward(batch, &tape)?;
        Ok((loss, n, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_batch(rng: &mut impl Rng, vocab: u32, n: usize) -> Batch {
        let mut pairs = Vec::new();
        for _ in 0..n {
            let sl = rng.random_range(1..6);
            let tl = rng.random_range(0..5);
            let src = (0..sl).map(|_| rng.random_range(3..vocab)).collect();
            let tgt = (0..tl).map(|_| rng.random_range(3..vocab)).collect();
            pairs.push(EncodedPair::new(src, tgt));
        }
        Batch::teacher_forced(&pairs)
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(0, 6, 10).unwrap();
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe = positional_encoding(1, 6, 10).unwrap();
        assert_eq!(pe[0], 1f64.sin());
        assert_eq!(pe[1], 1f64.cos());
        assert!((pe[2] - (1.0 / 10000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-15);
        for pos in 0..10 {
            assert!(positional_encoding(pos, 6, 10).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(matches!(positional_encoding(10, 6, 10), Err(ModelError::TooLong { max_positions: 10, .. })));
    }

    #[test]
    fn loss_examples() {
        let v = 5;
        let uniform = vec![-(v as f64).ln(); 3 * v];
        let (l, n) = cross_entropy(&uniform, v, &[3, 4, 1], PAD).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        assert_eq!(n, 3);
        let one_hot = [0.0, f64::NEG_INFINITY];
        assert_eq!(cross_entropy(&one_hot, 2, &[0], 9).unwrap().0, 0.0);
        // pad excluded from both sum and count
        let rows = [0.75f64.ln(), 0.25f64.ln(), 0.5f64.ln(), 0.5f64.ln()];
        let (l, n) = cross_entropy(&rows, 2, &[1, 0], 0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(n, 1);
        assert!(matches!(cross_entropy(&rows, 2, &[0, 0], 0), Err(ModelError::AllPad)));
    }

    #[test]
    fn outputs_are_distributions_and_deterministic() {
        let model = Model::<f32>::new(ModelConfig { dropout: 0.3, ..ModelConfig::tiny(9) }, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let batch = tiny_batch(&mut rng, 9, 4);
        for mode in [Mode::Eval, Mode::Train { seed: 5 }] {
            let a = model.forward(&batch, mode).unwrap();
            let b = model.forward(&batch, mode).unwrap();
            assert_eq!(a.log_probs, b.log_probs);
            for row in a.log_probs.chunks(9) {
                let s: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let eval = model.forward(&batch, Mode::Eval).unwrap().log_probs;
        let train = model.forward(&batch, Mode::Train { seed: 5 }).unwrap().log_probs;
        assert_ne!(eval, train);
    }

    #[test]
    fn decoder_is_causal() {
        let model = Model::<f64>::new(ModelConfig::tiny(9), 2).unwrap();
        let src = [4, 5, 6, EOS];
        let mut a = Batch::default();
        a.push(&src, &[BOS, 3, 4, 5, 6], &[3, 4, 5, 6, EOS]);
        let mut b = Batch::default();
        b.push(&src, &[BOS, 3, 8, 7, 7], &[3, 8, 7, 7, EOS]);
        let la = model.forward(&a, Mode::Eval).unwrap().log_probs;
        let lb = model.forward(&b, Mode::Eval).unwrap().log_probs;
        assert_eq!(la[..2 * 9], lb[..2 * 9]);
        assert_ne!(la[2 * 9..3 * 9], lb[2 * 9..3 * 9]);
    }

    #[test]
    fn batching_matches_single_examples() {
        let model = Model::<f64>::new(ModelConfig::tiny(9), 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let batch = tiny_batch(&mut rng, 9, 3);
        let joint = model.forward(&batch, Mode::Eval).unwrap().log_probs;
        let mut rows = Vec::new();
        for b in 0..batch.len() {
            let mut one = Batch::default();
            let (s, t) = (batch.src_offsets[b]..batch.src_offsets[b + 1], batch.tgt_offsets[b]..batch.tgt_offsets[b + 1]);
            one.push(&batch.src[s], &batch.tgt_in[t.clone()], &batch.gold[t]);
            rows.extend(model.forward(&one, Mode::Eval).unwrap().log_probs);
        }
        for (a, b) in joint.iter().zip(&rows) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant_without_positions() {
        let mut model = Model::<f64>::new(ModelConfig::tiny(9), 5).unwrap();
        model.pe.iter_mut().for_each(|v| *v = 0.0);
        let encode = |src: &[u32]| {
            let mut b = Batch::default();
            b.push(src, &[BOS], &[EOS]);
            model.forward(&b, Mode::Eval).unwrap().memory
        };
        let src = [3, 4, 5, 6, 7];
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<u32> = perm.iter().map(|&i| src[i]).collect();
        let (m, mp) = (encode(&src), encode(&permuted));
        let d = model.config.d_model;
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..d {
                assert!((mp[k * d + j] - m[i * d + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let model = Model::<f32>::new(ModelConfig { max_positions: 4, ..ModelConfig::tiny(6) }, 0).unwrap();
        let mut b = Batch::default();
        b.push(&[3, 4, 5, 3, EOS], &[BOS], &[EOS]);
        let err = model.forward(&b, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("max_positions=4"), "{err}");
        let mut b = Batch::default();
        b.push(&[7, EOS], &[BOS], &[EOS]);
        assert!(matches!(model.forward(&b, Mode::Eval), Err(ModelError::TokenOutOfRange { id: 7, .. })));
        assert!(matches!(model.forward(&Batch::default(), Mode::Eval), Err(ModelError::EmptyInput)));
    }

    /// Central differences over every coordinate, in double precision.
    fn check_gradients(model: &Model<f64>, batch: &Batch, mode: Mode) -> (usize, usize) {
        let (loss, _, grad) = model.loss_and_grad(batch, mode).unwrap();
        let h = 1e-5;
        let (mut passed, mut total) = (0, 0);
        let mut probe = model.clone();
        let names: Vec<(String, usize)> = model.params.named().iter().map(|(n, t)| (n.clone(), t.numel())).collect();
        let grads = grad.named();
        for (ti, (name, len)) in names.iter().enumerate() {
            for i in 0..*len {
                let orig = probe.params.named()[ti].1.data[i];
                let set = |m: &mut Model<f64>, v: f64| m.params.named_mut()[ti].1.data[i] = v;
                set(&mut probe, orig + h);
                let up = probe.loss(batch, mode).unwrap().0;
                set(&mut probe, orig - h);
                let down = probe.loss(batch, mode).unwrap().0;
                set(&mut probe, orig);
                let fd = (up - down) / (2.0 * h);
                let an = grads[ti].1.data[i];
                total += 1;
                if (an - fd).abs() / fd.abs().max(1.0) < 1e-4 {
                    passed += 1;
                } else {
                    eprintln!("{name}[{i}]: analytic {an} vs numeric {fd}");
                }
            }
        }
        assert_eq!(model.loss(batch, mode).unwrap().0, loss, "gradient computation must not mutate");
        (passed, total)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig { enc_layers: 2, dec_layers: 2, ..ModelConfig::tiny(7) };
        let model = Model::<f64>::new(cfg, 11).unwrap();
        assert!(model.params.num_params() <= 5000, "{}", model.params.num_params());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let batch = tiny_batch(&mut rng, 7, 3);
        let (passed, total) = check_gradients(&model, &batch, Mode::Eval);
        assert_eq!(passed, total);
        let grad = model.loss_and_grad(&batch, Mode::Eval).unwrap().2;
        let names = |p: &ModelParams<f64>| p.named().into_iter().map(|(n, t)| (n, t.shape.clone())).collect::<Vec<_>>();
        assert_eq!(names(&grad), names(&model.params));
    }

    #[test]
    fn gradients_match_with_fixed_dropout_masks() {
        let cfg = ModelConfig { dropout: 0.3, ..ModelConfig::tiny(6) };
        let model = Model::<f64>::new(cfg, 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let batch = tiny_batch(&mut rng, 6, 2);
        let (passed, total) = check_gradients(&model, &batch, Mode::Train { seed: 99 });
        assert_eq!(passed, total);
    }
}
