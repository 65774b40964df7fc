//! One-token-at-a-time decoding with cached keys and values.

use super::float::{axpy, dot, Float};
use super::layers::{layer_norm_forward, linear_forward, log_softmax_rows};
use super::transformer::{add_into, enc_layer_forward, Model};
use super::{ModelError, Result};

/// Encoder output plus each decoder layer's projected keys/values of it.
#[derive(Clone, Debug)]
pub struct EncodedSource<T> {
    pub memory: Vec<T>,
    pub len: usize,
    cross_kv: Vec<(Vec<T>, Vec<T>)>,
}

/// Self-attention keys/values of the tokens consumed so far.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    pub position: usize,
    self_kv: Vec<(Vec<T>, Vec<T>)>,
}

/// Softmax attention of one query row over `rows` cached key/value rows.
fn attend<T: Float>(q: &[T], keys: &[T], values: &[T], heads: usize, out: &mut [T]) {
    let d = q.len();
    let dh = d / heads;
    let rows = keys.len() / d;
    let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
    let mut scores = vec![T::zero(); rows];
    out.iter_mut().for_each(|v| *v = T::zero());
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut max = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(&q[cols.clone()], &keys[j * d + cols.start..j * d + cols.end]) * scale;
            max = max.max(*s);
        }
        let mut sum = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (j, &s) in scores.iter().enumerate() {
            axpy(s / sum, &values[j * d + cols.start..j * d + cols.end], &mut out[cols.clone()]);
        }
    }
}

impl<T: Float> Model<T> {
    /// Runs the encoder over `src` (which should end in eos), eval mode.
    pub fn encode(&self, src: &[u32]) -> Result<EncodedSource<T>> {
        if src.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if src.len() > self.config.max_positions {
            return Err(ModelError::TooLong { len: src.len(), max_positions: self.config.max_positions });
        }
        if let Some(&id) = src.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        let offsets = [0, src.len()];
        let seg = super::layers::Segments { query: &offsets, key: &offsets };
        let mut x = self.embed(&self.params.src_embed, src, &offsets);
        for layer in &self.params.encoder {
            x = enc_layer_forward(layer, self.config.heads, x, seg, &mut None, 0.0).0;
        }
        let cross_kv = self
            .params
            .decoder
            .iter()
            .map(|l| (linear_forward(&l.cross_attn.key, &x, src.len()), linear_forward(&l.cross_attn.value, &x, src.len())))
            .collect();
        Ok(EncodedSource { memory: x, len: src.len(), cross_kv })
    }

    pub fn start_decoder(&self) -> DecoderState<T> {
        DecoderState { position: 0, self_kv: vec![(Vec::new(), Vec::new()); self.config.dec_layers] }
    }

    /// Feeds `token` at the next position; returns log-probabilities of the following token.
    pub fn decode_step(&self, src: &EncodedSource<T>, state: &mut DecoderState<T>, token: u32) -> Result<Vec<T>> {
        let cfg = &self.config;
        if state.position >= cfg.max_positions {
            return Err(ModelError::TooLong { len: state.position + 1, max_positions: cfg.max_positions });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: token, vocab_size: cfg.vocab_size });
        }
        let d = cfg.d_model;
        let scale = T::from_usize(d).expect("width").sqrt();
        let id = token as usize;
        let pos = state.position;
        let mut x: Vec<T> = self.params.tgt_embed.data[id * d..(id + 1) * d]
            .iter()
            .zip(&self.pe[pos * d..(pos + 1) * d])
            .map(|(&e, &p)| e * scale + p)
            .collect();
        let mut ctx = vec![T::zero(); d];
        for ((layer, (keys, values)), (ck, cv)) in self.params.decoder.iter().zip(&mut state.self_kv).zip(&src.cross_kv) {
            let q = linear_forward(&layer.self_attn.query, &x, 1);
            keys.extend(linear_forward(&layer.self_attn.key, &x, 1));
            values.extend(linear_forward(&layer.self_attn.value, &x, 1));
            attend(&q, keys, values, cfg.heads, &mut ctx);
            let mut a = linear_forward(&layer.self_attn.output, &ctx, 1);
            add_into(&mut a, &x);
            let x1 = layer_norm_forward(&layer.self_attn_norm, &a, d).0;

            let q = linear_forward(&layer.cross_attn.query, &x1, 1);
            attend(&q, ck, cv, cfg.heads, &mut ctx);
            let mut c = linear_forward(&layer.cross_attn.output, &ctx, 1);
            add_into(&mut c, &x1);
            let x2 = layer_norm_forward(&layer.cross_attn_norm, &c, d).0;

            let mut h = linear_forward(&layer.ff.inner, &x2, 1);
            h.iter_mut().for_each(|v| *v = v.max(T::zero()));
            let mut f = linear_forward(&layer.ff.outer, &h, 1);
            add_into(&mut f, &x2);
            x = layer_norm_forward(&layer.ff_norm, &f, d).0;
        }
        state.position += 1;
        let mut logits = linear_forward(&self.params.out_proj, &x, 1);
        if !log_softmax_rows(&mut logits, cfg.vocab_size) {
            return Err(ModelError::NonFinite("log_probs".into()));
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use crate::model::vocab::{BOS, EOS};
    use crate::model::{Batch, Mode, Model, ModelConfig};

    #[test]
    fn incremental_matches_teacher_forcing() {
        let cfg = ModelConfig { enc_layers: 2, dec_layers: 2, ..ModelConfig::tiny(10) };
        let model = Model::<f64>::new(cfg, 8).unwrap();
        let src = [4, 9, 5, 7, EOS];
        let tgt_in = [BOS, 6, 6, 3, 8];
        let mut b = Batch::default();
        b.push(&src, &tgt_in, &[6, 6, 3, 8, EOS]);
        let full = model.forward(&b, Mode::Eval).unwrap();
        let enc = model.encode(&src).unwrap();
        for (a, b) in enc.memory.iter().zip(&full.memory) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut state = model.start_decoder();
        for (t, &tok) in tgt_in.iter().enumerate() {
            let lp = model.decode_step(&enc, &mut state, tok).unwrap();
            for (a, b) in lp.iter().zip(&full.log_probs[t * 10..(t + 1) * 10]) {
                assert!((a - b).abs() < 1e-10, "position {t}");
            }
        }
    }
}
