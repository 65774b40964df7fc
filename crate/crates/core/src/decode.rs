//! Greedy decoding and length-penalized beam search.
//!
//! Both searches work on anything implementing [`StepModel`], so the
//! Transformer and small hand-built models share one implementation.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::vocab::{BOS, EOS};
use crate::model::{DecoderState, EncodedSource, Model, ModelError};

/// An autoregressive next-token distribution.
pub trait StepModel {
    type State: Clone;
    fn eos(&self) -> u32;
    /// State after consuming the start symbol.
    fn initial(&self) -> Self::State;
    /// Log-probabilities of every token, given the tokens consumed so far.
    fn next_log_probs(&self, state: &Self::State) -> Vec<f64>;
    fn extend(&self, state: &Self::State, token: u32) -> Self::State;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without the final eos.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    /// Ended with eos rather than running into the length limit.
    pub finished: bool,
}

/// `log_prob / len^alpha`, with `len` clamped to at least 1.
pub fn length_penalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    /// Output length limit is `a · src_len + b` (source tokens without eos).
    pub max_len_a: f64,
    pub max_len_b: usize,
    /// Whether the final eos counts toward the penalized length.
    pub count_eos: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 4, alpha: 0.6, max_len_a: 2.0, max_len_b: 10, count_eos: true }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beam_size == 0 {
            return Err("beam_size must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err("length penalty must be finite and non-negative".into());
        }
        if !(self.max_len_a >= 0.0) || self.max_len_a == 0.0 && self.max_len_b == 0 {
            return Err("max_len must be at least 1".into());
        }
        Ok(())
    }

    pub fn max_len(&self, src_len: usize, cap: usize) -> usize {
        let raw = (self.max_len_a * src_len as f64).floor() as usize + self.max_len_b;
        raw.min(cap).max(1)
    }

    fn scored_len(&self, generated: usize, finished: bool) -> usize {
        generated + usize::from(finished && self.count_eos)
    }
}

/// Argmax at every step (lowest id on ties) until eos or `max_len` tokens.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Hypothesis {
    let eos = model.eos();
    let mut state = model.initial();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for step in 1..=max_len {
        let lp = model.next_log_probs(&state);
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        log_prob += lp[best];
        if best as u32 == eos {
            return Hypothesis { tokens, log_prob, score: log_prob, finished: true };
        }
        tokens.push(best as u32);
        if step < max_len {
            state = model.extend(&state, best as u32);
        }
    }
    Hypothesis { tokens, log_prob, score: log_prob, finished: false }
}

struct Live<S> {
    tokens: Vec<u32>,
    log_prob: f64,
    state: S,
}

/// Beam search with `score = logprob / len^alpha`.
///
/// Every step ranks all one-token extensions of the live hypotheses by
/// accumulated log-probability (ties: earlier parent, then lower token id).
/// An eos among the top `beam_size` candidates finishes that hypothesis; the
/// best `beam_size` non-eos candidates stay live. The search stops once no
/// live hypothesis can beat the best finished score, or after `max_len`
/// steps, in which case the best live hypothesis is the fallback when nothing
/// has finished.
pub fn beam_decode<M: StepModel>(model: &M, cfg: &BeamConfig, max_len: usize) -> Hypothesis {
    let eos = model.eos();
    let k = cfg.beam_size.max(1);
    let mut live = vec![Live { tokens: Vec::new(), log_prob: 0.0, state: model.initial() }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    // longest length any hypothesis can still be scored with
    let longest = cfg.scored_len(max_len - 1, true).max(1);

    for step in 1..=max_len {
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * 8);
        for (i, h) in live.iter().enumerate() {
            for (tok, &lp) in model.next_log_probs(&h.state).iter().enumerate() {
                cands.push((h.log_prob + lp, i, tok as u32));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut next: Vec<(f64, usize, u32)> = Vec::with_capacity(k);
        for (rank, &(lp, parent, tok)) in cands.iter().enumerate() {
            if tok == eos {
                if rank < k {
                    let tokens = live[parent].tokens.clone();
                    let score = length_penalized(lp, cfg.scored_len(tokens.len(), true), cfg.alpha);
                    finished.push(Hypothesis { tokens, log_prob: lp, score, finished: true });
                }
            } else if next.len() < k {
                next.push((lp, parent, tok));
            }
            if next.len() == k && rank + 1 >= k {
                break;
            }
        }
        if next.is_empty() {
            live.clear();
            break;
        }
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let bound = length_penalized(next[0].0, longest, cfg.alpha);
        let done = step == max_len || best_finished >= bound;
        live = next
            .into_iter()
            .map(|(lp, parent, tok)| {
                let p = &live[parent];
                let mut tokens = p.tokens.clone();
                tokens.push(tok);
                let state = if done { p.state.clone() } else { model.extend(&p.state, tok) };
                Live { tokens, log_prob: lp, state }
            })
            .collect();
        if done {
            break;
        }
    }

    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.score.total_cmp(&b.score) == Ordering::Greater) {
            best = Some(h);
        }
    }
    best.unwrap_or_else(|| {
        let h = &live[0];
        let score = length_penalized(h.log_prob, cfg.scored_len(h.tokens.len(), false), cfg.alpha);
        Hypothesis { tokens: h.tokens.clone(), log_prob: h.log_prob, score, finished: false }
    })
}

/// A trained model conditioned on one encoded source sentence.
pub struct TransformerScorer<'m> {
    model: &'m Model<f32>,
    src: EncodedSource<f32>,
}

#[derive(Clone)]
pub struct ScorerState {
    dec: DecoderState<f32>,
    log_probs: Vec<f64>,
}

impl<'m> TransformerScorer<'m> {
    pub fn new(model: &'m Model<f32>, src: &[u32]) -> Result<Self, ModelError> {
        Ok(TransformerScorer { model, src: model.encode(src)? })
    }

    fn step(&self, dec: &DecoderState<f32>, token: u32) -> ScorerState {
        let mut dec = dec.clone();
        let lp = self
            .model
            .decode_step(&self.src, &mut dec, token)
            .expect("decoding stays within max_positions and the vocabulary");
        ScorerState { dec, log_probs: lp.into_iter().map(f64::from).collect() }
    }
}

impl StepModel for TransformerScorer<'_> {
    type State = ScorerState;

    fn eos(&self) -> u32 {
        EOS
    }

    fn initial(&self) -> ScorerState {
        self.step(&self.model.start_decoder(), BOS)
    }

    fn next_log_probs(&self, state: &ScorerState) -> Vec<f64> {
        state.log_probs.clone()
    }

    fn extend(&self, state: &ScorerState, token: u32) -> ScorerState {
        self.step(&state.dec, token)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    Greedy,
    Beam(BeamConfig),
}

impl Strategy {
    fn limits(&self) -> (f64, usize) {
        match self {
            Strategy::Greedy => {
                let d = BeamConfig::default();
                (d.max_len_a, d.max_len_b)
            }
            Strategy::Beam(c) => (c.max_len_a, c.max_len_b),
        }
    }
}

/// Decodes one source sentence (ids ending in eos).
pub fn translate(model: &Model<f32>, src: &[u32], strategy: &Strategy) -> Result<Hypothesis, ModelError> {
    let scorer = TransformerScorer::new(model, src)?;
    let src_len = src.len() - usize::from(src.last() == Some(&EOS));
    let (a, b) = strategy.limits();
    let limits = BeamConfig { max_len_a: a, max_len_b: b, ..BeamConfig::default() };
    let max_len = limits.max_len(src_len, model.config.max_positions);
    Ok(match strategy {
        Strategy::Greedy => greedy_decode(&scorer, max_len),
        Strategy::Beam(cfg) => beam_decode(&scorer, cfg, max_len),
    })
}

/// Decodes many sentences in parallel; output order follows input order.
pub fn translate_all(model: &Model<f32>, srcs: &[Vec<u32>], strategy: &Strategy) -> Result<Vec<Hypothesis>, ModelError> {
    srcs.par_iter().map(|s| translate(model, s, strategy)).collect()
}

/// Small hand-built models for tests and the acceptance oracle.
pub mod toy {
    use super::StepModel;
    use crate::seed;

    /// Next-token distribution is a fixed pseudo-random function of the prefix.
    #[derive(Clone, Debug)]
    pub struct RandomToy {
        pub vocab: usize,
        pub eos: u32,
        pub seed: u64,
    }

    impl RandomToy {
        pub fn log_probs(&self, prefix: &[u32]) -> Vec<f64> {
            let mut path = vec![prefix.len() as u64];
            path.extend(prefix.iter().map(|&t| t as u64));
            let h = seed::derive(self.seed, &path);
            let logits: Vec<f64> = (0..self.vocab)
                .map(|i| (seed::derive(h, &[i as u64]) >> 11) as f64 / (1u64 << 53) as f64 * 4.0)
                .collect();
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            logits.into_iter().map(|v| v - lse).collect()
        }
    }

    impl StepModel for RandomToy {
        type State = Vec<u32>;

        fn eos(&self) -> u32 {
            self.eos
        }

        fn initial(&self) -> Vec<u32> {
            Vec::new()
        }

        fn next_log_probs(&self, state: &Vec<u32>) -> Vec<f64> {
            self.log_probs(state)
        }

        fn extend(&self, state: &Vec<u32>, token: u32) -> Vec<u32> {
            let mut s = state.clone();
            s.push(token);
            s
        }
    }

    /// Explicit table: the distribution at step `t` is `steps[min(t, last)]`.
    #[derive(Clone, Debug)]
    pub struct TableToy {
        pub eos: u32,
        pub steps: Vec<Vec<f64>>,
    }

    impl StepModel for TableToy {
        type State = usize;

        fn eos(&self) -> u32 {
            self.eos
        }

        fn initial(&self) -> usize {
            0
        }

        fn next_log_probs(&self, t: &usize) -> Vec<f64> {
            self.steps[(*t).min(self.steps.len() - 1)].iter().map(|p| p.ln()).collect()
        }

        fn extend(&self, t: &usize, _token: u32) -> usize {
            t + 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::toy::{RandomToy, TableToy};
    use super::*;

    /// Scores every eos-terminated sequence of length ≤ max_len.
    fn exhaustive(m: &RandomToy, max_len: usize, alpha: f64, count_eos: bool) -> (Vec<u32>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(Vec::<u32>::new(), 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let dist = m.log_probs(&prefix);
            let total = lp + dist[m.eos as usize];
            let len = prefix.len() + usize::from(count_eos);
            let score = length_penalized(total, len, alpha);
            if score > best.1 {
                best = (prefix.clone(), score);
            }
            if prefix.len() + 1 < max_len {
                for t in 0..m.vocab as u32 {
                    if t != m.eos {
                        let mut p = prefix.clone();
                        p.push(t);
                        stack.push((p, lp + dist[t as usize]));
                    }
                }
            }
        }
        best
    }

    #[test]
    fn greedy_follows_argmax() {
        let m = TableToy { eos: 0, steps: vec![vec![0.1, 0.2, 0.7], vec![0.2, 0.5, 0.3], vec![0.9, 0.05, 0.05]] };
        let h = greedy_decode(&m, 10);
        assert_eq!(h.tokens, vec![2, 1]);
        assert!(h.finished);
        assert!((h.log_prob - (0.7f64 * 0.5 * 0.9).ln()).abs() < 1e-12);
        let capped = greedy_decode(&m, 1);
        assert_eq!(capped.tokens, vec![2]);
        assert!(!capped.finished);
    }

    #[test]
    fn greedy_ties_and_immediate_eos() {
        let one_hot = TableToy { eos: 2, steps: vec![vec![0.0, 0.0, 1.0, 0.0]] };
        assert!(greedy_decode(&one_hot, 5).tokens.is_empty());
        let tie = TableToy { eos: 0, steps: vec![vec![0.1, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.3, 0.3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]] };
        assert_eq!(greedy_decode(&tie, 5).tokens, vec![3]);
        assert_eq!(beam_decode(&tie, &BeamConfig { beam_size: 1, alpha: 0.0, ..Default::default() }, 5).tokens, vec![3]);
    }

    #[test]
    fn beam_one_is_greedy() {
        let cfg = BeamConfig { beam_size: 1, alpha: 0.0, ..Default::default() };
        for seed in 0..100 {
            let m = RandomToy { vocab: 5, eos: 0, seed };
            let g = greedy_decode(&m, 8);
            let b = beam_decode(&m, &cfg, 8);
            assert_eq!(g.tokens, b.tokens, "seed {seed}");
            assert_eq!(g.finished, b.finished);
        }
    }

    #[test]
    fn huge_beam_is_exhaustive() {
        for alpha in [0.0, 0.6, 1.0] {
            for count_eos in [true, false] {
                for seed in 0..30 {
                    let m = RandomToy { vocab: 3, eos: 1, seed };
                    let cfg = BeamConfig { beam_size: 81, alpha, count_eos, ..Default::default() };
                    let h = beam_decode(&m, &cfg, 4);
                    let (tokens, score) = exhaustive(&m, 4, alpha, count_eos);
                    assert_eq!(h.tokens, tokens, "seed {seed} alpha {alpha}");
                    assert!((h.score - score).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn length_penalty_prefers_longer_output() {
        // eos now: p=0.4 → score ln 0.4 ≈ −0.916.
        // one more token then eos: p=0.6·0.9=0.54, len 2 → ln 0.54 / 2^0.6 ≈ −0.407.
        let m = TableToy { eos: 0, steps: vec![vec![0.4, 0.6], vec![0.9, 0.1]] };
        let h = beam_decode(&m, &BeamConfig { beam_size: 2, alpha: 0.6, ..Default::default() }, 5);
        assert_eq!(h.tokens, vec![1]);
        assert!((h.score - 0.54f64.ln() / 2f64.powf(0.6)).abs() < 1e-12);

        // longer hypothesis with lower log-probability but higher penalized score
        let m = TableToy { eos: 0, steps: vec![vec![0.5, 0.5], vec![0.3, 0.7], vec![0.8, 0.2]] };
        let h = beam_decode(&m, &BeamConfig { beam_size: 2, alpha: 0.6, ..Default::default() }, 5);
        let short = 0.5f64.ln();
        assert!(h.log_prob < short, "returned hypothesis has lower log-probability");
        assert!(h.score > length_penalized(short, 1, 0.6));
        assert_eq!(h.tokens, vec![1, 1]);
        let h0 = beam_decode(&m, &BeamConfig { beam_size: 2, alpha: 0.0, ..Default::default() }, 5);
        assert!(h0.tokens.is_empty());
    }

    #[test]
    fn score_matches_recomputation() {
        for seed in 0..50 {
            let m = RandomToy { vocab: 4, eos: 3, seed };
            let cfg = BeamConfig { beam_size: 3, ..Default::default() };
            let h = beam_decode(&m, &cfg, 6);
            let mut lp = 0.0;
            for i in 0..h.tokens.len() {
                lp += m.log_probs(&h.tokens[..i])[h.tokens[i] as usize];
            }
            if h.finished {
                lp += m.log_probs(&h.tokens)[3];
            }
            assert!((lp - h.log_prob).abs() < 1e-9);
            assert!(h.log_prob <= 0.0);
            let len = h.tokens.len() + usize::from(h.finished);
            assert!((h.score - length_penalized(lp, len, 0.6)).abs() < 1e-6);
        }
    }

    #[test]
    fn max_len_rule() {
        let cfg = BeamConfig::default();
        assert_eq!(cfg.max_len(5, 256), 20);
        assert_eq!(cfg.max_len(200, 256), 256);
        assert!(BeamConfig { beam_size: 0, ..cfg.clone() }.validate().is_err());
    }

    #[test]
    fn transformer_beam_one_matches_greedy() {
        use crate::model::ModelConfig;
        let model = Model::<f32>::new(ModelConfig::tiny(8), 3).unwrap();
        let cfg = BeamConfig { beam_size: 1, alpha: 0.0, ..Default::default() };
        for s in 0..20u32 {
            let src: Vec<u32> = (0..(s % 5 + 1)).map(|i| 3 + (s * 7 + i) % 5).chain([EOS]).collect();
            let g = translate(&model, &src, &Strategy::Greedy).unwrap();
            let b = translate(&model, &src, &Strategy::Beam(cfg.clone())).unwrap();
            assert_eq!(g.tokens, b.tokens);
        }
    }
}
