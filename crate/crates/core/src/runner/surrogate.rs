//! Synthetic stand-in for a translation corpus.
//!
//! Source sentences are clauses of words `s0..s{n-1}`, each clause closed by
//! `,` (or `.` with probability `period_rate`) and the sentence by `.`. The target maps every word through a fixed
//! random lexicon (some words become two target tokens) and reverses the word
//! order inside each clause, keeping the punctuation in place. So the task is
//! string reversal recast as translation, with lexical lookup and source and
//! target lengths that differ.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{ParallelPair, Side};
use crate::seed;
use crate::BucketRange;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub words: usize,
    /// Upper bound on words per sentence (punctuation comes on top).
    pub max_words: usize,
    pub clause_max: usize,
    /// Probability that a lexicon entry has two target tokens.
    pub expand: f64,
    /// Probability that a clause inside a sentence ends with `.` instead of `,`.
    pub period_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    entries: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn new(cfg: &SurrogateConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[seed::tag("lexicon")]);
        let mut perm: Vec<usize> = (0..cfg.words).collect();
        perm.shuffle(&mut rng);
        let entries = perm
            .into_iter()
            .map(|t| {
                if rng.random_bool(cfg.expand) {
                    vec![format!("t{t}"), format!("u{}", rng.random_range(0..cfg.words))]
                } else {
                    vec![format!("t{t}")]
                }
            })
            .collect();
        Lexicon { entries }
    }

    /// Translates a source sentence; tokens outside the lexicon pass through.
    pub fn translate(&self, src: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        let mut clause: Vec<&String> = Vec::new();
        let flush = |clause: &mut Vec<&String>, out: &mut Vec<String>| {
            for w in clause.drain(..).rev() {
                match w.strip_prefix('s').and_then(|i| i.parse::<usize>().ok()).and_then(|i| self.entries.get(i)) {
                    Some(t) => out.extend(t.iter().cloned()),
                    None => out.push(w.clone()),
                }
            }
        };
        for tok in src {
            if tok == "," || tok == "." {
                flush(&mut clause, &mut out);
                out.push(tok.clone());
            } else {
                clause.push(tok);
            }
        }
        flush(&mut clause, &mut out);
        out
    }
}

fn sentence(cfg: &SurrogateConfig, rng: &mut impl Rng) -> Vec<String> {
    let n = rng.random_range(1..=cfg.max_words);
    let mut out = Vec::with_capacity(n + n / 2 + 1);
    let mut left = n;
    while left > 0 {
        let k = rng.random_range(1..=cfg.clause_max.min(left));
        for _ in 0..k {
            out.push(format!("s{}", rng.random_range(0..cfg.words)));
        }
        left -= k;
        let stop = left == 0 || cfg.period_rate > 0.0 && rng.random_bool(cfg.period_rate);
        out.push(if stop { "." } else { "," }.to_string());
    }
    out
}

/// Draws distinct sentences until every bucket holds `quota` pairs, bucketing
/// by the `side` length. Sentences in `exclude` (by source) are never drawn, and
/// drawn ones are added to it. Buckets no sentence can reach stay short; the
/// loop gives up after `100 · total quota` consecutive draws without progress.
pub fn sample_buckets(
    cfg: &SurrogateConfig,
    lexicon: &Lexicon,
    buckets: &[BucketRange],
    side: Side,
    quota: usize,
    exclude: &mut HashSet<Vec<String>>,
    seed: u64,
    stream: &str,
) -> Vec<Vec<ParallelPair>> {
    let mut rng = seed::rng(seed, &[seed::tag("surrogate"), seed::tag(stream)]);
    let mut out: Vec<Vec<ParallelPair>> = vec![Vec::new(); buckets.len()];
    let limit = 100 * (quota * buckets.len()).max(1);
    let mut idle = 0;
    while out.iter().any(|b| b.len() < quota) && idle < limit {
        idle += 1;
        let src = sentence(cfg, &mut rng);
        let tgt = lexicon.translate(&src);
        let len = if side == Side::Source { src.len() } else { tgt.len() };
        let Some(b) = buckets.iter().position(|r| r.contains(len)) else { continue };
        if out[b].len() >= quota || exclude.contains(&src) {
            continue;
        }
        exclude.insert(src.clone());
        out[b].push(ParallelPair::new(src, tgt).expect("sentences are non-empty"));
        idle = 0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SurrogateConfig {
        SurrogateConfig { words: 10, max_words: 30, clause_max: 4, expand: 0.3, period_rate: 0.0 }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn clause_local_reversal() {
        let lex = Lexicon { entries: (0..4).map(|i| vec![format!("t{i}")]).collect() };
        assert_eq!(lex.translate(&toks("s0 s1 s2 , s3 .")), toks("t2 t1 t0 , t3 ."));
        let lex = Lexicon { entries: vec![vec!["a".into(), "b".into()], vec!["c".into()]] };
        assert_eq!(lex.translate(&toks("s0 s1 .")), toks("c a b ."));
    }

    #[test]
    fn buckets_fill_disjointly() {
        let c = cfg();
        let lex = Lexicon::new(&c, 3);
        let buckets = [BucketRange::new(1, 10).unwrap(), BucketRange::new(11, 20).unwrap()];
        let mut seen = HashSet::new();
        let train = sample_buckets(&c, &lex, &buckets, Side::Target, 50, &mut seen, 1, "train");
        let test = sample_buckets(&c, &lex, &buckets, Side::Target, 20, &mut seen, 1, "test");
        for (b, range) in train.iter().zip(&buckets) {
            assert_eq!(b.len(), 50);
            assert!(b.iter().all(|p| range.contains(p.tgt_len())));
        }
        let train_src: HashSet<_> = train.iter().flatten().map(|p| p.src().to_vec()).collect();
        assert!(test.iter().flatten().all(|p| !train_src.contains(p.src())));
        assert_eq!(train, sample_buckets(&c, &lex, &buckets, Side::Target, 50, &mut HashSet::new(), 1, "train"));
    }

    #[test]
    fn period_rate_sets_inner_stops() {
        let mut rng = seed::rng(2, &[]);
        for (rate, inner) in [(0.0, ","), (1.0, ".")] {
            let c = SurrogateConfig { period_rate: rate, ..cfg() };
            for _ in 0..50 {
                let s = sentence(&c, &mut rng);
                assert_eq!(s.last().map(String::as_str), Some("."));
                let n = s.len();
                assert!(s[..n - 1].iter().filter(|t| *t == "," || *t == ".").all(|t| t == inner));
            }
        }
    }

    #[test]
    fn unreachable_bucket_gives_up() {
        let c = SurrogateConfig { max_words: 3, ..cfg() };
        let lex = Lexicon::new(&c, 3);
        let out = sample_buckets(&c, &lex, &[BucketRange::new(50, 60).unwrap()], Side::Source, 5, &mut HashSet::new(), 1, "x");
        assert!(out[0].is_empty());
    }
}
