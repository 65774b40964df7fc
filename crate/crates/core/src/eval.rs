//! Corpus metrics: exact-match accuracy, BLEU, hypothesis/reference length
//! ratios and percentile-bootstrap confidence intervals.
//!
//! Tokens are whitespace units throughout. Scores are internally consistent
//! across runs of this crate; they are not meant to match external scorers
//! that apply their own tokenization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::ops::AddAssign;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::seed;

pub const DEFAULT_MAX_NGRAM: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("corpus sizes differ: {hyps} hypotheses vs {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("reference line {0} is empty")]
    EmptyReference(usize),
    #[error("bootstrap needs at least 2 examples, got {0}")]
    TooFewForBootstrap(usize),
    #[error("invalid max n-gram order {0}")]
    InvalidOrder(usize),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn check_sizes<H, R>(hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(())
}

/// Fraction of examples whose hypothesis equals the reference token for token.
pub fn exact_match_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_sizes(hyps, refs)?;
    let correct = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(correct as f64 / hyps.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Smoothing {
    #[default]
    None,
    /// Zero-match orders get precision 1 / (2^k * total), k counting such orders.
    Exp,
}

/// Clipped n-gram counts of one or more sentence pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn zero(max_ngram: usize) -> Self {
        BleuStats { matches: vec![0; max_ngram], totals: vec![0; max_ngram], hyp_len: 0, ref_len: 0 }
    }

    pub fn sentence<T: Eq + Hash>(hyp: &[T], reference: &[T], max_ngram: usize) -> Self {
        let mut stats = BleuStats::zero(max_ngram);
        stats.hyp_len = hyp.len() as u64;
        stats.ref_len = reference.len() as u64;
        for n in 1..=max_ngram {
            if hyp.len() < n {
                break;
            }
            let mut ref_counts: HashMap<&[T], u64> = HashMap::new();
            if reference.len() >= n {
                for g in reference.windows(n) {
                    *ref_counts.entry(g).or_default() += 1;
                }
            }
            let mut hyp_counts: HashMap<&[T], u64> = HashMap::new();
            for g in hyp.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            stats.totals[n - 1] = (hyp.len() + 1 - n) as u64;
            stats.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    /// BLEU on the 0–100 scale.
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut zero_orders = 0i32;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            let p = if m > 0 {
                m as f64 / t as f64
            } else {
                match smoothing {
                    Smoothing::Exp if t > 0 => {
                        zero_orders += 1;
                        1.0 / (2f64.powi(zero_orders) * t as f64)
                    }
                    _ => return 0.0,
                }
            };
            log_sum += p.ln();
        }
        let order = self.matches.len() as f64;
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp();
        100.0 * bp * (log_sum / order).exp()
    }
}

impl AddAssign<&BleuStats> for BleuStats {
    fn add_assign(&mut self, rhs: &BleuStats) {
        for (a, b) in self.matches.iter_mut().zip(&rhs.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&rhs.totals) {
            *a += b;
        }
        self.hyp_len += rhs.hyp_len;
        self.ref_len += rhs.ref_len;
    }
}

fn sentence_stats<T: Eq + Hash + Sync>(hyps: &[Vec<T>], refs: &[Vec<T>], max_ngram: usize) -> Result<Vec<BleuStats>> {
    check_sizes(hyps, refs)?;
    if max_ngram == 0 {
        return Err(EvalError::InvalidOrder(max_ngram));
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| BleuStats::sentence(h, r, max_ngram))
        .collect())
}

/// Corpus BLEU with brevity penalty, on the 0–100 scale.
pub fn corpus_bleu<T: Eq + Hash + Sync>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_ngram: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    let mut total = BleuStats::zero(max_ngram.max(1));
    for s in sentence_stats(hyps, refs, max_ngram)? {
        total += &s;
    }
    Ok(total.score(smoothing))
}

/// Mean of per-example |hyp| / |ref|.
pub fn length_ratio<T>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_sizes(hyps, refs)?;
    let mut sum = 0.0;
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        if r.is_empty() {
            return Err(EvalError::EmptyReference(i));
        }
        sum += h.len() as f64 / r.len() as f64;
    }
    Ok(sum / hyps.len() as f64)
}

/// Σ|hyp| / Σ|ref| over the corpus.
pub fn corpus_length_ratio<T>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_sizes(hyps, refs)?;
    let h: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if r == 0 {
        return Err(EvalError::EmptyReference(0));
    }
    Ok(h as f64 / r as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Bleu,
    Accuracy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { resamples: 1000, level: 0.95, seed: 0 }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap: returns the full-corpus metric and half the width of
/// the central `level` interval of resampled metrics.
pub fn bootstrap_ci<T: Eq + Hash + Sync>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    metric: Metric,
    cfg: BootstrapConfig,
) -> Result<(f64, f64)> {
    check_sizes(hyps, refs)?;
    let n = hyps.len();
    if n < 2 {
        return Err(EvalError::TooFewForBootstrap(n));
    }
    // Per-example sufficient statistics make each resample O(n).
    let (point, values): (f64, Vec<f64>) = match metric {
        Metric::Accuracy => {
            let hits: Vec<bool> = hyps.iter().zip(refs).map(|(h, r)| h == r).collect();
            let point = hits.iter().filter(|&&h| h).count() as f64 / n as f64;
            let values = (0..cfg.resamples)
                .into_par_iter()
                .map(|r| {
                    let mut rng = seed::rng(cfg.seed, &[seed::tag("bootstrap"), r as u64]);
                    (0..n).filter(|_| hits[rng.random_range(0..n)]).count() as f64 / n as f64
                })
                .collect();
            (point, values)
        }
        Metric::Bleu => {
            let stats = sentence_stats(hyps, refs, DEFAULT_MAX_NGRAM)?;
            let mut total = BleuStats::zero(DEFAULT_MAX_NGRAM);
            stats.iter().for_each(|s| total += s);
            let point = total.score(Smoothing::None);
            let values = (0..cfg.resamples)
                .into_par_iter()
                .map(|r| {
                    let mut rng = seed::rng(cfg.seed, &[seed::tag("bootstrap"), r as u64]);
                    let mut acc = BleuStats::zero(DEFAULT_MAX_NGRAM);
                    for _ in 0..n {
                        acc += &stats[rng.random_range(0..n)];
                    }
                    acc.score(Smoothing::None)
                })
                .collect();
            (point, values)
        }
    };
    let mut sorted = values;
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    let halfwidth = (quantile(&sorted, 1.0 - tail) - quantile(&sorted, tail)) / 2.0;
    Ok((point, halfwidth))
}

/// Metrics of one slice of a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketRecord {
    pub bucket: String,
    pub count: usize,
    pub accuracy: f64,
    pub bleu: f64,
    pub len_ratio: f64,
    pub len_ratio_corpus: f64,
    pub ci_halfwidth: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<BucketRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub bootstrap: Option<(Metric, BootstrapConfig)>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { bootstrap: None }
    }
}

pub fn evaluate<T: Eq + Hash + Sync>(
    bucket: &str,
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    opts: &EvalOptions,
) -> Result<BucketRecord> {
    let ci_halfwidth = match opts.bootstrap {
        Some((metric, cfg)) if hyps.len() >= 2 => Some(bootstrap_ci(hyps, refs, metric, cfg)?.1),
        _ => None,
    };
    Ok(BucketRecord {
        bucket: bucket.to_string(),
        count: hyps.len(),
        accuracy: exact_match_accuracy(hyps, refs)?,
        bleu: corpus_bleu(hyps, refs, DEFAULT_MAX_NGRAM, Smoothing::None)?,
        len_ratio: length_ratio(hyps, refs)?,
        len_ratio_corpus: corpus_length_ratio(hyps, refs)?,
        ci_halfwidth,
    })
}

/// Groups examples by `keys` (e.g. a bucket label per example) and evaluates each group,
/// in ascending key order, followed by an `all` record.
pub fn evaluate_by_key<T: Eq + Hash + Sync + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    keys: &[u32],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_sizes(hyps, refs)?;
    if keys.len() != hyps.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: keys.len() });
    }
    let mut groups: std::collections::BTreeMap<u32, (Vec<Vec<T>>, Vec<Vec<T>>)> = Default::default();
    for ((h, r), &k) in hyps.iter().zip(refs).zip(keys) {
        let g = groups.entry(k).or_default();
        g.0.push(h.clone());
        g.1.push(r.clone());
    }
    let mut records = groups
        .iter()
        .map(|(k, (h, r))| evaluate(&k.to_string(), h, r, opts))
        .collect::<Result<Vec<_>>>()?;
    records.push(evaluate("all", hyps, refs, opts)?);
    Ok(EvalReport { records })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "bucket,count,accuracy,bleu,len_ratio,ci_halfwidth";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let ci = r.ci_halfwidth.map(|c| format!("{c:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.4},{:.6},{}",
                r.bucket, r.count, r.accuracy, r.bleu, r.len_ratio, ci
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| toks(l)).collect()
    }

    #[test]
    fn accuracy_cases() {
        let refs = corpus(&["a", "b", "c", "d"]);
        assert_eq!(exact_match_accuracy(&refs, &refs).unwrap(), 1.0);
        assert_eq!(exact_match_accuracy(&corpus(&["x", "y", "z", "w"]), &refs).unwrap(), 0.0);
        assert_eq!(exact_match_accuracy(&corpus(&["a", "b", "c", "x"]), &refs).unwrap(), 0.75);
        assert_eq!(
            exact_match_accuracy(&corpus(&["a"]), &refs),
            Err(EvalError::LengthMismatch { hyps: 1, refs: 4 })
        );
    }

    #[test]
    fn bleu_worked_example() {
        let b = corpus_bleu(&corpus(&["a b c d e"]), &corpus(&["a b c d e f"]), 4, Smoothing::None).unwrap();
        assert!((b - 100.0 * (-0.2f64).exp()).abs() < 1e-9, "{b}");
    }

    #[test]
    fn bleu_identity_and_zero() {
        let refs = corpus(&["the cat sat on the mat", "a b c d"]);
        assert!((corpus_bleu(&refs, &refs, 4, Smoothing::None).unwrap() - 100.0).abs() < 1e-9);
        let b = corpus_bleu(&corpus(&["a b c x d"]), &corpus(&["a b c d e"]), 4, Smoothing::None).unwrap();
        assert_eq!(b, 0.0);
        let smoothed = corpus_bleu(&corpus(&["a b c x d"]), &corpus(&["a b c d e"]), 4, Smoothing::Exp).unwrap();
        assert!(smoothed > 0.0);
        assert_eq!(
            corpus_bleu::<String>(&[], &[], 4, Smoothing::None),
            Err(EvalError::EmptyCorpus)
        );
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // 2 of the 7 unigram "the" match; bigrams never match
        let s = BleuStats::sentence(&toks("the the the the the the the"), &toks("the cat the mat"), 4);
        assert_eq!(s.matches[0], 2);
        assert_eq!(s.totals[0], 7);
        assert_eq!(s.matches[1], 0);
    }

    #[test]
    fn length_ratios() {
        let refs = corpus(&["a b", "c d"]);
        assert_eq!(length_ratio(&refs, &refs).unwrap(), 1.0);
        assert_eq!(length_ratio(&corpus(&["a b a b", "c d c d"]), &refs).unwrap(), 2.0);
        assert_eq!(length_ratio(&corpus(&["a", "c d c"]), &refs).unwrap(), 1.0);
        assert_eq!(length_ratio(&corpus(&["", "c d"]), &refs).unwrap(), 0.5);
        assert_eq!(
            length_ratio(&corpus(&["a"]), &corpus(&[""])),
            Err(EvalError::EmptyReference(0))
        );
        assert_eq!(corpus_length_ratio(&corpus(&["a", "c d c d"]), &refs).unwrap(), 1.25);
    }

    #[test]
    fn bootstrap_zero_variance() {
        let refs = corpus(&["a", "b", "c"]);
        let (p, hw) = bootstrap_ci(&refs, &refs, Metric::Accuracy, BootstrapConfig::default()).unwrap();
        assert_eq!((p, hw), (1.0, 0.0));
        assert_eq!(
            bootstrap_ci(&refs[..1], &refs[..1], Metric::Accuracy, BootstrapConfig::default()),
            Err(EvalError::TooFewForBootstrap(1))
        );
    }

    #[test]
    fn bootstrap_matches_binomial_approximation() {
        let refs: Vec<Vec<String>> = (0..1000).map(|i| vec![i.to_string()]).collect();
        let hyps: Vec<Vec<String>> = (0..1000)
            .map(|i| vec![if i % 2 == 0 { i.to_string() } else { "x".into() }])
            .collect();
        let (p, hw) = bootstrap_ci(&hyps, &refs, Metric::Accuracy, BootstrapConfig::default()).unwrap();
        assert_eq!(p, 0.5);
        let normal = 1.96 * (0.25f64 / 1000.0).sqrt();
        assert!((hw - normal).abs() < 0.01, "{hw} vs {normal}");
        let again = bootstrap_ci(&hyps, &refs, Metric::Accuracy, BootstrapConfig::default()).unwrap();
        assert_eq!((p, hw), again);
    }

    #[test]
    fn bootstrap_bleu_runs() {
        let refs = corpus(&["a b c d e", "f g h i j", "k l m n o", "p q r s t"]);
        let hyps = corpus(&["a b c d e", "f g h i x", "k l m n o", "p q r s"]);
        let (p, hw) = bootstrap_ci(&hyps, &refs, Metric::Bleu, BootstrapConfig { resamples: 200, ..Default::default() }).unwrap();
        assert!((p - corpus_bleu(&hyps, &refs, 4, Smoothing::None).unwrap()).abs() < 1e-12);
        assert!(hw >= 0.0);
    }

    #[test]
    fn report_csv_header() {
        let refs = corpus(&["a b", "c d e"]);
        let rep = evaluate_by_key(&refs, &refs, &[10, 10], &EvalOptions::default()).unwrap();
        let csv = rep.to_csv();
        assert!(csv.starts_with("bucket,count,accuracy,bleu,len_ratio,ci_halfwidth\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    fn toy_corpus() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<u8>>)> {
        prop::collection::vec(
            (prop::collection::vec(0u8..4, 1..8), prop::collection::vec(0u8..4, 1..8)),
            1..12,
        )
        .prop_map(|pairs| pairs.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn bleu_permutation_invariant((h, r) in toy_corpus(), rot in 0usize..12) {
            let k = rot % h.len();
            let mut h2 = h.clone();
            let mut r2 = r.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let a = corpus_bleu(&h, &r, 4, Smoothing::None).unwrap();
            let b = corpus_bleu(&h2, &r2, 4, Smoothing::None).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn bleu_is_100_only_on_identity((h, r) in toy_corpus()) {
            let b = corpus_bleu(&h, &r, 4, Smoothing::None).unwrap();
            // without any 4-gram the unsmoothed score is 0 even for identical corpora
            let has_4gram = r.iter().any(|x| x.len() >= 4);
            prop_assert_eq!((b - 100.0).abs() < 1e-9, h == r && has_4gram);
            let self_bleu = corpus_bleu(&r, &r, 4, Smoothing::None).unwrap();
            prop_assert_eq!(self_bleu, if has_4gram { 100.0 } else { 0.0 });
        }

        #[test]
        fn accuracy_decomposes_over_buckets((h, r) in toy_corpus()) {
            let keys: Vec<u32> = r.iter().map(|x| x.len() as u32 / 3).collect();
            let rep = evaluate_by_key(&h, &r, &keys, &EvalOptions::default()).unwrap();
            let (parts, all) = rep.records.split_at(rep.records.len() - 1);
            let weighted: f64 = parts.iter().map(|p| p.accuracy * p.count as f64).sum::<f64>() / h.len() as f64;
            prop_assert!((weighted - all[0].accuracy).abs() < 1e-12);
        }
    }
}
