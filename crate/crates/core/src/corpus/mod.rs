//! Parallel-corpus preparation: length bucketing, concatenation augmentation,
//! bucket-label injection, BPE segmentation and a plain tokenizer.

pub mod bpe;
pub mod tokenize;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::seed;
use crate::taskgen::BucketRange;

pub use bpe::BpeModel;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty {0} side")]
    EmptySide(Side),
    #[error("pair length {len} on the {side} side exceeds the largest bucket ({max})")]
    Overflow { side: Side, len: usize, max: usize },
    #[error("source already starts with bucket label {0}")]
    AlreadyLabelled(String),
    #[error("pair {index} has target length {len}, not below the window maximum {hi}")]
    TooLongForWindow { index: usize, len: usize, hi: usize },
    #[error("{src} has {src_lines} lines but {tgt} has {tgt_lines}")]
    LineCountMismatch {
        src: PathBuf,
        tgt: PathBuf,
        src_lines: usize,
        tgt_lines: usize,
    },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("malformed BPE model: {0}")]
    BadModel(String),
    #[error("unknown side {0:?}")]
    BadSide(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Source,
    Target,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Source => "src",
            Side::Target => "tgt",
        })
    }
}

impl FromStr for Side {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "src" | "source" => Ok(Side::Source),
            "tgt" | "target" => Ok(Side::Target),
            _ => Err(CorpusError::BadSide(s.to_string())),
        }
    }
}

/// A sentence pair; both sides hold at least one token.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParallelPair {
    src: Vec<String>,
    tgt: Vec<String>,
}

impl ParallelPair {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        if src.is_empty() {
            return Err(CorpusError::EmptySide(Side::Source));
        }
        if tgt.is_empty() {
            return Err(CorpusError::EmptySide(Side::Target));
        }
        Ok(ParallelPair { src, tgt })
    }

    pub fn from_lines(src: &str, tgt: &str) -> Result<Self> {
        ParallelPair::new(split_line(src), split_line(tgt))
    }

    pub fn src(&self) -> &[String] {
        &self.src
    }

    pub fn tgt(&self) -> &[String] {
        &self.tgt
    }

    pub fn src_len(&self) -> usize {
        self.src.len()
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt.len()
    }

    pub fn len(&self, side: Side) -> usize {
        match side {
            Side::Source => self.src_len(),
            Side::Target => self.tgt_len(),
        }
    }

    pub fn into_parts(self) -> (Vec<String>, Vec<String>) {
        (self.src, self.tgt)
    }
}

pub fn split_line(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Width-`width` length windows labelled by their upper bound, up to `max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bucketing {
    pub width: usize,
    pub max: usize,
}

impl Bucketing {
    /// Buckets 1-10, 11-20, ..., 91-100.
    pub const STANDARD: Bucketing = Bucketing { width: 10, max: 100 };

    /// Bucket label for a length, `None` for the overflow bin.
    pub fn label(&self, len: usize) -> Option<u32> {
        if len == 0 || len > self.max {
            return None;
        }
        Some((len.div_ceil(self.width) * self.width) as u32)
    }

    pub fn range(&self, label: u32) -> BucketRange {
        let hi = label as usize;
        BucketRange { lo: hi + 1 - self.width, hi }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BucketId {
    pub label: u32,
    pub side: Side,
}

impl BucketId {
    pub fn token(&self) -> String {
        format!("<{}>", self.label)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BucketSplit {
    pub buckets: BTreeMap<u32, Vec<ParallelPair>>,
    pub overflow: Vec<ParallelPair>,
}

impl BucketSplit {
    pub fn total(&self) -> usize {
        self.buckets.values().map(Vec::len).sum::<usize>() + self.overflow.len()
    }
}

pub fn bucket_split(pairs: impl IntoIterator<Item = ParallelPair>, side: Side) -> BucketSplit {
    bucket_split_with(pairs, side, Bucketing::STANDARD)
}

/// Partitions pairs by their `side` length; order within a bucket follows input order.
pub fn bucket_split_with(pairs: impl IntoIterator<Item = ParallelPair>, side: Side, scheme: Bucketing) -> BucketSplit {
    let mut out = BucketSplit::default();
    for pair in pairs {
        match scheme.label(pair.len(side)) {
            Some(label) => out.buckets.entry(label).or_default().push(pair),
            None => out.overflow.push(pair),
        }
    }
    out
}

/// Synthetic pairs plus, for each, the input indices it was built from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConcatOutput {
    pub pairs: Vec<ParallelPair>,
    pub groups: Vec<Vec<usize>>,
}

/// Packs shuffled pairs into groups whose summed target length falls in `window`.
///
/// Pairs are visited in a seeded shuffle order and appended to the open group.
/// Once the group's target length reaches `window.lo` it is emitted. A pair that
/// would push the group past `window.hi` first discards the open group and then
/// starts a new one. Each input pair is used at most once.
pub fn concat_augment(pairs: &[ParallelPair], window: BucketRange, seed: u64) -> Result<ConcatOutput> {
    if let Some((index, p)) = pairs.iter().enumerate().find(|(_, p)| p.tgt_len() >= window.hi) {
        return Err(CorpusError::TooLongForWindow { index, len: p.tgt_len(), hi: window.hi });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::tag("concat"), window.lo as u64, window.hi as u64]));

    let mut out = ConcatOutput::default();
    let mut group: Vec<usize> = Vec::new();
    let mut sum = 0;
    for idx in order {
        let len = pairs[idx].tgt_len();
        if sum + len > window.hi {
            group.clear();
            sum = 0;
        }
        group.push(idx);
        sum += len;
        if sum >= window.lo {
            let mut src = Vec::new();
            let mut tgt = Vec::new();
            for &g in &group {
                src.extend_from_slice(pairs[g].src());
                tgt.extend_from_slice(pairs[g].tgt());
            }
            out.pairs.push(ParallelPair { src, tgt });
            out.groups.push(std::mem::take(&mut group));
            sum = 0;
        }
    }
    Ok(out)
}

pub fn is_bucket_label(token: &str) -> bool {
    token
        .strip_prefix('<')
        .and_then(|t| t.strip_suffix('>'))
        .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

/// Prepends the `<B>` bucket token for the pair's `side` length to the source.
pub fn inject_bucket_label(pair: &ParallelPair, side: Side) -> Result<ParallelPair> {
    inject_bucket_label_with(pair, side, Bucketing::STANDARD)
}

pub fn inject_bucket_label_with(pair: &ParallelPair, side: Side, scheme: Bucketing) -> Result<ParallelPair> {
    if let Some(first) = pair.src.first().filter(|t| is_bucket_label(t)) {
        return Err(CorpusError::AlreadyLabelled(first.clone()));
    }
    let len = pair.len(side);
    let label = scheme
        .label(len)
        .ok_or(CorpusError::Overflow { side, len, max: scheme.max })?;
    let mut src = Vec::with_capacity(pair.src_len() + 1);
    src.push(BucketId { label, side }.token());
    src.extend_from_slice(&pair.src);
    Ok(ParallelPair { src, tgt: pair.tgt.clone() })
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .collect::<io::Result<Vec<_>>>()
        .map_err(io_err(path))
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: impl IntoIterator<Item = S>) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = io::BufWriter::new(file);
    for l in lines {
        writeln!(w, "{}", l.as_ref()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Reads `prefix.src` / `prefix.tgt`.
pub fn read_parallel(prefix: &Path) -> Result<Vec<ParallelPair>> {
    let (sp, tp) = (with_ext(prefix, "src"), with_ext(prefix, "tgt"));
    let src = read_lines(&sp)?;
    let tgt = read_lines(&tp)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LineCountMismatch { src: sp, tgt: tp, src_lines: src.len(), tgt_lines: tgt.len() });
    }
    src.iter().zip(&tgt).map(|(s, t)| ParallelPair::from_lines(s, t)).collect()
}

/// Writes `prefix.src` / `prefix.tgt`.
pub fn write_parallel(prefix: &Path, pairs: &[ParallelPair]) -> Result<()> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_lines(&with_ext(prefix, "src"), pairs.iter().map(|p| p.src.join(" ")))?;
    write_lines(&with_ext(prefix, "tgt"), pairs.iter().map(|p| p.tgt.join(" ")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(src_len: usize, tgt_len: usize) -> ParallelPair {
        let src = (0..src_len).map(|i| format!("s{i}")).collect();
        let tgt = (0..tgt_len).map(|i| format!("t{i}")).collect();
        ParallelPair::new(src, tgt).unwrap()
    }

    #[test]
    fn bucket_boundaries() {
        let s = Bucketing::STANDARD;
        assert_eq!(s.label(10), Some(10));
        assert_eq!(s.label(11), Some(20));
        assert_eq!(s.label(1), Some(10));
        assert_eq!(s.label(100), Some(100));
        assert_eq!(s.label(101), None);
        assert_eq!(s.range(20), BucketRange { lo: 11, hi: 20 });
    }

    #[test]
    fn split_routes_overflow() {
        let split = bucket_split(vec![pair(3, 10), pair(50, 11), pair(1, 101)], Side::Target);
        assert_eq!(split.buckets[&10].len(), 1);
        assert_eq!(split.buckets[&20].len(), 1);
        assert_eq!(split.overflow.len(), 1);
        let by_src = bucket_split(vec![pair(3, 10), pair(50, 11)], Side::Source);
        assert_eq!(by_src.buckets.keys().copied().collect::<Vec<_>>(), vec![10, 50]);
    }

    #[test]
    fn concat_examples() {
        let w = BucketRange { lo: 51, hi: 60 };
        let out = concat_augment(&[pair(25, 30), pair(27, 30)], w, 0).unwrap();
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].tgt_len(), 60);
        assert_eq!(out.pairs[0].src_len(), 52);

        let lens = [10, 10, 10, 10, 10, 5];
        let pairs: Vec<_> = lens.iter().map(|&l| pair(l, l)).collect();
        for seed in 0..20 {
            let out = concat_augment(&pairs, w, seed).unwrap();
            assert_eq!(out.pairs.len(), 1);
            assert_eq!(out.pairs[0].tgt_len(), 55);
            assert_eq!(out.groups[0].len(), 6);
        }

        assert!(concat_augment(&[pair(5, 20)], w, 0).unwrap().pairs.is_empty());
        assert!(concat_augment(&[], w, 0).unwrap().pairs.is_empty());
        assert!(matches!(
            concat_augment(&[pair(5, 60)], w, 0),
            Err(CorpusError::TooLongForWindow { len: 60, .. })
        ));
    }

    #[test]
    fn concat_discards_overshooting_group() {
        // 30 + 25 = 55 in window; 30 + 35 would overshoot 60 before reaching 51
        let w = BucketRange { lo: 51, hi: 60 };
        let pairs = vec![pair(1, 30), pair(1, 35), pair(1, 25)];
        for seed in 0..10 {
            let out = concat_augment(&pairs, w, seed).unwrap();
            for (p, g) in out.pairs.iter().zip(&out.groups) {
                assert!(w.contains(p.tgt_len()));
                assert_eq!(g.iter().map(|&i| pairs[i].tgt_len()).sum::<usize>(), p.tgt_len());
            }
        }
    }

    #[test]
    fn labels() {
        let p = pair(13, 4);
        let l = inject_bucket_label(&p, Side::Source).unwrap();
        assert_eq!(l.src()[0], "<20>");
        assert_eq!(&l.src()[1..], p.src());
        assert_eq!(l.tgt(), p.tgt());
        assert_eq!(l.src_len(), 14);
        assert_eq!(inject_bucket_label(&pair(1, 1), Side::Source).unwrap().src()[0], "<10>");
        assert_eq!(inject_bucket_label(&pair(1, 35), Side::Target).unwrap().src()[0], "<40>");
        assert!(matches!(inject_bucket_label(&l, Side::Source), Err(CorpusError::AlreadyLabelled(_))));
        assert!(matches!(inject_bucket_label(&pair(101, 3), Side::Source), Err(CorpusError::Overflow { .. })));
    }

    #[test]
    fn parallel_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("sub/train");
        let pairs = vec![pair(2, 3), pair(4, 1)];
        write_parallel(&prefix, &pairs).unwrap();
        assert_eq!(read_parallel(&prefix).unwrap(), pairs);
        assert!(ParallelPair::from_lines("a", "  ").is_err());
    }

    fn pairs_strategy() -> impl Strategy<Value = Vec<ParallelPair>> {
        prop::collection::vec((1usize..40, 1usize..40), 0..200)
            .prop_map(|v| v.into_iter().map(|(s, t)| pair(s, t)).collect())
    }

    proptest! {
        #[test]
        fn concat_invariants(pairs in pairs_strategy(), seed in any::<u64>()) {
            let w = BucketRange { lo: 41, hi: 50 };
            let out = concat_augment(&pairs, w, seed).unwrap();
            let mut used = std::collections::HashSet::new();
            for (p, g) in out.pairs.iter().zip(&out.groups) {
                prop_assert!(w.contains(p.tgt_len()));
                let src: Vec<String> = g.iter().flat_map(|&i| pairs[i].src().to_vec()).collect();
                let tgt: Vec<String> = g.iter().flat_map(|&i| pairs[i].tgt().to_vec()).collect();
                prop_assert_eq!(p.src(), &src[..]);
                prop_assert_eq!(p.tgt(), &tgt[..]);
                for &i in g {
                    prop_assert!(used.insert(i));
                }
            }
        }

        #[test]
        fn split_is_partition(pairs in pairs_strategy()) {
            let n = pairs.len();
            let scheme = Bucketing { width: 10, max: 30 };
            let split = bucket_split_with(pairs, Side::Target, scheme);
            prop_assert_eq!(split.total(), n);
            for (label, members) in &split.buckets {
                let r = scheme.range(*label);
                prop_assert!(members.iter().all(|p| r.contains(p.tgt_len())));
            }
            prop_assert!(split.overflow.iter().all(|p| p.tgt_len() > 30));
        }
    }
}
