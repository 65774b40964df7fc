//! String-editing benchmark generation.
//!
//! Six editing tasks over binary strings (`copy`, `push X`, `pop`, `shift`,
//! `unshift X`, `reverse`). Sources look like `push 1 | 1 0 1 0` and targets
//! like `1 0 1 0 1`. Datasets are split into length buckets so that models
//! trained on one range of lengths can be probed on another.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::seed;

/// Longest string length the generator will handle.
pub const MAX_BITSTRING_LEN: usize = 63;

pub const SEPARATOR: &str = "|";
pub const EMPTY_ARG: &str = "-";

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("bucket {range} holds only {capacity} distinct strings, {requested} requested")]
    Capacity {
        range: BucketRange,
        requested: usize,
        capacity: u128,
    },
    #[error("invalid bucket range {lo}:{hi}")]
    InvalidRange { lo: usize, hi: usize },
    #[error("bucket ranges {0} and {1} overlap")]
    OverlappingBuckets(BucketRange, BucketRange),
    #[error("task {kind} {problem}")]
    InvalidArgument { kind: TaskKind, problem: &'static str },
    #[error("malformed example: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = TaskGenError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bit {
    Zero,
    One,
}

impl Bit {
    pub fn as_str(self) -> &'static str {
        match self {
            Bit::Zero => "0",
            Bit::One => "1",
        }
    }

    fn from_token(tok: &str) -> Option<Bit> {
        match tok {
            "0" => Some(Bit::Zero),
            "1" => Some(Bit::One),
            _ => None,
        }
    }
}

/// A non-empty sequence of binary symbols.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitString(Vec<Bit>);

impl BitString {
    pub fn new(bits: Vec<Bit>) -> Result<Self> {
        if bits.is_empty() || bits.len() > MAX_BITSTRING_LEN {
            return Err(TaskGenError::Malformed(format!(
                "bit string length {} outside 1..={MAX_BITSTRING_LEN}",
                bits.len()
            )));
        }
        Ok(BitString(bits))
    }

    pub fn bits(&self) -> &[Bit] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn from_packed(len: usize, packed: u64) -> Self {
        let bits = (0..len)
            .map(|i| if (packed >> i) & 1 == 1 { Bit::One } else { Bit::Zero })
            .collect();
        BitString(bits)
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&join_bits(&self.0))
    }
}

impl FromStr for BitString {
    type Err = TaskGenError;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .split_whitespace()
            .map(|t| Bit::from_token(t).ok_or_else(|| TaskGenError::Malformed(format!("bad symbol {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        BitString::new(bits)
    }
}

pub fn join_bits(bits: &[Bit]) -> String {
    bits.iter().map(|b| b.as_str()).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Copy,
    Push,
    Pop,
    Shift,
    Unshift,
    Reverse,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Copy,
        TaskKind::Push,
        TaskKind::Pop,
        TaskKind::Shift,
        TaskKind::Unshift,
        TaskKind::Reverse,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Push => "push",
            TaskKind::Pop => "pop",
            TaskKind::Shift => "shift",
            TaskKind::Unshift => "unshift",
            TaskKind::Reverse => "reverse",
        }
    }

    pub fn takes_argument(self) -> bool {
        matches!(self, TaskKind::Push | TaskKind::Unshift)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TaskKind {
    type Err = TaskGenError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| TaskGenError::Malformed(format!("unknown task {s:?}")))
    }
}

/// A single task together with its argument, if it takes one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Copy,
    Push(Bit),
    Pop,
    Shift,
    Unshift(Bit),
    Reverse,
}

impl Task {
    /// Pairs a kind with its argument; push/unshift need one, the rest must not have one.
    pub fn new(kind: TaskKind, arg: Option<Bit>) -> Result<Task> {
        match (kind, arg) {
            (TaskKind::Push, Some(b)) => Ok(Task::Push(b)),
            (TaskKind::Unshift, Some(b)) => Ok(Task::Unshift(b)),
            (TaskKind::Push | TaskKind::Unshift, None) => Err(TaskGenError::InvalidArgument {
                kind,
                problem: "requires an argument symbol",
            }),
            (_, Some(_)) => Err(TaskGenError::InvalidArgument {
                kind,
                problem: "takes no argument",
            }),
            (TaskKind::Copy, None) => Ok(Task::Copy),
            (TaskKind::Pop, None) => Ok(Task::Pop),
            (TaskKind::Shift, None) => Ok(Task::Shift),
            (TaskKind::Reverse, None) => Ok(Task::Reverse),
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Copy => TaskKind::Copy,
            Task::Push(_) => TaskKind::Push,
            Task::Pop => TaskKind::Pop,
            Task::Shift => TaskKind::Shift,
            Task::Unshift(_) => TaskKind::Unshift,
            Task::Reverse => TaskKind::Reverse,
        }
    }

    pub fn arg(self) -> Option<Bit> {
        match self {
            Task::Push(b) | Task::Unshift(b) => Some(b),
            _ => None,
        }
    }

    pub fn arg_token(self) -> &'static str {
        self.arg().map_or(EMPTY_ARG, Bit::as_str)
    }
}

/// The reference output of `task` on `input`. May be empty (pop/shift of a single symbol).
pub fn apply_task(task: Task, input: &BitString) -> Vec<Bit> {
    let bits = input.bits();
    match task {
        Task::Copy => bits.to_vec(),
        Task::Push(x) => bits.iter().copied().chain([x]).collect(),
        Task::Unshift(x) => [x].into_iter().chain(bits.iter().copied()).collect(),
        Task::Pop => bits[..bits.len() - 1].to_vec(),
        Task::Shift => bits[1..].to_vec(),
        Task::Reverse => bits.iter().rev().copied().collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub task: Task,
    pub input: BitString,
    pub target: Vec<Bit>,
}

impl TaskInstance {
    pub fn new(task: Task, input: BitString) -> Self {
        let target = apply_task(task, &input);
        TaskInstance { task, input, target }
    }

    pub fn source_tokens(&self) -> Vec<&'static str> {
        let mut toks = vec![self.task.kind().label(), self.task.arg_token(), SEPARATOR];
        toks.extend(self.input.bits().iter().map(|b| b.as_str()));
        toks
    }

    pub fn target_tokens(&self) -> Vec<&'static str> {
        self.target.iter().map(|b| b.as_str()).collect()
    }

    pub fn source_line(&self) -> String {
        self.source_tokens().join(" ")
    }

    /// Empty for an empty target.
    pub fn target_line(&self) -> String {
        join_bits(&self.target)
    }

    /// Parses a serialized pair and checks the target against the task oracle.
    pub fn parse(source: &str, target: &str) -> Result<Self> {
        let toks: Vec<&str> = source.split_whitespace().collect();
        if toks.len() < 4 || toks[2] != SEPARATOR {
            return Err(TaskGenError::Malformed(source.to_string()));
        }
        let kind: TaskKind = toks[0].parse()?;
        let arg = match toks[1] {
            EMPTY_ARG => None,
            t => Some(Bit::from_token(t).ok_or_else(|| TaskGenError::Malformed(source.to_string()))?),
        };
        let task = Task::new(kind, arg)?;
        let input: BitString = toks[3..].join(" ").parse()?;
        let inst = TaskInstance::new(task, input);
        if inst.target_line() != target.split_whitespace().collect::<Vec<_>>().join(" ") {
            return Err(TaskGenError::Malformed(format!(
                "target {target:?} does not match {source:?}"
            )));
        }
        Ok(inst)
    }
}

/// Inclusive length range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BucketRange {
    pub lo: usize,
    pub hi: usize,
}

impl BucketRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo == 0 || lo > hi {
            return Err(TaskGenError::InvalidRange { lo, hi });
        }
        Ok(BucketRange { lo, hi })
    }

    pub fn contains(&self, len: usize) -> bool {
        (self.lo..=self.hi).contains(&len)
    }

    pub fn overlaps(&self, other: &BucketRange) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    /// Number of distinct binary strings with length in the range.
    pub fn capacity(&self) -> u128 {
        (self.lo..=self.hi.min(127)).map(|l| 1u128 << l).sum()
    }

    /// `lo-hi`, as used in file names.
    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

impl fmt::Display for BucketRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl FromStr for BucketRange {
    type Err = TaskGenError;

    /// Accepts `lo:hi` or `lo-hi`.
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .or_else(|| s.split_once('-'))
            .ok_or_else(|| TaskGenError::Malformed(format!("bucket range {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| TaskGenError::Malformed(format!("bucket range {s:?}")))
        };
        BucketRange::new(parse(lo)?, parse(hi)?)
    }
}

/// Draws `count` distinct bit strings with lengths in `range`.
///
/// A length is drawn uniformly among lengths that still have unused strings,
/// then the symbols are drawn uniformly; duplicates are rejected.
pub fn generate_unique_bitstrings(range: BucketRange, count: usize, seed: u64) -> Result<Vec<BitString>> {
    if range.hi > MAX_BITSTRING_LEN {
        return Err(TaskGenError::InvalidRange { lo: range.lo, hi: range.hi });
    }
    let capacity = range.capacity();
    if count as u128 > capacity {
        return Err(TaskGenError::Capacity { range, requested: count, capacity });
    }
    let mut rng = seed::rng(seed, &[seed::tag("bitstrings"), range.lo as u64, range.hi as u64]);
    let mut open: Vec<usize> = (range.lo..=range.hi).collect();
    let mut per_len = vec![0u64; range.hi + 1];
    let mut seen: HashSet<(usize, u64)> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let slot = rng.random_range(0..open.len());
        let len = open[slot];
        let packed = rng.random::<u64>() & ((1u64 << len) - 1);
        if seen.insert((len, packed)) {
            out.push(BitString::from_packed(len, packed));
            per_len[len] += 1;
            if per_len[len] == 1u64 << len {
                open.swap_remove(slot);
                open.sort_unstable();
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BucketPlan {
    pub range: BucketRange,
    pub counts: SplitCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskSelection {
    Single(TaskKind),
    All,
}

impl TaskSelection {
    pub fn kinds(self) -> Vec<TaskKind> {
        match self {
            TaskSelection::Single(k) => vec![k],
            TaskSelection::All => TaskKind::ALL.to_vec(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskSelection::Single(k) => k.label(),
            TaskSelection::All => "all",
        }
    }
}

impl FromStr for TaskSelection {
    type Err = TaskGenError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(TaskSelection::All)
        } else {
            s.parse().map(TaskSelection::Single)
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetPart {
    pub split: Split,
    pub bucket: BucketRange,
    pub instances: Vec<TaskInstance>,
}

impl DatasetPart {
    pub fn file_stem(&self) -> String {
        format!("{}.{}", self.split, self.bucket.label())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub parts: Vec<DatasetPart>,
}

/// Raw strings of one bucket, already divided into splits.
#[derive(Clone, Debug)]
pub struct BucketStrings {
    pub range: BucketRange,
    pub train: Vec<BitString>,
    pub valid: Vec<BitString>,
    pub test: Vec<BitString>,
}

impl BucketStrings {
    pub fn get(&self, split: Split) -> &[BitString] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Samples the bucket's strings once and carves test, valid, then train out
/// of that sample, so the three splits never share a string.
pub fn split_bucket(plan: &BucketPlan, seed: u64) -> Result<BucketStrings> {
    let mut all = generate_unique_bitstrings(plan.range, plan.counts.total(), seed)?;
    let train = all.split_off(plan.counts.test + plan.counts.valid);
    let valid = all.split_off(plan.counts.test);
    Ok(BucketStrings { range: plan.range, train, valid, test: all })
}

fn instances_for(kind: TaskKind, strings: &[BitString], seed: u64, path: &[u64]) -> Vec<TaskInstance> {
    let mut rng = seed::rng(seed, path);
    strings
        .iter()
        .map(|s| {
            let arg = kind
                .takes_argument()
                .then(|| if rng.random_bool(0.5) { Bit::One } else { Bit::Zero });
            let task = Task::new(kind, arg).expect("argument presence follows the kind");
            TaskInstance::new(task, s.clone())
        })
        .collect()
}

/// Builds every split of every bucket for one task or for all six.
///
/// In `All` mode each task's data is built from the same strings as its
/// single-task dataset; the per-task training sets are concatenated and
/// shuffled, while valid/test are concatenated in task order.
pub fn build_dataset(selection: TaskSelection, buckets: &[BucketPlan], seed: u64) -> Result<Dataset> {
    for (i, a) in buckets.iter().enumerate() {
        for b in &buckets[i + 1..] {
            if a.range.overlaps(&b.range) {
                return Err(TaskGenError::OverlappingBuckets(a.range, b.range));
            }
        }
    }
    let mut parts = Vec::new();
    for plan in buckets {
        let strings = split_bucket(plan, seed)?;
        for split in Split::ALL {
            if plan.counts.get(split) == 0 {
                continue;
            }
            let mut instances = Vec::new();
            for kind in selection.kinds() {
                let path = [
                    seed::tag("task-args"),
                    seed::tag(kind.label()),
                    plan.range.lo as u64,
                    plan.range.hi as u64,
                    split as u64,
                ];
                instances.extend(instances_for(kind, strings.get(split), seed, &path));
            }
            if selection == TaskSelection::All && split == Split::Train {
                let mut rng = seed::rng(seed, &[seed::tag("all-shuffle"), plan.range.lo as u64, plan.range.hi as u64]);
                instances.shuffle(&mut rng);
            }
            parts.push(DatasetPart { split, bucket: plan.range, instances });
        }
    }
    Ok(Dataset { parts })
}

impl Dataset {
    pub fn part(&self, split: Split, bucket: BucketRange) -> Option<&DatasetPart> {
        self.parts.iter().find(|p| p.split == split && p.bucket == bucket)
    }

    /// Writes `{split}.{lo-hi}.src` / `.tgt` pairs into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for part in &self.parts {
            let stem = part.file_stem();
            let mut src = io::BufWriter::new(fs::File::create(dir.join(format!("{stem}.src")))?);
            let mut tgt = io::BufWriter::new(fs::File::create(dir.join(format!("{stem}.tgt")))?);
            for inst in &part.instances {
                writeln!(src, "{}", inst.source_line())?;
                writeln!(tgt, "{}", inst.target_line())?;
            }
            src.flush()?;
            tgt.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn bs(s: &str) -> BitString {
        s.parse().unwrap()
    }

    #[test]
    fn table_examples() {
        let push = TaskInstance::new(Task::Push(Bit::One), bs("1 0 1 0"));
        assert_eq!(push.source_line(), "push 1 | 1 0 1 0");
        assert_eq!(push.target_line(), "1 0 1 0 1");
        let rev = TaskInstance::new(Task::Reverse, bs("1 0 0 1 1"));
        assert_eq!(rev.source_line(), "reverse - | 1 0 0 1 1");
        assert_eq!(rev.target_line(), "1 1 0 0 1");
    }

    #[test]
    fn singleton_edges() {
        assert_eq!(apply_task(Task::Copy, &bs("0")), vec![Bit::Zero]);
        assert!(apply_task(Task::Pop, &bs("1")).is_empty());
        assert!(apply_task(Task::Shift, &bs("1")).is_empty());
        assert_eq!(TaskInstance::new(Task::Pop, bs("1")).target_line(), "");
    }

    #[test]
    fn argument_consistency() {
        assert!(Task::new(TaskKind::Push, None).is_err());
        assert!(Task::new(TaskKind::Copy, Some(Bit::One)).is_err());
        assert_eq!(Task::new(TaskKind::Unshift, Some(Bit::Zero)).unwrap(), Task::Unshift(Bit::Zero));
    }

    #[test]
    fn saturates_small_bucket() {
        let range = BucketRange::new(1, 10).unwrap();
        let got: BTreeSet<_> = generate_unique_bitstrings(range, 2046, 3).unwrap().into_iter().collect();
        // every binary string of length 1..=10, enumerated independently
        let mut expected = BTreeSet::new();
        for len in 1..=10usize {
            for v in 0..(1u32 << len) {
                let s: Vec<&str> = (0..len).map(|i| if v >> (len - 1 - i) & 1 == 1 { "1" } else { "0" }).collect();
                expected.insert(bs(&s.join(" ")));
            }
        }
        assert_eq!(got.len(), 2046);
        assert_eq!(got, expected);
    }

    #[test]
    fn thirty_thousand_from_middle_bucket() {
        let range = BucketRange::new(11, 15).unwrap();
        assert_eq!(range.capacity(), 63488);
        let got = generate_unique_bitstrings(range, 30000, 1).unwrap();
        let set: HashSet<_> = got.iter().collect();
        assert_eq!(set.len(), 30000);
        assert!(got.iter().all(|s| range.contains(s.len())));
    }

    #[test]
    fn capacity_error() {
        let err = generate_unique_bitstrings(BucketRange::new(1, 1).unwrap(), 3, 0).unwrap_err();
        assert!(matches!(err, TaskGenError::Capacity { capacity: 2, requested: 3, .. }));
        assert!(err.to_string().contains("only 2 distinct"));
    }

    #[test]
    fn deterministic_generation() {
        let r = BucketRange::new(5, 9).unwrap();
        assert_eq!(generate_unique_bitstrings(r, 100, 9).unwrap(), generate_unique_bitstrings(r, 100, 9).unwrap());
        assert_ne!(generate_unique_bitstrings(r, 100, 9).unwrap(), generate_unique_bitstrings(r, 100, 10).unwrap());
    }

    #[test]
    fn overlapping_buckets_rejected() {
        let plan = |lo, hi| BucketPlan {
            range: BucketRange::new(lo, hi).unwrap(),
            counts: SplitCounts { train: 0, valid: 0, test: 1 },
        };
        assert!(matches!(
            build_dataset(TaskSelection::All, &[plan(1, 10), plan(10, 12)], 0),
            Err(TaskGenError::OverlappingBuckets(..))
        ));
    }

    #[test]
    fn range_parsing() {
        assert_eq!("11:15".parse::<BucketRange>().unwrap(), BucketRange { lo: 11, hi: 15 });
        assert_eq!("11-15".parse::<BucketRange>().unwrap(), BucketRange { lo: 11, hi: 15 });
        assert!("0:3".parse::<BucketRange>().is_err());
        assert!("5:3".parse::<BucketRange>().is_err());
    }

    #[test]
    fn parse_rejects_wrong_target() {
        assert!(TaskInstance::parse("push 1 | 1 0", "1 0 1").is_ok());
        assert!(TaskInstance::parse("push 1 | 1 0", "1 0 0").is_err());
        assert!(TaskInstance::parse("pop - | 1", "").is_ok());
    }

    fn bitstring() -> impl Strategy<Value = BitString> {
        prop::collection::vec(any::<bool>(), 1..=20).prop_map(|v| {
            BitString::new(v.into_iter().map(|b| if b { Bit::One } else { Bit::Zero }).collect()).unwrap()
        })
    }

    fn bit() -> impl Strategy<Value = Bit> {
        any::<bool>().prop_map(|b| if b { Bit::One } else { Bit::Zero })
    }

    proptest! {
        #[test]
        fn oracle_algebra(s in bitstring(), x in bit()) {
            let pushed = BitString::new(apply_task(Task::Push(x), &s)).unwrap();
            prop_assert_eq!(apply_task(Task::Pop, &pushed), s.bits().to_vec());
            let unshifted = BitString::new(apply_task(Task::Unshift(x), &s)).unwrap();
            prop_assert_eq!(apply_task(Task::Shift, &unshifted), s.bits().to_vec());
            let rev = BitString::new(apply_task(Task::Reverse, &s)).unwrap();
            prop_assert_eq!(apply_task(Task::Reverse, &rev), s.bits().to_vec());
            prop_assert_eq!(apply_task(Task::Copy, &s), s.bits().to_vec());
        }

        #[test]
        fn length_laws(s in bitstring(), x in bit()) {
            let n = s.len();
            prop_assert_eq!(apply_task(Task::Push(x), &s).len(), n + 1);
            prop_assert_eq!(apply_task(Task::Unshift(x), &s).len(), n + 1);
            prop_assert_eq!(apply_task(Task::Pop, &s).len(), n - 1);
            prop_assert_eq!(apply_task(Task::Shift, &s).len(), n - 1);
            prop_assert_eq!(apply_task(Task::Reverse, &s).len(), n);
            prop_assert_eq!(apply_task(Task::Copy, &s).len(), n);
        }
    }
}
