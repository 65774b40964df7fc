//! Byte-pair encoding in the subword-nmt style.
//!
//! Learning appends an end-of-word marker to every word and repeatedly merges
//! the most frequent adjacent symbol pair. Applying a model emits pieces where
//! every non-final piece of a word carries the `@@` continuation suffix, so
//! `desegment` restores the original tokens exactly.
//!
//! `@` and `\` inside words are escaped before segmentation (`\a` and `\\`),
//! which keeps a literal `@@` at the end of a word from being mistaken for
//! a continuation marker.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{io_err, read_lines, CorpusError, Result};

pub const END_OF_WORD: &str = "</w>";
pub const CONTINUATION: &str = "@@";
const HEADER: &str = "#lenlab-bpe v1";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn escape(word: &str) -> String {
    let mut out = String::with_capacity(word.len());
    for c in word.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '@' => out.push_str("\\a"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(word: &str) -> String {
    let mut out = String::with_capacity(word.len());
    let mut chars = word.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('a') => out.push('@'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Initial symbols of a word: its characters, the last one fused with the end marker.
fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

fn merge_in_place(syms: &mut Vec<String>, left: &str, right: &str) -> bool {
    let mut changed = false;
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == left && syms[i + 1] == right {
            let r = syms.remove(i + 1);
            syms[i].push_str(&r);
            changed = true;
        }
        i += 1;
    }
    changed
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        BpeModel { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// Learns up to `merge_count` merges from whitespace-tokenized lines.
    ///
    /// Ties between equally frequent pairs go to the lexicographically smallest
    /// pair. Learning stops early once no pair occurs at least twice.
    pub fn learn<S: AsRef<str>>(lines: &[S], merge_count: usize) -> Result<Self> {
        let mut freqs: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for w in line.as_ref().split_whitespace() {
                *freqs.entry(escape(w)).or_default() += 1;
            }
        }
        if freqs.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut words: Vec<(Vec<String>, u64)> = freqs.into_iter().map(|(w, f)| (word_symbols(&w), f)).collect();
        words.sort();

        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        let mut merges = Vec::with_capacity(merge_count);
        for _ in 0..merge_count {
            pair_counts.clear();
            for (syms, f) in &words {
                for w in syms.windows(2) {
                    *pair_counts.entry((w[0].clone(), w[1].clone())).or_default() += f;
                }
            }
            let Some((best, count)) = pair_counts
                .iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|(p, c)| (p.clone(), *c))
            else {
                break;
            };
            if count < 2 {
                break;
            }
            for (syms, _) in words.iter_mut() {
                merge_in_place(syms, &best.0, &best.1);
            }
            merges.push(best);
        }
        Ok(BpeModel::from_merges(merges))
    }

    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_in_place(&mut syms, l, r);
        }
        let last = syms.pop().expect("words are non-empty");
        let stripped = last.strip_suffix(END_OF_WORD).unwrap_or(&last).to_string();
        if !stripped.is_empty() {
            syms.push(stripped);
        }
        syms
    }

    /// Segments a whitespace-tokenized line into subword pieces.
    pub fn apply(&self, line: &str) -> Vec<String> {
        let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
        let mut out = Vec::new();
        for w in line.split_whitespace() {
            let pieces = cache.entry(w).or_insert_with(|| {
                let mut pieces = self.segment_word(&escape(w));
                let n = pieces.len();
                for p in &mut pieces[..n - 1] {
                    p.push_str(CONTINUATION);
                }
                pieces
            });
            out.extend(pieces.iter().cloned());
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == HEADER => {}
            other => return Err(CorpusError::BadModel(format!("unexpected header {other:?}"))),
        }
        let merges = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let mut parts = l.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
                    _ => Err(CorpusError::BadModel(format!("bad merge line {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BpeModel::from_merges(merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        BpeModel::from_text(&read_lines(path)?.join("\n"))
    }
}

/// Joins continuation pieces back into words.
pub fn desegment<S: AsRef<str>>(pieces: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for p in pieces {
        let p = p.as_ref();
        match p.strip_suffix(CONTINUATION) {
            Some(head) => cur.push_str(head),
            None => {
                cur.push_str(p);
                words.push(unescape(&std::mem::take(&mut cur)));
            }
        }
    }
    if !cur.is_empty() {
        words.push(unescape(&cur));
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force pair counting over symbolized words, kept separate from `learn`.
    fn most_frequent_pair(lines: &[&str]) -> (String, String) {
        let mut counts: Vec<((String, String), u64)> = Vec::new();
        for line in lines {
            for w in line.split_whitespace() {
                let syms = word_symbols(w);
                for i in 0..syms.len().saturating_sub(1) {
                    let key = (syms[i].clone(), syms[i + 1].clone());
                    match counts.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((key, 1)),
                    }
                }
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        counts[0].0.clone()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let corpus = ["low low low", "lower"];
        let expected = most_frequent_pair(&corpus);
        // l-o occurs 4 times, o-w</w> 3 times
        assert_eq!(expected, ("l".to_string(), "o".to_string()));
        let model = BpeModel::learn(&corpus, 1).unwrap();
        assert_eq!(model.merges(), &[expected]);
        assert_eq!(model.apply("low"), vec!["lo@@", "w"]);
        assert_eq!(model.apply("lower"), vec!["lo@@", "w@@", "e@@", "r"]);
    }

    #[test]
    fn more_merges_compose() {
        let model = BpeModel::learn(&["low low low", "lower"], 3).unwrap();
        // after l+o and lo+w</w> every remaining pair occurs once
        assert_eq!(model.merge_count(), 2);
        assert_eq!(model.merges()[1], ("lo".to_string(), "w</w>".to_string()));
        assert_eq!(model.apply("low lower"), vec!["low", "lo@@", "w@@", "e@@", "r"]);
    }

    #[test]
    fn no_merges_means_characters() {
        let model = BpeModel::learn(&["ab"], 0).unwrap();
        assert_eq!(model.merge_count(), 0);
        assert_eq!(model.apply("ab"), vec!["a@@", "b"]);
        assert_eq!(BpeModel::default().apply("ab cd"), vec!["a@@", "b", "c@@", "d"]);
    }

    #[test]
    fn stops_when_pairs_are_unique() {
        let model = BpeModel::learn(&["abc"], 10).unwrap();
        assert_eq!(model.merge_count(), 0);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(BpeModel::learn(&["  ", ""], 3), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn text_format_round_trip() {
        let model = BpeModel::learn(&["low low low lower newest newest widest"], 8).unwrap();
        let back = BpeModel::from_text(&model.to_text()).unwrap();
        assert_eq!(back, model);
        assert!(model.to_text().starts_with("#lenlab-bpe v1\n"));
        assert!(BpeModel::from_text("a b\n").is_err());
    }

    #[test]
    fn pieces_are_substrings_of_their_word() {
        let corpus = ["the quick brown fox jumps over the lazy dog", "the dog barks", "foxes jump"];
        let model = BpeModel::learn(&corpus, 20).unwrap();
        for line in corpus {
            let pieces = model.apply(line);
            let words: Vec<&str> = line.split_whitespace().collect();
            let mut wi = 0;
            for p in &pieces {
                let core = p.strip_suffix(CONTINUATION).unwrap_or(p);
                assert!(words[wi].contains(core), "{core} not in {}", words[wi]);
                if !p.ends_with(CONTINUATION) {
                    wi += 1;
                }
            }
            assert_eq!(desegment(&pieces), words);
        }
    }

    #[test]
    fn literal_markers_survive() {
        let model = BpeModel::learn(&["a@@ b\\a @ @@"], 5).unwrap();
        for line in ["a@@ b\\a @ @@", "x@@@ \\\\ \\"] {
            let words: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(desegment(&model.apply(line)), words);
        }
    }

    proptest! {
        #[test]
        fn round_trip(train in prop::collection::vec("[a-d@\\\\]{1,6}( [a-d@\\\\]{1,6}){0,5}", 1..8),
                      line in "[a-e@\\\\]{1,7}( [a-e@\\\\]{1,7}){0,6}",
                      merges in 0usize..30) {
            let model = BpeModel::learn(&train, merges).unwrap();
            let words: Vec<&str> = line.split_whitespace().collect();
            prop_assert_eq!(desegment(&model.apply(&line)), words);
        }
    }
}
