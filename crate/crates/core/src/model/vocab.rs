use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id bijection shared by source and target sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials first, then tokens by descending frequency (ties alphabetical).
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut by_freq: Vec<_> = counts.into_iter().filter(|(t, _)| !SPECIALS.contains(t)).collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let all = SPECIALS.iter().map(|s| s.to_string()).chain(by_freq.into_iter().map(|(t, _)| t.to_string()));
        Vocab::from(all.collect::<Vec<_>>())
    }

    /// Builds from whitespace-tokenized lines.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        Self::build(lines.into_iter().flat_map(str::split_whitespace))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(SPECIALS[UNK as usize], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_line(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().filter(|&&i| !matches!(i, PAD | BOS | EOS)).map(|&i| self.token(i).to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_and_unknowns() {
        let v = Vocab::from_lines(["b a b", "c </s>"]);
        assert_eq!(&v.tokens()[..4], &SPECIALS.map(String::from));
        assert_eq!(v.token(4), "b");
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.len(), 7);
        assert_eq!(v.decode(&[1, 4, 5, 2]), vec!["b", "a"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }
}
