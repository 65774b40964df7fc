//! Whitespace + punctuation splitter for raw text.
//!
//! Input corpora are normally pre-tokenized; this exists so raw text can be
//! pushed through the pipeline without an external tokenizer. It is not a
//! reimplementation of any particular tokenizer's rules.

/// Splits on whitespace, then separates every punctuation character into its own token.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(tokenize("Hello, world!"), vec!["Hello", ",", "world", "!"]);
        assert_eq!(tokenize("  don't  "), vec!["don", "'", "t"]);
        assert_eq!(tokenize("Žižkov 2020."), vec!["Žižkov", "2020", "."]);
        assert!(tokenize("   ").is_empty());
    }
}
