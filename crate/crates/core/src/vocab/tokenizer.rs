//! Deterministic greedy longest-match subword tokenizer.
//!
//! Words are split on whitespace and matched left to right against the piece
//! table; word-internal pieces carry a `##` prefix. Every alphabet symbol is
//! present both as a word-initial and as a continuation piece, so any
//! lower-case alphanumeric word tokenizes.

use std::collections::HashMap;

use crate::error::{Result, UliError};

const DEFAULT_TABLE: &str = include_str!("../../assets/subwords.txt");
const CONTINUATION: &str = "##";

/// Index into a vocabulary table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub usize);

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
    eos: TokenId,
}

impl Tokenizer {
    pub const EOS: &'static str = "[eos]";

    /// Tokenizer over the in-repo piece table.
    pub fn builtin() -> Self {
        Self::from_table(DEFAULT_TABLE).expect("builtin subword table is valid")
    }

    /// Parses a table: one piece per line, `#` comments and blank lines skipped.
    pub fn from_table(table: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut index = HashMap::new();
        for line in table.lines() {
            let piece = line.trim();
            if piece.is_empty() || piece.starts_with('#') && !piece.starts_with(CONTINUATION) {
                continue;
            }
            if index.insert(piece.to_string(), pieces.len()).is_some() {
                return Err(UliError::Config(format!("duplicate subword piece {piece:?}")));
            }
            pieces.push(piece.to_string());
        }
        let eos = index
            .get(Self::EOS)
            .copied()
            .ok_or_else(|| UliError::Config("subword table lacks [eos]".into()))?;
        for c in Self::alphabet() {
            for form in [c.to_string(), format!("{CONTINUATION}{c}")] {
                if !index.contains_key(&form) {
                    return Err(UliError::Config(format!("subword table lacks {form:?}")));
                }
            }
        }
        let max_piece_chars = pieces.iter().map(|p| p.trim_start_matches(CONTINUATION).chars().count()).max().unwrap_or(1);
        Ok(Self { pieces, index, max_piece_chars, eos: TokenId(eos) })
    }

    pub fn alphabet() -> impl Iterator<Item = char> {
        ('a'..='z').chain('0'..='9')
    }

    pub fn in_alphabet(c: char) -> bool {
        c.is_ascii_lowercase() || c.is_ascii_digit()
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn piece(&self, id: TokenId) -> &str {
        &self.pieces[id.0]
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let lowered = text.to_lowercase();
        if let Some(bad) = lowered.chars().find(|&c| !c.is_whitespace() && !Self::in_alphabet(c)) {
            return Err(UliError::UnknownSymbol { symbol: bad, text: text.to_string() });
        }
        let mut out = Vec::new();
        for word in lowered.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let mut start = 0;
            while start < chars.len() {
                let longest = self.max_piece_chars.min(chars.len() - start);
                let mut matched = None;
                for len in (1..=longest).rev() {
                    let body: String = chars[start..start + len].iter().collect();
                    let key = if start == 0 { body } else { format!("{CONTINUATION}{body}") };
                    if let Some(&id) = self.index.get(&key) {
                        matched = Some((id, len));
                        break;
                    }
                }
                // single symbols are always in the table
                let (id, len) = matched.expect("alphabet symbols are always present");
                out.push(TokenId(id));
                start += len;
            }
        }
        if out.is_empty() {
            return Err(UliError::EmptyInput);
        }
        Ok(out)
    }

    /// Inverse of [`tokenize`](Self::tokenize); stops at the first terminator.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos {
                break;
            }
            let piece = self.piece(id);
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(piece);
                }
            }
        }
        out
    }
}
