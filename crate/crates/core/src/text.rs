//! Caption normalisation, tokenisation and vocabulary management.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const SOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Default cap on content tokens per caption, markers excluded.
pub const DEFAULT_MAX_LEN: usize = 22;

/// Lowercases, deletes every character outside `[a-z0-9']` and whitespace,
/// then splits on whitespace runs.
pub fn normalize_and_tokenize(raw: &str) -> Result<Vec<String>> {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || *c == '\'' || c.is_whitespace())
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_owned).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyCaption(raw.to_owned()));
    }
    Ok(tokens)
}

/// Sequence of token ids; generated sequences start with `<sos>` and end
/// with `<eos>` unless cut at the length cap.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    /// `<sos> content… <eos>`
    pub fn framed(content: &[TokenId]) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(SOS);
        ids.extend_from_slice(content);
        ids.push(EOS);
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    /// Ids with `<sos>`, `<eos>` and `<pad>` removed.
    pub fn content(&self) -> Vec<TokenId> {
        self.0
            .iter()
            .copied()
            .filter(|&t| t != SOS && t != EOS && t != PAD)
            .collect()
    }
}

/// Token ↔ id map with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: HashMap<String, TokenId>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// count and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if corpus.iter().all(|c| c.is_empty()) {
            return Err(Error::Degenerate(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in corpus.iter().flatten() {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned())))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { to_id, tokens }
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenRange {
                id,
                size: self.tokens.len(),
            })
    }

    /// Content ids only; out-of-vocabulary words map to `<unk>`.
    pub fn encode_content<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSeq {
        TokenSeq::framed(&self.encode_content(tokens))
    }

    /// Words of a sequence with every marker stripped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token(id)?;
            if id != PAD && id != SOS && id != EOS {
                out.push(tok.to_owned());
            }
        }
        Ok(out)
    }

    pub fn decode_to_string(&self, ids: &[TokenId]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }

    /// One non-reserved token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = std::collections::HashSet::new();
        let mut words = Vec::new();
        for (n, line) in body.lines().enumerate() {
            if line.is_empty() || RESERVED.contains(&line) || !seen.insert(line) {
                return Err(Error::Format {
                    path: path.to_owned(),
                    reason: format!("line {}: empty, reserved or duplicate token {line:?}", n + 1),
                });
            }
            words.push(line.to_owned());
        }
        Ok(Self::from_tokens(words))
    }
}
