//! Byte-fallback vocabulary, greedy tokenizer and vocabulary extension.
//!
//! The tokenizer is greedy longest-match over token byte strings, left to
//! right. Every single byte is a token, so any input is covered. It stands in
//! for a trained subword tokenizer: extension only needs to know which base
//! tokens a new token decomposes into.
//!
//! New rows for appended tokens are the arithmetic mean of the base rows of
//! the token's base tokenization, averaged over the multiset of pieces.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

pub const END_OF_TEXT: &str = "<|endoftext|>";
pub const PAD: &str = "<|pad|>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, u32>,
    max_len: usize,
}

/// Outcome of [`Vocab::extend`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extension {
    pub vocab: Vocab,
    /// Tokens appended, in id order.
    pub appended: Vec<Vec<u8>>,
    /// Tokens already present and left alone.
    pub skipped: Vec<Vec<u8>>,
}

impl Vocab {
    /// The 256 single bytes followed by `extra` tokens.
    pub fn with_bytes<S: AsRef<[u8]>>(extra: &[S]) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.extend(extra.iter().map(|t| t.as_ref().to_vec()));
        Self::from_tokens(tokens)
    }

    /// Bytes plus the end-of-text and padding specials.
    pub fn base() -> Self {
        Self::with_bytes(&[END_OF_TEXT, PAD]).expect("base vocab is valid")
    }

    pub fn from_tokens(tokens: Vec<Vec<u8>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        let mut max_len = 0;
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Vocab(format!("token {i} is empty")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!(
                    "duplicate token {:?}",
                    String::from_utf8_lossy(t)
                )));
            }
            max_len = max_len.max(t.len());
        }
        if let Some(b) = (0..=255u8).find(|b| !index.contains_key(&[*b][..])) {
            return Err(Error::Vocab(format!("single byte 0x{b:02x} missing")));
        }
        Ok(Self {
            tokens,
            index,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &[u8]) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn end_of_text(&self) -> Option<u32> {
        self.id(END_OF_TEXT.as_bytes())
    }

    pub fn pad(&self) -> Option<u32> {
        self.id(PAD.as_bytes())
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenize_bytes(text.as_bytes())
    }

    pub fn tokenize_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len());
        let mut pos = 0;
        while pos < bytes.len() {
            let longest = self.max_len.min(bytes.len() - pos);
            let (id, len) = (1..=longest)
                .rev()
                .find_map(|l| self.id(&bytes[pos..pos + l]).map(|id| (id, l)))
                .expect("single bytes are always present");
            out.push(id);
            pos += len;
        }
        out
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.token(id).ok_or(Error::TokenRange {
                id,
                vocab: self.len(),
            })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// Appends tokens not already present, in input order. Existing ids are
    /// unchanged. Re-running with the same list appends nothing.
    pub fn extend<S: AsRef<[u8]>>(&self, new_tokens: &[S]) -> Result<Extension> {
        let mut seen = std::collections::HashSet::new();
        let mut tokens = self.tokens.clone();
        let mut appended = Vec::new();
        let mut skipped = Vec::new();
        for t in new_tokens {
            let t = t.as_ref();
            if t.is_empty() {
                return Err(Error::Vocab("cannot add an empty token".into()));
            }
            if !seen.insert(t) {
                return Err(Error::Vocab(format!(
                    "token {:?} listed twice in the extension",
                    String::from_utf8_lossy(t)
                )));
            }
            if self.index.contains_key(t) {
                skipped.push(t.to_vec());
            } else {
                tokens.push(t.to_vec());
                appended.push(t.to_vec());
            }
        }
        Ok(Extension {
            vocab: Self::from_tokens(tokens)?,
            appended,
            skipped,
        })
    }

    /// One escaped token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            escape_token(t, &mut out);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Err(Error::Vocab("empty vocab file".into()));
        }
        let tokens = body
            .split('\n')
            .enumerate()
            .map(|(i, line)| {
                unescape_token(line).map_err(|e| Error::Vocab(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn escape_token(t: &[u8], out: &mut String) {
    for chunk in t.utf8_chunks() {
        for c in chunk.valid().chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                '\n' => out.push_str("\\n"),
                '\t' => out.push_str("\\t"),
                '\r' => out.push_str("\\r"),
                c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                    let _ = write!(out, "\\x{:02x}", c as u32);
                }
                c => out.push(c),
            }
        }
        for b in chunk.invalid() {
            let _ = write!(out, "\\x{b:02x}");
        }
    }
}

fn unescape_token(line: &str) -> std::result::Result<Vec<u8>, String> {
    let b = line.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        if b[i] != b'\\' {
            out.push(b[i]);
            i += 1;
            continue;
        }
        match b.get(i + 1) {
            Some(b'\\') => out.push(b'\\'),
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'r') => out.push(b'\r'),
            Some(b'x') => {
                let hex = line
                    .get(i + 2..i + 4)
                    .ok_or_else(|| "truncated \\x escape".to_string())?;
                out.push(u8::from_str_radix(hex, 16).map_err(|e| e.to_string())?);
                i += 4;
                continue;
            }
            other => return Err(format!("bad escape {:?}", other.map(|&c| c as char))),
        }
        i += 2;
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}

/// Rows for `new_tokens`, each the mean of the base rows of its base
/// tokenization, appended below a copy of `e`. Existing rows are copied bit
/// for bit. Means accumulate in `f64`.
pub fn mean_init_rows<T: Scalar, S: AsRef<[u8]>>(
    e: &Matrix<T>,
    v_base: &Vocab,
    new_tokens: &[S],
) -> Result<Matrix<T>> {
    if e.rows() != v_base.len() {
        return Err(Error::Shape(format!(
            "matrix has {} rows but vocab has {} tokens",
            e.rows(),
            v_base.len()
        )));
    }
    let mut out = e.clone();
    let mut acc = vec![0.0f64; e.cols()];
    let mut row = vec![T::default(); e.cols()];
    for t in new_tokens {
        let pieces = v_base.tokenize_bytes(t.as_ref());
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &id in &pieces {
            for (a, &x) in acc.iter_mut().zip(e.row(id as usize)) {
                *a += x.into();
            }
        }
        let n = pieces.len() as f64;
        for (r, a) in row.iter_mut().zip(&acc) {
            *r = T::from_f64(a / n);
        }
        out.push_row(&row)?;
    }
    Ok(out)
}

/// Extension applied to a model's input and output token matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelExtension<T> {
    pub embedding: Matrix<T>,
    pub output: Matrix<T>,
    pub vocab: Vocab,
    pub appended: usize,
    pub skipped: usize,
}

/// Extends the vocabulary once and both matrices with the same token order.
/// Each matrix's new rows come only from that matrix.
pub fn extend_model_vocab<T: Scalar, S: AsRef<[u8]>>(
    embedding: &Matrix<T>,
    output: &Matrix<T>,
    v: &Vocab,
    new_tokens: &[S],
) -> Result<ModelExtension<T>> {
    let ext = v.extend(new_tokens)?;
    let embedding = mean_init_rows(embedding, v, &ext.appended)?;
    let output = mean_init_rows(output, v, &ext.appended)?;
    Ok(ModelExtension {
        embedding,
        output,
        vocab: ext.vocab,
        appended: ext.appended.len(),
        skipped: ext.skipped.len(),
    })
}
