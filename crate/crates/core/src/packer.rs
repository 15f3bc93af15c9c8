//! Full-sentence packing into fixed-length windows.
//!
//! Instances are joined end to end, each followed by one separator id, and
//! the resulting stream is cut into consecutive windows of exactly `seq_len`
//! ids. Instances cross window boundaries freely; an instance longer than a
//! window simply spans several. Only the final partial window is affected by
//! the flush policy.
//!
//! `PAK1` layout: magic `PAK1`, `u32` sequence length, `u64` sequence count,
//! then every sequence as consecutive `u32` ids, all little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAK_MAGIC: &[u8; 4] = b"PAK1";
pub const DEFAULT_SEQ_LEN: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushPolicy {
    #[default]
    DropTail,
    PadTail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackerConfig {
    pub seq_len: usize,
    pub sep_id: u32,
    #[serde(default)]
    pub flush_policy: FlushPolicy,
    pub pad_id: u32,
}

impl PackerConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config(format!(
                "seq_len must be at least 2, got {}",
                self.seq_len
            )));
        }
        for (name, id) in [("sep_id", self.sep_id), ("pad_id", self.pad_id)] {
            if id as usize >= vocab_size {
                return Err(Error::Config(format!(
                    "{name} {id} outside vocab of size {vocab_size}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence(Vec<u32>);

impl PackedSequence {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackStats {
    pub instances: u64,
    pub instance_tokens: u64,
    pub separators: u64,
    pub sequences: u64,
    pub dropped: u64,
    pub padded: u64,
}

impl PackStats {
    /// `sequences * seq_len == instance_tokens + separators - dropped + padded`.
    pub fn is_conserved(&self, seq_len: usize) -> bool {
        self.sequences * seq_len as u64 + self.dropped
            == self.instance_tokens + self.separators + self.padded
    }
}

/// Streaming packer. Feed instances with [`Packer::push`], then
/// [`Packer::finish`].
#[derive(Debug, Clone)]
pub struct Packer {
    cfg: PackerConfig,
    buf: Vec<u32>,
    stats: PackStats,
}

impl Packer {
    pub fn new(cfg: PackerConfig) -> Result<Self> {
        if cfg.seq_len < 2 {
            return Err(Error::Config(format!(
                "seq_len must be at least 2, got {}",
                cfg.seq_len
            )));
        }
        Ok(Self {
            cfg,
            buf: Vec::with_capacity(cfg.seq_len),
            stats: PackStats::default(),
        })
    }

    pub fn push(&mut self, ids: &[u32], out: &mut impl FnMut(PackedSequence)) {
        self.stats.instances += 1;
        self.stats.instance_tokens += ids.len() as u64;
        self.stats.separators += 1;
        let sep = [self.cfg.sep_id];
        for &id in ids.iter().chain(&sep) {
            self.buf.push(id);
            if self.buf.len() == self.cfg.seq_len {
                self.stats.sequences += 1;
                let full = std::mem::replace(&mut self.buf, Vec::with_capacity(self.cfg.seq_len));
                out(PackedSequence(full));
            }
        }
    }

    pub fn finish(mut self, out: &mut impl FnMut(PackedSequence)) -> PackStats {
        if !self.buf.is_empty() {
            match self.cfg.flush_policy {
                FlushPolicy::DropTail => self.stats.dropped = self.buf.len() as u64,
                FlushPolicy::PadTail => {
                    let pad = self.cfg.seq_len - self.buf.len();
                    self.stats.padded = pad as u64;
                    self.buf.resize(self.cfg.seq_len, self.cfg.pad_id);
                    self.stats.sequences += 1;
                    out(PackedSequence(std::mem::take(&mut self.buf)));
                }
            }
        }
        self.stats
    }
}

/// Packs a whole instance stream in memory.
pub fn pack<I, S>(instances: I, cfg: PackerConfig) -> Result<(Vec<PackedSequence>, PackStats)>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u32]>,
{
    let mut packer = Packer::new(cfg)?;
    let mut seqs = Vec::new();
    let mut sink = |s| seqs.push(s);
    for inst in instances {
        packer.push(inst.as_ref(), &mut sink);
    }
    let stats = packer.finish(&mut sink);
    Ok((seqs, stats))
}

/// A set of equal-length sequences, as stored in a `PAK1` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSet {
    seq_len: usize,
    ids: Vec<u32>,
}

impl PackedSet {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            ids: Vec::new(),
        }
    }

    pub fn from_sequences(seq_len: usize, seqs: &[PackedSequence]) -> Result<Self> {
        let mut set = Self::new(seq_len);
        for s in seqs {
            set.push(s.ids())?;
        }
        Ok(set)
    }

    pub fn push(&mut self, seq: &[u32]) -> Result<()> {
        if seq.len() != self.seq_len {
            return Err(Error::Shape(format!(
                "sequence of length {} in a set of length {}",
                seq.len(),
                self.seq_len
            )));
        }
        self.ids.extend_from_slice(seq);
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.ids.len().checked_div(self.seq_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u32] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.ids.chunks_exact(self.seq_len.max(1))
    }

    pub fn max_id(&self) -> Option<u32> {
        self.ids.iter().copied().max()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.ids.len());
        out.extend_from_slice(PAK_MAGIC);
        out.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != PAK_MAGIC {
            return Err(bad("missing PAK1 header".into()));
        }
        let seq_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if seq_len < 2 {
            return Err(bad(format!("sequence length {seq_len} below 2")));
        }
        if body.len() != seq_len * count * 4 {
            return Err(bad(format!(
                "expected {} payload bytes for {count} sequences of {seq_len}, found {}",
                seq_len * count * 4,
                body.len()
            )));
        }
        let ids = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { seq_len, ids })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
