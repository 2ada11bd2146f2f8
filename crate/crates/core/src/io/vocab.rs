// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocabulary files: precomputed text embeddings in the joint space.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TLVOCAB\0"            8 bytes
//! count   u32
//! dim     u32
//! embeds  count × dim × f32
//! texts   count × (u32 byte length, UTF-8 bytes)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

pub const VOCAB_MAGIC: &[u8; 8] = b"TLVOCAB\0";

/// Tolerance on stored embedding norms before they are re-normalized.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    id: String,
    texts: Vec<String>,
    /// `[count × dim]`, every row unit norm.
    embeddings: Tensor,
    renormalized: usize,
}

impl Vocabulary {
    /// Validates texts and normalizes rows whose norm is off by more than
    /// [`UNIT_NORM_TOL`].
    pub fn new(id: impl Into<String>, texts: Vec<String>, embeddings: Tensor) -> Result<Self> {
        let id = id.into();
        if texts.is_empty() {
            return Err(Error::Input("vocabulary must not be empty".into()));
        }
        if embeddings.shape().len() != 2 || embeddings.shape()[0] != texts.len() {
            return Err(Error::Dimension {
                op: "vocabulary",
                left: vec![texts.len()],
                right: embeddings.shape().to_vec(),
            });
        }
        let mut seen = HashSet::new();
        for t in &texts {
            if !seen.insert(t.as_str()) {
                return Err(Error::Input(format!("duplicate vocabulary text `{t}`")));
            }
        }
        let mut embeddings = embeddings;
        let mut renormalized = 0;
        for i in 0..texts.len() {
            let row = embeddings.row_mut(i);
            let n = norm(row);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Degenerate(format!("embedding of `{}` has zero norm", texts[i])));
            }
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
                renormalized += 1;
            }
        }
        if renormalized > 0 {
            log::warn!("vocabulary `{id}`: re-normalized {renormalized} embeddings");
        }
        Ok(Self {
            id,
            texts,
            embeddings,
            renormalized,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn text(&self, i: usize) -> &str {
        &self.texts[i]
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        self.embeddings.row(i)
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn index_of(&self, text: &str) -> Option<usize> {
        self.texts.iter().position(|t| t == text)
    }

    /// Number of rows that had to be re-normalized on construction.
    pub fn renormalized(&self) -> usize {
        self.renormalized
    }

    /// Sub-vocabulary containing only `texts`, in the given order.
    pub fn subset(&self, id: impl Into<String>, texts: &[&str]) -> Result<Self> {
        let mut rows = Vec::with_capacity(texts.len());
        for t in texts {
            let i = self
                .index_of(t)
                .ok_or_else(|| Error::NotFound(format!("`{t}` not in vocabulary `{}`", self.id)))?;
            rows.push(self.embedding(i).to_vec());
        }
        Self::new(id, texts.iter().map(|s| s.to_string()).collect(), Tensor::from_rows(&rows)?)
    }

    /// Checks that the vocabulary lives in a joint space of width `joint_dim`.
    pub fn check_dim(&self, joint_dim: usize) -> Result<()> {
        if self.dim() != joint_dim {
            return Err(Error::Compatibility(format!(
                "vocabulary `{}` has dim {}, bundle joint_dim is {joint_dim}",
                self.id,
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(VOCAB_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.embeddings.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.texts {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        out
    }

    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != VOCAB_MAGIC {
            return Err(Error::Format("bad vocabulary magic".into()));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if count == 0 || dim == 0 {
            return Err(Error::Format(format!("vocabulary header count={count} dim={dim}")));
        }
        let raw = r.take(count.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| {
            Error::Format("vocabulary header overflows".into())
        })?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite vocabulary embedding".into()));
        }
        let mut texts = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(n)?)
                .map_err(|e| Error::Format(format!("vocabulary text is not UTF-8: {e}")))?;
            texts.push(s.to_string());
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after vocabulary", bytes.len() - r.pos)));
        }
        Self::new(id, texts, Tensor::new(vec![count, dim], data)?)
    }

    /// Loads a vocabulary file; its id is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "vocab".into());
        Self::from_bytes(id, &fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("vocabulary file ends early".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
