//! Bounded per-category store of historical high-confidence visual embeddings.
//!
//! Below capacity a new embedding is appended. At capacity it replaces the
//! entry least aligned with an anchor text embedding, but only if it is itself
//! better aligned; otherwise the store is left as is.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::vecmath::{cosine, Embedding};

/// Which text embedding scores memory entries during replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// The embedding used for prediction: the running bank value once the
    /// category has been refined, the image's text embedding before that.
    #[default]
    Prediction,
    /// Only the running bank value. Replacement is skipped while the
    /// category has never been refined.
    BankStrict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryAction {
    Appended,
    /// Replaced the entry at this slot.
    Replaced(usize),
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMemoryBank {
    entries: Vec<Embedding>,
    capacity: usize,
}

impl CategoryMemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// Entries in slot order. Replacement keeps the slot of the evicted entry.
    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    /// Appends when there is room; returns `Rejected` at capacity.
    pub fn try_append(&mut self, v: &[f64]) -> MemoryAction {
        if self.is_full() {
            MemoryAction::Rejected
        } else {
            self.entries.push(v.to_vec());
            MemoryAction::Appended
        }
    }

    pub fn insert_or_replace(&mut self, v: &[f64], anchor: &[f64]) -> Result<MemoryAction> {
        if self.capacity == 0 {
            return Ok(MemoryAction::Rejected);
        }
        if !self.is_full() {
            return Ok(self.try_append(v));
        }
        let candidate = cosine(v, anchor)?;
        let mut weakest = (0, f64::INFINITY);
        for (i, e) in self.entries.iter().enumerate() {
            let s = cosine(e, anchor)?;
            if s < weakest.1 {
                weakest = (i, s);
            }
        }
        if candidate > weakest.1 {
            self.entries[weakest.0] = v.to_vec();
            Ok(MemoryAction::Replaced(weakest.0))
        } else {
            Ok(MemoryAction::Rejected)
        }
    }
}
