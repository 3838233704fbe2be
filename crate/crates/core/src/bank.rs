//! FIFO feature queues and the per-client remote negative set.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::math::FeatureVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankTag {
    Local,
    EncryptedLocal,
    Remote,
}

/// Fixed-capacity FIFO of unit-norm features.
///
/// Each entry carries the shard row it was computed from. Only analytics
/// reads those origins.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    tag: BankTag,
    entries: VecDeque<FeatureVector>,
    origins: VecDeque<u32>,
}

impl MemoryBank {
    pub fn new(capacity: usize, tag: BankTag) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("bank capacity must be positive".into()));
        }
        Ok(MemoryBank {
            capacity,
            tag,
            entries: VecDeque::with_capacity(capacity),
            origins: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tag(&self) -> BankTag {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.front().map(FeatureVector::dim)
    }

    /// Appends in order, evicting the oldest entries beyond capacity.
    pub fn enqueue_batch(&mut self, features: Vec<FeatureVector>) -> Result<()> {
        let origins = vec![u32::MAX; features.len()];
        self.enqueue_with_origins(features, origins)
    }

    pub fn enqueue_with_origins(&mut self, features: Vec<FeatureVector>, origins: Vec<u32>) -> Result<()> {
        if features.len() != origins.len() {
            return Err(Error::DimensionMismatch {
                context: "bank origins",
                expected: features.len(),
                actual: origins.len(),
            });
        }
        let dim = self.dim().or_else(|| features.first().map(FeatureVector::dim));
        if let Some(d) = dim {
            if let Some(bad) = features.iter().find(|f| f.dim() != d) {
                return Err(Error::DimensionMismatch {
                    context: "bank entry",
                    expected: d,
                    actual: bad.dim(),
                });
            }
        }
        let skip = features.len().saturating_sub(self.capacity);
        if skip > 0 {
            log::warn!(
                "enqueueing {} features into a bank of capacity {}; keeping the newest {}",
                features.len(),
                self.capacity,
                self.capacity
            );
        }
        for (f, o) in features.into_iter().zip(origins).skip(skip) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
                self.origins.pop_front();
            }
            self.entries.push_back(f);
            self.origins.push_back(o);
        }
        Ok(())
    }

    /// Replaces all contents.
    pub fn replace(&mut self, features: Vec<FeatureVector>, origins: Vec<u32>) -> Result<()> {
        self.entries.clear();
        self.origins.clear();
        self.enqueue_with_origins(features, origins)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureVector> {
        self.entries.iter()
    }

    /// Owned copy of the current contents, oldest first.
    pub fn snapshot(&self) -> Vec<FeatureVector> {
        self.entries.iter().cloned().collect()
    }

    pub fn origins(&self) -> Vec<u32> {
        self.origins.iter().copied().collect()
    }
}

/// Remote negatives for one client: everybody's encrypted uploads except its own.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RemoteBankSet {
    sources: BTreeMap<u32, Vec<FeatureVector>>,
    flat: Vec<FeatureVector>,
}

impl RemoteBankSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Rebuilds a set from an already-flattened download.
    pub fn from_flat(flat: Vec<FeatureVector>) -> Self {
        RemoteBankSet {
            sources: BTreeMap::new(),
            flat,
        }
    }

    pub fn sources(&self) -> &BTreeMap<u32, Vec<FeatureVector>> {
        &self.sources
    }

    /// Concatenation in ascending source-client order.
    pub fn flat(&self) -> &[FeatureVector] {
        &self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// `Q_s,c`: all uploaded banks except `self_id`'s.
pub fn assemble_remote(all: &BTreeMap<u32, Vec<FeatureVector>>, self_id: u32) -> RemoteBankSet {
    let sources: BTreeMap<u32, Vec<FeatureVector>> = all
        .iter()
        .filter(|(id, _)| **id != self_id)
        .map(|(id, f)| (*id, f.clone()))
        .collect();
    let flat = sources.values().flatten().cloned().collect();
    RemoteBankSet { sources, flat }
}
