use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BatchMode {
    /// Shuffle all ids each epoch and chunk; the last batch may be short.
    #[default]
    Uniform,
    /// Every batch holds `classes` classes with `per_class` samples each.
    /// Leftovers that cannot fill a batch are dropped for the epoch.
    Balanced { classes: usize, per_class: usize },
}

/// Epoch-by-epoch batch generator. Each call to [`BatchSampler::epoch`]
/// draws a fresh permutation from the sampler's own stream.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    ids: Vec<usize>,
    labels: Vec<usize>,
    batch_size: usize,
    mode: BatchMode,
    rng: Rng,
}

impl BatchSampler {
    /// `labels[i]` is the class of `ids[i]`; only used in balanced mode.
    pub fn new(
        ids: Vec<usize>,
        labels: Vec<usize>,
        batch_size: usize,
        mode: BatchMode,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if ids.len() != labels.len() {
            return Err(Error::config("batches", "one label per id required"));
        }
        if let BatchMode::Balanced { classes, per_class } = mode {
            if classes == 0 || per_class == 0 {
                return Err(Error::config(
                    "balanced",
                    "classes and per_class must be positive",
                ));
            }
        }
        Ok(Self {
            ids,
            labels,
            batch_size,
            mode,
            rng: rng::seeded(seed, rng::stream::BATCHES),
        })
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        match self.mode {
            BatchMode::Uniform => {
                let mut ids = self.ids.clone();
                ids.shuffle(&mut self.rng);
                ids.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
            }
            BatchMode::Balanced { classes, per_class } => self.balanced_epoch(classes, per_class),
        }
    }

    fn balanced_epoch(&mut self, classes: usize, per_class: usize) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&id, &label) in self.ids.iter().zip(&self.labels) {
            groups.entry(label).or_default().push(id);
        }
        // each class contributes shuffled chunks of exactly `per_class`
        let mut chunks: Vec<Vec<Vec<usize>>> = groups
            .into_values()
            .map(|mut ids| {
                ids.shuffle(&mut self.rng);
                ids.chunks_exact(per_class).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut open: Vec<usize> = (0..chunks.len())
                .filter(|&c| !chunks[c].is_empty())
                .collect();
            if open.len() < classes {
                break;
            }
            open.shuffle(&mut self.rng);
            let mut batch = Vec::with_capacity(classes * per_class);
            for &c in &open[..classes] {
                batch.extend(chunks[c].pop().expect("open class has a chunk"));
            }
            batches.push(batch);
        }
        batches
    }
}

/// One uniformly shuffled epoch of `ids`.
pub fn make_batches(ids: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let labels = vec![0; ids.len()];
    Ok(BatchSampler::new(ids.to_vec(), labels, batch_size, BatchMode::Uniform, seed)?.epoch())
}
