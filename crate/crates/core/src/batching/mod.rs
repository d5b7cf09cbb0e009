//! Batched streams over (creator, sampler) pairs, and named bundles of
//! output sets.

mod bundle;

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::graph::{Creator, Step};
use crate::sample::Sample;
use crate::sampling::Sampler;

pub use bundle::{PipelineBundle, BUNDLE_FORMAT, BUNDLE_FORMAT_VERSION};

/// One value per requested connection, each a list of samples.
pub type Element = Vec<Vec<Sample>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// Shuffle-buffer capacity; 0 disables shuffling.
    pub shuffle_samples: usize,
    /// Batches computed ahead on a worker thread; 0 runs synchronously.
    pub prefetch_size: usize,
    pub seed: u64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 1,
            shuffle_samples: 0,
            prefetch_size: 0,
            seed: 0,
        }
    }
}

struct Producer {
    creator: Creator,
    sampler: Sampler,
    next_identifier: usize,
    running: bool,
    buffer: Vec<Element>,
    config: BatchConfig,
    rng: ChaCha8Rng,
    done: bool,
}

impl Producer {
    /// Next creator step in sampler order, running each identifier to
    /// depletion first.
    fn next_raw(&mut self) -> Result<Option<Element>> {
        loop {
            if !self.running {
                let Ok(id) = self.sampler.get(self.next_identifier) else {
                    return Ok(None);
                };
                let id = id.clone();
                self.next_identifier += 1;
                self.creator.load_identifier(&id)?;
                self.running = true;
            }
            match self.creator.evaluate_step()? {
                Step::Values(v) => return Ok(Some(v)),
                Step::Depleted => self.running = false,
            }
        }
    }

    fn next_element(&mut self) -> Result<Option<Element>> {
        let capacity = self.config.shuffle_samples;
        if capacity == 0 {
            return self.next_raw();
        }
        while self.buffer.len() < capacity {
            match self.next_raw()? {
                Some(e) => self.buffer.push(e),
                None => break,
            }
        }
        if self.buffer.is_empty() {
            return Ok(None);
        }
        let i = self.rng.random_range(0..self.buffer.len());
        Ok(Some(self.buffer.swap_remove(i)))
    }

    fn next_batch(&mut self) -> Result<Option<Element>> {
        if self.done {
            return Ok(None);
        }
        let mut group = Vec::with_capacity(self.config.batch_size);
        while group.len() < self.config.batch_size {
            match self.next_element() {
                Ok(Some(e)) => group.push(e),
                Ok(None) => break,
                Err(e) => {
                    self.done = true;
                    return Err(e);
                }
            }
        }
        if group.is_empty() {
            self.done = true;
            return Ok(None);
        }
        concat_elements(&group).map(Some).inspect_err(|_| self.done = true)
    }
}

/// Concatenates elements position by position along the batch axis.
pub fn concat_elements(group: &[Element]) -> Result<Element> {
    let first = &group[0];
    for e in group {
        let same = e.len() == first.len() && e.iter().zip(first).all(|(a, b)| a.len() == b.len());
        if !same {
            bail!(Contract, "creator outputs differ in structure and cannot be batched");
        }
    }
    (0..first.len())
        .map(|c| {
            (0..first[c].len())
                .map(|k| {
                    let parts: Vec<Sample> = group.iter().map(|e| e[c][k].clone()).collect();
                    Sample::concat_batch(&parts)
                })
                .collect()
        })
        .collect()
}

enum Source {
    Inline(Box<Producer>),
    Prefetch {
        rx: Option<Receiver<Result<Element>>>,
        worker: Option<JoinHandle<()>>,
    },
}

/// Finite stream of batches: one pass over the sampler.
pub struct BatchIterator {
    source: Source,
}

impl BatchIterator {
    pub fn new(creator: Creator, sampler: Sampler, config: BatchConfig) -> Result<Self> {
        if config.batch_size == 0 {
            bail!(Argument, "batch_size must be at least 1");
        }
        let mut producer = Producer {
            creator,
            sampler,
            next_identifier: 0,
            running: false,
            buffer: Vec::new(),
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            done: false,
        };
        let source = if config.prefetch_size == 0 {
            Source::Inline(Box::new(producer))
        } else {
            let (tx, rx) = sync_channel(config.prefetch_size);
            let worker = std::thread::spawn(move || loop {
                match producer.next_batch() {
                    Ok(None) => break,
                    Ok(Some(b)) => {
                        if tx.send(Ok(b)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            });
            Source::Prefetch {
                rx: Some(rx),
                worker: Some(worker),
            }
        };
        Ok(BatchIterator { source })
    }
}

impl Iterator for BatchIterator {
    type Item = Result<Element>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.source {
            Source::Inline(p) => p.next_batch().transpose(),
            Source::Prefetch { rx, .. } => rx.as_ref()?.recv().ok(),
        }
    }
}

impl Drop for BatchIterator {
    fn drop(&mut self) {
        if let Source::Prefetch { rx, worker } = &mut self.source {
            // Closing the queue unblocks a worker waiting to send.
            drop(rx.take());
            if let Some(w) = worker.take() {
                let _ = w.join();
            }
        }
    }
}
