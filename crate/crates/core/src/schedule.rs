//! Per-epoch batch schedules mixing few-shot target, real source and augmented source images.
//!
//! Every batch opens with exactly one target image drawn with replacement from
//! the annotated target pool. The remaining slots pick the source pool with
//! probability 30/98 and the augmented pool with 68/98, then take the next
//! image of that pool's shuffled deck; once a deck runs out the pool is sampled
//! with replacement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DetectionDataset;
use crate::error::{Error, Result};

/// Nominal per-batch shares of target, source and augmented data.
pub const NOMINAL_MIX: [f64; 3] = [0.02, 0.30, 0.68];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Target,
    Source,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub dataset: DatasetTag,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub index: usize,
    pub entries: Vec<BatchEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleMeta {
    pub batch_size: usize,
    pub epoch_len: usize,
    pub seed: u64,
    pub nominal_mix: [f64; 3],
    /// Share of each batch taken by the target image.
    pub effective_target_share: f64,
    /// Probability that a non-target slot draws from the source pool.
    pub source_probability: f64,
    pub augmented_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSchedule {
    pub batch_size: usize,
    pub batches: Vec<Batch>,
    pub meta: ScheduleMeta,
}

impl BatchSchedule {
    /// One JSON object per batch, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for b in &self.batches {
            out.push_str(&serde_json::to_string(b).expect("batch serializes"));
            out.push('\n');
        }
        out
    }
}

struct Deck<'a> {
    ids: Vec<&'a str>,
    next: usize,
}

impl<'a> Deck<'a> {
    fn new(mut ids: Vec<&'a str>, rng: &mut impl Rng) -> Self {
        ids.shuffle(rng);
        Self { ids, next: 0 }
    }

    fn draw(&mut self, rng: &mut impl Rng) -> &'a str {
        if self.next < self.ids.len() {
            self.next += 1;
            self.ids[self.next - 1]
        } else {
            self.ids[rng.gen_range(0..self.ids.len())]
        }
    }
}

pub fn compose_schedule(
    source: &DetectionDataset,
    augmented: &DetectionDataset,
    target: &DetectionDataset,
    batch_size: usize,
    epoch_len: usize,
    seed: u64,
) -> Result<BatchSchedule> {
    if batch_size < 2 {
        return Err(Error::Schedule(format!(
            "batch_size must be at least 2 to hold a target image and a source image, got {batch_size}"
        )));
    }
    if source.is_empty() || augmented.is_empty() || target.is_empty() {
        return Err(Error::Schedule(
            "source, augmented and target sets must be non-empty".into(),
        ));
    }
    let target_pool: Vec<&str> = target
        .images
        .iter()
        .filter(|im| !im.annotations.is_empty())
        .map(|im| im.image_id.as_str())
        .collect();
    if target_pool.is_empty() {
        return Err(Error::Schedule("target set has no annotated image".into()));
    }

    let source_p = NOMINAL_MIX[1] / (NOMINAL_MIX[1] + NOMINAL_MIX[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = |d: &'_ DetectionDataset| -> Vec<String> { d.images.iter().map(|im| im.image_id.clone()).collect() };
    let (source_ids, augmented_ids) = (ids(source), ids(augmented));
    let mut source_deck = Deck::new(source_ids.iter().map(String::as_str).collect(), &mut rng);
    let mut augmented_deck = Deck::new(augmented_ids.iter().map(String::as_str).collect(), &mut rng);

    let batches = (0..epoch_len)
        .map(|index| {
            let mut entries = Vec::with_capacity(batch_size);
            entries.push(BatchEntry {
                dataset: DatasetTag::Target,
                image_id: target_pool[rng.gen_range(0..target_pool.len())].to_string(),
            });
            for _ in 1..batch_size {
                let (dataset, id) = if rng.gen_bool(source_p) {
                    (DatasetTag::Source, source_deck.draw(&mut rng))
                } else {
                    (DatasetTag::Augmented, augmented_deck.draw(&mut rng))
                };
                entries.push(BatchEntry {
                    dataset,
                    image_id: id.to_string(),
                });
            }
            Batch { index, entries }
        })
        .collect();

    Ok(BatchSchedule {
        batch_size,
        batches,
        meta: ScheduleMeta {
            batch_size,
            epoch_len,
            seed,
            nominal_mix: NOMINAL_MIX,
            effective_target_share: 1.0 / batch_size as f64,
            source_probability: source_p,
            augmented_probability: 1.0 - source_p,
        },
    })
}
