use std::collections::HashSet;

use fsda_core::dataset::{Annotation, BBox, DatasetDomain, DetectionDataset, Domain, ImageRecord, Raster};
use fsda_core::schedule::{compose_schedule, DatasetTag};
use proptest::prelude::*;

fn pool(prefix: &str, n: usize) -> DetectionDataset {
    let mut ds = DetectionDataset::new(vec!["a".into()], DatasetDomain::Source);
    for i in 0..n {
        let mut im = ImageRecord::new(format!("{prefix}{i:03}"), Raster::filled(4, 4, [0; 3]), Domain::Source);
        im.annotations
            .push(Annotation::original(0, BBox::new(0.0, 0.0, 2.0, 2.0).unwrap()));
        ds.images.push(im);
    }
    ds
}

#[test]
fn mixture_converges_to_renormalized_shares() {
    let s = compose_schedule(&pool("s", 50), &pool("a", 50), &pool("t", 4), 4, 10_000, 42).unwrap();
    let mut source = 0usize;
    let mut other = 0usize;
    for b in &s.batches {
        for e in b.entries.iter().filter(|e| e.dataset != DatasetTag::Target) {
            if e.dataset == DatasetTag::Source {
                source += 1;
            } else {
                other += 1;
            }
        }
    }
    let share = source as f64 / (source + other) as f64;
    assert!((share - 30.0 / 98.0).abs() < 0.02, "{share}");
    assert!((s.meta.effective_target_share - 0.25).abs() < 1e-15);
}

#[test]
fn different_seeds_differ() {
    let (a, b, t) = (pool("s", 10), pool("a", 10), pool("t", 3));
    let x = compose_schedule(&a, &b, &t, 4, 20, 1).unwrap();
    let y = compose_schedule(&a, &b, &t, 4, 20, 2).unwrap();
    assert_ne!(x.to_json_lines(), y.to_json_lines());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_batch_has_one_target_and_decks_cover_pools(
        n_source in 1usize..20,
        n_aug in 1usize..40,
        n_target in 1usize..5,
        batch_size in 2usize..8,
        epoch_len in 1usize..60,
        seed in any::<u64>(),
    ) {
        let (src, aug, tgt) = (pool("s", n_source), pool("a", n_aug), pool("t", n_target));
        let s = compose_schedule(&src, &aug, &tgt, batch_size, epoch_len, seed).unwrap();
        prop_assert_eq!(s.batches.len(), epoch_len);
        for b in &s.batches {
            prop_assert_eq!(b.entries.len(), batch_size);
            prop_assert_eq!(b.entries[0].dataset, DatasetTag::Target);
            prop_assert_eq!(b.entries.iter().filter(|e| e.dataset == DatasetTag::Target).count(), 1);
        }
        for (tag, ds) in [(DatasetTag::Source, &src), (DatasetTag::Augmented, &aug)] {
            let drawn: Vec<&str> = s.batches.iter().flat_map(|b| &b.entries)
                .filter(|e| e.dataset == tag).map(|e| e.image_id.as_str()).collect();
            let valid: HashSet<&str> = ds.images.iter().map(|i| i.image_id.as_str()).collect();
            prop_assert!(drawn.iter().all(|id| valid.contains(id)));
            // without replacement until the pool is exhausted
            let first: Vec<&str> = drawn.iter().take(ds.len()).copied().collect();
            let unique: HashSet<&str> = first.iter().copied().collect();
            prop_assert_eq!(unique.len(), first.len());
            if drawn.len() >= ds.len() {
                prop_assert_eq!(unique.len(), ds.len());
            }
        }
    }
}
