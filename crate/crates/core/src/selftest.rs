//! Built-in invariant suite run by `fsda selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cbcp::{balance_dataset, BalanceConfig};
use crate::dataset::{label_text, BBox, DetectionDataset, SourceFlag};
use crate::features::{pool_instances, upsample_level, FeatureMap};
use crate::loss::{
    classification_loss, dissimilarity_loss, i2da_loss, similarity_loss, ClassifierHead, InstanceBatch, LossConfig,
    SimilarityForm,
};
use crate::metrics::{ground_truth, map_suite, Detection};
use crate::schedule::{compose_schedule, DatasetTag};
use crate::synthetic::{synthetic_features, synthetic_source, synthetic_target, SyntheticSpec};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

fn check(name: &str, result: std::result::Result<String, String>) -> CheckOutcome {
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Pixel cells covered by a box, using the same overlap rule as the mask.
fn covered_pixels(b: &BBox, w: u32, h: u32) -> impl Iterator<Item = (u32, u32)> {
    let (x0, y0, x1, y1) = b.pixel_rect(w, h);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

fn balance_check(seed: u64) -> std::result::Result<String, String> {
    let source = synthetic_source(&SyntheticSpec::skewed_source());
    let target = synthetic_target(source.num_classes(), 5, seed ^ 0x5eed);
    let cfg = BalanceConfig {
        seed,
        ..BalanceConfig::default()
    };
    let out = balance_dataset(&source, &target, &cfg).map_err(|e| e.to_string())?;
    let aug = &out.dataset;
    ensure(aug.len() == source.len(), || {
        format!("augmented size {} != source size {}", aug.len(), source.len())
    })?;
    let counts = aug.class_counts();
    let max_before = source.class_counts().into_iter().max().unwrap_or(0);
    let floor = cfg.beta * max_before as f64;
    ensure(counts.iter().all(|&c| c as f64 >= floor), || {
        format!("class counts {counts:?} below {floor}")
    })?;
    for im in &aug.images {
        let (w, h) = (im.width(), im.height());
        let mut total = vec![0u32; (w * h) as usize];
        let mut pasted = vec![0u32; (w * h) as usize];
        for a in &im.annotations {
            ensure(a.bbox.within(w, h), || format!("{}: box outside image", im.image_id))?;
            for (x, y) in covered_pixels(&a.bbox, w, h) {
                let i = (y * w + x) as usize;
                total[i] += 1;
                pasted[i] += u32::from(a.source == SourceFlag::Pasted);
            }
        }
        ensure(total.iter().zip(&pasted).all(|(&t, &p)| p == 0 || t == 1), || {
            format!("{}: pasted box overlaps another box", im.image_id)
        })?;
    }
    let stats_dense = source
        .images
        .iter()
        .filter(|im| im.annotations.len() >= cfg.r)
        .collect::<Vec<_>>();
    for d in &stats_dense {
        ensure(aug.image(&d.image_id) == Some(*d), || {
            format!("dense image {} was modified", d.image_id)
        })?;
    }
    Ok(format!(
        "counts {counts:?}, {} dense images untouched",
        stats_dense.len()
    ))
}

fn random_batch(rng: &mut ChaCha8Rng, dim: usize, classes: usize) -> InstanceBatch {
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..rng.gen_range(1..=4) {
            vectors.push((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            labels.push(c);
        }
    }
    InstanceBatch::new(vectors, labels).expect("valid batch")
}

fn gradient_error(batch: &InstanceBatch, analytic: &[Vec<f64>], f: &dyn Fn(&InstanceBatch) -> f64) -> f64 {
    const H: f64 = 1e-6;
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (i, row) in analytic.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            let mut plus = batch.clone();
            plus.vectors_mut()[i][j] += H;
            let mut minus = batch.clone();
            minus.vectors_mut()[i][j] -= H;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
            diff += (numeric - a).powi(2);
            scale = scale.max(numeric.abs()).max(a.abs());
        }
    }
    if scale < 1e-10 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn gradient_check(seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let batch = random_batch(&mut rng, 8, 3);
        let sim = similarity_loss(&batch, SimilarityForm::OneMinusCosine).map_err(|e| e.to_string())?;
        worst = worst.max(gradient_error(&batch, &sim.grad, &|b| {
            similarity_loss(b, SimilarityForm::OneMinusCosine).unwrap().value
        }));
        let margin = -0.2;
        let dis = dissimilarity_loss(&batch, margin).map_err(|e| e.to_string())?;
        worst = worst.max(gradient_error(&batch, &dis.grad, &|b| {
            dissimilarity_loss(b, margin).unwrap().value
        }));
        let mut head = ClassifierHead::zeros(3, 8);
        head.weights_mut()
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-0.5..0.5));
        let cls = classification_loss(&batch, &head).map_err(|e| e.to_string())?;
        worst = worst.max(gradient_error(&batch, &cls.grad, &|b| {
            classification_loss(b, &head).unwrap().value
        }));
    }
    ensure(worst < 1e-5, || format!("worst relative gradient error {worst:e}"))?;
    Ok(format!("worst relative gradient error {worst:e}"))
}

fn loss_identities() -> std::result::Result<String, String> {
    let identical = InstanceBatch::new(
        vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![-3.0, 1.0], vec![-3.0, 1.0]],
        vec![0, 0, 1, 1],
    )
    .expect("valid batch");
    let sim = similarity_loss(&identical, SimilarityForm::OneMinusCosine).map_err(|e| e.to_string())?;
    ensure(sim.value.abs() < 1e-12, || {
        format!("L_sim {} on identical vectors", sim.value)
    })?;
    // cos((1,2), (-3,1)) is negative, below a 0.3 margin
    let dis = dissimilarity_loss(&identical, 0.3).map_err(|e| e.to_string())?;
    ensure(dis.value == 0.0, || format!("L_dis {} with inactive hinge", dis.value))?;
    let n = 4usize;
    let batch =
        InstanceBatch::new((0..n).map(|i| vec![i as f64 + 1.0, 1.0]).collect(), (0..n).collect()).expect("valid batch");
    let cls = classification_loss(&batch, &ClassifierHead::zeros(n, 2)).map_err(|e| e.to_string())?;
    let expected = n as f64 * (n as f64).ln();
    ensure((cls.value - expected).abs() < 1e-9, || {
        format!("L_cls {} != N ln N = {expected}", cls.value)
    })?;
    Ok("L_sim = 0, hinge inactive, L_cls = N ln N".into())
}

fn i2da_check(seed: u64) -> std::result::Result<String, String> {
    let records = synthetic_features(3, 3, [8, 16, 12], seed);
    let heads = [8, 16, 12].map(|d| ClassifierHead::zeros(3, d));
    let cfg = LossConfig::default();
    let r = i2da_loss(&records, &heads, &cfg, 16).map_err(|e| e.to_string())?;
    let recombined = cfg.lambda1 * r.l_sim + cfg.lambda2 * r.l_dis + cfg.lambda3 * r.l_cls;
    ensure((r.l_i2da - recombined).abs() <= 1e-12, || {
        format!("combined {} != recombined {recombined}", r.l_i2da)
    })?;
    let expected: usize = records.iter().map(|rec| rec.gt.len()).sum();
    ensure(r.instances.len() == expected, || {
        format!("{} instances for {expected} boxes", r.instances.len())
    })?;
    Ok(format!("L_I2DA = {:.6e}", r.l_i2da))
}

fn pooling_check() -> std::result::Result<String, String> {
    let constant = FeatureMap::constant(2, 3, 5, 1.25);
    let up = upsample_level(&constant, 7);
    ensure(up.values().iter().all(|&v| v == 1.25), || {
        "constant map changed under upsampling".into()
    })?;
    for rec in synthetic_features(10, 4, [4, 4, 4], 11) {
        let pooled = pool_instances(&rec, 16).map_err(|e| e.to_string())?;
        ensure(pooled.len() == 3 * rec.gt.len(), || {
            format!(
                "{}: {} instances for {} boxes",
                rec.image_id,
                pooled.len(),
                rec.gt.len()
            )
        })?;
    }
    Ok("constant upsampling exact, 3 instances per box".into())
}

fn metric_check() -> std::result::Result<String, String> {
    let ds: DetectionDataset = synthetic_target(4, 5, 3);
    let dets: Vec<Detection> = ground_truth(&ds)
        .into_iter()
        .map(|g| Detection {
            image_id: g.image_id,
            class_id: g.class_id,
            bbox: g.bbox,
            confidence: 0.9,
        })
        .collect();
    let r = map_suite(&dets, &ground_truth(&ds), 4);
    ensure(r.map50 == 1.0 && r.map50_95 == 1.0 && r.recall == 1.0, || {
        format!("perfect detections gave {} / {} / {}", r.map50, r.map50_95, r.recall)
    })?;
    Ok("perfect detections score 1.0".into())
}

fn schedule_check(seed: u64) -> std::result::Result<String, String> {
    let source = synthetic_source(&SyntheticSpec {
        num_images: 40,
        class_counts: vec![20, 10],
        dense_images: 2,
        ..SyntheticSpec::skewed_source()
    });
    let target = synthetic_target(2, 3, seed);
    let s = compose_schedule(&source, &source, &target, 4, 2000, seed).map_err(|e| e.to_string())?;
    let mut counts = [0usize; 2];
    for b in &s.batches {
        let t = b.entries.iter().filter(|e| e.dataset == DatasetTag::Target).count();
        ensure(t == 1, || format!("batch {} has {t} target images", b.index))?;
        for e in &b.entries {
            match e.dataset {
                DatasetTag::Source => counts[0] += 1,
                DatasetTag::Augmented => counts[1] += 1,
                DatasetTag::Target => {}
            }
        }
    }
    let share = counts[0] as f64 / (counts[0] + counts[1]) as f64;
    ensure((share - 30.0 / 98.0).abs() < 0.02, || format!("source share {share}"))?;
    Ok(format!("source share {share:.4}"))
}

fn label_check() -> std::result::Result<String, String> {
    let ds = synthetic_target(3, 4, 8);
    for im in &ds.images {
        let text = label_text(im);
        ensure(text.lines().count() == im.annotations.len(), || {
            format!("{}: label lines do not match annotations", im.image_id)
        })?;
    }
    Ok("one label line per annotation".into())
}

/// Run every check; `passed` is false if any check failed.
pub fn run_selftest(seed: u64) -> SelftestReport {
    let checks = vec![
        check("balance_property", balance_check(seed)),
        check("gradients", gradient_check(seed)),
        check("loss_identities", loss_identities()),
        check("i2da_recombination", i2da_check(seed)),
        check("pooling", pooling_check()),
        check("metrics_perfect", metric_check()),
        check("schedule_mix", schedule_check(seed)),
        check("labels", label_check()),
    ];
    SelftestReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
