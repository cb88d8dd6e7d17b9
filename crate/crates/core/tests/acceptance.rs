//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use relmine::augment::{mixup, mixup_batch, sample_lambda};
use relmine::data::{
    generate_synthetic, zero_shot_triplets, AnnotatedPair, ImageRecord, ObjectInstance,
    SyntheticConfig, TripletType,
};
use relmine::losses::{cross_entropy, kl_divergence, restricted_softmax, stable_softmax, LabelDistribution};
use relmine::metrics::{
    evaluate, ground_truth, mean_recall_at_k, rank_scores, recall_at_k, zero_shot_recall_at_k,
    EvalResult, GtTriplet, ScoredTriplet,
};
use relmine::mining::{impute_implicit_hard, refine_label};
use relmine::model::{init_classifier, loss_and_grad, Sample};
use relmine::taxonomy::{build_vocabulary, default_vg_partition, RelationVocabulary};
use relmine::trainer::{
    component_grid, label_subset_grid, train, training_rng, warmup_stage, TrainConfig,
};

/// Hard-imputation accuracy floor, pinned from a calibration run at 0.835 (seed 0).
const IMPUTATION_ACCURACY_FLOOR: f64 = 0.70;

/// Written to stderr directly so the line shows up even when output is captured.
fn report(id: u32, title: &str, pass: bool, detail: String) {
    let line = format!("criterion {id:>2} [{}] {title}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    stable_softmax(&logits).unwrap().into_inner()
}

#[test]
fn c01_gradient_check() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for (d, h, p) in [(3, 0, 4), (5, 8, 6), (16, 32, 10)] {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let params = init_classifier(d, h, p, seed).unwrap();
            let batch: Vec<Sample> = (0..4)
                .map(|_| {
                    let x = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    Sample::new(x, LabelDistribution::new(random_distribution(&mut rng, p)).unwrap())
                })
                .collect();
            let (_, grads) = loss_and_grad(&params, &batch).unwrap();
            let step = 1e-5;
            for i in 0..params.values().len() {
                let mut plus = params.clone();
                plus.values_mut()[i] += step;
                let mut minus = params.clone();
                minus.values_mut()[i] -= step;
                let numeric = (loss_and_grad(&plus, &batch).unwrap().0
                    - loss_and_grad(&minus, &batch).unwrap().0)
                    / (2.0 * step);
                let analytic = grads.values()[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 10.0;
    report(1, "gradient check", pass, format!("max relative error {worst:.2e}, {secs:.2}s"));
    assert!(pass);
}

#[test]
fn c02_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_identity: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..12);
        let pred = LabelDistribution::new(random_distribution(&mut rng, n)).unwrap();
        let target = LabelDistribution::new(random_distribution(&mut rng, n)).unwrap();
        let gap = cross_entropy(&pred, &target) - kl_divergence(&target, &pred) - target.entropy();
        worst_identity = worst_identity.max(gap.abs());
    }
    let mut worst_restricted: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..12);
        let logits: Vec<f64> = (0..n).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        ids.truncate(rng.random_range(1..=n));
        let restricted = restricted_softmax(&logits, &ids).unwrap();
        let full = stable_softmax(&logits).unwrap().into_inner();
        let mass: f64 = ids.iter().map(|&i| full[i]).sum();
        for i in 0..n {
            let oracle = if ids.contains(&i) { full[i] / mass } else { 0.0 };
            worst_restricted = worst_restricted.max((restricted.probs()[i] - oracle).abs());
        }
    }
    let pass = worst_identity < 1e-10 && worst_restricted < 1e-10;
    report(
        2,
        "loss identities",
        pass,
        format!("CE-KL-H max {worst_identity:.2e}, restricted softmax max {worst_restricted:.2e}"),
    );
    assert!(pass);
}

#[test]
fn c03_refinement_invariant() {
    let vocab = default_vg_partition();
    let explicit = vocab.explicit_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for trial in 0..1000u64 {
        let params = init_classifier(6, 4, vocab.len(), trial).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let imputed = impute_implicit_hard(&params, &x, &vocab).unwrap();
        let annotated = LabelDistribution::one_hot(vocab.len(), *explicit.choose(&mut rng).unwrap());
        let refined = refine_label(&annotated, &imputed).unwrap();
        let halves: Vec<usize> = (0..vocab.len()).filter(|&i| refined.probs()[i] == 0.5).collect();
        let others_zero = (0..vocab.len()).all(|i| halves.contains(&i) || refined.probs()[i] == 0.0);
        let ok = halves.len() == 2
            && others_zero
            && halves.iter().filter(|i| vocab.explicit_ids().contains(i)).count() == 1
            && halves.iter().filter(|i| vocab.implicit_ids().contains(i)).count() == 1;
        if !ok {
            violations += 1;
        }
    }
    report(3, "refinement invariant", violations == 0, format!("{violations} violations in 1000 pairs"));
    assert_eq!(violations, 0);
}

#[test]
fn c04_mixup_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = LabelDistribution::new(vec![0.2, 0.8, 0.0]).unwrap();
    let q = LabelDistribution::one_hot(3, 2);
    let (x, y) = ([0.5, -1.0], [2.0, 3.0]);
    let endpoints = mixup(&x, &p, &y, &q, 1.0).unwrap() == (x.to_vec(), p.clone())
        && mixup(&x, &p, &y, &q, 0.0).unwrap() == (y.to_vec(), q.clone());

    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| sample_lambda(4.0, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    let moments = (mean - 0.5).abs() <= 0.01 && (var - 1.0 / 36.0).abs() <= 0.003;

    let mut valid = true;
    for _ in 0..200 {
        let k = rng.random_range(2..8);
        let batch: Vec<Sample> = (0..rng.random_range(1..20))
            .map(|_| {
                let x = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Sample::new(x, LabelDistribution::new(random_distribution(&mut rng, k)).unwrap())
            })
            .collect();
        for m in mixup_batch(&batch, &mut rng, 4.0).unwrap() {
            let mass: f64 = m.target.probs().iter().sum();
            valid &= (mass - 1.0).abs() <= 1e-9 && m.target.probs().iter().all(|&v| v >= 0.0);
        }
    }
    let pass = endpoints && moments && valid;
    report(
        4,
        "mixup invariants",
        pass,
        format!("endpoints {endpoints}, Beta(4,4) mean {mean:.4} var {var:.5}, targets valid {valid}"),
    );
    assert!(pass);
}

/// Toy instance: per image, `(predicate ids, score rows)`.
struct Toy {
    images: Vec<ImageRecord>,
    scores: Vec<Vec<Vec<f64>>>,
    vocab: RelationVocabulary,
    zero_shot: BTreeSet<TripletType>,
}

fn toy_instances() -> Vec<Toy> {
    let mut out = Vec::new();
    let mut counter = 0u64;
    for num_preds in 1..=5usize {
        let names: Vec<String> = (0..num_preds).map(|i| format!("p{i}")).collect();
        let vocab = if num_preds == 1 {
            None
        } else {
            Some(build_vocabulary(&names, &names[..1]).unwrap())
        };
        for num_images in 1..=3usize {
            let shapes = (0..5usize.pow(num_images as u32)).map(|code| {
                (0..num_images).map(|i| (code / 5usize.pow(i as u32)) % 5).collect::<Vec<_>>()
            });
            for shape in shapes {
                counter += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(counter);
                let mut images = Vec::new();
                let mut scores = Vec::new();
                for (ii, &num_pairs) in shape.iter().enumerate() {
                    let objects = (0..8)
                        .map(|id| ObjectInstance { id, class_id: rng.random_range(0..2), bbox: [0.1, 0.1, 0.3, 0.3] })
                        .collect();
                    let pairs: Vec<AnnotatedPair> = (0..num_pairs)
                        .map(|i| AnnotatedPair {
                            subject_id: i,
                            object_id: i + 4,
                            predicate_id: rng.random_range(0..num_preds),
                            embedding: vec![0.0],
                            oracle: None,
                        })
                        .collect();
                    // Coarse scores so ties exercise the tie-breaking order.
                    scores.push(
                        (0..num_pairs)
                            .map(|_| (0..num_preds).map(|_| rng.random_range(0..4) as f64 / 4.0).collect())
                            .collect(),
                    );
                    images.push(ImageRecord { image_id: format!("toy{ii}"), objects, pairs });
                }
                let all_types: Vec<TripletType> = images
                    .iter()
                    .flat_map(|img| ground_truth(img).into_iter().map(|g| g.triplet_type()))
                    .collect();
                let zero_shot = all_types.into_iter().filter(|_| rng.random_bool(0.4)).collect();
                let vocab = vocab.clone().unwrap_or_else(|| {
                    // A one-predicate vocabulary cannot be split; pad with an unused explicit label.
                    build_vocabulary(&["p0", "pad"], &["pad"]).unwrap()
                });
                out.push(Toy { images, scores, vocab, zero_shot });
            }
        }
    }
    out
}

/// Position of a candidate in its image's ranking, by direct comparison.
fn brute_rank(cands: &[(usize, usize, f64)], i: usize) -> usize {
    let (pi, ki, si) = cands[i];
    cands
        .iter()
        .filter(|&&(p, k, s)| s > si || (s == si && (p < pi || (p == pi && k < ki))))
        .count()
}

fn brute_hit(image: &ImageRecord, scores: &[Vec<f64>], g: &GtTriplet, k: usize) -> bool {
    let cands: Vec<(usize, usize, f64)> = scores
        .iter()
        .enumerate()
        .flat_map(|(p, row)| row.iter().enumerate().map(move |(c, &s)| (p, c, s)))
        .collect();
    (0..cands.len()).any(|i| {
        let (p, c, _) = cands[i];
        let pair = &image.pairs[p];
        pair.subject_id == g.subject_id
            && pair.object_id == g.object_id
            && c == g.predicate_id
            && brute_rank(&cands, i) < k
    })
}

fn brute_metrics(toy: &Toy, k: usize) -> (f64, f64, Option<f64>) {
    let (mut r_sum, mut r_n) = (0.0, 0usize);
    let (mut z_sum, mut z_n) = (0.0, 0usize);
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (img, sc) in toy.images.iter().zip(&toy.scores) {
        let gt = ground_truth(img);
        let hits: Vec<bool> = gt.iter().map(|g| brute_hit(img, sc, g, k)).collect();
        if !gt.is_empty() {
            r_sum += hits.iter().filter(|h| **h).count() as f64 / gt.len() as f64;
            r_n += 1;
        }
        let zs: Vec<bool> = gt
            .iter()
            .zip(&hits)
            .filter(|(g, _)| toy.zero_shot.contains(&g.triplet_type()))
            .map(|(_, h)| *h)
            .collect();
        if !zs.is_empty() {
            z_sum += zs.iter().filter(|h| **h).count() as f64 / zs.len() as f64;
            z_n += 1;
        }
        for (g, h) in gt.iter().zip(&hits) {
            let e = per_class.entry(g.predicate_id).or_default();
            e.1 += 1;
            e.0 += *h as usize;
        }
    }
    let r = if r_n == 0 { 0.0 } else { r_sum / r_n as f64 };
    let mr = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(|(f, t)| *f as f64 / *t as f64).sum::<f64>() / per_class.len() as f64
    };
    let zs = (!toy.zero_shot.is_empty() && z_n > 0).then(|| z_sum / z_n as f64);
    (r, mr, zs)
}

#[test]
fn c05_metric_oracle_equivalence() {
    let toys = toy_instances();
    let mut mismatches = 0;
    let mut checks = 0;
    for toy in &toys {
        let ranked: Vec<Vec<ScoredTriplet>> =
            toy.images.iter().zip(&toy.scores).map(|(i, s)| rank_scores(i, s)).collect();
        let gt: Vec<Vec<GtTriplet>> = toy.images.iter().map(ground_truth).collect();
        for k in [1, 2, 3, 5, 8, 13, 20, 21, 50, 100] {
            let (r, mr, zs) = brute_metrics(toy, k);
            checks += 1;
            if recall_at_k(&ranked, &gt, k) != r
                || mean_recall_at_k(&ranked, &gt, k, &toy.vocab).0 != mr
                || zero_shot_recall_at_k(&ranked, &gt, k, &toy.zero_shot) != zs
            {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0 && toys.len() >= 200;
    report(
        5,
        "metric oracle equivalence",
        pass,
        format!("{} instances, {checks} (instance, K) checks, {mismatches} mismatches", toys.len()),
    );
    assert!(pass);
}

fn relmine(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_relmine"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("binary runs");
    assert!(status.success(), "relmine {args:?} failed");
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

/// Training log without the wall-clock column.
fn log_without_timing(dir: &Path) -> String {
    String::from_utf8(read(dir, "train_log.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn c06_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    relmine(&["gen", "--out", data.to_str().unwrap()]);
    let mut times = Vec::new();
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let started = Instant::now();
        relmine(&["train", "--profile", "desk", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        let ckpt = out.join("checkpoint.rmck");
        relmine(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        times.push(started.elapsed().as_secs_f64());
        dirs.push(out);
    }
    let mut identical = true;
    for name in ["checkpoint.rmck", "metrics.csv", "per_class.csv", "subset.csv"] {
        identical &= read(&dirs[0], name) == read(&dirs[1], name);
    }
    identical &= log_without_timing(&dirs[0]) == log_without_timing(&dirs[1]);
    let slowest = times.iter().cloned().fold(0.0, f64::max);
    let pass = identical && slowest < 300.0;
    report(
        6,
        "determinism",
        pass,
        format!("artifacts identical {identical}, slowest train+eval {slowest:.1}s"),
    );
    assert!(pass);
}

const SEEDS: [u64; 3] = [0, 1, 2];

const VARIANTS: [&str; 8] = [
    "baseline/all",
    "baseline/explicit",
    "baseline/implicit",
    "ours/explicit-impute-on-implicit",
    "ours/implicit-impute-on-explicit",
    "ours/mixup/soft",
    "ours/mixup/no-refinement",
    "ours/no-mixup/hard",
];

/// Mean final test results over seeds for each grid variant, computed once per test binary.
fn ablation_means() -> &'static BTreeMap<&'static str, Vec<EvalResult>> {
    static CELL: OnceLock<BTreeMap<&'static str, Vec<EvalResult>>> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut results: BTreeMap<&'static str, Vec<EvalResult>> = BTreeMap::new();
        for seed in SEEDS {
            let bench = generate_synthetic(&SyntheticConfig { seed, ..SyntheticConfig::default() }).unwrap();
            let train_set = bench.train.without_oracle();
            let zs = zero_shot_triplets(&train_set, &bench.test).unwrap();
            let base = TrainConfig { seed, ..TrainConfig::desk() };
            let mut rows = label_subset_grid(&base);
            rows.extend(component_grid(&base));
            for name in VARIANTS {
                let row = rows.iter().find(|r| r.name == name).expect("grid row");
                let (ckpt, _) = train(&train_set, &bench.test, &row.config).unwrap();
                results.entry(name).or_default().push(evaluate(&ckpt.params, &bench.test, &zs));
            }
        }
        results
    })
}

fn mean_of(name: &str, f: impl Fn(&EvalResult) -> f64) -> f64 {
    let runs = &ablation_means()[name];
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn mr50(name: &str) -> f64 {
    mean_of(name, |e| e.mean_recall[1])
}

#[test]
fn c07_label_subset_ordering() {
    let ours = mr50("ours/implicit-impute-on-explicit");
    let all = mr50("baseline/all");
    let explicit = mr50("baseline/explicit");
    let swapped = mr50("ours/explicit-impute-on-implicit");
    let pass = ours - all >= 0.02 && ours - explicit >= 0.02 && swapped - explicit <= 0.01;
    report(
        7,
        "label-subset ordering",
        pass,
        format!(
            "mR@50 ours {ours:.4}, all {all:.4}, explicit-only {explicit:.4}, swapped {swapped:.4} (gain over its baseline {:+.2} pts)",
            100.0 * (swapped - explicit)
        ),
    );
    assert!(pass);
}

#[test]
fn c08_subset_collapse() {
    let explicit_on_implicit = mean_of("baseline/explicit", |e| e.subset_50.implicit.unwrap_or(0.0));
    let implicit_on_explicit = mean_of("baseline/implicit", |e| e.subset_50.explicit.unwrap_or(0.0));
    let ours_implicit = mean_of("ours/implicit-impute-on-explicit", |e| e.subset_50.implicit.unwrap_or(0.0));
    let all_implicit = mean_of("baseline/all", |e| e.subset_50.implicit.unwrap_or(0.0));
    let clauses = [
        explicit_on_implicit < 0.05,
        implicit_on_explicit > 0.15,
        ours_implicit > all_implicit,
    ];
    let pass = clauses.iter().all(|c| *c);
    report(
        8,
        "explicit/implicit subset collapse",
        pass,
        format!(
            "explicit-only on implicit {explicit_on_implicit:.4} (<0.05 {}), implicit-only on explicit {implicit_on_explicit:.4} (>0.15 {}), ours implicit {ours_implicit:.4} vs all {all_implicit:.4} ({})",
            clauses[0], clauses[1], clauses[2]
        ),
    );
    assert!(pass);
}

#[test]
fn c09_imputation_quality() {
    let bench = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let config = TrainConfig::desk();
    let mut rng = training_rng(&config);
    let params = warmup_stage(&bench.train.without_oracle(), &config, &mut rng).unwrap();
    let vocab = &bench.train.vocabulary;
    let (mut correct, mut total) = (0usize, 0usize);
    for r in bench.train.pair_refs() {
        let pair = bench.train.pair(r);
        if vocab.explicit_ids().contains(&pair.predicate_id) {
            let imputed = impute_implicit_hard(&params, &pair.embedding_f64(), vocab).unwrap();
            total += 1;
            correct += (imputed.argmax() == pair.oracle.as_ref().unwrap().true_implicit) as usize;
        }
    }
    let accuracy = correct as f64 / total as f64;
    let chance = 1.0 / vocab.implicit_ids().len() as f64;
    let pass = accuracy > 3.0 * chance && accuracy > IMPUTATION_ACCURACY_FLOOR;
    report(
        9,
        "imputation quality",
        pass,
        format!(
            "accuracy {accuracy:.4} on {total} pairs, chance {chance:.4}, floor {IMPUTATION_ACCURACY_FLOOR}"
        ),
    );
    assert!(pass);
}

#[test]
fn c10_component_ablation() {
    let hard = mr50("ours/implicit-impute-on-explicit");
    let soft = mr50("ours/mixup/soft");
    let mixup_only = mr50("ours/mixup/no-refinement");
    let refine_only = mr50("ours/no-mixup/hard");
    let pass = hard >= soft - 0.005 && mixup_only < hard && refine_only < hard;
    report(
        10,
        "hard/soft and component ablation",
        pass,
        format!(
            "mR@50 full (hard) {hard:.4}, soft {soft:.4}, mixup without refinement {mixup_only:.4}, refinement without mixup {refine_only:.4}"
        ),
    );
    assert!(pass);
}
