//! Predicate-classification ranking metrics: R@K, mR@K, zsR@K, per-class
//! recall and explicit/implicit subset mean recall.
//!
//! Candidates are every (annotated pair, predicate) combination of an image,
//! ranked by classifier probability. Several predicates of the same pair may
//! appear in the top K.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageRecord, TripletType};
use crate::losses::softmax_unchecked;
use crate::model::{forward_unchecked, ClassifierParams};
use crate::taxonomy::RelationVocabulary;

/// The K values reported everywhere.
pub const KS: [usize; 3] = [20, 50, 100];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredTriplet {
    pub pair_index: usize,
    pub subject_id: usize,
    pub object_id: usize,
    pub predicate_id: usize,
    pub score: f64,
}

/// A ground-truth triplet with the class information zero-shot filtering needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GtTriplet {
    pub subject_id: usize,
    pub object_id: usize,
    pub predicate_id: usize,
    pub subject_class: usize,
    pub object_class: usize,
}

impl GtTriplet {
    pub fn triplet_type(&self) -> TripletType {
        TripletType {
            subject_class: self.subject_class,
            predicate_id: self.predicate_id,
            object_class: self.object_class,
        }
    }
}

/// Ranks per-pair probability rows: score descending, then pair order, then predicate index.
pub fn rank_scores(image: &ImageRecord, scores: &[Vec<f64>]) -> Vec<ScoredTriplet> {
    assert_eq!(image.pairs.len(), scores.len(), "one score row per pair");
    let mut ranked: Vec<ScoredTriplet> = image
        .pairs
        .iter()
        .zip(scores)
        .enumerate()
        .flat_map(|(pair_index, (pair, row))| {
            row.iter().enumerate().map(move |(predicate_id, &score)| ScoredTriplet {
                pair_index,
                subject_id: pair.subject_id,
                object_id: pair.object_id,
                predicate_id,
                score,
            })
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.pair_index.cmp(&b.pair_index))
            .then(a.predicate_id.cmp(&b.predicate_id))
    });
    ranked
}

/// Scores every (pair, predicate) candidate of an image with the classifier.
pub fn rank_triplets(params: &ClassifierParams, image: &ImageRecord) -> Vec<ScoredTriplet> {
    let scores: Vec<Vec<f64>> = image
        .pairs
        .iter()
        .map(|p| softmax_unchecked(&forward_unchecked(params, &p.embedding_f64())))
        .collect();
    rank_scores(image, &scores)
}

/// Annotated triplets of an image.
pub fn ground_truth(image: &ImageRecord) -> Vec<GtTriplet> {
    image
        .pairs
        .iter()
        .map(|p| GtTriplet {
            subject_id: p.subject_id,
            object_id: p.object_id,
            predicate_id: p.predicate_id,
            subject_class: image.object(p.subject_id).map_or(usize::MAX, |o| o.class_id),
            object_class: image.object(p.object_id).map_or(usize::MAX, |o| o.class_id),
        })
        .collect()
}

fn top_k(ranked: &[ScoredTriplet], k: usize) -> HashSet<(usize, usize, usize)> {
    ranked
        .iter()
        .take(k)
        .map(|t| (t.subject_id, t.predicate_id, t.object_id))
        .collect()
}

fn hits<'a>(
    ranked: &[ScoredTriplet],
    gt: &'a [GtTriplet],
    k: usize,
) -> impl Iterator<Item = (&'a GtTriplet, bool)> {
    let top = top_k(ranked, k);
    gt.iter()
        .map(move |g| (g, top.contains(&(g.subject_id, g.predicate_id, g.object_id))))
}

fn per_image_recall<F: Fn(&GtTriplet) -> bool>(
    ranked: &[Vec<ScoredTriplet>],
    ground_truth: &[Vec<GtTriplet>],
    k: usize,
    keep: F,
) -> Option<f64> {
    let mut total = 0.0;
    let mut images = 0usize;
    for (r, gt) in ranked.iter().zip(ground_truth) {
        let gt: Vec<GtTriplet> = gt.iter().copied().filter(|g| keep(g)).collect();
        if gt.is_empty() {
            continue;
        }
        let found = hits(r, &gt, k).filter(|(_, h)| *h).count();
        total += found as f64 / gt.len() as f64;
        images += 1;
    }
    (images > 0).then(|| total / images as f64)
}

/// Mean over images with ground truth of the fraction of GT triplets in the top K.
pub fn recall_at_k(ranked: &[Vec<ScoredTriplet>], ground_truth: &[Vec<GtTriplet>], k: usize) -> f64 {
    per_image_recall(ranked, ground_truth, k, |_| true).unwrap_or(0.0)
}

/// Per-predicate recall pooled over all images, averaged over predicates with ground truth.
///
/// Returns `(mR, per-class recall keyed by predicate id)`.
pub fn mean_recall_at_k(
    ranked: &[Vec<ScoredTriplet>],
    ground_truth: &[Vec<GtTriplet>],
    k: usize,
    _vocabulary: &RelationVocabulary,
) -> (f64, BTreeMap<usize, f64>) {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (r, gt) in ranked.iter().zip(ground_truth) {
        for (g, hit) in hits(r, gt, k) {
            let entry = counts.entry(g.predicate_id).or_default();
            entry.1 += 1;
            if hit {
                entry.0 += 1;
            }
        }
    }
    let per_class: BTreeMap<usize, f64> = counts
        .into_iter()
        .map(|(c, (found, total))| (c, found as f64 / total as f64))
        .collect();
    let mr = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    (mr, per_class)
}

/// Recall restricted to GT whose class-level type is in `zero_shot`; `None` when undefined.
pub fn zero_shot_recall_at_k(
    ranked: &[Vec<ScoredTriplet>],
    ground_truth: &[Vec<GtTriplet>],
    k: usize,
    zero_shot: &BTreeSet<TripletType>,
) -> Option<f64> {
    if zero_shot.is_empty() {
        return None;
    }
    per_image_recall(ranked, ground_truth, k, |g| zero_shot.contains(&g.triplet_type()))
}

/// Mean recall split by explicit and implicit classes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubsetRecall {
    pub explicit: Option<f64>,
    pub implicit: Option<f64>,
}

pub fn subset_mean_recall(
    ranked: &[Vec<ScoredTriplet>],
    ground_truth: &[Vec<GtTriplet>],
    k: usize,
    vocabulary: &RelationVocabulary,
) -> SubsetRecall {
    let (_, per_class) = mean_recall_at_k(ranked, ground_truth, k, vocabulary);
    let mean_over = |ids: &BTreeSet<usize>| {
        let vals: Vec<f64> = per_class
            .iter()
            .filter(|(c, _)| ids.contains(c))
            .map(|(_, r)| *r)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    SubsetRecall {
        explicit: mean_over(vocabulary.explicit_ids()),
        implicit: mean_over(vocabulary.implicit_ids()),
    }
}

/// Every metric for one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// R@{20, 50, 100}.
    pub recall: [f64; 3],
    /// mR@{20, 50, 100}.
    pub mean_recall: [f64; 3],
    /// zsR@{20, 50, 100}; `None` when no zero-shot ground truth exists.
    pub zero_shot_recall: [Option<f64>; 3],
    /// Recall@100 per predicate name, only for predicates with ground truth.
    pub per_class_recall_100: BTreeMap<String, f64>,
    /// Subset mR at K = 50.
    pub subset_50: SubsetRecall,
    /// Subset mR at K = 100.
    pub subset_100: SubsetRecall,
}

/// Ranked lists and ground truth of a whole dataset, computed in parallel.
pub fn rank_dataset(
    params: &ClassifierParams,
    dataset: &Dataset,
) -> (Vec<Vec<ScoredTriplet>>, Vec<Vec<GtTriplet>>) {
    let work = || {
        dataset
            .images
            .par_iter()
            .map(|img| (rank_triplets(params, img), ground_truth(img)))
            .unzip()
    };
    match eval_threads() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(work))
            .unwrap_or_else(|_| work()),
        None => work(),
    }
}

/// Thread cap from `RELMINE_THREADS`, if set to a positive integer.
pub fn eval_threads() -> Option<usize> {
    std::env::var("RELMINE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub fn evaluate(
    params: &ClassifierParams,
    dataset: &Dataset,
    zero_shot: &BTreeSet<TripletType>,
) -> EvalResult {
    let (ranked, gt) = rank_dataset(params, dataset);
    evaluate_ranked(&ranked, &gt, &dataset.vocabulary, zero_shot)
}

pub fn evaluate_ranked(
    ranked: &[Vec<ScoredTriplet>],
    gt: &[Vec<GtTriplet>],
    vocabulary: &RelationVocabulary,
    zero_shot: &BTreeSet<TripletType>,
) -> EvalResult {
    let recall = KS.map(|k| recall_at_k(ranked, gt, k));
    let mean_recall = KS.map(|k| mean_recall_at_k(ranked, gt, k, vocabulary).0);
    let zero_shot_recall = KS.map(|k| zero_shot_recall_at_k(ranked, gt, k, zero_shot));
    let (_, per_class) = mean_recall_at_k(ranked, gt, 100, vocabulary);
    let per_class_recall_100 = per_class
        .into_iter()
        .map(|(c, r)| (vocabulary.name(c).unwrap_or("?").to_string(), r))
        .collect();
    EvalResult {
        recall,
        mean_recall,
        zero_shot_recall,
        per_class_recall_100,
        subset_50: subset_mean_recall(ranked, gt, 50, vocabulary),
        subset_100: subset_mean_recall(ranked, gt, 100, vocabulary),
    }
}

/// Cell text for an optional metric; `—` when undefined.
pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "—".to_string(),
    }
}

impl EvalResult {
    pub const CSV_HEADER: &'static str = "R@20,R@50,R@100,mR@20,mR@50,mR@100,zsR@20,zsR@50,zsR@100";

    /// Values matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let mut cells: Vec<String> = Vec::with_capacity(9);
        cells.extend(self.recall.iter().map(|v| fmt_metric(Some(*v))));
        cells.extend(self.mean_recall.iter().map(|v| fmt_metric(Some(*v))));
        cells.extend(self.zero_shot_recall.iter().map(|v| fmt_metric(*v)));
        cells.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    /// `predicate,recall@100,is_implicit`, in vocabulary order.
    pub fn per_class_csv(&self, vocabulary: &RelationVocabulary) -> String {
        let mut out = String::from("predicate,recall@100,is_implicit\n");
        for (id, name) in vocabulary.names().iter().enumerate() {
            if let Some(r) = self.per_class_recall_100.get(name) {
                let implicit = vocabulary.implicit_ids().contains(&id);
                let _ = writeln!(out, "{},{r:.6},{implicit}", csv_field(name));
            }
        }
        out
    }

    pub fn subset_csv(&self) -> String {
        format!(
            "subset,mR@50,mR@100\nexplicit,{},{}\nimplicit,{},{}\n",
            fmt_metric(self.subset_50.explicit),
            fmt_metric(self.subset_100.explicit),
            fmt_metric(self.subset_50.implicit),
            fmt_metric(self.subset_100.implicit),
        )
    }
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
