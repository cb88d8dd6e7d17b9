//! Planted synthetic scene graphs.
//!
//! Every pair carries two hidden labels: an explicit one that is a fixed
//! function of the two boxes, and an implicit one drawn from a planted
//! class-pair compatibility table and encoded in the latent part of the
//! embedding. The recorded annotation is the explicit label with probability
//! `annotator_bias`, otherwise the implicit one.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    compute_joint_embedding, AnnotatedPair, Dataset, ImageRecord, ObjectInstance, OracleLabels,
    Split, TripletType,
};
use crate::error::{Error, Result};
use crate::taxonomy::{default_vg_partition, RelationVocabulary};

/// Length of the relative-geometry block of a joint embedding.
pub const GEOMETRY_DIM: usize = 5;

/// Vertical tolerance for two boxes to count as touching.
const CONTACT_GAP: f64 = 0.02;
/// Center distance under which two objects are "near".
const NEAR_DISTANCE: f64 = 0.25;
/// The depth rule fires when the depth gap exceeds this fraction of `|dx|`.
const DEPTH_DOMINANCE: f64 = 0.5;

const TABLE_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1 << 32;
const TEST_STREAM: u64 = 2 << 32;
const FORCE_STREAM: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Training images.
    pub num_images: usize,
    pub num_test_images: usize,
    /// Inclusive range.
    pub objects_per_image: [usize; 2],
    pub num_object_classes: usize,
    pub vocabulary: RelationVocabulary,
    /// Inclusive range, capped by the number of ordered object pairs.
    pub pairs_per_image: [usize; 2],
    /// Probability that the recorded label is the explicit one.
    pub annotator_bias: f64,
    pub latent_dim: usize,
    pub latent_noise_sigma: f64,
    pub class_embedding_dim: usize,
    pub zero_shot_holdout_fraction: f64,
    /// Size of each class pair's implicit-label support.
    pub implicit_per_class_pair: usize,
    /// Probability that an object is placed resting on an earlier one.
    pub stacking_probability: f64,
    /// Explicit label used when no geometry rule fires.
    pub fallback_explicit: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_images: 300,
            num_test_images: 100,
            objects_per_image: [9, 12],
            num_object_classes: 20,
            vocabulary: default_vg_partition(),
            pairs_per_image: [60, 72],
            annotator_bias: 0.7,
            latent_dim: 16,
            latent_noise_sigma: 1.0,
            class_embedding_dim: 8,
            zero_shot_holdout_fraction: 0.1,
            implicit_per_class_pair: 3,
            stacking_probability: 0.3,
            fallback_explicit: "at".into(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn embedding_dim(&self) -> usize {
        2 * self.class_embedding_dim + GEOMETRY_DIM + self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(0.0..=1.0).contains(&self.annotator_bias) {
            return bad("annotator_bias", format!("{} is outside [0, 1]", self.annotator_bias));
        }
        if !(0.0..1.0).contains(&self.zero_shot_holdout_fraction) {
            return bad(
                "zero_shot_holdout_fraction",
                format!("{} is outside [0, 1)", self.zero_shot_holdout_fraction),
            );
        }
        if !(0.0..=1.0).contains(&self.stacking_probability) {
            return bad("stacking_probability", "must lie in [0, 1]".into());
        }
        if !(self.latent_noise_sigma >= 0.0 && self.latent_noise_sigma.is_finite()) {
            return bad("latent_noise_sigma", "must be finite and non-negative".into());
        }
        for (field, value) in [
            ("num_object_classes", self.num_object_classes),
            ("latent_dim", self.latent_dim),
            ("class_embedding_dim", self.class_embedding_dim),
            ("implicit_per_class_pair", self.implicit_per_class_pair),
        ] {
            if value == 0 {
                return bad(field, "must be positive".into());
            }
        }
        let [lo, hi] = self.objects_per_image;
        if lo < 2 || lo > hi {
            return bad("objects_per_image", format!("invalid range [{lo}, {hi}] (need 2 <= lo <= hi)"));
        }
        let [lo, hi] = self.pairs_per_image;
        if lo == 0 || lo > hi {
            return bad("pairs_per_image", format!("invalid range [{lo}, {hi}]"));
        }
        match self.vocabulary.id(&self.fallback_explicit) {
            Some(id) if self.vocabulary.explicit_ids().contains(&id) => {}
            _ => {
                return bad(
                    "fallback_explicit",
                    format!("{:?} is not an explicit predicate of the vocabulary", self.fallback_explicit),
                )
            }
        }
        Ok(())
    }
}

/// Generated splits plus the planted tables.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub train: Dataset,
    pub test: Dataset,
    /// Class-level types withheld from training and forced into test.
    pub zero_shot_types: BTreeSet<TripletType>,
    pub class_table: Vec<Vec<f64>>,
    /// Latent anchor per predicate; empty rows for explicit predicates.
    pub anchors: Vec<Vec<f64>>,
}

/// Deterministic explicit label for a subject/object box pair.
///
/// Rules in priority order, each skipped when its label is not an explicit
/// predicate of `vocabulary` (y grows downward):
/// 1. `on`: subject above, bottom edge within 0.02 of the object's top, horizontal overlap
/// 2. `under`: the mirror of `on`
/// 3. `above` / `below` (or `under`): sign of `dy` when `|dy| >= |dx|`
/// 4. `in front of` / `behind`: sign of the apparent-size depth gap when it exceeds `|dx| / 2`
/// 5. `near`: center distance below 0.25
/// 6. the fallback label
pub fn explicit_relation(
    subject: &ObjectInstance,
    object: &ObjectInstance,
    vocabulary: &RelationVocabulary,
    fallback: usize,
) -> usize {
    let label = |name: &str| {
        vocabulary
            .id(name)
            .filter(|id| vocabulary.explicit_ids().contains(id))
    };
    let (s, o) = (&subject.bbox, &object.bbox);
    let (cxs, cys) = subject.center();
    let (cxo, cyo) = object.center();
    let (dx, dy) = (cxs - cxo, cys - cyo);
    let h_overlap = s[2].min(o[2]) - s[0].max(o[0]);

    if dy < 0.0 && (s[3] - o[1]).abs() < CONTACT_GAP && h_overlap > 0.0 {
        if let Some(id) = label("on") {
            return id;
        }
    }
    if dy > 0.0 && (s[1] - o[3]).abs() < CONTACT_GAP && h_overlap > 0.0 {
        if let Some(id) = label("under") {
            return id;
        }
    }
    if dy.abs() >= dx.abs() {
        let id = if dy < 0.0 {
            label("above")
        } else {
            label("below").or_else(|| label("under"))
        };
        if let Some(id) = id {
            return id;
        }
    }
    let depth = |b: &ObjectInstance| (b.width() * b.height()).sqrt();
    let dd = depth(subject) - depth(object);
    if dd.abs() > DEPTH_DOMINANCE * dx.abs() {
        let id = if dd > 0.0 {
            label("in front of")
        } else {
            label("behind")
        };
        if let Some(id) = id {
            return id;
        }
    }
    if (dx * dx + dy * dy).sqrt() < NEAR_DISTANCE {
        if let Some(id) = label("near") {
            return id;
        }
    }
    fallback
}

/// Shared state for per-image generation.
struct Planted<'a> {
    config: &'a SyntheticConfig,
    fallback: usize,
    class_table: Vec<Vec<f64>>,
    anchors: Vec<Vec<f64>>,
    /// `compat[s * C + o]` = (implicit ids, cumulative weights).
    compat: Vec<(Vec<usize>, Vec<f64>)>,
    zero_shot: HashSet<TripletType>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<'a> Planted<'a> {
    fn new(config: &'a SyntheticConfig) -> Self {
        let vocab = &config.vocabulary;
        let mut rng = stream(config.seed, TABLE_STREAM);
        let c = config.num_object_classes;
        let class_table = (0..c)
            .map(|_| {
                (0..config.class_embedding_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect()
            })
            .collect();
        let anchors = (0..vocab.len())
            .map(|p| {
                if vocab.implicit_ids().contains(&p) {
                    (0..config.latent_dim).map(|_| rng.sample(StandardNormal)).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();

        let implicit = vocab.implicit_vec();
        let k = config.implicit_per_class_pair.min(implicit.len());
        let mut compat = Vec::with_capacity(c * c);
        let mut all_types = Vec::new();
        for s in 0..c {
            for o in 0..c {
                let mut support: Vec<usize> = implicit.choose_multiple(&mut rng, k).copied().collect();
                support.sort_unstable();
                let weights: Vec<f64> = support.iter().map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                let cumulative = weights
                    .iter()
                    .map(|w| {
                        acc += w / total;
                        acc
                    })
                    .collect();
                for &p in &support {
                    all_types.push(TripletType {
                        subject_class: s,
                        predicate_id: p,
                        object_class: o,
                    });
                }
                compat.push((support, cumulative));
            }
        }
        all_types.shuffle(&mut rng);
        let held = (config.zero_shot_holdout_fraction * all_types.len() as f64).round() as usize;
        let zero_shot = all_types.into_iter().take(held).collect();

        Planted {
            config,
            fallback: vocab.id(&config.fallback_explicit).expect("validated fallback"),
            class_table,
            anchors,
            compat,
            zero_shot,
        }
    }

    fn sample_box<R: Rng>(&self, rng: &mut R, objects: &[ObjectInstance]) -> [f64; 4] {
        let w = rng.random_range(0.08..0.4);
        let h = rng.random_range(0.08..0.4);
        if !objects.is_empty() && rng.random_bool(self.config.stacking_probability) {
            // Rest on the top edge of an earlier object.
            let base = objects.choose(rng).expect("non-empty").bbox;
            let y2 = base[1] + rng.random_range(-0.01..0.01);
            if y2 - h > 0.0 && y2 <= 1.0 {
                let cx = rng
                    .random_range(base[0]..base[2])
                    .clamp(w / 2.0, 1.0 - w / 2.0);
                return [cx - w / 2.0, y2 - h, cx + w / 2.0, y2];
            }
        }
        let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }

    fn sample_implicit<R: Rng>(&self, rng: &mut R, s_class: usize, o_class: usize) -> usize {
        let (support, cumulative) = &self.compat[s_class * self.config.num_object_classes + o_class];
        let u: f64 = rng.random();
        let i = cumulative.iter().position(|&c| u < c).unwrap_or(support.len() - 1);
        support[i]
    }

    fn embed<R: Rng>(
        &self,
        rng: &mut R,
        subject: &ObjectInstance,
        object: &ObjectInstance,
        true_implicit: usize,
    ) -> Vec<f32> {
        let noise = Normal::new(0.0, self.config.latent_noise_sigma).expect("validated sigma");
        let latent: Vec<f64> = self.anchors[true_implicit]
            .iter()
            .map(|m| m + noise.sample(rng))
            .collect();
        compute_joint_embedding(subject, object, &self.class_table, &latent)
            .expect("generated boxes are valid")
            .into_iter()
            .map(|v| v as f32)
            .collect()
    }

    /// Draws both hidden labels and the recorded one for a candidate pair.
    fn label_pair<R: Rng>(
        &self,
        rng: &mut R,
        subject: &ObjectInstance,
        object: &ObjectInstance,
    ) -> (OracleLabels, usize) {
        let true_explicit =
            explicit_relation(subject, object, &self.config.vocabulary, self.fallback);
        let true_implicit = self.sample_implicit(rng, subject.class_id, object.class_id);
        let recorded = if rng.random_bool(self.config.annotator_bias) {
            true_explicit
        } else {
            true_implicit
        };
        (
            OracleLabels {
                true_explicit,
                true_implicit,
            },
            recorded,
        )
    }

    fn image(&self, split: Split, index: usize) -> ImageRecord {
        let base = if split == Split::Train { TRAIN_STREAM } else { TEST_STREAM };
        let mut rng = stream(self.config.seed, base + index as u64);
        let [lo, hi] = self.config.objects_per_image;
        let n = rng.random_range(lo..=hi);
        let mut objects: Vec<ObjectInstance> = Vec::with_capacity(n);
        for id in 0..n {
            let bbox = self.sample_box(&mut rng, &objects);
            let class_id = rng.random_range(0..self.config.num_object_classes);
            objects.push(ObjectInstance { id, class_id, bbox });
        }

        let mut candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|s| (0..n).filter(move |&o| o != s).map(move |o| (s, o)))
            .collect();
        candidates.shuffle(&mut rng);
        let [lo, hi] = self.config.pairs_per_image;
        let wanted = rng.random_range(lo..=hi).min(candidates.len());

        let mut pairs = Vec::with_capacity(wanted);
        for (s, o) in candidates {
            if pairs.len() == wanted {
                break;
            }
            let (subject, object) = (&objects[s], &objects[o]);
            let (oracle, recorded) = self.label_pair(&mut rng, subject, object);
            // Held-out types are implicit, so deciding on the hidden implicit label keeps
            // the recorded-label mix independent of the holdout.
            let hidden = TripletType {
                subject_class: subject.class_id,
                predicate_id: oracle.true_implicit,
                object_class: object.class_id,
            };
            if split == Split::Train && self.zero_shot.contains(&hidden) {
                continue;
            }
            let embedding = self.embed(&mut rng, subject, object, oracle.true_implicit);
            pairs.push(AnnotatedPair {
                subject_id: s,
                object_id: o,
                predicate_id: recorded,
                embedding,
                oracle: Some(oracle),
            });
        }
        ImageRecord {
            image_id: format!("{split}-{index:05}"),
            objects,
            pairs,
        }
    }

    /// Appends a fresh object pair realizing every held-out type missing from `images`.
    fn force_zero_shot(&self, images: &mut [ImageRecord]) {
        if images.is_empty() {
            return;
        }
        let mut present = HashSet::new();
        for image in images.iter() {
            for pair in &image.pairs {
                let class = |id: usize| image.objects[id].class_id;
                present.insert(TripletType {
                    subject_class: class(pair.subject_id),
                    predicate_id: pair.predicate_id,
                    object_class: class(pair.object_id),
                });
            }
        }
        let mut missing: Vec<TripletType> =
            self.zero_shot.iter().filter(|t| !present.contains(t)).copied().collect();
        missing.sort();
        let mut rng = stream(self.config.seed, FORCE_STREAM);
        for (k, ty) in missing.into_iter().enumerate() {
            let image = &mut images[k % images.len()];
            let mut new_objects = Vec::with_capacity(2);
            for class_id in [ty.subject_class, ty.object_class] {
                let bbox = self.sample_box(&mut rng, &[]);
                new_objects.push(ObjectInstance {
                    id: image.objects.len() + new_objects.len(),
                    class_id,
                    bbox,
                });
            }
            let (subject, object) = (&new_objects[0], &new_objects[1]);
            let true_explicit =
                explicit_relation(subject, object, &self.config.vocabulary, self.fallback);
            let embedding = self.embed(&mut rng, subject, object, ty.predicate_id);
            image.pairs.push(AnnotatedPair {
                subject_id: subject.id,
                object_id: object.id,
                predicate_id: ty.predicate_id,
                embedding,
                oracle: Some(OracleLabels {
                    true_explicit,
                    true_implicit: ty.predicate_id,
                }),
            });
            image.objects.extend(new_objects);
        }
    }
}

/// Generates the planted train/test benchmark; deterministic in `config.seed`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    config.validate()?;
    let planted = Planted::new(config);
    let object_class_names: Vec<String> = (0..config.num_object_classes)
        .map(|c| format!("class_{c:02}"))
        .collect();

    let make = |split: Split, count: usize| -> Dataset {
        let images = (0..count)
            .into_par_iter()
            .map(|i| planted.image(split, i))
            .collect();
        Dataset {
            vocabulary: config.vocabulary.clone(),
            object_class_names: object_class_names.clone(),
            embedding_dim: config.embedding_dim(),
            images,
            split,
        }
    };
    let train = make(Split::Train, config.num_images);
    let mut test = make(Split::Test, config.num_test_images);
    planted.force_zero_shot(&mut test.images);
    train.validate()?;
    test.validate()?;

    let mut zero_shot_types: BTreeSet<TripletType> = planted.zero_shot.iter().copied().collect();
    if config.num_test_images == 0 {
        zero_shot_types.clear();
    }
    Ok(SyntheticBenchmark {
        train,
        test,
        zero_shot_types,
        class_table: planted.class_table,
        anchors: planted.anchors,
    })
}
