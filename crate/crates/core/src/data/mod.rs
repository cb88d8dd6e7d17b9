//! Scene-graph dataset model: objects, annotated subject-object pairs and
//! their joint embeddings.

mod io;
mod synthetic;

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::RelationVocabulary;

pub use io::{dataset_paths, load_dataset, save_dataset, DatasetPaths};
pub use synthetic::{
    explicit_relation, generate_synthetic, SyntheticBenchmark, SyntheticConfig, GEOMETRY_DIM,
};

/// An object box with its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: usize,
    pub class_id: usize,
    /// `[x1, y1, x2, y2]`, normalized to the image, y pointing down.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl ObjectInstance {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.bbox[0] + self.bbox[2]),
            0.5 * (self.bbox[1] + self.bbox[3]),
        )
    }

    fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2] = self.bbox;
        let finite = self.bbox.iter().all(|v| v.is_finite());
        let in_unit = self.bbox.iter().all(|v| (0.0..=1.0).contains(v));
        if !finite || !in_unit || !(x1 < x2) || !(y1 < y2) {
            return Err(Error::Dataset(format!(
                "object {} has invalid box {:?}",
                self.id, self.bbox
            )));
        }
        Ok(())
    }
}

/// Hidden ground truth planted by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLabels {
    pub true_explicit: usize,
    pub true_implicit: usize,
}

/// One annotated subject-object pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub subject_id: usize,
    pub object_id: usize,
    pub predicate_id: usize,
    /// Stored in the binary sidecar, not in the JSONL body.
    #[serde(skip)]
    pub embedding: Vec<f32>,
    /// Stored in the oracle sidecar.
    #[serde(skip)]
    pub oracle: Option<OracleLabels>,
}

impl AnnotatedPair {
    pub fn embedding_f64(&self) -> Vec<f64> {
        self.embedding.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub objects: Vec<ObjectInstance>,
    pub pairs: Vec<AnnotatedPair>,
}

impl ImageRecord {
    pub fn object(&self, id: usize) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: RelationVocabulary,
    pub object_class_names: Vec<String>,
    pub embedding_dim: usize,
    pub images: Vec<ImageRecord>,
    pub split: Split,
}

/// Position of a pair inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairRef {
    pub image_index: usize,
    pub pair_index: usize,
}

/// Class-level triplet type `(subject class, predicate, object class)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletType {
    pub subject_class: usize,
    pub predicate_id: usize,
    pub object_class: usize,
}

impl Dataset {
    pub fn num_pairs(&self) -> usize {
        self.images.iter().map(|i| i.pairs.len()).sum()
    }

    pub fn pair(&self, r: PairRef) -> &AnnotatedPair {
        &self.images[r.image_index].pairs[r.pair_index]
    }

    pub fn image_id(&self, r: PairRef) -> &str {
        &self.images[r.image_index].image_id
    }

    /// All pairs in file order.
    pub fn pair_refs(&self) -> impl Iterator<Item = PairRef> + '_ {
        self.images.iter().enumerate().flat_map(|(i, img)| {
            (0..img.pairs.len()).map(move |p| PairRef {
                image_index: i,
                pair_index: p,
            })
        })
    }

    /// Triplet type of a pair under its annotated predicate.
    pub fn triplet_type(&self, r: PairRef) -> TripletType {
        let image = &self.images[r.image_index];
        let pair = &image.pairs[r.pair_index];
        let class = |id| image.object(id).expect("validated object id").class_id;
        TripletType {
            subject_class: class(pair.subject_id),
            predicate_id: pair.predicate_id,
            object_class: class(pair.object_id),
        }
    }

    /// Copy with every oracle label removed.
    pub fn without_oracle(&self) -> Dataset {
        let mut out = self.clone();
        for image in &mut out.images {
            for pair in &mut image.pairs {
                pair.oracle = None;
            }
        }
        out
    }

    pub fn has_oracle(&self) -> bool {
        self.images
            .iter()
            .flat_map(|i| &i.pairs)
            .any(|p| p.oracle.is_some())
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let num_predicates = self.vocabulary.len();
        let mut image_ids = HashSet::new();
        for image in &self.images {
            if !image_ids.insert(image.image_id.as_str()) {
                return Err(Error::Dataset(format!(
                    "duplicate image id {:?}",
                    image.image_id
                )));
            }
            let mut object_ids = HashSet::new();
            for obj in &image.objects {
                obj.validate()?;
                if !object_ids.insert(obj.id) {
                    return Err(Error::Dataset(format!(
                        "image {:?} repeats object id {}",
                        image.image_id, obj.id
                    )));
                }
                if obj.class_id >= self.object_class_names.len() {
                    return Err(Error::Dataset(format!(
                        "image {:?} object {} has unknown class {}",
                        image.image_id, obj.id, obj.class_id
                    )));
                }
            }
            for (k, pair) in image.pairs.iter().enumerate() {
                let ctx = || format!("image {:?} pair {k}", image.image_id);
                if pair.subject_id == pair.object_id {
                    return Err(Error::Dataset(format!("{}: subject equals object", ctx())));
                }
                if !object_ids.contains(&pair.subject_id) || !object_ids.contains(&pair.object_id) {
                    return Err(Error::Dataset(format!(
                        "{}: dangling object reference ({}, {})",
                        ctx(),
                        pair.subject_id,
                        pair.object_id
                    )));
                }
                if pair.predicate_id >= num_predicates {
                    return Err(Error::Dataset(format!(
                        "{}: unknown predicate id {}",
                        ctx(),
                        pair.predicate_id
                    )));
                }
                if pair.embedding.len() != self.embedding_dim {
                    return Err(Error::Dataset(format!(
                        "{}: embedding has {} values, expected {}",
                        ctx(),
                        pair.embedding.len(),
                        self.embedding_dim
                    )));
                }
                if pair.embedding.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Dataset(format!("{}: non-finite embedding", ctx())));
                }
                if let Some(o) = pair.oracle {
                    if o.true_explicit >= num_predicates || o.true_implicit >= num_predicates {
                        return Err(Error::Dataset(format!("{}: oracle label out of range", ctx())));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Relative geometry of two boxes:
/// `[(cx_s - cx_o) / w_o, (cy_s - cy_o) / h_o, ln(w_s / w_o), ln(h_s / h_o), IoU]`.
pub fn box_geometry(subject: &ObjectInstance, object: &ObjectInstance) -> Result<[f64; 5]> {
    for obj in [subject, object] {
        if !(obj.width() > 0.0 && obj.height() > 0.0) {
            return Err(Error::Dataset(format!(
                "object {} has a degenerate box {:?}",
                obj.id, obj.bbox
            )));
        }
    }
    let (cxs, cys) = subject.center();
    let (cxo, cyo) = object.center();
    let (ws, hs, wo, ho) = (subject.width(), subject.height(), object.width(), object.height());
    Ok([
        (cxs - cxo) / wo,
        (cys - cyo) / ho,
        (ws / wo).ln(),
        (hs / ho).ln(),
        iou(&subject.bbox, &object.bbox),
    ])
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `[class(s), class(o), geometry(s, o), latent]`.
pub fn compute_joint_embedding(
    subject: &ObjectInstance,
    object: &ObjectInstance,
    class_table: &[Vec<f64>],
    latent: &[f64],
) -> Result<Vec<f64>> {
    let row = |obj: &ObjectInstance| {
        class_table.get(obj.class_id).ok_or_else(|| {
            Error::Dataset(format!(
                "class table has {} rows, object class is {}",
                class_table.len(),
                obj.class_id
            ))
        })
    };
    let (cs, co) = (row(subject)?, row(object)?);
    if cs.len() != co.len() {
        return Err(Error::Dimension {
            expected: cs.len(),
            got: co.len(),
        });
    }
    let geometry = box_geometry(subject, object)?;
    let mut out = Vec::with_capacity(2 * cs.len() + GEOMETRY_DIM + latent.len());
    out.extend_from_slice(cs);
    out.extend_from_slice(co);
    out.extend_from_slice(&geometry);
    out.extend_from_slice(latent);
    Ok(out)
}

/// Splits pairs by whether their annotated predicate is implicit or explicit.
///
/// Returns `(implicit_pairs, explicit_pairs)` in file order.
pub fn partition_by_annotation(
    dataset: &Dataset,
    vocabulary: &RelationVocabulary,
) -> (Vec<PairRef>, Vec<PairRef>) {
    dataset
        .pair_refs()
        .partition(|&r| vocabulary.implicit_ids().contains(&dataset.pair(r).predicate_id))
}

/// Triplet types present in `test` ground truth and absent from `train`.
pub fn zero_shot_triplets(train: &Dataset, test: &Dataset) -> Result<BTreeSet<TripletType>> {
    if train.vocabulary != test.vocabulary {
        return Err(Error::Vocabulary(
            "train and test vocabularies differ".into(),
        ));
    }
    if train.object_class_names != test.object_class_names {
        return Err(Error::Dataset(
            "train and test object class tables differ".into(),
        ));
    }
    let seen: HashSet<TripletType> = train.pair_refs().map(|r| train.triplet_type(r)).collect();
    Ok(test
        .pair_refs()
        .map(|r| test.triplet_type(r))
        .filter(|t| !seen.contains(t))
        .collect())
}
