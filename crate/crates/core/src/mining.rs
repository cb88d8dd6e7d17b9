//! Label imputation over a restricted label subset and label refinement.
//!
//! A pair annotated with a label from one subset (normally explicit) gets a
//! second label imputed from the classifier's softmax restricted to the other
//! subset (normally implicit). The refined target is the average of the
//! annotated one-hot label and the imputed label.

use serde::{Deserialize, Serialize};

use crate::data::AnnotatedPair;
use crate::error::{Error, Result};
use crate::losses::{restricted_softmax, LabelDistribution};
use crate::model::{forward, ClassifierParams};
use crate::taxonomy::RelationVocabulary;

/// How the imputed label is formed from the restricted softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputeMode {
    /// One-hot at the arg max.
    #[default]
    Hard,
    /// The full restricted softmax.
    Soft,
}

/// Imputes over an arbitrary label subset.
pub fn impute_over(
    params: &ClassifierParams,
    x: &[f64],
    subset: &[usize],
    mode: ImputeMode,
) -> Result<LabelDistribution> {
    if subset.is_empty() {
        return Err(Error::Vocabulary("cannot impute over an empty label set".into()));
    }
    let logits = forward(params, x)?;
    let soft = restricted_softmax(&logits, subset)?;
    Ok(match mode {
        ImputeMode::Soft => soft,
        ImputeMode::Hard => {
            // Lowest index wins ties; entries outside the subset are zero.
            let mut best = subset[0];
            for &i in subset {
                if soft.probs()[i] > soft.probs()[best] || (soft.probs()[i] == soft.probs()[best] && i < best) {
                    best = i;
                }
            }
            LabelDistribution::one_hot(logits.len(), best)
        }
    })
}

/// One-hot at the highest-scoring implicit predicate.
pub fn impute_implicit_hard(
    params: &ClassifierParams,
    x: &[f64],
    vocabulary: &RelationVocabulary,
) -> Result<LabelDistribution> {
    impute_over(params, x, &vocabulary.implicit_vec(), ImputeMode::Hard)
}

/// Softmax restricted to the implicit predicates.
pub fn impute_implicit_soft(
    params: &ClassifierParams,
    x: &[f64],
    vocabulary: &RelationVocabulary,
) -> Result<LabelDistribution> {
    impute_over(params, x, &vocabulary.implicit_vec(), ImputeMode::Soft)
}

/// Elementwise average of the annotated and imputed labels.
pub fn refine_label(
    annotated: &LabelDistribution,
    imputed: &LabelDistribution,
) -> Result<LabelDistribution> {
    if annotated.len() != imputed.len() {
        return Err(Error::Dimension {
            expected: annotated.len(),
            got: imputed.len(),
        });
    }
    Ok(LabelDistribution::from_raw(
        annotated
            .probs()
            .iter()
            .zip(imputed.probs())
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    ))
}

/// Refined targets for pairs annotated inside `annotated_set`, imputing over `impute_set`.
pub fn impute_batch_with_roles<'a>(
    params: &ClassifierParams,
    pairs: &[&'a AnnotatedPair],
    annotated_set: &[usize],
    impute_set: &[usize],
    mode: ImputeMode,
) -> Result<Vec<(&'a AnnotatedPair, LabelDistribution)>> {
    let num_classes = params.shape().num_classes;
    pairs
        .iter()
        .map(|&pair| {
            if !annotated_set.contains(&pair.predicate_id) {
                return Err(Error::Dataset(format!(
                    "pair ({}, {}) is annotated with predicate {} outside the imputation source set",
                    pair.subject_id, pair.object_id, pair.predicate_id
                )));
            }
            let x = pair.embedding_f64();
            let imputed = impute_over(params, &x, impute_set, mode)?;
            let annotated = LabelDistribution::one_hot(num_classes, pair.predicate_id);
            Ok((pair, refine_label(&annotated, &imputed)?))
        })
        .collect()
}

/// Refined targets for explicit-annotated pairs using the current parameters.
pub fn impute_batch<'a>(
    params: &ClassifierParams,
    explicit_pairs: &[&'a AnnotatedPair],
    vocabulary: &RelationVocabulary,
    mode: ImputeMode,
) -> Result<Vec<(&'a AnnotatedPair, LabelDistribution)>> {
    impute_batch_with_roles(
        params,
        explicit_pairs,
        &vocabulary.explicit_vec(),
        &vocabulary.implicit_vec(),
        mode,
    )
}
