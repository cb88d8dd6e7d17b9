//! Predicate vocabulary and its split into explicit (spatial) and implicit
//! (interaction) relation labels.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The 50 Visual Genome predicates in alphabetical order.
pub const VG_PREDICATES: [&str; 50] = [
    "above",
    "across",
    "against",
    "along",
    "and",
    "at",
    "attached to",
    "behind",
    "belonging to",
    "between",
    "carrying",
    "covered in",
    "covering",
    "eating",
    "flying in",
    "for",
    "from",
    "growing on",
    "hanging from",
    "has",
    "holding",
    "in",
    "in front of",
    "laying on",
    "looking at",
    "lying on",
    "made of",
    "mounted on",
    "near",
    "of",
    "on",
    "on back of",
    "over",
    "painted on",
    "parked on",
    "part of",
    "playing",
    "riding",
    "says",
    "sitting on",
    "standing on",
    "to",
    "under",
    "using",
    "walking in",
    "walking on",
    "watching",
    "wearing",
    "wears",
    "with",
];

/// Predicates whose label itself fixes the spatial arrangement.
pub const VG_EXPLICIT: [&str; 13] = [
    "above",
    "across",
    "against",
    "along",
    "at",
    "behind",
    "between",
    "in",
    "in front of",
    "near",
    "on",
    "over",
    "under",
];

/// Wire form: `{"names": [...], "explicit": [...]}`.
#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    names: Vec<String>,
    explicit: Vec<String>,
}

/// Predicate label space with a disjoint, exhaustive explicit/implicit split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct RelationVocabulary {
    names: Vec<String>,
    explicit_ids: BTreeSet<usize>,
    implicit_ids: BTreeSet<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<VocabularyRepr> for RelationVocabulary {
    type Error = Error;

    fn try_from(repr: VocabularyRepr) -> Result<Self> {
        build_vocabulary(&repr.names, &repr.explicit)
    }
}

impl From<RelationVocabulary> for VocabularyRepr {
    fn from(v: RelationVocabulary) -> Self {
        let explicit = v.explicit_ids.iter().map(|&i| v.names[i].clone()).collect();
        VocabularyRepr {
            names: v.names,
            explicit,
        }
    }
}

/// Builds a vocabulary from the ordered predicate names and the subset that is explicit.
///
/// Names are matched exactly after trimming surrounding whitespace.
pub fn build_vocabulary<S: AsRef<str>, T: AsRef<str>>(
    names: &[S],
    explicit_names: &[T],
) -> Result<RelationVocabulary> {
    if names.is_empty() {
        return Err(Error::Vocabulary("predicate list is empty".into()));
    }
    let names: Vec<String> = names.iter().map(|n| n.as_ref().trim().to_string()).collect();
    let mut index = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::Vocabulary(format!("predicate {i} has an empty name")));
        }
        if index.insert(name.clone(), i).is_some() {
            return Err(Error::Vocabulary(format!("duplicate predicate {name:?}")));
        }
    }

    let mut explicit_ids = BTreeSet::new();
    for name in explicit_names {
        let name = name.as_ref().trim();
        let id = index.get(name).ok_or_else(|| {
            Error::Vocabulary(format!("explicit predicate {name:?} is not in the vocabulary"))
        })?;
        explicit_ids.insert(*id);
    }
    if explicit_ids.is_empty() {
        return Err(Error::Vocabulary("explicit set is empty".into()));
    }
    if explicit_ids.len() == names.len() {
        return Err(Error::Vocabulary("implicit set is empty".into()));
    }
    let implicit_ids = (0..names.len()).filter(|i| !explicit_ids.contains(i)).collect();

    Ok(RelationVocabulary {
        names,
        explicit_ids,
        implicit_ids,
        index,
    })
}

/// The 50-predicate Visual Genome vocabulary with its 13 explicit predicates.
pub fn default_vg_partition() -> RelationVocabulary {
    build_vocabulary(&VG_PREDICATES, &VG_EXPLICIT).expect("built-in partition is valid")
}

impl RelationVocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Looks up a predicate id by its (trimmed) name.
    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name.trim()).copied()
    }

    pub fn explicit_ids(&self) -> &BTreeSet<usize> {
        &self.explicit_ids
    }

    pub fn implicit_ids(&self) -> &BTreeSet<usize> {
        &self.implicit_ids
    }

    pub fn explicit_vec(&self) -> Vec<usize> {
        self.explicit_ids.iter().copied().collect()
    }

    pub fn implicit_vec(&self) -> Vec<usize> {
        self.implicit_ids.iter().copied().collect()
    }

    pub fn is_implicit(&self, predicate_id: usize) -> Result<bool> {
        if predicate_id >= self.names.len() {
            return Err(Error::Vocabulary(format!(
                "predicate id {predicate_id} out of range for {} predicates",
                self.names.len()
            )));
        }
        Ok(self.implicit_ids.contains(&predicate_id))
    }

    /// Stable content hash of the serialized vocabulary (hex SHA-256).
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("vocabulary serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
