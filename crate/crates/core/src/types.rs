//! Class and triplet vocabularies plus the detection types built on them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;

/// Dense index into a [`ClassVocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

/// Dense index into the predicate list of a [`TripletVocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredicateId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for PredicateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VocabularyError {
    #[error("duplicate name {0:?} in vocabulary")]
    DuplicateName(String),
    #[error("empty name in vocabulary")]
    EmptyName,
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("class id {0} out of range")]
    ClassOutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    /// Attribute entries (e.g. "wooden") only appear as objects of "is" relations.
    pub is_attribute: bool,
}

/// Ordered class list with contiguous ids `0..K`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
    #[serde(skip)]
    index: HashMap<String, ClassId>,
}

impl TryFrom<Vec<ClassEntry>> for ClassVocabulary {
    type Error = VocabularyError;
    fn try_from(entries: Vec<ClassEntry>) -> Result<Self, VocabularyError> {
        let mut v = ClassVocabulary::default();
        for e in entries {
            v.push(e.name, e.is_attribute)?;
        }
        Ok(v)
    }
}

impl From<ClassVocabulary> for Vec<ClassEntry> {
    fn from(v: ClassVocabulary) -> Self {
        v.entries
    }
}

impl ClassVocabulary {
    /// Object classes only, ids in iteration order.
    pub fn from_names<I, S>(names: I) -> Result<Self, VocabularyError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::default();
        for n in names {
            v.push(n, false)?;
        }
        Ok(v)
    }

    pub fn push(&mut self, name: impl Into<String>, is_attribute: bool) -> Result<ClassId, VocabularyError> {
        let name = name.into();
        if name.is_empty() {
            return Err(VocabularyError::EmptyName);
        }
        if self.index.contains_key(&name) {
            return Err(VocabularyError::DuplicateName(name));
        }
        let id = ClassId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ClassEntry { name, is_attribute });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.entries.get(id.0).map(|e| e.name.as_str())
    }

    pub fn is_attribute(&self, id: ClassId) -> bool {
        self.entries.get(id.0).is_some_and(|e| e.is_attribute)
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.entries.len()).map(ClassId)
    }
}

/// One detector output row (or a ground-truth box with confidence 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: ClassId,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, class_id: ClassId, bbox: BoundingBox, confidence: f64) -> Self {
        Detection {
            image_id: image_id.into(),
            class_id,
            bbox,
            confidence,
        }
    }

    pub fn ground_truth(image_id: impl Into<String>, class_id: ClassId, bbox: BoundingBox) -> Self {
        Self::new(image_id, class_id, bbox, 1.0)
    }
}

/// A scored (subject, predicate, object) assertion inside one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub image_id: String,
    pub subject: Detection,
    pub object: Detection,
    pub predicate_id: PredicateId,
    pub score: f64,
}

impl RelationInstance {
    /// The `(subject class, predicate, object class)` key.
    pub fn triplet(&self) -> Triplet {
        Triplet {
            subject: self.subject.class_id,
            predicate: self.predicate_id,
            object: self.object.class_id,
        }
    }

    /// Canonical text form used for deterministic ordering.
    pub fn sort_key(&self) -> String {
        let s = self.subject.bbox.to_array();
        let o = self.object.bbox.to_array();
        format!(
            "{}|{}|{:?}|{}|{:?}|{}",
            self.image_id, self.subject.class_id, s, self.object.class_id, o, self.predicate_id
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: ClassId,
    pub predicate: PredicateId,
    pub object: ClassId,
}

/// The set of licensed triplets plus the predicate names they use.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletVocabulary {
    predicates: Vec<String>,
    triplets: BTreeSet<Triplet>,
}

impl TripletVocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `name`, registering it if new.
    pub fn intern_predicate(&mut self, name: &str) -> PredicateId {
        match self.predicate_id(name) {
            Some(id) => id,
            None => {
                self.predicates.push(name.to_string());
                PredicateId(self.predicates.len() - 1)
            }
        }
    }

    pub fn predicate_id(&self, name: &str) -> Option<PredicateId> {
        self.predicates.iter().position(|p| p == name).map(PredicateId)
    }

    pub fn predicate_name(&self, id: PredicateId) -> Option<&str> {
        self.predicates.get(id.0).map(String::as_str)
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn predicate_ids(&self) -> impl Iterator<Item = PredicateId> {
        (0..self.predicates.len()).map(PredicateId)
    }

    /// Adds a triplet; returns false when it was already present.
    pub fn insert(&mut self, t: Triplet) -> bool {
        self.triplets.insert(t)
    }

    pub fn contains(&self, subject: ClassId, predicate: PredicateId, object: ClassId) -> bool {
        self.triplets.contains(&Triplet {
            subject,
            predicate,
            object,
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter()
    }

    /// Whether any triplet with this predicate has an attribute as its object.
    pub fn is_attribute_predicate(&self, predicate: PredicateId, classes: &ClassVocabulary) -> bool {
        self.triplets
            .iter()
            .any(|t| t.predicate == predicate && classes.is_attribute(t.object))
    }

    /// Checks every id against `classes`.
    pub fn validate(&self, classes: &ClassVocabulary) -> Result<(), VocabularyError> {
        for t in &self.triplets {
            for c in [t.subject, t.object] {
                if c.0 >= classes.len() {
                    return Err(VocabularyError::ClassOutOfRange(c.0));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_ids_contiguous_and_unique() {
        let mut v = ClassVocabulary::from_names(["man", "camera"]).unwrap();
        assert_eq!(v.id("camera"), Some(ClassId(1)));
        assert_eq!(v.push("wooden", true).unwrap(), ClassId(2));
        assert!(v.is_attribute(ClassId(2)));
        assert!(matches!(v.push("man", false), Err(VocabularyError::DuplicateName(_))));
        let json = serde_json::to_string(&v).unwrap();
        let back: ClassVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.id("wooden"), Some(ClassId(2)));
    }

    #[test]
    fn triplet_vocabulary_dedups() {
        let mut t = TripletVocabulary::new();
        let holds = t.intern_predicate("holds");
        assert_eq!(t.intern_predicate("holds"), holds);
        let trip = Triplet {
            subject: ClassId(0),
            predicate: holds,
            object: ClassId(1),
        };
        assert!(t.insert(trip));
        assert!(!t.insert(trip));
        assert_eq!(t.len(), 1);
        assert!(t.contains(ClassId(0), holds, ClassId(1)));
        assert!(!t.contains(ClassId(1), holds, ClassId(0)));
    }
}
