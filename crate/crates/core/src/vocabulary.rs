//! Per-image label vocabularies: the image's positive classes plus
//! uniformly sampled negatives, each carrying an embedding. Negative entries
//! may later have their text embedding swapped for an image embedding.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EmbeddingVector, EncoderError, FoundationEncoder};

pub const DEFAULT_VOCAB_SIZE: usize = 16;
/// Label reported for entries whose embedding came from an image crop.
pub const SUBSTITUTED_LABEL: &str = "image-feature-substituted";

#[derive(Debug, Error)]
pub enum VocabularyError {
    #[error("vocabulary size {size} is smaller than the {positives} positive labels")]
    TooSmall { size: usize, positives: usize },
    #[error("positive label {0:?} is not in the class pool")]
    NotInPool(String),
    #[error("label {0:?} given twice")]
    Duplicate(String),
    #[error("entry {0} does not exist")]
    OutOfRange(usize),
    #[error("entry {0} is a positive and cannot be substituted")]
    Positive(usize),
    #[error("entry {0} was already substituted")]
    AlreadySubstituted(usize),
    #[error("entry {0} has no embedding yet")]
    NotEncoded(usize),
    #[error("embedding dimension {got} does not match vocabulary dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("text encoding failed: {0}")]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryLabel {
    Class(String),
    Substituted,
}

impl EntryLabel {
    pub fn as_str(&self) -> &str {
        match self {
            EntryLabel::Class(c) => c,
            EntryLabel::Substituted => SUBSTITUTED_LABEL,
        }
    }

    pub fn class(&self) -> Option<&str> {
        match self {
            EntryLabel::Class(c) => Some(c),
            EntryLabel::Substituted => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub label: EntryLabel,
    pub embedding: Option<EmbeddingVector>,
    pub is_positive: bool,
    pub substituted: bool,
}

/// How a label becomes an encoder prompt. `{}` is replaced by the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub pattern: String,
    pub lowercase: bool,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self { pattern: "{}".into(), lowercase: true }
    }
}

impl PromptTemplate {
    pub fn apply(&self, label: &str) -> String {
        let label = if self.lowercase { label.to_lowercase() } else { label.to_string() };
        self.pattern.replace("{}", &label)
    }
}

/// Which free negative receives an image embedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeChoice {
    #[default]
    LowestIndex,
    Random,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
}

/// Result of [`build_vocabulary`]; `truncated` is set when the pool could
/// not supply enough negatives to reach the requested size.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltVocabulary {
    pub vocabulary: Vocabulary,
    pub truncated: bool,
}

/// Positives first (in the given order), then `size - |positives|`
/// negatives drawn uniformly without replacement from the rest of the pool.
pub fn build_vocabulary<R: Rng + ?Sized>(
    positives: &[String],
    class_pool: &[String],
    size: usize,
    rng: &mut R,
) -> Result<BuiltVocabulary, VocabularyError> {
    if size < positives.len() {
        return Err(VocabularyError::TooSmall { size, positives: positives.len() });
    }
    let mut seen = BTreeSet::new();
    for p in positives {
        if !seen.insert(p.as_str()) {
            return Err(VocabularyError::Duplicate(p.clone()));
        }
        if !class_pool.contains(p) {
            return Err(VocabularyError::NotInPool(p.clone()));
        }
    }
    let mut candidates: Vec<&String> = Vec::new();
    for c in class_pool {
        if seen.insert(c.as_str()) {
            candidates.push(c);
        }
    }
    let wanted = size - positives.len();
    let take = wanted.min(candidates.len());
    let truncated = take < wanted;
    if truncated {
        log::warn!("class pool offers {} negatives, vocabulary of {size} truncated to {}", candidates.len(), positives.len() + take);
    }
    let entry = |label: &String, is_positive| VocabEntry {
        label: EntryLabel::Class(label.clone()),
        embedding: None,
        is_positive,
        substituted: false,
    };
    let mut entries: Vec<VocabEntry> = positives.iter().map(|p| entry(p, true)).collect();
    entries.extend(rand::seq::index::sample(rng, candidates.len(), take).into_iter().map(|i| entry(candidates[i], false)));
    Ok(BuiltVocabulary { vocabulary: Vocabulary { entries }, truncated })
}

impl Vocabulary {
    /// Fixed vocabulary for evaluation: one entry per class, no positives.
    pub fn from_classes(classes: &[String]) -> Result<Self, VocabularyError> {
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(classes.len());
        for c in classes {
            if !seen.insert(c.as_str()) {
                return Err(VocabularyError::Duplicate(c.clone()));
            }
            entries.push(VocabEntry { label: EntryLabel::Class(c.clone()), embedding: None, is_positive: false, substituted: false });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> Option<&VocabEntry> {
        self.entries.get(index)
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(|e| e.label.as_str())
    }

    pub fn position(&self, class: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.label.class() == Some(class))
    }

    /// Embedding dimension, if every entry is encoded.
    pub fn dim(&self) -> Option<usize> {
        let first = self.entries.first()?.embedding.as_ref()?.dim();
        self.entries.iter().all(|e| e.embedding.as_ref().map(|v| v.dim()) == Some(first)).then_some(first)
    }

    pub fn embeddings(&self) -> Result<Vec<&EmbeddingVector>, VocabularyError> {
        self.entries.iter().enumerate().map(|(i, e)| e.embedding.as_ref().ok_or(VocabularyError::NotEncoded(i))).collect()
    }

    /// Encode every unsubstituted entry; on failure nothing is changed.
    pub fn encode_labels(&mut self, encoder: &dyn FoundationEncoder, template: &PromptTemplate) -> Result<(), VocabularyError> {
        let encoded = self
            .entries
            .iter()
            .map(|e| match &e.label {
                EntryLabel::Class(c) => encoder.encode_text(&template.apply(c)).map(Some),
                EntryLabel::Substituted => Ok(None),
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (entry, emb) in self.entries.iter_mut().zip(encoded) {
            if let Some(emb) = emb {
                entry.embedding = Some(emb);
            }
        }
        Ok(())
    }

    /// Replace a negative's embedding with an image embedding.
    pub fn substitute_entry(&mut self, index: usize, image_embedding: EmbeddingVector) -> Result<(), VocabularyError> {
        let expected = self.dim();
        let entry = self.entries.get_mut(index).ok_or(VocabularyError::OutOfRange(index))?;
        if entry.is_positive {
            return Err(VocabularyError::Positive(index));
        }
        if entry.substituted {
            return Err(VocabularyError::AlreadySubstituted(index));
        }
        if let Some(expected) = expected {
            if image_embedding.dim() != expected {
                return Err(VocabularyError::Dimension { expected, got: image_embedding.dim() });
            }
        }
        entry.embedding = Some(image_embedding);
        entry.label = EntryLabel::Substituted;
        entry.substituted = true;
        Ok(())
    }

    /// Turn a negative class entry into a positive (used when a pseudo-label
    /// of that class joins the ground truth).
    pub fn mark_positive(&mut self, index: usize) -> Result<(), VocabularyError> {
        let entry = self.entries.get_mut(index).ok_or(VocabularyError::OutOfRange(index))?;
        if entry.substituted {
            return Err(VocabularyError::AlreadySubstituted(index));
        }
        entry.is_positive = true;
        Ok(())
    }

    pub fn free_negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter(|(_, e)| !e.is_positive && !e.substituted).map(|(i, _)| i)
    }

    pub fn next_free_negative<R: Rng + ?Sized>(&self, choice: NegativeChoice, rng: &mut R) -> Option<usize> {
        match choice {
            NegativeChoice::LowestIndex => self.free_negatives().next(),
            NegativeChoice::Random => {
                let free: Vec<usize> = self.free_negatives().collect();
                (!free.is_empty()).then(|| free[rng.random_range(0..free.len())])
            }
        }
    }

    pub fn substituted_count(&self) -> usize {
        self.entries.iter().filter(|e| e.substituted).count()
    }

    pub fn negative_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_positive).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MockEncoder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| if i == 0 { "liver".to_string() } else { format!("class{i}") }).collect()
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn build_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_vocabulary(&s(&["liver"]), &pool(10), 4, &mut rng).unwrap();
        assert!(!b.truncated);
        let v = b.vocabulary;
        assert_eq!(v.len(), 4);
        assert_eq!(v.label(0), Some("liver"));
        assert!(v.entries()[0].is_positive);
        let negs: BTreeSet<&str> = v.entries()[1..].iter().map(|e| e.label.as_str()).collect();
        assert_eq!(negs.len(), 3);
        assert!(!negs.contains("liver"));
        assert!(v.entries()[1..].iter().all(|e| !e.is_positive));

        let all = pool(3);
        let v = build_vocabulary(&all, &all, 3, &mut rng).unwrap().vocabulary;
        assert_eq!(v.negative_count(), 0);

        let a = build_vocabulary(&s(&["liver"]), &pool(10), 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = build_vocabulary(&s(&["liver"]), &pool(10), 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_pool_truncates() {
        let b = build_vocabulary(&s(&["liver"]), &pool(3), 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.truncated);
        assert_eq!(b.vocabulary.len(), 3);
    }

    #[test]
    fn build_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(build_vocabulary(&s(&["a", "b"]), &s(&["a", "b"]), 1, &mut rng), Err(VocabularyError::TooSmall { .. })));
        assert!(matches!(build_vocabulary(&s(&["z"]), &s(&["a"]), 2, &mut rng), Err(VocabularyError::NotInPool(_))));
        assert!(matches!(build_vocabulary(&s(&["a", "a"]), &s(&["a"]), 3, &mut rng), Err(VocabularyError::Duplicate(_))));
    }

    #[test]
    fn negative_sampling_is_uniform() {
        // each of the 9 eligible negatives should appear in 3/9 of draws
        let pool = pool(10);
        let trials = 6000usize;
        let mut counts = vec![0usize; pool.len()];
        for seed in 0..trials as u64 {
            let v = build_vocabulary(&s(&["liver"]), &pool, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().vocabulary;
            for e in &v.entries()[1..] {
                counts[pool.iter().position(|p| p == e.label.as_str()).unwrap()] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        let p = 3.0 / 9.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "count {c} vs {mean} +- {sigma}");
        }
    }

    #[test]
    fn encoding_and_substitution() {
        let enc = MockEncoder::new(16, 0);
        let mut v = build_vocabulary(&s(&["Liver"]), &s(&["Liver", "a", "b", "c"]), 4, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap()
            .vocabulary;
        v.encode_labels(&enc, &PromptTemplate::default()).unwrap();
        assert_eq!(v.dim(), Some(16));
        assert_eq!(v.entries()[0].embedding.as_ref().unwrap(), &enc.encode_text("liver").unwrap());

        let before = v.clone();
        let img = EmbeddingVector(vec![0.5; 16]);
        v.substitute_entry(2, img.clone()).unwrap();
        for i in [0, 1, 3] {
            assert_eq!(v.entries()[i], before.entries()[i]);
        }
        assert_eq!(v.entries()[2].embedding.as_ref(), Some(&img));
        assert_eq!(v.label(2), Some(SUBSTITUTED_LABEL));
        assert_eq!(v.len(), 4);

        assert!(matches!(v.substitute_entry(2, img.clone()), Err(VocabularyError::AlreadySubstituted(2))));
        assert!(matches!(v.substitute_entry(0, img.clone()), Err(VocabularyError::Positive(0))));
        assert!(matches!(v.substitute_entry(9, img.clone()), Err(VocabularyError::OutOfRange(9))));
        assert!(matches!(v.substitute_entry(1, EmbeddingVector(vec![1.0; 3])), Err(VocabularyError::Dimension { .. })));
        v.substitute_entry(1, img.clone()).unwrap();
        v.substitute_entry(3, img.clone()).unwrap();
        assert_eq!(v.next_free_negative(NegativeChoice::LowestIndex, &mut ChaCha8Rng::seed_from_u64(0)), None);
        assert_eq!(v.len(), 4);
        assert!(v.entries()[0].is_positive && !v.entries()[0].substituted);

        // re-encoding leaves substituted entries alone
        v.encode_labels(&enc, &PromptTemplate::default()).unwrap();
        assert_eq!(v.entries()[2].embedding.as_ref(), Some(&img));
    }

    #[test]
    fn encoder_failure_leaves_vocabulary_untouched() {
        let enc = MockEncoder::new(8, 0);
        let mut v = Vocabulary::from_classes(&s(&["a", "b"])).unwrap();
        let template = PromptTemplate { pattern: "".into(), lowercase: false };
        assert!(v.encode_labels(&enc, &template).is_err());
        assert!(v.entries().iter().all(|e| e.embedding.is_none()));
    }
}
