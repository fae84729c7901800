//! Grounding data model: sentence-image pairs with phrase/region features,
//! bounding boxes, and relation-tagged gold annotations.
//!
//! Training is weakly supervised — the train split never carries
//! phrase-region annotations; gold links exist only on val/test and are
//! consumed exclusively by evaluation.

mod io;
mod synth;

pub use io::{load_corpus, write_corpus};
pub use synth::{synth_generate, SynthConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Region-encoder cap on detections per image.
pub const MAX_REGIONS: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("feature blob {path} has bad magic bytes")]
    BadMagic { path: String },
    #[error("feature blob {path} has unsupported version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("feature record at offset {offset} in {path} is truncated")]
    TruncatedBlob { path: String, offset: u64 },
    #[error("pair {pair_id}: {kind} feature dim is {got}, corpus declares {expected}")]
    DimMismatch {
        pair_id: u64,
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("pair {pair_id}: {kind} count is {got}, manifest declares {expected}")]
    CountMismatch {
        pair_id: u64,
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("pair {pair_id}: region {region_id} has a degenerate box")]
    DegenerateBox { pair_id: u64, region_id: u32 },
    #[error("pair {pair_id}: sentence has no phrases")]
    EmptySentence { pair_id: u64 },
    #[error("pair {pair_id}: image has no regions")]
    EmptyImage { pair_id: u64 },
    #[error("pair {pair_id}: {m} regions exceeds the cap of {MAX_REGIONS}")]
    TooManyRegions { pair_id: u64, m: usize },
    #[error("pair id {pair_id} appears in more than one split")]
    DuplicatePairId { pair_id: u64 },
    #[error("pair {pair_id}: duplicate {kind} id {id}")]
    DuplicateMemberId {
        pair_id: u64,
        kind: &'static str,
        id: u32,
    },
    #[error("annotation references unknown pair {pair_id}")]
    DanglingAnnotationPair { pair_id: u64 },
    #[error("annotation on pair {pair_id} references unknown phrase {phrase_id}")]
    DanglingAnnotationPhrase { pair_id: u64, phrase_id: u32 },
    #[error("annotation on pair {pair_id}, phrase {phrase_id} references unknown region {region_id}")]
    DanglingAnnotationRegion {
        pair_id: u64,
        phrase_id: u32,
        region_id: u32,
    },
    #[error("annotation on pair {pair_id}, phrase {phrase_id} has an empty gold set")]
    EmptyGoldSet { pair_id: u64, phrase_id: u32 },
    #[error("pair {pair_id} is in the train split but carries an annotation")]
    AnnotatedTrainPair { pair_id: u64 },
    #[error("invalid generator config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Axis-aligned box in pixel coordinates, corners (x1, y1) and (x2, y2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoundingBox { x1, y1, x2, y2 }
    }

    /// A box must have strictly positive width and height.
    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

#[derive(Debug, Clone)]
pub struct Region {
    pub region_id: u32,
    pub bbox: BoundingBox,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Phrase {
    pub phrase_id: u32,
    pub text: Option<String>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PairedSample {
    pub pair_id: u64,
    pub sentence: Vec<Phrase>,
    pub image: Vec<Region>,
}

impl PairedSample {
    /// Phrase embeddings stacked into an `[n × d_p]` matrix.
    pub fn phrase_matrix(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.sentence.iter().map(|p| p.embedding.clone()).collect();
        Tensor::from_rows(&rows).expect("uniform phrase dims")
    }

    /// Region embeddings stacked into an `[m × d_r]` matrix.
    pub fn region_matrix(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.image.iter().map(|r| r.embedding.clone()).collect();
        Tensor::from_rows(&rows).expect("uniform region dims")
    }
}

/// How a phrase relates to its visual evidence. Everything except
/// `Explicit` requires contextual or commonsense inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelationTag {
    /// Commonsense understanding.
    #[serde(rename = "CU")]
    Cu,
    /// Commonsense + contextual understanding.
    #[serde(rename = "CCU")]
    Ccu,
    /// Situational-relation understanding.
    #[serde(rename = "SRU")]
    Sru,
    /// Non-unique: several regions are equally valid.
    #[serde(rename = "NU")]
    Nu,
    #[serde(rename = "EXPLICIT")]
    Explicit,
}

impl RelationTag {
    pub fn is_implicit(self) -> bool {
        self != RelationTag::Explicit
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationTag::Cu => "CU",
            RelationTag::Ccu => "CCU",
            RelationTag::Sru => "SRU",
            RelationTag::Nu => "NU",
            RelationTag::Explicit => "EXPLICIT",
        }
    }
}

impl std::fmt::Display for RelationTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Evaluation-only gold link between a phrase and its region(s).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub pair_id: u64,
    pub phrase_id: u32,
    pub gold_region_ids: Vec<u32>,
    pub relation_tag: RelationTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct GroundingCorpus {
    pub d_p: usize,
    pub d_r: usize,
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    /// Gold links for val/test pairs only.
    pub annotations: Vec<GoldAnnotation>,
}

impl GroundingCorpus {
    pub fn split(&self, split: Split) -> &[PairedSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn annotations_for_split(&self, split: Split) -> Vec<GoldAnnotation> {
        let ids: std::collections::HashSet<u64> =
            self.split(split).iter().map(|p| p.pair_id).collect();
        self.annotations
            .iter()
            .filter(|a| ids.contains(&a.pair_id))
            .cloned()
            .collect()
    }

    /// Check every type invariant; errors name the offending pair.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut train_ids = std::collections::HashSet::new();
        for (split, pairs) in [
            (Split::Train, &self.train),
            (Split::Val, &self.val),
            (Split::Test, &self.test),
        ] {
            for pair in pairs.iter() {
                if !seen.insert(pair.pair_id) {
                    return Err(CorpusError::DuplicatePairId {
                        pair_id: pair.pair_id,
                    });
                }
                if split == Split::Train {
                    train_ids.insert(pair.pair_id);
                }
                self.validate_pair(pair)?;
            }
        }

        let by_id: std::collections::HashMap<u64, &PairedSample> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(|p| (p.pair_id, p))
            .collect();
        for ann in &self.annotations {
            let Some(pair) = by_id.get(&ann.pair_id) else {
                return Err(CorpusError::DanglingAnnotationPair {
                    pair_id: ann.pair_id,
                });
            };
            if train_ids.contains(&ann.pair_id) {
                return Err(CorpusError::AnnotatedTrainPair {
                    pair_id: ann.pair_id,
                });
            }
            if !pair.sentence.iter().any(|p| p.phrase_id == ann.phrase_id) {
                return Err(CorpusError::DanglingAnnotationPhrase {
                    pair_id: ann.pair_id,
                    phrase_id: ann.phrase_id,
                });
            }
            if ann.gold_region_ids.is_empty() {
                return Err(CorpusError::EmptyGoldSet {
                    pair_id: ann.pair_id,
                    phrase_id: ann.phrase_id,
                });
            }
            for &rid in &ann.gold_region_ids {
                if !pair.image.iter().any(|r| r.region_id == rid) {
                    return Err(CorpusError::DanglingAnnotationRegion {
                        pair_id: ann.pair_id,
                        phrase_id: ann.phrase_id,
                        region_id: rid,
                    });
                }
            }
        }
        Ok(())
    }

    fn validate_pair(&self, pair: &PairedSample) -> Result<()> {
        let pair_id = pair.pair_id;
        if pair.sentence.is_empty() {
            return Err(CorpusError::EmptySentence { pair_id });
        }
        if pair.image.is_empty() {
            return Err(CorpusError::EmptyImage { pair_id });
        }
        if pair.image.len() > MAX_REGIONS {
            return Err(CorpusError::TooManyRegions {
                pair_id,
                m: pair.image.len(),
            });
        }
        let mut phrase_ids = std::collections::HashSet::new();
        for phrase in &pair.sentence {
            if !phrase_ids.insert(phrase.phrase_id) {
                return Err(CorpusError::DuplicateMemberId {
                    pair_id,
                    kind: "phrase",
                    id: phrase.phrase_id,
                });
            }
            if phrase.embedding.len() != self.d_p {
                return Err(CorpusError::DimMismatch {
                    pair_id,
                    kind: "phrase",
                    expected: self.d_p,
                    got: phrase.embedding.len(),
                });
            }
        }
        let mut region_ids = std::collections::HashSet::new();
        for region in &pair.image {
            if !region_ids.insert(region.region_id) {
                return Err(CorpusError::DuplicateMemberId {
                    pair_id,
                    kind: "region",
                    id: region.region_id,
                });
            }
            if region.embedding.len() != self.d_r {
                return Err(CorpusError::DimMismatch {
                    pair_id,
                    kind: "region",
                    expected: self.d_r,
                    got: region.embedding.len(),
                });
            }
            if !region.bbox.is_valid() {
                return Err(CorpusError::DegenerateBox {
                    pair_id,
                    region_id: region.region_id,
                });
            }
        }
        Ok(())
    }
}

/// Annotation subsets used for stratified evaluation.
#[derive(Debug, Clone)]
pub struct Strata {
    pub implicit: Vec<GoldAnnotation>,
    pub explicit: Vec<GoldAnnotation>,
}

impl Strata {
    pub fn full(&self) -> Vec<GoldAnnotation> {
        let mut all = self.implicit.clone();
        all.extend(self.explicit.iter().cloned());
        all
    }
}

/// Partition annotations into implicit (any non-EXPLICIT tag) and explicit.
pub fn stratify(annotations: &[GoldAnnotation]) -> Strata {
    let (implicit, explicit) = annotations
        .iter()
        .cloned()
        .partition(|a| a.relation_tag.is_implicit());
    Strata { implicit, explicit }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedding(d: usize, fill: f64) -> Vec<f64> {
        vec![fill; d]
    }

    fn small_pair(pair_id: u64, d: usize) -> PairedSample {
        PairedSample {
            pair_id,
            sentence: vec![
                Phrase {
                    phrase_id: 0,
                    text: Some("a dog".into()),
                    embedding: embedding(d, 0.1),
                },
                Phrase {
                    phrase_id: 1,
                    text: None,
                    embedding: embedding(d, 0.2),
                },
            ],
            image: vec![
                Region {
                    region_id: 0,
                    bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0),
                    embedding: embedding(d, 0.3),
                },
                Region {
                    region_id: 1,
                    bbox: BoundingBox::new(5.0, 5.0, 20.0, 20.0),
                    embedding: embedding(d, 0.4),
                },
            ],
        }
    }

    fn valid_corpus() -> GroundingCorpus {
        GroundingCorpus {
            d_p: 4,
            d_r: 4,
            train: vec![small_pair(0, 4)],
            val: vec![small_pair(1, 4)],
            test: vec![small_pair(2, 4)],
            annotations: vec![
                GoldAnnotation {
                    pair_id: 1,
                    phrase_id: 0,
                    gold_region_ids: vec![0],
                    relation_tag: RelationTag::Explicit,
                },
                GoldAnnotation {
                    pair_id: 2,
                    phrase_id: 1,
                    gold_region_ids: vec![0, 1],
                    relation_tag: RelationTag::Nu,
                },
            ],
        }
    }

    #[test]
    fn valid_corpus_passes_validation() {
        valid_corpus().validate().unwrap();
    }

    #[test]
    fn every_invariant_violation_is_rejected() {
        type Mutation = (&'static str, fn(&mut GroundingCorpus));
        let mutations: Vec<Mutation> = vec![
            ("degenerate box", |c| {
                c.val[0].image[0].bbox = BoundingBox::new(5.0, 0.0, 5.0, 10.0)
            }),
            ("inverted box", |c| {
                c.test[0].image[1].bbox = BoundingBox::new(9.0, 9.0, 3.0, 12.0)
            }),
            ("phrase dim mismatch", |c| {
                c.train[0].sentence[0].embedding.push(0.0)
            }),
            ("region dim mismatch", |c| {
                c.val[0].image[0].embedding.pop();
            }),
            ("empty sentence", |c| c.train[0].sentence.clear()),
            ("empty image", |c| c.test[0].image.clear()),
            ("region cap exceeded", |c| {
                let proto = c.val[0].image[0].clone();
                for i in 0..200u32 {
                    let mut r = proto.clone();
                    r.region_id = 100 + i;
                    c.val[0].image.push(r);
                }
            }),
            ("duplicate pair id across splits", |c| {
                c.test[0].pair_id = c.train[0].pair_id
            }),
            ("duplicate phrase id", |c| c.val[0].sentence[1].phrase_id = 0),
            ("duplicate region id", |c| c.val[0].image[1].region_id = 0),
            ("dangling annotation pair", |c| {
                c.annotations[0].pair_id = 999
            }),
            ("dangling annotation phrase", |c| {
                c.annotations[0].phrase_id = 42
            }),
            ("dangling annotation region", |c| {
                c.annotations[1].gold_region_ids = vec![0, 77]
            }),
            ("empty gold set", |c| c.annotations[0].gold_region_ids.clear()),
            ("annotation on train pair", |c| c.annotations[0].pair_id = 0),
        ];
        for (label, mutate) in mutations {
            let mut corpus = valid_corpus();
            mutate(&mut corpus);
            assert!(
                corpus.validate().is_err(),
                "mutation not rejected: {label}"
            );
        }
    }

    #[test]
    fn stratify_partitions_annotations() {
        let corpus = valid_corpus();
        let strata = stratify(&corpus.annotations);
        assert_eq!(strata.explicit.len(), 1);
        assert_eq!(strata.implicit.len(), 1);
        assert_eq!(strata.full().len(), corpus.annotations.len());
        assert!(strata.implicit.iter().all(|a| a.relation_tag.is_implicit()));
        assert!(strata
            .explicit
            .iter()
            .all(|a| a.relation_tag == RelationTag::Explicit));
    }

    #[test]
    fn all_explicit_corpus_has_empty_implicit_stratum() {
        let mut corpus = valid_corpus();
        for ann in &mut corpus.annotations {
            ann.relation_tag = RelationTag::Explicit;
        }
        let strata = stratify(&corpus.annotations);
        assert!(strata.implicit.is_empty());
        assert_eq!(strata.explicit.len(), 2);
    }

    #[test]
    fn relation_tags_serialize_as_upper_case_names() {
        let json = serde_json::to_string(&RelationTag::Ccu).unwrap();
        assert_eq!(json, "\"CCU\"");
        let back: RelationTag = serde_json::from_str("\"EXPLICIT\"").unwrap();
        assert_eq!(back, RelationTag::Explicit);
    }
}
