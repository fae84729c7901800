//! Corpus file formats.
//!
//! A corpus on disk is a `manifest.json` (structure, boxes, ids, annotation
//! records) plus one or more feature blobs. Blob layout: magic `IECIFEAT`,
//! a little-endian u32 version, then per record a u32 count, a u32 dim, and
//! `count × dim` little-endian f32 values (widened to f64 on load).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    BoundingBox, CorpusError, GoldAnnotation, GroundingCorpus, PairedSample, Phrase, Region,
    Result,
};

const MANIFEST_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 8] = b"IECIFEAT";
const FEATURE_VERSION: u32 = 1;
const DEFAULT_BLOB: &str = "features.bin";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    d_p: usize,
    d_r: usize,
    splits: SplitRecords,
    annotations: Vec<GoldAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct SplitRecords {
    train: Vec<PairRecord>,
    val: Vec<PairRecord>,
    test: Vec<PairRecord>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    pair_id: u64,
    phrase_count: usize,
    region_count: usize,
    phrase_ids: Vec<u32>,
    phrase_texts: Vec<Option<String>>,
    region_ids: Vec<u32>,
    boxes: Vec<[f64; 4]>,
    phrase_features: BlobRef,
    region_features: BlobRef,
}

#[derive(Serialize, Deserialize)]
struct BlobRef {
    blob: String,
    offset: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serialize a corpus as `manifest.json` + `features.bin` under `dir`.
pub fn write_corpus(corpus: &GroundingCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut blob = Vec::new();
    blob.extend_from_slice(FEATURE_MAGIC);
    blob.extend_from_slice(&FEATURE_VERSION.to_le_bytes());

    let mut encode_split = |pairs: &[PairedSample]| -> Vec<PairRecord> {
        pairs
            .iter()
            .map(|pair| {
                let phrase_offset = append_record(
                    &mut blob,
                    pair.sentence.iter().map(|p| p.embedding.as_slice()),
                    pair.sentence.len(),
                    corpus.d_p,
                );
                let region_offset = append_record(
                    &mut blob,
                    pair.image.iter().map(|r| r.embedding.as_slice()),
                    pair.image.len(),
                    corpus.d_r,
                );
                PairRecord {
                    pair_id: pair.pair_id,
                    phrase_count: pair.sentence.len(),
                    region_count: pair.image.len(),
                    phrase_ids: pair.sentence.iter().map(|p| p.phrase_id).collect(),
                    phrase_texts: pair.sentence.iter().map(|p| p.text.clone()).collect(),
                    region_ids: pair.image.iter().map(|r| r.region_id).collect(),
                    boxes: pair
                        .image
                        .iter()
                        .map(|r| [r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2])
                        .collect(),
                    phrase_features: BlobRef {
                        blob: DEFAULT_BLOB.into(),
                        offset: phrase_offset,
                    },
                    region_features: BlobRef {
                        blob: DEFAULT_BLOB.into(),
                        offset: region_offset,
                    },
                }
            })
            .collect()
    };

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        d_p: corpus.d_p,
        d_r: corpus.d_r,
        splits: SplitRecords {
            train: encode_split(&corpus.train),
            val: encode_split(&corpus.val),
            test: encode_split(&corpus.test),
        },
        annotations: corpus.annotations.clone(),
    };

    let blob_path = dir.join(DEFAULT_BLOB);
    std::fs::write(&blob_path, &blob).map_err(|e| io_err(&blob_path, e))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(|e| io_err(&manifest_path, e))?;
    Ok(())
}

fn append_record<'a>(
    blob: &mut Vec<u8>,
    rows: impl Iterator<Item = &'a [f64]>,
    count: usize,
    dim: usize,
) -> u64 {
    let offset = blob.len() as u64;
    blob.extend_from_slice(&(count as u32).to_le_bytes());
    blob.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        for &v in row {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    offset
}

/// Load and fully validate a corpus from its manifest path.
pub fn load_corpus(manifest_path: &Path) -> Result<GroundingCorpus> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| CorpusError::Parse {
            path: manifest_path.display().to_string(),
            source,
        })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CorpusError::BadVersion {
            path: manifest_path.display().to_string(),
            version: manifest.version,
        });
    }

    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut blobs: HashMap<PathBuf, Vec<u8>> = HashMap::new();
    let mut load_blob = |name: &str| -> Result<Vec<u8>> {
        let path = base.join(name);
        if let Some(bytes) = blobs.get(&path) {
            return Ok(bytes.clone());
        }
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        if bytes.len() < 12 || &bytes[..8] != FEATURE_MAGIC {
            return Err(CorpusError::BadMagic {
                path: path.display().to_string(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FEATURE_VERSION {
            return Err(CorpusError::BadVersion {
                path: path.display().to_string(),
                version,
            });
        }
        blobs.insert(path, bytes.clone());
        Ok(bytes)
    };

    let mut decode_split = |records: &[PairRecord]| -> Result<Vec<PairedSample>> {
        records
            .iter()
            .map(|rec| {
                let phrase_rows = read_record(
                    &load_blob(&rec.phrase_features.blob)?,
                    base.join(&rec.phrase_features.blob).as_path(),
                    rec.phrase_features.offset,
                    rec.pair_id,
                    "phrase",
                    rec.phrase_count,
                    manifest.d_p,
                )?;
                let region_rows = read_record(
                    &load_blob(&rec.region_features.blob)?,
                    base.join(&rec.region_features.blob).as_path(),
                    rec.region_features.offset,
                    rec.pair_id,
                    "region",
                    rec.region_count,
                    manifest.d_r,
                )?;
                for (kind, declared, got) in [
                    ("phrase id", rec.phrase_count, rec.phrase_ids.len()),
                    ("phrase text", rec.phrase_count, rec.phrase_texts.len()),
                    ("region id", rec.region_count, rec.region_ids.len()),
                    ("box", rec.region_count, rec.boxes.len()),
                ] {
                    if declared != got {
                        return Err(CorpusError::CountMismatch {
                            pair_id: rec.pair_id,
                            kind,
                            expected: declared,
                            got,
                        });
                    }
                }
                let sentence = rec
                    .phrase_ids
                    .iter()
                    .zip(&rec.phrase_texts)
                    .zip(phrase_rows)
                    .map(|((&phrase_id, text), embedding)| Phrase {
                        phrase_id,
                        text: text.clone(),
                        embedding,
                    })
                    .collect();
                let image = rec
                    .region_ids
                    .iter()
                    .zip(&rec.boxes)
                    .zip(region_rows)
                    .map(|((&region_id, b), embedding)| Region {
                        region_id,
                        bbox: BoundingBox::new(b[0], b[1], b[2], b[3]),
                        embedding,
                    })
                    .collect();
                Ok(PairedSample {
                    pair_id: rec.pair_id,
                    sentence,
                    image,
                })
            })
            .collect()
    };

    let corpus = GroundingCorpus {
        d_p: manifest.d_p,
        d_r: manifest.d_r,
        train: decode_split(&manifest.splits.train)?,
        val: decode_split(&manifest.splits.val)?,
        test: decode_split(&manifest.splits.test)?,
        annotations: manifest.annotations,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn read_record(
    blob: &[u8],
    path: &Path,
    offset: u64,
    pair_id: u64,
    kind: &'static str,
    expected_count: usize,
    expected_dim: usize,
) -> Result<Vec<Vec<f64>>> {
    let truncated = || CorpusError::TruncatedBlob {
        path: path.display().to_string(),
        offset,
    };
    let start = offset as usize;
    let header = blob.get(start..start + 8).ok_or_else(truncated)?;
    let count = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    if count != expected_count {
        return Err(CorpusError::CountMismatch {
            pair_id,
            kind,
            expected: expected_count,
            got: count,
        });
    }
    if dim != expected_dim {
        return Err(CorpusError::DimMismatch {
            pair_id,
            kind,
            expected: expected_dim,
            got: dim,
        });
    }
    let bytes = blob
        .get(start + 8..start + 8 + count * dim * 4)
        .ok_or_else(truncated)?;
    let mut rows = Vec::with_capacity(count);
    for r in 0..count {
        let mut row = Vec::with_capacity(dim);
        for c in 0..dim {
            let at = (r * dim + c) * 4;
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
            row.push(v as f64);
        }
        rows.push(row);
    }
    Ok(rows)
}
