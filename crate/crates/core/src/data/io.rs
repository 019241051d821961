//! Embedding files.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! "PDEB" | version u32 = 1 | dim u32 | count u64 | count × (class u32, dim × f32)
//! ```
//!
//! Paths ending in `.csv` use text instead: one record per line, the class id
//! followed by `dim` comma-separated decimals. The overfit cache reuses the
//! binary layout with the class field holding an episode key.

use std::fs;
use std::path::Path;

use super::EmbeddingDataset;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"PDEB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

pub fn encode(ds: &EmbeddingDataset) -> Vec<u8> {
    let d = ds.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (4 + 4 * d));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for r in 0..ds.len() {
        out.extend_from_slice(&ds.label(r).to_le_bytes());
        for v in ds.vector(r) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingDataset, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated(format!("{} bytes, no magic", bytes.len())));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated(format!(
            "header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let dim = u32_at(bytes, 8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let record = 4 + 4 * dim;
    let body = bytes.len() - HEADER_LEN;
    let expected = (count as u128) * record as u128;
    if (body as u128) < expected {
        return Err(FormatError::Truncated(format!(
            "header announces {count} records of dimension {dim} ({expected} bytes), payload has {body}"
        )));
    }
    if (body as u128) > expected {
        return Err(FormatError::DimensionMismatch(format!(
            "payload has {} bytes beyond {count} records of dimension {dim}",
            body as u128 - expected
        )));
    }
    let count = count as usize;
    let mut labels = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count * dim);
    for rec in bytes[HEADER_LEN..].chunks_exact(record) {
        labels.push(u32_at(rec, 0));
        for v in rec[4..].chunks_exact(4) {
            vectors.push(f32::from_le_bytes(v.try_into().unwrap()));
        }
    }
    EmbeddingDataset::from_parts(dim, labels, vectors).map_err(|e| FormatError::Invalid(e.to_string()))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn parse_csv(text: &str) -> Result<EmbeddingDataset, FormatError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut ds: Option<EmbeddingDataset> = None;
    for (i, row) in reader.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| FormatError::Parse {
            line,
            message: e.to_string(),
        })?;
        if row.iter().all(|f| f.is_empty()) {
            continue;
        }
        let class: u32 = row[0].parse().map_err(|_| FormatError::Parse {
            line,
            message: format!("bad class id {:?}", &row[0]),
        })?;
        let values = row
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f32>().map_err(|_| FormatError::Parse {
                    line,
                    message: format!("bad value {f:?}"),
                })
            })
            .collect::<Result<Vec<f32>, _>>()?;
        let target = ds.get_or_insert_with(|| EmbeddingDataset::empty(values.len()));
        if values.len() != target.dim() {
            return Err(FormatError::DimensionMismatch(format!(
                "line {line} has {} values, earlier lines have {}",
                values.len(),
                target.dim()
            )));
        }
        target
            .push(class, &values)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
    }
    Ok(ds.unwrap_or_else(|| EmbeddingDataset::empty(0)))
}

pub fn to_csv(ds: &EmbeddingDataset) -> String {
    let mut out = String::new();
    for r in 0..ds.len() {
        out.push_str(&ds.label(r).to_string());
        for v in ds.vector(r) {
            // Debug formatting of f32 is the shortest string that parses back exactly.
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn save_embeddings(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_csv(path) {
        to_csv(ds).into_bytes()
    } else {
        encode(ds)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_csv(path) {
        let text = String::from_utf8(bytes).map_err(|_| FormatError::Invalid("csv file is not UTF-8".into()))?;
        Ok(parse_csv(&text)?)
    } else {
        Ok(decode(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn sample() -> EmbeddingDataset {
        generate_synthetic(&SyntheticConfig {
            dim: 5,
            n_classes: 3,
            samples_per_class: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let ds = sample();
        let back = decode(&encode(&ds)).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode(&back), encode(&ds));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = sample();
        assert_eq!(parse_csv(&to_csv(&ds)).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = EmbeddingDataset::empty(8);
        let back = decode(&encode(&ds)).unwrap();
        assert_eq!(back.dim(), 8);
        assert!(back.is_empty());
    }

    #[test]
    fn error_kinds_have_distinct_codes() {
        let good = encode(&sample());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let truncated = &good[..good.len() - 3];
        let mut extra = good.clone();
        extra.extend_from_slice(&[0; 4]);

        let codes: Vec<u32> = [
            decode(&bad_magic),
            decode(&bad_version),
            decode(truncated),
            decode(&extra),
        ]
        .into_iter()
        .map(|r| r.unwrap_err().code())
        .collect();
        assert_eq!(codes, vec![1, 2, 3, 4]);
        assert!(decode(truncated).unwrap_err().to_string().contains("truncated payload"));
    }

    #[test]
    fn ragged_csv_is_a_dimension_mismatch() {
        let err = parse_csv("0,1.0,2.0\n1,3.0\n").unwrap_err();
        assert!(matches!(err, FormatError::DimensionMismatch(_)));
        let err = parse_csv("0,1.0\nx,2.0\n").unwrap_err();
        assert!(matches!(err, FormatError::Parse { line: 2, .. }));
    }

    #[test]
    fn files_round_trip_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        for name in ["e.bin", "e.csv"] {
            let p = dir.path().join(name);
            save_embeddings(&ds, &p).unwrap();
            assert_eq!(load_embeddings(&p).unwrap(), ds);
        }
    }
}
