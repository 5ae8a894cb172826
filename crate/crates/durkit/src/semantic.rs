//! Pluggable text-to-vector extractors supplying the semantic conditioning
//! signal. The default is a dependency-free character n-gram feature hash;
//! a file-backed store lets callers plug in embeddings computed offline by
//! a pretrained language model.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Fixed-dimension text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector {
    values: Vec<f64>,
}

impl SemanticVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("semantic vector has non-finite entry".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A pure text -> vector function with a fixed output dimension.
pub trait SemanticExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, text: &str) -> Result<SemanticVector>;
}

/// Signed feature hashing over character n-grams (n = 1..=3), L2-normalized.
#[derive(Debug, Clone)]
pub struct HashExtractor {
    dim: usize,
}

impl HashExtractor {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "semantic dimension must be positive".into(),
            ));
        }
        Ok(Self { dim })
    }
}

// FNV-1a; hand-rolled so hashes are stable across toolchain versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

impl SemanticExtractor for HashExtractor {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, text: &str) -> Result<SemanticVector> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::Data("cannot extract semantics from empty text".into()));
        }
        let chars: Vec<char> = trimmed.chars().collect();
        let mut values = vec![0.0; self.dim];
        let mut buf = String::new();
        for n in 1..=3usize {
            if chars.len() < n {
                continue;
            }
            for window in chars.windows(n) {
                buf.clear();
                buf.extend(window);
                let h = fnv1a(buf.as_bytes());
                let bucket = (h % self.dim as u64) as usize;
                let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
                values[bucket] += sign;
            }
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        SemanticVector::new(values)
    }
}

/// Embeddings precomputed offline, stored as TSV `text TAB f,f,...`.
#[derive(Debug, Clone)]
pub struct FileExtractor {
    name: String,
    dim: usize,
    store: BTreeMap<String, Vec<f64>>,
}

impl FileExtractor {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&content, &path.display().to_string())
    }

    pub fn from_str(content: &str, source: &str) -> Result<Self> {
        let mut store = BTreeMap::new();
        let mut dim = None;
        for (lineno, line) in content.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (text, values) = line.split_once('\t').ok_or_else(|| {
                Error::parse(source, lineno + 1, "expected `text TAB floats` line")
            })?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| {
                        Error::parse(source, lineno + 1, format!("malformed float {v:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::parse(
                        source,
                        lineno + 1,
                        format!("embedding dimension {} but store uses {d}", values.len()),
                    ));
                }
                _ => {}
            }
            store.insert(text.to_string(), values);
        }
        let dim = dim.ok_or_else(|| Error::Data(format!("{source}: embedding store is empty")))?;
        Ok(Self {
            name: format!("file:{source}"),
            dim,
            store,
        })
    }
}

impl SemanticExtractor for FileExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, text: &str) -> Result<SemanticVector> {
        if text.trim().is_empty() {
            return Err(Error::Data("cannot extract semantics from empty text".into()));
        }
        let values = self
            .store
            .get(text)
            .ok_or_else(|| Error::Data(format!("text {text:?} not found in embedding store")))?;
        SemanticVector::new(values.clone())
    }
}

/// Resolve an extractor spec string: `hash`, or `file:<path>` for a
/// precomputed store. The store's dimension must match `d_sem`.
pub fn resolve(spec: &str, d_sem: usize) -> Result<Box<dyn SemanticExtractor>> {
    if spec == "hash" {
        return Ok(Box::new(HashExtractor::new(d_sem)?));
    }
    if let Some(path) = spec.strip_prefix("file:") {
        let extractor = FileExtractor::open(path)?;
        if extractor.dim() != d_sem {
            return Err(Error::Config(format!(
                "embedding store {path:?} has dimension {} but model expects {d_sem}",
                extractor.dim()
            )));
        }
        return Ok(Box::new(extractor));
    }
    Err(Error::UnknownName {
        kind: "semantic extractor",
        name: spec.to_string(),
        available: "hash, file:<path>".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_extractor_is_deterministic_and_normalized() {
        let ex = HashExtractor::new(32).unwrap();
        let a = ex.extract("da ba ne").unwrap();
        let b = ex.extract("da ba ne").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(a.dim(), 32);
    }

    #[test]
    fn different_texts_differ() {
        let ex = HashExtractor::new(64).unwrap();
        let a = ex.extract("ba da").unwrap();
        let b = ex.extract("ne ko").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_text_is_an_error() {
        let ex = HashExtractor::new(16).unwrap();
        assert!(ex.extract("  ").is_err());
    }

    #[test]
    fn file_store_returns_exact_vectors() {
        let store = FileExtractor::from_str("你好\t0.5,-1.0,2.0\n", "mem.tsv").unwrap();
        let v = store.extract("你好").unwrap();
        assert_eq!(v.values(), &[0.5, -1.0, 2.0]);
        assert!(store.extract("missing").is_err());
    }

    #[test]
    fn file_store_rejects_ragged_dimensions() {
        let err = FileExtractor::from_str("a\t1.0\nb\t1.0,2.0\n", "mem.tsv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn resolve_paths() {
        assert_eq!(resolve("hash", 8).unwrap().dim(), 8);
        let err = resolve("bogus", 8).unwrap_err();
        assert!(err.to_string().contains("available"));
    }
}
