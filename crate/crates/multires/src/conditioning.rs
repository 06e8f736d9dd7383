//! Vocabulary, token embeddings, multiresolution concept embedding sets, and
//! the conditioning encoder front end.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::network;
use crate::schedule::check_time;
use crate::util;

/// Name of the distinguished null token; always at index 0.
pub const NULL_TOKEN: &str = "<null>";

pub const CONCEPT_FORMAT: &str = "concept-embeddings";
pub const CONCEPT_VERSION: u32 = 1;

/// Ordered word list plus the set of pseudo-token names registered at runtime.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    reserved: HashSet<String>,
}

impl Vocabulary {
    /// Builds a vocabulary. The null token is inserted at index 0 if absent.
    pub fn new(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens = vec![NULL_TOKEN.to_string()];
        for w in words {
            if w != NULL_TOKEN {
                tokens.push(w);
            }
        }
        let mut index = HashMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            reserved: HashSet::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn null_id(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Registers a pseudo-token name. Pseudo names may not collide with
    /// corpus words or other registered names.
    pub fn register_pseudo(&mut self, name: &str) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!(
                "pseudo-token {name:?} collides with a vocabulary word"
            )));
        }
        if !self.reserved.insert(name.to_string()) {
            return Err(Error::Config(format!(
                "pseudo-token {name:?} already registered"
            )));
        }
        Ok(())
    }

    pub fn is_reserved(&self, name: &str) -> bool {
        self.reserved.contains(name)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(|s| s.as_str()) != Some(NULL_TOKEN) {
            return Err(Error::Config(format!(
                "vocabulary must start with the null token {NULL_TOKEN:?}"
            )));
        }
        Vocabulary::new(tokens.into_iter().skip(1))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.tokens
    }
}

/// One entry of a token sequence: a concrete vocabulary id, or an embedding
/// vector already resolved from a pseudo-token upstream.
#[derive(Clone, Debug)]
pub enum SeqEntry {
    Id(usize),
    Resolved(Array1<f64>),
}

/// An ordered token sequence of length at most the model's `seq_len`.
#[derive(Clone, Debug, Default)]
pub struct TokenSequence {
    pub entries: Vec<SeqEntry>,
}

impl TokenSequence {
    pub fn from_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        TokenSequence {
            entries: ids.into_iter().map(SeqEntry::Id).collect(),
        }
    }

    pub fn empty() -> Self {
        TokenSequence::default()
    }
}

/// Looks up each sequence entry in the embedding table, padding shorter
/// sequences with the null embedding up to `seq_len` rows.
pub fn embed_sequence(params: &ModelParams, seq: &TokenSequence) -> Result<Array2<f64>> {
    let l = params.arch.seq_len;
    let d = params.arch.embed_dim;
    if seq.entries.len() > l {
        return Err(Error::Config(format!(
            "sequence length {} exceeds maximum {l}",
            seq.entries.len()
        )));
    }
    let mut rows = Array2::zeros((l, d));
    let null = params.table.row(params.vocab.null_id());
    for i in 0..l {
        match seq.entries.get(i) {
            Some(SeqEntry::Id(id)) => {
                if *id >= params.table.nrows() {
                    return Err(Error::Lookup(format!("unknown token id {id}")));
                }
                rows.row_mut(i).assign(&params.table.row(*id));
            }
            Some(SeqEntry::Resolved(v)) => {
                if v.len() != d {
                    return Err(Error::Config(format!(
                        "resolved embedding width {} does not match {d}",
                        v.len()
                    )));
                }
                rows.row_mut(i).assign(v);
            }
            None => rows.row_mut(i).assign(&null),
        }
    }
    Ok(rows)
}

/// Conditioning vector produced by the encoder, of the configured width.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningVector {
    pub v: Array1<f64>,
}

/// Applies the conditioning encoder to an `seq_len x d` row matrix:
/// mean-pool over rows, then a two-layer network to conditioning width.
pub fn encode(params: &ModelParams, rows: &Array2<f64>) -> Result<ConditioningVector> {
    if rows.nrows() != params.arch.seq_len || rows.ncols() != params.arch.embed_dim {
        return Err(Error::Config(format!(
            "row matrix {}x{} does not match {}x{}",
            rows.nrows(),
            rows.ncols(),
            params.arch.seq_len,
            params.arch.embed_dim
        )));
    }
    let pooled = rows
        .mean_axis(Axis(0))
        .expect("seq_len > 0")
        .insert_axis(Axis(1));
    let (cond, _cache) = network::encoder_forward(params, &pooled);
    Ok(ConditioningVector {
        v: cond.index_axis(Axis(1), 0).to_owned(),
    })
}

/// Conditioning of the all-null-token sequence; the stand-in for
/// "no conditioning". Constant for fixed parameters.
pub fn null_conditioning(params: &ModelParams) -> ConditioningVector {
    let rows = embed_sequence(params, &TokenSequence::empty())
        .expect("empty sequence always embeds");
    encode(params, &rows).expect("null rows always encode")
}

/// Maps diffusion time to a resolution bucket: `min(floor(t * T), T - 1)`.
pub fn bucket_index(t: f64, buckets: usize) -> Result<usize> {
    check_time(t)?;
    if buckets == 0 {
        return Err(Error::Config("bucket count must be at least 1".into()));
    }
    Ok(((t * buckets as f64).floor() as usize).min(buckets - 1))
}

/// The learned set of per-bucket embeddings for one pseudo-word.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiResEmbeddingSet {
    pub name: String,
    pub embeddings: Array2<f64>,
}

impl MultiResEmbeddingSet {
    pub fn new(name: impl Into<String>, embeddings: Array2<f64>) -> Result<Self> {
        if embeddings.nrows() == 0 {
            return Err(Error::Config("embedding set needs at least one bucket".into()));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: "MultiResEmbeddingSet::new".into(),
                detail: "non-finite embedding entry".into(),
            });
        }
        Ok(MultiResEmbeddingSet {
            name: name.into(),
            embeddings,
        })
    }

    /// Number of resolution buckets.
    pub fn buckets(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Center of bucket `k` on the time axis.
    pub fn bucket_center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.buckets() as f64
    }

    /// Continuous-time lookup: piecewise-linear interpolation over bucket
    /// centers, clamped to the first/last bucket embedding outside the
    /// center range.
    pub fn embedding_at(&self, t: f64) -> Result<Array1<f64>> {
        check_time(t)?;
        let tb = self.buckets();
        if tb == 1 {
            return Ok(self.embeddings.row(0).to_owned());
        }
        let first = self.bucket_center(0);
        let last = self.bucket_center(tb - 1);
        if t <= first {
            return Ok(self.embeddings.row(0).to_owned());
        }
        if t >= last {
            return Ok(self.embeddings.row(tb - 1).to_owned());
        }
        // t strictly between the first and last centers: find the bracket.
        let lo = (((t - first) * tb as f64).floor() as usize).min(tb - 2);
        Ok(self.blend(lo, t))
    }

    /// Linear blend between bucket `lo` and `lo + 1` at time `t`.
    pub(crate) fn blend(&self, lo: usize, t: f64) -> Array1<f64> {
        let c_lo = self.bucket_center(lo);
        let c_hi = self.bucket_center(lo + 1);
        let w = (t - c_lo) / (c_hi - c_lo);
        &self.embeddings.row(lo) * (1.0 - w) + &self.embeddings.row(lo + 1) * w
    }

    /// Writes the concept file: JSON header plus row-major f64 blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "format": CONCEPT_FORMAT,
            "version": CONCEPT_VERSION,
            "name": self.name,
            "buckets": self.buckets(),
            "embed_dim": self.dim(),
        });
        let values: Vec<f64> = self.embeddings.iter().copied().collect();
        util::write_header_and_blob(path, &header, &values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, values) = util::read_header_and_blob(path)?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if header["format"] != CONCEPT_FORMAT {
            return Err(bad(format!("unexpected format {}", header["format"])));
        }
        if header["version"] != CONCEPT_VERSION {
            return Err(bad(format!("unsupported version {}", header["version"])));
        }
        let name = header["name"]
            .as_str()
            .ok_or_else(|| bad("missing name".into()))?
            .to_string();
        let buckets = header["buckets"].as_u64().ok_or_else(|| bad("missing buckets".into()))? as usize;
        let dim = header["embed_dim"].as_u64().ok_or_else(|| bad("missing embed_dim".into()))? as usize;
        if values.len() != buckets * dim {
            return Err(bad(format!(
                "blob holds {} values, expected {}",
                values.len(),
                buckets * dim
            )));
        }
        let embeddings = Array2::from_shape_vec((buckets, dim), values)
            .map_err(|e| bad(e.to_string()))?;
        MultiResEmbeddingSet::new(name, embeddings)
    }
}

/// Loaded concept sets addressable by pseudo-token name.
#[derive(Clone, Debug, Default)]
pub struct ConceptRegistry {
    sets: HashMap<String, MultiResEmbeddingSet>,
}

impl ConceptRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, set: MultiResEmbeddingSet) -> Result<()> {
        if self.sets.contains_key(&set.name) {
            return Err(Error::Config(format!(
                "concept {:?} already registered",
                set.name
            )));
        }
        self.sets.insert(set.name.clone(), set);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&MultiResEmbeddingSet> {
        self.sets.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sets.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.sets.keys().map(|s| s.as_str()).collect();
        names.sort_unstable();
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "photo", "of"].map(String::from)).unwrap()
    }

    #[test]
    fn null_token_pinned_at_zero() {
        let v = vocab();
        assert_eq!(v.id(NULL_TOKEN), Some(0));
        assert_eq!(v.null_id(), 0);
        assert_eq!(v.token(1), Some("a"));
    }

    #[test]
    fn pseudo_names_must_not_collide() {
        let mut v = vocab();
        assert!(v.register_pseudo("photo").is_err());
        v.register_pseudo("jane").unwrap();
        assert!(v.register_pseudo("jane").is_err());
        assert!(v.is_reserved("jane"));
    }

    #[test]
    fn duplicate_words_rejected() {
        assert!(Vocabulary::new(["a", "a"].map(String::from)).is_err());
    }

    #[test]
    fn bucket_index_examples() {
        assert_eq!(bucket_index(0.0, 10).unwrap(), 0);
        assert_eq!(bucket_index(1.0, 10).unwrap(), 9);
        assert_eq!(bucket_index(0.57, 10).unwrap(), 5);
        assert!(bucket_index(-0.1, 10).is_err());
        assert!(bucket_index(1.1, 10).is_err());
    }

    #[test]
    fn bucket_index_monotone_and_surjective() {
        let tb = 7;
        let mut seen = vec![false; tb];
        let mut prev = 0;
        for i in 0..=10_000 {
            let t = i as f64 / 10_000.0;
            let k = bucket_index(t, tb).unwrap();
            assert!(k >= prev, "bucket index decreased at t = {t}");
            seen[k] = true;
            prev = k;
        }
        assert!(seen.iter().all(|&s| s), "not all buckets visited: {seen:?}");
    }

    fn demo_set(tb: usize, d: usize) -> MultiResEmbeddingSet {
        let m = Array2::from_shape_fn((tb, d), |(k, j)| (k * d + j) as f64 * 0.1 - 0.4);
        MultiResEmbeddingSet::new("demo", m).unwrap()
    }

    #[test]
    fn embedding_at_recovers_bucket_centers() {
        let set = demo_set(10, 3);
        for k in 0..set.buckets() {
            let c = set.bucket_center(k);
            let got = set.embedding_at(c).unwrap();
            assert_eq!(got, set.embeddings.row(k).to_owned(), "bucket {k}");
        }
    }

    #[test]
    fn embedding_at_midpoint_is_average() {
        let set = demo_set(4, 3);
        let mid = (set.bucket_center(1) + set.bucket_center(2)) / 2.0;
        let got = set.embedding_at(mid).unwrap();
        let expect = (&set.embeddings.row(1) + &set.embeddings.row(2)) / 2.0;
        for j in 0..3 {
            assert!((got[j] - expect[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn single_bucket_is_constant() {
        let set = demo_set(1, 4);
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            assert_eq!(set.embedding_at(t).unwrap(), set.embeddings.row(0).to_owned());
            assert_eq!(bucket_index(t, 1).unwrap(), 0);
        }
    }

    #[test]
    fn embedding_at_ends_clamp() {
        let set = demo_set(5, 2);
        assert_eq!(set.embedding_at(0.0).unwrap(), set.embeddings.row(0).to_owned());
        assert_eq!(set.embedding_at(1.0).unwrap(), set.embeddings.row(4).to_owned());
    }

    #[test]
    fn embedding_at_is_continuous_on_grid() {
        let set = demo_set(10, 4);
        let n = 10_000;
        let mut prev = set.embedding_at(0.0).unwrap();
        let mut max_jump = 0.0f64;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let cur = set.embedding_at(t).unwrap();
            let jump = (&cur - &prev).iter().map(|v| v.abs()).fold(0.0, f64::max);
            max_jump = max_jump.max(jump);
            prev = cur;
        }
        // bounded embeddings, 1e4-point grid: steps are O(range / grid)
        assert!(max_jump < 1e-2, "max jump {max_jump}");
    }

    #[test]
    fn concept_file_round_trip() {
        let set = demo_set(6, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.concept");
        set.save(&path).unwrap();
        let loaded = MultiResEmbeddingSet::load(&path).unwrap();
        assert_eq!(loaded, set);
    }

    #[test]
    fn registry_rejects_duplicates() {
        let mut reg = ConceptRegistry::new();
        reg.insert(demo_set(2, 3)).unwrap();
        assert!(reg.insert(demo_set(2, 3)).is_err());
        assert!(reg.contains("demo"));
        assert_eq!(reg.names(), vec!["demo"]);
    }
}
