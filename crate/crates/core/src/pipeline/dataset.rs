//! Interchange dumps, ingestion and the content-addressed dataset manifest.
//!
//! A dump directory holds:
//!
//! * `dump.json`: dataset name, head layout, embedding width and, per query,
//!   the ordered candidate document ids the score arrays are aligned to;
//! * `scores.jsonl`: one `{"query_id", "head_flat", "scores"}` record per
//!   (query, head), scores as 32-bit floats (or `scores.bin`, see
//!   [`write_packed_scores`]);
//! * `embeddings.jsonl`: one `{"query_id", "embedding"}` record per query.
//!
//! Ingestion validates every record and writes canonical copies plus a
//! `manifest.json` carrying per-file hashes and an overall content hash.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_json, read_to_bytes, write_atomic, write_json};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::relevance::{HeadId, HeadScoreMatrix};

pub const DUMP_FILE: &str = "dump.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const PACKED_SCORES_FILE: &str = "scores.bin";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PACKED_MAGIC: &[u8; 4] = b"RHSM";
pub const PACKED_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpQuery {
    pub query_id: String,
    pub doc_ids: Vec<String>,
}

/// Contents of `dump.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpSpec {
    pub dataset: String,
    pub layers: u32,
    pub heads_per_layer: u32,
    pub d_q: usize,
    pub queries: Vec<DumpQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub query_id: String,
    pub head_flat: u32,
    pub scores: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub query_id: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestQuery {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    /// Byte offset of the query's first record in `scores.jsonl`.
    pub scores_offset: u64,
    pub has_embedding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: String,
    pub total_heads: u32,
    pub heads_per_layer: u32,
    pub layers: u32,
    pub d_q: usize,
    pub queries: Vec<ManifestQuery>,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    /// SHA-256 over the manifest with this field empty.
    pub content_hash: String,
}

impl DatasetManifest {
    fn compute_hash(&self) -> String {
        let mut unhashed = self.clone();
        unhashed.content_hash = String::new();
        sha256_hex(&serde_json::to_vec(&unhashed).expect("manifest serializes"))
    }

    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..self.total_heads)
            .map(|f| HeadId::from_flat(f, self.heads_per_layer))
            .collect()
    }

    pub fn head(&self, flat: u32) -> Result<HeadId> {
        if flat >= self.total_heads {
            return Err(Error::Dimension(format!(
                "head {flat} outside the dataset's {} heads",
                self.total_heads
            )));
        }
        Ok(HeadId::from_flat(flat, self.heads_per_layer))
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads_per_layer == 0 || self.layers == 0 {
            return Err(Error::Invariant("manifest declares zero heads".into()));
        }
        if self.total_heads != self.layers * self.heads_per_layer {
            return Err(Error::Invariant(format!(
                "total heads {} != layers {} x heads per layer {}",
                self.total_heads, self.layers, self.heads_per_layer
            )));
        }
        if self.compute_hash() != self.content_hash {
            return Err(Error::Lineage(
                "manifest content hash does not match its contents".into(),
            ));
        }
        Ok(())
    }
}

/// An ingested dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// In manifest query order.
    pub matrices: Vec<HeadScoreMatrix>,
    pub embeddings: HashMap<String, Vec<f64>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: DatasetManifest = read_json(&manifest_path)?;
        manifest.validate()?;
        for (name, expected) in &manifest.files {
            let actual = sha256_hex(&read_to_bytes(&dir.join(name))?);
            if &actual != expected {
                return Err(Error::Lineage(format!(
                    "{} hash {actual} differs from manifest {expected}",
                    dir.join(name).display()
                )));
            }
        }
        let spec = DumpSpec {
            dataset: manifest.dataset.clone(),
            layers: manifest.layers,
            heads_per_layer: manifest.heads_per_layer,
            d_q: manifest.d_q,
            queries: manifest
                .queries
                .iter()
                .map(|q| DumpQuery {
                    query_id: q.query_id.clone(),
                    doc_ids: q.doc_ids.clone(),
                })
                .collect(),
        };
        let scores_path = dir.join(SCORES_FILE);
        let records = read_score_jsonl(&scores_path)?;
        let validated = validate_scores(&spec, records, &scores_path)?;
        let matrices = build_matrices(&spec, validated)?;
        let embeddings_path = dir.join(EMBEDDINGS_FILE);
        let embeddings =
            validate_embeddings(&spec, read_jsonl(&embeddings_path)?, &embeddings_path)?
                .into_iter()
                .map(|(q, e)| (q, e.into_iter().map(f64::from).collect()))
                .collect();
        Ok(Dataset {
            manifest,
            matrices,
            embeddings,
        })
    }

    pub fn embedding(&self, query_id: &str) -> Option<&[f64]> {
        self.embeddings.get(query_id).map(Vec::as_slice)
    }

    pub fn matrix(&self, query_id: &str) -> Option<&HeadScoreMatrix> {
        self.matrices.iter().find(|m| m.query_id() == query_id)
    }
}

/// Reads one JSON value per non-empty line, tagging parse errors with the line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, n + 1, format!("malformed record: {e}")))?;
        out.push((n + 1, value));
    }
    Ok(out)
}

fn read_score_jsonl(path: &Path) -> Result<Vec<(usize, ScoreRecord)>> {
    read_jsonl(path)
}

/// Packed score layout: magic `RHSM`, version (u32 LE), then until EOF one
/// record per (query, head): query id byte length (u32 LE), UTF-8 bytes, head
/// flat index (u32 LE), score count (u32 LE), scores (f32 LE).
pub fn write_packed_scores(records: &[ScoreRecord], mut w: impl Write) -> std::io::Result<()> {
    w.write_all(PACKED_MAGIC)?;
    w.write_all(&PACKED_VERSION.to_le_bytes())?;
    for r in records {
        w.write_all(&(r.query_id.len() as u32).to_le_bytes())?;
        w.write_all(r.query_id.as_bytes())?;
        w.write_all(&r.head_flat.to_le_bytes())?;
        w.write_all(&(r.scores.len() as u32).to_le_bytes())?;
        for s in &r.scores {
            w.write_all(&s.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Records are tagged with their ordinal (1-based) instead of a line number.
pub fn read_packed_scores(path: &Path) -> Result<Vec<(usize, ScoreRecord)>> {
    let bytes = read_to_bytes(path)?;
    let mut cursor = &bytes[..];
    let mut ordinal = 0;
    let fail =
        |ordinal: usize, msg: &str| Error::parse(path, ordinal, format!("packed record: {msg}"));
    let take = |cursor: &mut &[u8], n: usize, ordinal: usize| -> Result<Vec<u8>> {
        if cursor.len() < n {
            return Err(fail(ordinal, "truncated"));
        }
        let mut buf = vec![0; n];
        cursor.read_exact(&mut buf).expect("length checked");
        Ok(buf)
    };
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));

    if take(&mut cursor, 4, 0)? != PACKED_MAGIC {
        return Err(fail(0, "bad magic"));
    }
    let version = u32_at(take(&mut cursor, 4, 0)?);
    if version != PACKED_VERSION {
        return Err(fail(0, &format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while !cursor.is_empty() {
        ordinal += 1;
        let len = u32_at(take(&mut cursor, 4, ordinal)?) as usize;
        let query_id = String::from_utf8(take(&mut cursor, len, ordinal)?)
            .map_err(|_| fail(ordinal, "query id is not UTF-8"))?;
        let head_flat = u32_at(take(&mut cursor, 4, ordinal)?);
        let n = u32_at(take(&mut cursor, 4, ordinal)?) as usize;
        let raw = take(&mut cursor, 4 * n, ordinal)?;
        let scores = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((
            ordinal,
            ScoreRecord {
                query_id,
                head_flat,
                scores,
            },
        ));
    }
    Ok(out)
}

fn validate_spec(spec: &DumpSpec, path: &Path) -> Result<()> {
    let fail = |m: String| Err(Error::parse(path, 0, m));
    if spec.layers == 0 || spec.heads_per_layer == 0 {
        return fail("layers and heads_per_layer must be >= 1".into());
    }
    if spec.d_q == 0 {
        return fail("d_q must be >= 1".into());
    }
    let mut seen = HashSet::new();
    for q in &spec.queries {
        if !seen.insert(q.query_id.as_str()) {
            return fail(format!("duplicate query id {:?}", q.query_id));
        }
        if q.doc_ids.is_empty() {
            return fail(format!("query {:?} has no documents", q.query_id));
        }
        let mut docs = HashSet::new();
        if let Some(d) = q.doc_ids.iter().find(|d| !docs.insert(d.as_str())) {
            return fail(format!("query {:?} lists document {d:?} twice", q.query_id));
        }
    }
    Ok(())
}

/// Checks every score record and returns them keyed by (query, head).
fn validate_scores(
    spec: &DumpSpec,
    records: Vec<(usize, ScoreRecord)>,
    path: &Path,
) -> Result<BTreeMap<(usize, u32), Vec<f32>>> {
    let total = spec.layers * spec.heads_per_layer;
    let positions: HashMap<&str, usize> = spec
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.query_id.as_str(), i))
        .collect();
    let mut out = BTreeMap::new();
    for (line, r) in records {
        let fail = |m: String| Err(Error::parse(path, line, m));
        let Some(&qi) = positions.get(r.query_id.as_str()) else {
            return fail(format!("unknown query id {:?}", r.query_id));
        };
        if r.head_flat >= total {
            return fail(format!("head {} outside 0..{total}", r.head_flat));
        }
        let n = spec.queries[qi].doc_ids.len();
        if r.scores.len() != n {
            return fail(format!(
                "{} scores for {n} documents of query {:?}",
                r.scores.len(),
                r.query_id
            ));
        }
        if let Some((i, s)) = r
            .scores
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || **s < 0.0)
        {
            return fail(format!(
                "score {i} = {s} is not a finite non-negative value"
            ));
        }
        if out.insert((qi, r.head_flat), r.scores).is_some() {
            return fail(format!(
                "duplicate record for query {:?} head {}",
                r.query_id, r.head_flat
            ));
        }
    }
    for (qi, q) in spec.queries.iter().enumerate() {
        if let Some(h) = (0..total).find(|h| !out.contains_key(&(qi, *h))) {
            return Err(Error::parse(
                path,
                0,
                format!("query {:?} has no record for head {h}", q.query_id),
            ));
        }
    }
    Ok(out)
}

fn validate_embeddings(
    spec: &DumpSpec,
    records: Vec<(usize, EmbeddingRecord)>,
    path: &Path,
) -> Result<BTreeMap<String, Vec<f32>>> {
    let known: HashSet<&str> = spec.queries.iter().map(|q| q.query_id.as_str()).collect();
    let mut out = BTreeMap::new();
    for (line, r) in records {
        let fail = |m: String| Err(Error::parse(path, line, m));
        if !known.contains(r.query_id.as_str()) {
            return fail(format!("unknown query id {:?}", r.query_id));
        }
        if r.embedding.len() != spec.d_q {
            return fail(format!(
                "embedding has {} values, d_q is {}",
                r.embedding.len(),
                spec.d_q
            ));
        }
        if r.embedding.iter().any(|v| !v.is_finite()) {
            return fail("embedding contains a non-finite value".into());
        }
        if out.insert(r.query_id.clone(), r.embedding).is_some() {
            return fail(format!("duplicate embedding for query {:?}", r.query_id));
        }
    }
    Ok(out)
}

fn build_matrices(
    spec: &DumpSpec,
    scores: BTreeMap<(usize, u32), Vec<f32>>,
) -> Result<Vec<HeadScoreMatrix>> {
    let total = spec.layers * spec.heads_per_layer;
    let heads: Vec<HeadId> = (0..total)
        .map(|f| HeadId::from_flat(f, spec.heads_per_layer))
        .collect();
    let mut rows_by_query: Vec<Vec<Vec<f64>>> =
        vec![Vec::with_capacity(total as usize); spec.queries.len()];
    for ((qi, _), row) in scores {
        rows_by_query[qi].push(row.into_iter().map(f64::from).collect());
    }
    spec.queries
        .iter()
        .zip(rows_by_query)
        .map(|(q, rows)| {
            HeadScoreMatrix::new(q.query_id.clone(), heads.clone(), q.doc_ids.clone(), rows)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Read `scores.bin` instead of `scores.jsonl`.
    pub packed: bool,
}

/// Validates a dump and writes canonical files plus `manifest.json` into `out_dir`.
pub fn ingest(dump_dir: &Path, out_dir: &Path, options: IngestOptions) -> Result<DatasetManifest> {
    let spec_path = dump_dir.join(DUMP_FILE);
    let spec: DumpSpec = read_json(&spec_path)?;
    validate_spec(&spec, &spec_path)?;

    let (scores_path, records) = if options.packed {
        let p = dump_dir.join(PACKED_SCORES_FILE);
        let r = read_packed_scores(&p)?;
        (p, r)
    } else {
        let p = dump_dir.join(SCORES_FILE);
        let r = read_score_jsonl(&p)?;
        (p, r)
    };
    let scores = validate_scores(&spec, records, &scores_path)?;
    let embeddings_path = dump_dir.join(EMBEDDINGS_FILE);
    let embeddings = if embeddings_path.exists() {
        validate_embeddings(&spec, read_jsonl(&embeddings_path)?, &embeddings_path)?
    } else {
        BTreeMap::new()
    };

    let mut scores_buf = Vec::new();
    let mut offsets = vec![0u64; spec.queries.len()];
    let mut last_query = None;
    for ((qi, head_flat), row) in &scores {
        if last_query != Some(*qi) {
            offsets[*qi] = scores_buf.len() as u64;
            last_query = Some(*qi);
        }
        let record = ScoreRecord {
            query_id: spec.queries[*qi].query_id.clone(),
            head_flat: *head_flat,
            scores: row.clone(),
        };
        serde_json::to_writer(&mut scores_buf, &record).expect("record serializes");
        scores_buf.push(b'\n');
    }
    let mut embeddings_buf = Vec::new();
    for q in &spec.queries {
        if let Some(e) = embeddings.get(&q.query_id) {
            let record = EmbeddingRecord {
                query_id: q.query_id.clone(),
                embedding: e.clone(),
            };
            serde_json::to_writer(&mut embeddings_buf, &record).expect("record serializes");
            embeddings_buf.push(b'\n');
        }
    }
    let missing: Vec<&str> = spec
        .queries
        .iter()
        .filter(|q| !embeddings.contains_key(&q.query_id))
        .map(|q| q.query_id.as_str())
        .collect();
    if !missing.is_empty() {
        log::warn!(
            "{} queries have no embedding: {}",
            missing.len(),
            missing.join(", ")
        );
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join(SCORES_FILE), &scores_buf)?;
    write_atomic(&out_dir.join(EMBEDDINGS_FILE), &embeddings_buf)?;

    let mut manifest = DatasetManifest {
        dataset: spec.dataset.clone(),
        total_heads: spec.layers * spec.heads_per_layer,
        heads_per_layer: spec.heads_per_layer,
        layers: spec.layers,
        d_q: spec.d_q,
        queries: spec
            .queries
            .iter()
            .zip(offsets)
            .map(|(q, off)| ManifestQuery {
                query_id: q.query_id.clone(),
                doc_ids: q.doc_ids.clone(),
                scores_offset: off,
                has_embedding: embeddings.contains_key(&q.query_id),
            })
            .collect(),
        files: BTreeMap::from([
            (SCORES_FILE.to_string(), sha256_hex(&scores_buf)),
            (EMBEDDINGS_FILE.to_string(), sha256_hex(&embeddings_buf)),
        ]),
        content_hash: String::new(),
    };
    manifest.content_hash = manifest.compute_hash();
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Writes a dump directory in the interchange layout.
pub fn write_dump(
    dir: &Path,
    spec: &DumpSpec,
    scores: &[ScoreRecord],
    embeddings: &[EmbeddingRecord],
    packed: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(DUMP_FILE), spec)?;
    if packed {
        let mut buf = Vec::new();
        write_packed_scores(scores, &mut buf).expect("Vec write");
        write_atomic(&dir.join(PACKED_SCORES_FILE), &buf)?;
    } else {
        write_atomic(&dir.join(SCORES_FILE), &jsonl_bytes(scores))?;
    }
    write_atomic(&dir.join(EMBEDDINGS_FILE), &jsonl_bytes(embeddings))?;
    Ok(())
}

pub fn jsonl_bytes<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    buf
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
