//! Fixed-size class embeddings: tokenize a class, slice the token stream
//! into non-overlapping windows, embed each window, aggregate.
//!
//! Inference windows are single-segment: `[CLS] window [SEP]` padded to the
//! model length. A window embedding is either the autoencoder bottleneck
//! code or row 0 of the raw sequence states. Aggregation reduces the
//! variable number of window vectors to one vector of the same width.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SmaliClass;
use crate::error::{Error, Result};
use crate::model::SmaliBert;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

use crate::tokenizer::{Vocab, CLS, PAD, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Addition,
    Average,
    Random,
    ConcatResize,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Addition,
        Aggregation::Average,
        Aggregation::Random,
        Aggregation::ConcatResize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Addition => "addition",
            Aggregation::Average => "average",
            Aggregation::Random => "random",
            Aggregation::ConcatResize => "concat_resize",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(Aggregation::Addition),
            "average" => Ok(Aggregation::Average),
            "random" => Ok(Aggregation::Random),
            "concat_resize" | "concat-resize" => Ok(Aggregation::ConcatResize),
            other => Err(Error::Format(format!("unknown aggregation {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    Ae,
    RawFirstState,
}

impl EmbedMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::Ae => "ae",
            EmbedMode::RawFirstState => "raw_first_state",
        }
    }
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbedMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(EmbedMode::Ae),
            "raw" | "raw_first_state" | "raw-first-state" => Ok(EmbedMode::RawFirstState),
            other => Err(Error::Format(format!("unknown embedding mode {other}"))),
        }
    }
}

/// One single-segment inference window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceInput {
    pub input_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

/// Concatenate the token ids of every instruction in order and slice into
/// windows of at most `n - 2` ids. Errors with `EmptyClass` when the class
/// has no instructions (for example after API-call filtering).
pub fn chunk_class(class: &SmaliClass, vocab: &Vocab, n: usize) -> Result<Vec<InferenceInput>> {
    if class.instructions.is_empty() {
        return Err(Error::EmptyClass(class.name.clone()));
    }
    let mut ids = Vec::new();
    for ins in &class.instructions {
        ids.extend(vocab.encode(&ins.text));
    }
    let window = n - 2;
    let mut out = Vec::new();
    for slice in ids.chunks(window.max(1)) {
        let mut input_ids = Vec::with_capacity(n);
        input_ids.push(CLS);
        input_ids.extend_from_slice(slice);
        input_ids.push(SEP);
        let visible = input_ids.len();
        input_ids.resize(n, PAD);
        let mut attention_mask = vec![1u8; visible];
        attention_mask.resize(n, 0);
        out.push(InferenceInput {
            input_ids,
            attention_mask,
        });
    }
    if out.is_empty() {
        // No instruction produced a token; a lone [CLS][SEP] window still
        // gives the class a representation.
        let mut input_ids = vec![CLS, SEP];
        input_ids.resize(n, PAD);
        let mut attention_mask = vec![1u8; 2];
        attention_mask.resize(n, 0);
        out.push(InferenceInput {
            input_ids,
            attention_mask,
        });
    }
    Ok(out)
}

/// Embed each window: bottleneck code (`Ae`) or raw first state
/// (`RawFirstState`); order preserved.
pub fn embed_chunks<S: Scalar>(
    model: &mut SmaliBert<S>,
    inputs: &[InferenceInput],
    mode: EmbedMode,
) -> Result<Vec<Vec<S>>> {
    let n = model.config.seq_len;
    let segments = vec![0u8; n];
    let mut out = Vec::with_capacity(inputs.len());
    for input in inputs {
        let states = model.encode_sequence(&input.input_ids, &segments, &input.attention_mask)?;
        let vector = match mode {
            EmbedMode::Ae => model.ae_encode(&states)?.into_data(),
            EmbedMode::RawFirstState => states.row(0).to_vec(),
        };
        out.push(vector);
    }
    Ok(out)
}

/// Reduce equal-width vectors to one vector of the same width.
pub fn aggregate<S: Scalar>(
    vectors: &[Vec<S>],
    method: Aggregation,
    seed: u64,
) -> Result<Vec<S>> {
    let first = vectors.first().ok_or(Error::EmptyList)?;
    let width = first.len();
    for v in vectors {
        if v.len() != width {
            return Err(Error::WidthMismatch {
                expected: width,
                got: v.len(),
            });
        }
    }
    match method {
        Aggregation::Addition => {
            let mut out = vec![S::zero(); width];
            for v in vectors {
                for (o, &x) in out.iter_mut().zip(v) {
                    *o += x;
                }
            }
            Ok(out)
        }
        Aggregation::Average => {
            let mut out = aggregate(vectors, Aggregation::Addition, seed)?;
            let k = S::from_usize(vectors.len());
            for o in &mut out {
                *o /= k;
            }
            Ok(out)
        }
        Aggregation::Random => {
            let mut rng = rng_from_seed(seed);
            let pick = rng.gen_range(0..vectors.len());
            Ok(vectors[pick].clone())
        }
        Aggregation::ConcatResize => {
            let concat: Vec<S> = vectors.iter().flatten().copied().collect();
            Ok(linear_resize(&concat, width))
        }
    }
}

/// 1-D linear interpolation with align-corners sampling: output `i` reads
/// position `i * (len - 1) / (width - 1)` of the input, so a single input
/// vector passes through unchanged.
fn linear_resize<S: Scalar>(input: &[S], width: usize) -> Vec<S> {
    debug_assert!(!input.is_empty());
    if width == 1 {
        return vec![input[0]];
    }
    let mut out = Vec::with_capacity(width);
    let scale = (input.len() - 1) as f64 / (width - 1) as f64;
    for i in 0..width {
        let pos = i as f64 * scale;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = S::from_f64(pos - lo as f64);
        let value = input[lo] + (input[hi.min(input.len() - 1)] - input[lo]) * frac;
        out.push(value);
    }
    out
}

/// One aggregated class vector with its provenance fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub class_name: String,
    pub hash: String,
    pub vector: Vec<f32>,
    pub chunk_count: usize,
    pub mode: EmbedMode,
    pub aggregation: Aggregation,
}

/// Chunk, embed and aggregate one class.
pub fn embed_class<S: Scalar>(
    model: &mut SmaliBert<S>,
    vocab: &Vocab,
    class: &SmaliClass,
    method: Aggregation,
    mode: EmbedMode,
    seed: u64,
) -> Result<ClassEmbedding> {
    let inputs = chunk_class(class, vocab, model.config.seq_len)?;
    let chunks = embed_chunks(model, &inputs, mode)?;
    let vector = aggregate(&chunks, method, seed)?;
    Ok(ClassEmbedding {
        class_name: class.name.clone(),
        hash: class.content_hash.clone(),
        vector: vector.iter().map(|&v| v.into_f64() as f32).collect(),
        chunk_count: inputs.len(),
        mode,
        aggregation: method,
    })
}

/// Deduplicating cache for embedding runs, keyed by everything the vector
/// depends on. Deterministic values make concurrent last-writer-wins
/// insertion benign.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    map: Mutex<HashMap<(String, String, EmbedMode, Aggregation, u64), Vec<f32>>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &self,
        content_hash: &str,
        checkpoint_digest: &str,
        mode: EmbedMode,
        method: Aggregation,
        seed: u64,
    ) -> Option<Vec<f32>> {
        self.map
            .lock()
            .unwrap()
            .get(&(
                content_hash.to_string(),
                checkpoint_digest.to_string(),
                mode,
                method,
                seed,
            ))
            .cloned()
    }

    pub fn insert(
        &self,
        content_hash: &str,
        checkpoint_digest: &str,
        mode: EmbedMode,
        method: Aggregation,
        seed: u64,
        vector: Vec<f32>,
    ) {
        self.map.lock().unwrap().insert(
            (
                content_hash.to_string(),
                checkpoint_digest.to_string(),
                mode,
                method,
                seed,
            ),
            vector,
        );
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const STORE_MAGIC: &[u8; 4] = b"SBES";
const STORE_VERSION: u8 = 1;

/// Append-only binary store of class embeddings plus a JSON index.
pub fn write_store(path: &Path, embeddings: &[ClassEmbedding]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    file.write_all(STORE_MAGIC)?;
    file.write_all(&[STORE_VERSION])?;
    for emb in embeddings {
        let mut record = Vec::new();
        let name = emb.class_name.as_bytes();
        record.extend_from_slice(&(name.len() as u16).to_le_bytes());
        record.extend_from_slice(name);
        let hash = emb.hash.as_bytes();
        record.extend_from_slice(&(hash.len() as u16).to_le_bytes());
        record.extend_from_slice(hash);
        record.push(match emb.mode {
            EmbedMode::Ae => 0,
            EmbedMode::RawFirstState => 1,
        });
        record.push(match emb.aggregation {
            Aggregation::Addition => 0,
            Aggregation::Average => 1,
            Aggregation::Random => 2,
            Aggregation::ConcatResize => 3,
        });
        record.extend_from_slice(&(emb.chunk_count as u32).to_le_bytes());
        record.extend_from_slice(&(emb.vector.len() as u32).to_le_bytes());
        for &v in &emb.vector {
            record.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&(record.len() as u32).to_le_bytes())?;
        file.write_all(&record)?;
    }
    file.flush()?;

    let index: Vec<serde_json::Value> = embeddings
        .iter()
        .map(|e| {
            serde_json::json!({
                "class_name": e.class_name,
                "hash": e.hash,
                "mode": e.mode,
                "aggregation": e.aggregation,
                "width": e.vector.len(),
                "chunk_count": e.chunk_count,
            })
        })
        .collect();
    fs::write(
        index_path(path),
        serde_json::to_string_pretty(&serde_json::json!({
            "version": STORE_VERSION,
            "records": index,
        }))?,
    )?;
    Ok(())
}

pub fn index_path(store: &Path) -> std::path::PathBuf {
    let mut s = store.as_os_str().to_os_string();
    s.push(".index.json");
    std::path::PathBuf::from(s)
}

pub fn read_store(path: &Path) -> Result<Vec<ClassEmbedding>> {
    let mut file = BufReader::new(fs::File::open(path)?);
    let mut head = [0u8; 5];
    file.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated store", path.display())))?;
    if &head[0..4] != STORE_MAGIC {
        return Err(Error::Format(format!("{}: not an embedding store", path.display())));
    }
    if head[4] != STORE_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported store version {}",
            path.display(),
            head[4]
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match file.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut record = vec![0u8; u32::from_le_bytes(len_buf) as usize];
        file.read_exact(&mut record)?;
        out.push(decode_store_record(&record, path)?);
    }
    Ok(out)
}

fn decode_store_record(record: &[u8], path: &Path) -> Result<ClassEmbedding> {
    let bad = || Error::Format(format!("{}: corrupt store record", path.display()));
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        let start = *at;
        *at += n;
        record.get(start..*at).ok_or_else(bad)
    };
    let name_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
    let class_name = String::from_utf8(take(&mut at, name_len)?.to_vec()).map_err(|_| bad())?;
    let hash_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
    let hash = String::from_utf8(take(&mut at, hash_len)?.to_vec()).map_err(|_| bad())?;
    let mode = match take(&mut at, 1)?[0] {
        0 => EmbedMode::Ae,
        1 => EmbedMode::RawFirstState,
        _ => return Err(bad()),
    };
    let aggregation = match take(&mut at, 1)?[0] {
        0 => Aggregation::Addition,
        1 => Aggregation::Average,
        2 => Aggregation::Random,
        3 => Aggregation::ConcatResize,
        _ => return Err(bad()),
    };
    let chunk_count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut vector = Vec::with_capacity(width);
    for chunk in take(&mut at, width * 4)?.chunks_exact(4) {
        vector.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    if at != record.len() {
        return Err(bad());
    }
    Ok(ClassEmbedding {
        class_name,
        hash,
        vector,
        chunk_count,
        mode,
        aggregation,
    })
}

/// CSV export: header then one row per class.
pub fn export_csv(path: &Path, embeddings: &[ClassEmbedding]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    let width = embeddings.first().map(|e| e.vector.len()).unwrap_or(0);
    let mut header = String::from("class_name,hash,mode,aggregation,chunk_count");
    for i in 0..width {
        header.push_str(&format!(",v{i}"));
    }
    writeln!(file, "{header}")?;
    for e in embeddings {
        let mut row = format!(
            "{},{},{},{},{}",
            e.class_name, e.hash, e.mode, e.aggregation, e.chunk_count
        );
        for v in &e.vector {
            row.push_str(&format!(",{v}"));
        }
        writeln!(file, "{row}")?;
    }
    file.flush()?;
    Ok(())
}
