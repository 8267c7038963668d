//! Knowledge base: corpus chunking, BM25 inverted index, top-k retrieval.
//!
//! Documents are split into consecutive token chunks (the snippets `z`),
//! indexed by an Okapi BM25 inverted index over token ids, and retrieved per
//! question. Snippet ids are dense indexes into the store, which keeps every
//! ranking tie-break and on-disk reference reproducible.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenSeq, Vocabulary};

/// One knowledge-base chunk.
#[derive(Debug, Clone)]
pub struct Snippet {
    pub id: usize,
    pub text: String,
    pub tokens: TokenSeq,
    pub source_doc: String,
}

/// Retrieval settings: Okapi constants and how many snippets a question gets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            top_k: 3,
            k1: 1.2,
            b: 0.75,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::contract("retrieval top_k must be >= 1"));
        }
        if self.k1 <= 0.0 || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::contract(format!(
                "bm25 constants out of range: k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

/// Splits a document into consecutive, non-overlapping chunks of at most
/// `chunk_size` tokens. Concatenating the chunk token streams reproduces the
/// document token stream exactly; BOS/EOS wrapping for scoring happens later,
/// so content token counts stay exact for the length normalizations.
///
/// Snippets receive consecutive ids starting at `first_id`. An empty document
/// yields no snippets.
pub fn chunk_document(
    doc: &str,
    source_doc: &str,
    chunk_size: usize,
    vocab: &Vocabulary,
    first_id: usize,
) -> Result<Vec<Snippet>> {
    if chunk_size < 8 {
        return Err(Error::contract(format!(
            "chunk_size {chunk_size} too small, need >= 8"
        )));
    }
    if doc.split_whitespace().next().is_none() {
        return Ok(Vec::new());
    }
    let full = vocab.tokenize(doc)?;
    let mut snippets = Vec::new();
    for (n, chunk_ids) in full.ids.chunks(chunk_size).enumerate() {
        let text = vocab.detokenize(chunk_ids);
        snippets.push(Snippet {
            id: first_id + n,
            tokens: TokenSeq {
                ids: chunk_ids.to_vec(),
                char_source: text.clone(),
            },
            text,
            source_doc: source_doc.to_string(),
        });
    }
    Ok(snippets)
}

/// Okapi BM25 inverted index over snippet token ids.
///
/// Scores sum over the query tokens as given (a repeated query term
/// contributes once per occurrence) using
/// `IDF(t) * tf * (k1+1) / (tf + k1 * (1 - b + b * len/avg_len))` with
/// `IDF(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`.
#[derive(Debug, Clone)]
pub struct KbIndex {
    postings: BTreeMap<usize, Vec<(usize, usize)>>, // term -> [(snippet id, tf)]
    lengths: Vec<usize>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

impl KbIndex {
    /// Builds the index. Snippet ids must be the dense store indexes
    /// (`snippets[i].id == i`); scoring and tie-breaks depend on it.
    pub fn build(snippets: &[Snippet], cfg: &RetrievalConfig) -> Result<Self> {
        cfg.validate()?;
        let mut postings: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        let mut lengths = Vec::with_capacity(snippets.len());
        for (i, s) in snippets.iter().enumerate() {
            if s.id != i {
                return Err(Error::contract(format!(
                    "snippet id {} at store position {i}: ids must be dense",
                    s.id
                )));
            }
            lengths.push(s.tokens.len());
            let mut tf: BTreeMap<usize, usize> = BTreeMap::new();
            for &t in &s.tokens.ids {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((s.id, c));
            }
        }
        // postings fill in ascending id order already; keep the invariant
        // explicit against future build-order changes
        for list in postings.values_mut() {
            list.sort_unstable_by_key(|&(id, _)| id);
        }
        let avg_len = if lengths.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
        };
        Ok(KbIndex {
            postings,
            lengths,
            avg_len,
            k1: cfg.k1,
            b: cfg.b,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn doc_freq(&self, term: usize) -> usize {
        self.postings.get(&term).map_or(0, |p| p.len())
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// BM25 score of one snippet against a tokenized query.
    pub fn score(&self, query: &[usize], snippet_id: usize) -> Result<f64> {
        if snippet_id >= self.lengths.len() {
            return Err(Error::NotFound(format!("snippet id {snippet_id}")));
        }
        let n = self.lengths.len() as f64;
        let len = self.lengths[snippet_id] as f64;
        let mut total = 0.0;
        for &t in query {
            let Some(list) = self.postings.get(&t) else {
                continue;
            };
            let Ok(pos) = list.binary_search_by_key(&snippet_id, |&(id, _)| id) else {
                continue;
            };
            let tf = list[pos].1 as f64;
            let df = list.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let norm = tf + self.k1 * (1.0 - self.b + self.b * len / self.avg_len);
            total += idf * tf * (self.k1 + 1.0) / norm;
        }
        Ok(total)
    }

    /// All snippet ids ranked by descending score, ties broken by ascending
    /// id, truncated to `k`. A corpus smaller than `k` returns everything.
    pub fn retrieve_topk(&self, query: &[usize], k: usize) -> Vec<(usize, f64)> {
        let n = self.lengths.len() as f64;
        let mut scores = vec![0.0f64; self.lengths.len()];
        for &t in query {
            let Some(list) = self.postings.get(&t) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for &(id, tf) in list {
                let tf = tf as f64;
                let len = self.lengths[id] as f64;
                let norm = tf + self.k1 * (1.0 - self.b + self.b * len / self.avg_len);
                scores[id] += idf * tf * (self.k1 + 1.0) / norm;
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// Snippet store plus its index; the unit the trainer and evaluator pass
/// around.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    snippets: Vec<Snippet>,
    index: KbIndex,
    config: RetrievalConfig,
}

impl KnowledgeBase {
    pub fn build(snippets: Vec<Snippet>, config: RetrievalConfig) -> Result<Self> {
        let index = KbIndex::build(&snippets, &config)?;
        Ok(KnowledgeBase {
            snippets,
            index,
            config,
        })
    }

    /// Chunks every `.txt` document under `dir` (in file-name order) into one
    /// snippet store.
    pub fn from_dir(
        dir: &Path,
        chunk_size: usize,
        vocab: &Vocabulary,
        config: RetrievalConfig,
    ) -> Result<Self> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        let mut snippets = Vec::new();
        for path in files {
            let doc = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            snippets.extend(chunk_document(
                &doc,
                &name,
                chunk_size,
                vocab,
                snippets.len(),
            )?);
        }
        Self::build(snippets, config)
    }

    pub fn snippets(&self) -> &[Snippet] {
        &self.snippets
    }

    pub fn index(&self) -> &KbIndex {
        &self.index
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn snippet(&self, id: usize) -> Result<&Snippet> {
        self.snippets
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("snippet id {id}")))
    }

    /// Top-k snippets for a question, in prompt order.
    pub fn retrieve(&self, question: &str, vocab: &Vocabulary) -> Result<Vec<&Snippet>> {
        if self.snippets.is_empty() {
            return Err(Error::contract("retrieval over an empty knowledge base"));
        }
        let query = vocab.tokenize(question)?;
        Ok(self
            .index
            .retrieve_topk(&query.ids, self.config.top_k)
            .into_iter()
            .map(|(id, _)| &self.snippets[id])
            .collect())
    }

    /// Writes the snippet store as JSONL records `{id, source_doc, text}`.
    pub fn save_snippets(&self, path: &Path) -> Result<()> {
        let io_err = |e| Error::io(path.display().to_string(), e);
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        for s in &self.snippets {
            let rec = SnippetRecord {
                id: s.id,
                source_doc: s.source_doc.clone(),
                text: s.text.clone(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Json {
                path: path.display().to_string(),
                source: e,
            })?;
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    /// Rebuilds the store (and index) from a JSONL snippet file.
    pub fn load_snippets(path: &Path, vocab: &Vocabulary, config: RetrievalConfig) -> Result<Self> {
        let io_err = |e| Error::io(path.display().to_string(), e);
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut snippets = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SnippetRecord = serde_json::from_str(&line).map_err(|e| Error::Json {
                path: path.display().to_string(),
                source: e,
            })?;
            let tokens = vocab.tokenize(&rec.text)?;
            snippets.push(Snippet {
                id: rec.id,
                text: rec.text,
                tokens,
                source_doc: rec.source_doc,
            });
        }
        Self::build(snippets, config)
    }
}

#[derive(Serialize, Deserialize)]
struct SnippetRecord {
    id: usize,
    source_doc: String,
    text: String,
}
