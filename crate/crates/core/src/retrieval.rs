//! Dual-path similar-user retrieval and the preference-representation
//! cache.
//!
//! Content path: BM25 over train-split pseudo-documents. Collaborative
//! path: cosine over profiles from a small self-attention next-item model
//! trained on the train split. Re-ranking scores the union by cosine in
//! the learned ID-semantics space; users found by both paths are always
//! kept.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::SplitDataset;
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamStore, Tape};
use crate::textembed::tokenize;
use crate::transformer::{ArchDims, TransformerEncoder};
use crate::util::{io_err, read_f32_matrix, rng_for, write_f32_matrix};

// ---------------------------------------------------------------------------
// BM25 over pseudo-documents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    postings: BTreeMap<String, Vec<(usize, usize)>>,
    doc_tokens: Vec<Vec<String>>,
    doc_len: Vec<usize>,
    avgdl: f64,
}

impl Bm25Index {
    pub fn build(docs: &[String]) -> Self {
        Self::with_params(docs, 1.2, 0.75)
    }

    pub fn with_params(docs: &[String], k1: f64, b: f64) -> Self {
        let mut postings: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        let mut doc_tokens = Vec::with_capacity(docs.len());
        for (d, doc) in docs.iter().enumerate() {
            let tokens = tokenize(doc);
            doc_len.push(tokens.len());
            let mut tf: BTreeMap<String, usize> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((d, c));
            }
            doc_tokens.push(tokens);
        }
        let avgdl = if docs.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        Self {
            k1,
            b,
            postings,
            doc_tokens,
            doc_len,
            avgdl,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.doc_len.len()
    }

    /// BM25 with the "+1" IDF variant: log((N - df + 0.5)/(df + 0.5) + 1),
    /// non-negative for any document frequency.
    fn scores_for_query(&self, query: &[String]) -> Vec<f64> {
        let n = self.n_docs() as f64;
        let mut scores = vec![0.0; self.n_docs()];
        for term in query {
            let Some(posting) = self.postings.get(term) else {
                continue;
            };
            let df = posting.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for &(doc, tf) in posting {
                let tf = tf as f64;
                let dl = self.doc_len[doc] as f64;
                let denom = tf + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl);
                scores[doc] += idf * tf * (self.k1 + 1.0) / denom;
            }
        }
        scores
    }

    /// Score one document against a free-text query (hand-check surface).
    pub fn score(&self, query: &str, doc: usize) -> f64 {
        self.scores_for_query(&tokenize(query))[doc]
    }

    /// Top-z users whose documents best match the target's own document.
    /// The target is excluded; ties break on the lower user index.
    pub fn search(&self, target: usize, z: usize) -> Vec<usize> {
        let query = &self.doc_tokens[target];
        if query.is_empty() {
            log::warn!("user {target} has an empty pseudo-document, no content retrieval");
            return Vec::new();
        }
        let scores = self.scores_for_query(query);
        let mut order: Vec<usize> = (0..self.n_docs()).filter(|&d| d != target).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(z);
        order
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self).unwrap())
            .map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?)
            .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// Collaborative profiles from a small next-item model
// ---------------------------------------------------------------------------

/// Unit-normalized per-user profile vectors.
#[derive(Debug, Clone)]
pub struct CollabProfiles {
    pub matrix: Array2<f64>,
}

impl CollabProfiles {
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn profile(&self, user: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(user)
    }
}

/// Train a small causal self-attention next-item recommender on the train
/// split and read each user's profile off the last real position. The
/// model is a retrieval tool with its own parameter store; nothing here
/// touches the main model's registry.
pub fn train_collab_encoder(
    split: &SplitDataset,
    dim: usize,
    n_layers: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> CollabProfiles {
    let n_items = split.n_items();
    let mut store = ParamStore::new();
    let mut rng = rng_for(seed, "collab-init");
    let dims = ArchDims {
        d_model: dim,
        n_heads: 2,
        ffn_dim: dim * 2,
        n_layers,
    };
    let item_emb = store.register_randn(
        "collab.item_emb",
        n_items,
        dim,
        (1.0 / dim as f64).sqrt(),
        &mut rng,
    );
    let enc = TransformerEncoder::new(&mut store, "collab.enc", dims, split.max_len, &mut rng);
    let mut opt = AdamW::new(&store, 0.0);

    // (input prefix, next item) pairs from the train split only
    let mut examples: Vec<(usize, usize)> = Vec::new(); // (user, prefix_len)
    for (u, us) in split.user_splits.iter().enumerate() {
        for t in 1..us.train.len() {
            examples.push((u, t));
        }
    }

    let batch = 32usize;
    for _epoch in 0..epochs {
        for chunk in examples.chunks(batch) {
            store.zero_grads();
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &(u, t) in chunk {
                let us = &split.user_splits[u];
                let prefix = &us.train[..t];
                let target = us.train[t];
                let table = tape.param(&store, item_emb);
                let input = tape.select_rows(table, prefix);
                let h = enc
                    .forward(&mut tape, &store, input, prefix.len(), true)
                    .expect("within max_len");
                let last = tape.select_rows(h, &[prefix.len() - 1]);
                let table2 = tape.param(&store, item_emb);
                let table_t = tape.transpose(table2);
                let logits = tape.matmul(last, table_t);
                losses.push(tape.ce_rows(logits, &[target]));
            }
            let total = losses
                .iter()
                .copied()
                .reduce(|a, b| tape.add(a, b))
                .expect("non-empty batch");
            let root = tape.scale(total, 1.0 / chunk.len() as f64);
            tape.backward(root, &mut store);
            opt.step(&mut store, lr);
        }
    }

    // profiles: hidden state at the last train position, unit-normalized
    let mut matrix = Array2::zeros((split.n_users(), dim));
    for (u, us) in split.user_splits.iter().enumerate() {
        let mut tape = Tape::new();
        let table = tape.param(&store, item_emb);
        let input = tape.select_rows(table, &us.train);
        let h = enc
            .forward(&mut tape, &store, input, us.train.len(), true)
            .expect("within max_len");
        let last = tape.value(h).row(us.train.len() - 1).to_owned();
        let norm = last.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for j in 0..dim {
            matrix[[u, j]] = last[j] / norm;
        }
    }
    CollabProfiles { matrix }
}

/// Top-z users by cosine similarity of collaborative profiles. Profiles
/// are unit vectors, so the inner product is the cosine.
pub fn collab_search(profiles: &CollabProfiles, target: usize, z: usize) -> Vec<usize> {
    let n = profiles.matrix.nrows();
    let t = profiles.profile(target);
    let sims: Vec<f64> = (0..n)
        .map(|u| t.iter().zip(profiles.profile(u).iter()).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..n).filter(|&u| u != target).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(z);
    order
}

// ---------------------------------------------------------------------------
// Preference cache and re-ranking
// ---------------------------------------------------------------------------

/// Cached pooled ID-view preference vectors, valid only for the encoder
/// checkpoint that produced them.
#[derive(Debug, Clone)]
pub struct PreferenceCache {
    pub matrix: Array2<f64>,
    pub checkpoint_hash: String,
}

impl PreferenceCache {
    pub fn q(&self, user: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(user)
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Reject reads against a different encoder checkpoint.
    pub fn verify(&self, current_hash: &str) -> Result<()> {
        if self.checkpoint_hash != current_hash {
            return Err(Error::StaleCache {
                cached: self.checkpoint_hash.clone(),
                current: current_hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let header = serde_json::json!({
            "checkpoint_hash": self.checkpoint_hash,
            "d": self.dim(),
            "n_users": self.matrix.nrows(),
        });
        let hpath = dir.join("qcache.json");
        std::fs::write(&hpath, serde_json::to_string_pretty(&header).unwrap() + "\n")
            .map_err(|e| io_err(&hpath, e))?;
        let data: Vec<f32> = self.matrix.iter().map(|&v| v as f32).collect();
        write_f32_matrix(
            &dir.join("qcache.f32"),
            self.matrix.nrows(),
            self.dim(),
            &data,
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let hpath = dir.join("qcache.json");
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&hpath).map_err(|e| io_err(&hpath, e))?)
                .map_err(|e| Error::Artifact(format!("{}: {e}", hpath.display())))?;
        let n = header["n_users"].as_u64().unwrap_or(0) as usize;
        let d = header["d"].as_u64().unwrap_or(0) as usize;
        let data = read_f32_matrix(&dir.join("qcache.f32"), n, d)?;
        let mut matrix = Array2::zeros((n, d));
        for (k, v) in data.iter().enumerate() {
            matrix[[k / d, k % d]] = *v as f64;
        }
        Ok(Self {
            matrix,
            checkpoint_hash: header["checkpoint_hash"].as_str().unwrap_or("").to_string(),
        })
    }
}

/// Build the cache through a caller-provided pooled-encoding function
/// (the encoder stays frozen on the trainer's side).
pub fn build_cache(
    encode_q: impl Fn(usize) -> Vec<f64>,
    n_users: usize,
    checkpoint_hash: &str,
) -> PreferenceCache {
    assert!(n_users > 0);
    let first = encode_q(0);
    let d = first.len();
    let mut matrix = Array2::zeros((n_users, d));
    for j in 0..d {
        matrix[[0, j]] = first[j];
    }
    for u in 1..n_users {
        let q = encode_q(u);
        assert_eq!(q.len(), d);
        for j in 0..d {
            matrix[[u, j]] = q[j];
        }
    }
    PreferenceCache {
        matrix,
        checkpoint_hash: checkpoint_hash.to_string(),
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Re-rank the union of both retrieval lists by cosine similarity of the
/// cached ID-view preference vectors. Users present in BOTH lists are kept
/// no matter their score; remaining slots (if any) go to the best scores.
/// The result can exceed `v` when the intersection alone does.
pub fn rerank(
    content: &[usize],
    collab: &[usize],
    cache: &PreferenceCache,
    target: usize,
    v: usize,
) -> Vec<usize> {
    let mut union: Vec<usize> = Vec::new();
    for &u in content.iter().chain(collab.iter()) {
        if u != target && !union.contains(&u) {
            union.push(u);
        }
    }
    let in_both: Vec<usize> = content
        .iter()
        .copied()
        .filter(|u| collab.contains(u) && *u != target)
        .collect();
    if v > union.len() {
        log::warn!(
            "requested {v} reranked users but the union has only {}",
            union.len()
        );
    }
    let tq = cache.q(target);
    let score = |u: usize| cosine(tq, cache.q(u));
    let mut selected: Vec<usize> = in_both.clone();
    let budget = v.saturating_sub(selected.len());
    let mut rest: Vec<usize> = union
        .iter()
        .copied()
        .filter(|u| !in_both.contains(u))
        .collect();
    rest.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    selected.extend(rest.into_iter().take(budget));
    selected.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    selected
}

/// Retrieval state for one target user.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalContext {
    pub user: usize,
    pub content: Vec<usize>,
    pub collab: Vec<usize>,
    pub reranked: Vec<usize>,
}

pub fn build_contexts(
    bm25: &Bm25Index,
    profiles: &CollabProfiles,
    cache: &PreferenceCache,
    z: usize,
    v: usize,
) -> Vec<RetrievalContext> {
    (0..bm25.n_docs())
        .map(|user| {
            let content = bm25.search(user, z);
            let collab = collab_search(profiles, user, z);
            let reranked = rerank(&content, &collab, cache, user, v);
            RetrievalContext {
                user,
                content,
                collab,
                reranked,
            }
        })
        .collect()
}

pub fn write_contexts(path: &Path, contexts: &[RetrievalContext]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(contexts).unwrap() + "\n")
        .map_err(|e| io_err(path, e))
}

pub fn read_contexts(path: &Path) -> Result<Vec<RetrievalContext>> {
    serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?)
        .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))
}
