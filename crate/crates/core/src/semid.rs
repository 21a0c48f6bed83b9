//! Semantic item IDs: k-token codes from residual k-means over frozen text
//! embeddings, a collision-resolving disambiguation level, and a prefix
//! trie so generation can be restricted to real items.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{io_err, rng_for, write_f32_matrix};

/// Per-level centroid matrices, fitted on successive residuals.
#[derive(Debug, Clone)]
pub struct Codebooks {
    pub levels: Vec<Array2<f64>>,
    /// Mean squared residual norm after each level is subtracted.
    pub level_errors: Vec<f64>,
}

impl Codebooks {
    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticId {
    /// Per-level local token values; length k, or k+1 when the item needed
    /// a disambiguation token.
    pub tokens: Vec<u32>,
}

/// Mapping between (level, local token) pairs and one flat token space
/// shared by the ID encoder and the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub level_sizes: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl VocabLayout {
    pub fn new(level_sizes: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(level_sizes.len());
        let mut at = 0;
        for &s in &level_sizes {
            offsets.push(at);
            at += s;
        }
        Self {
            level_sizes,
            offsets,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn total(&self) -> usize {
        self.level_sizes.iter().sum()
    }

    pub fn global(&self, level: usize, local: u32) -> usize {
        debug_assert!((local as usize) < self.level_sizes[level]);
        self.offsets[level] + local as usize
    }

    pub fn level_range(&self, level: usize) -> (usize, usize) {
        (
            self.offsets[level],
            self.offsets[level] + self.level_sizes[level],
        )
    }
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<u32, TrieNode>,
    item: Option<usize>,
}

/// Prefix trie over every assigned token tuple; leaves carry item indices.
/// Accepts exactly the assigned set.
#[derive(Debug, Clone, Default)]
pub struct IdTrie {
    root: TrieNode,
    n_items: usize,
}

impl IdTrie {
    pub fn insert(&mut self, tokens: &[u32], item: usize) {
        let mut node = &mut self.root;
        for &t in tokens {
            node = node.children.entry(t).or_default();
        }
        assert!(node.item.is_none(), "duplicate semantic id tuple");
        assert!(
            node.children.is_empty(),
            "complete id is a prefix of another id"
        );
        node.item = Some(item);
        self.n_items += 1;
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    fn descend(&self, prefix: &[u32]) -> Option<&TrieNode> {
        let mut node = &self.root;
        for t in prefix {
            node = node.children.get(t)?;
        }
        Some(node)
    }

    /// Item index when the tuple is a complete assigned ID.
    pub fn accepts(&self, tokens: &[u32]) -> Option<usize> {
        self.descend(tokens).and_then(|n| n.item)
    }

    /// Valid next tokens after a prefix (empty when the prefix is either
    /// complete or not in the trie).
    pub fn continuations(&self, prefix: &[u32]) -> Vec<u32> {
        self.descend(prefix)
            .map(|n| n.children.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Every complete (tokens, item) pair, lexicographic token order.
    pub fn entries(&self) -> Vec<(Vec<u32>, usize)> {
        let mut out = Vec::with_capacity(self.n_items);
        let mut stack: Vec<(Vec<u32>, &TrieNode)> = vec![(Vec::new(), &self.root)];
        while let Some((prefix, node)) = stack.pop() {
            if let Some(item) = node.item {
                out.push((prefix.clone(), item));
            }
            for (&t, child) in node.children.iter().rev() {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((p, child));
            }
        }
        out.sort();
        out
    }
}

// ---------------------------------------------------------------------------
// Residual k-means
// ---------------------------------------------------------------------------

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Lloyd iterations with k-means++ seeding. Empty clusters are re-seeded
/// to the point currently farthest from its centroid.
fn kmeans(data: &Array2<f64>, v: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let (n, d) = (data.nrows(), data.ncols());
    let mut centroids = Array2::zeros((v, d));

    // k-means++ seeding
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), centroids.row(0)))
        .collect();
    for c in 1..v {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut x = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                x -= w;
                if x <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(data.row(i), centroids.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    for iter in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let a = nearest(data.row(i), &centroids);
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        let mut counts = vec![0usize; v];
        let mut sums = Array2::<f64>::zeros((v, d));
        for i in 0..n {
            counts[assign[i]] += 1;
            let mut row = sums.row_mut(assign[i]);
            row += &data.row(i);
        }
        for c in 0..v {
            if counts[c] == 0 {
                // farthest point from its centroid becomes the new seed
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(data.row(a), centroids.row(assign[a]))
                            .partial_cmp(&sq_dist(data.row(b), centroids.row(assign[b])))
                            .unwrap()
                            .then(a.cmp(&b))
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&data.row(far));
                assign[far] = c;
                changed = true;
            } else {
                let mut row = centroids.row_mut(c);
                for j in 0..d {
                    row[j] = sums[[c, j]] / counts[c] as f64;
                }
            }
        }
        if !changed && iter > 0 {
            break;
        }
    }
    // final assignment against converged centroids
    for i in 0..n {
        assign[i] = nearest(data.row(i), &centroids);
    }
    (centroids, assign)
}

/// Fit `k` codebook levels of `v_per_level` centroids on successive
/// residuals. Deterministic for a given seed.
pub fn fit_codebooks(
    embeddings: &Array2<f64>,
    k: usize,
    v_per_level: usize,
    seed: u64,
) -> Result<Codebooks> {
    let n = embeddings.nrows();
    if v_per_level > n {
        return Err(Error::CodebookTooLarge { v: v_per_level, n });
    }
    assert!(k >= 1, "need at least one level");
    let mut rng = rng_for(seed, "kmeans");
    let mut residuals = embeddings.clone();
    let mut levels = Vec::with_capacity(k);
    let mut level_errors = Vec::with_capacity(k);
    for _r in 0..k {
        let (centroids, assign) = kmeans(&residuals, v_per_level, &mut rng);
        for (i, &a) in assign.iter().enumerate() {
            let c = centroids.row(a).to_owned();
            let mut row = residuals.row_mut(i);
            row -= &c;
        }
        let err = residuals
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        levels.push(centroids);
        level_errors.push(err);
    }
    Ok(Codebooks {
        levels,
        level_errors,
    })
}

// ---------------------------------------------------------------------------
// ID assignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IdAssignment {
    /// One ID per item, indexed by item.
    pub ids: Vec<SemanticId>,
    /// Base quantization levels (excludes the disambiguation level).
    pub k: usize,
    /// Flat-token layout over all levels actually present.
    pub vocab: VocabLayout,
    pub trie: IdTrie,
}

impl IdAssignment {
    /// Tokens of the first k levels in the flat space (ID-encoder input).
    pub fn encoder_tokens(&self, item: usize) -> Vec<usize> {
        (0..self.k)
            .map(|l| self.vocab.global(l, self.ids[item].tokens[l]))
            .collect()
    }

    pub fn max_id_len(&self) -> usize {
        self.vocab.n_levels()
    }
}

/// Nearest-centroid assignment per level on residuals. Items sharing all k
/// tokens get a trailing counter token (0, 1, 2, ... in item-index order)
/// so the full tuple set stays unique.
pub fn assign_ids(codebooks: &Codebooks, embeddings: &Array2<f64>) -> IdAssignment {
    let n = embeddings.nrows();
    let k = codebooks.k();
    let mut base: Vec<Vec<u32>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut residual = embeddings.row(i).to_owned();
        let mut tokens = Vec::with_capacity(k);
        for level in &codebooks.levels {
            let a = nearest(residual.view(), level);
            tokens.push(a as u32);
            residual -= &level.row(a);
        }
        base.push(tokens);
    }

    // Group by base tuple in item order.
    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (i, t) in base.iter().enumerate() {
        groups.entry(t.clone()).or_default().push(i);
    }
    let max_group = groups.values().map(|g| g.len()).max().unwrap_or(1);

    let mut ids: Vec<SemanticId> = base
        .iter()
        .map(|t| SemanticId { tokens: t.clone() })
        .collect();
    for group in groups.values() {
        if group.len() > 1 {
            for (counter, &item) in group.iter().enumerate() {
                ids[item].tokens.push(counter as u32);
            }
        }
    }

    let mut level_sizes: Vec<usize> = codebooks.levels.iter().map(|l| l.nrows()).collect();
    if max_group > 1 {
        level_sizes.push(max_group);
    }
    let vocab = VocabLayout::new(level_sizes);

    let mut trie = IdTrie::default();
    for (i, id) in ids.iter().enumerate() {
        trie.insert(&id.tokens, i);
    }

    IdAssignment {
        ids,
        k,
        vocab,
        trie,
    }
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct IdManifest {
    k: usize,
    level_sizes: Vec<usize>,
    /// item id -> per-level local tokens
    ids: BTreeMap<String, Vec<u32>>,
}

pub fn write_id_manifest(
    path: &Path,
    assignment: &IdAssignment,
    item_ids: &[String],
) -> Result<()> {
    let mut ids = BTreeMap::new();
    for (i, id) in assignment.ids.iter().enumerate() {
        ids.insert(item_ids[i].clone(), id.tokens.clone());
    }
    let manifest = IdManifest {
        k: assignment.k,
        level_sizes: assignment.vocab.level_sizes.clone(),
        ids,
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest).unwrap() + "\n")
        .map_err(|e| io_err(path, e))
}

pub fn read_codebooks(dir: &Path) -> Result<Codebooks> {
    let hpath = dir.join("codebooks.json");
    let header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&hpath).map_err(|e| io_err(&hpath, e))?)
            .map_err(|e| Error::Artifact(format!("{}: {e}", hpath.display())))?;
    let k = header["k"].as_u64().unwrap_or(0) as usize;
    let dim = header["dim"].as_u64().unwrap_or(0) as usize;
    let sizes: Vec<usize> = header["sizes"]
        .as_array()
        .map(|a| a.iter().map(|v| v.as_u64().unwrap_or(0) as usize).collect())
        .unwrap_or_default();
    let level_errors: Vec<f64> = header["level_errors"]
        .as_array()
        .map(|a| a.iter().map(|v| v.as_f64().unwrap_or(0.0)).collect())
        .unwrap_or_default();
    let mut levels = Vec::with_capacity(k);
    for (r, &rows) in sizes.iter().enumerate() {
        let data = crate::util::read_f32_matrix(&dir.join(format!("codebook_l{r}.f32")), rows, dim)?;
        let mut m = Array2::zeros((rows, dim));
        for (i, v) in data.iter().enumerate() {
            m[[i / dim, i % dim]] = *v as f64;
        }
        levels.push(m);
    }
    Ok(Codebooks {
        levels,
        level_errors,
    })
}

/// One binary matrix file per level next to a small JSON header.
pub fn write_codebooks(dir: &Path, codebooks: &Codebooks) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let header = serde_json::json!({
        "k": codebooks.k(),
        "dim": codebooks.dim(),
        "sizes": codebooks.levels.iter().map(|l| l.nrows()).collect::<Vec<_>>(),
        "level_errors": codebooks.level_errors,
    });
    let hpath = dir.join("codebooks.json");
    std::fs::write(&hpath, serde_json::to_string_pretty(&header).unwrap() + "\n")
        .map_err(|e| io_err(&hpath, e))?;
    for (r, level) in codebooks.levels.iter().enumerate() {
        let data: Vec<f32> = level.iter().map(|&v| v as f32).collect();
        write_f32_matrix(
            &dir.join(format!("codebook_l{r}.f32")),
            level.nrows(),
            level.ncols(),
            &data,
        )?;
    }
    Ok(())
}
