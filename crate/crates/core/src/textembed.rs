//! Frozen per-item text embeddings plus the trainable projection into the
//! model space.
//!
//! The default extractor is a seeded random projection of hashed
//! token-count vectors: fully offline and a pure function of the text.
//! Real language-model vectors enter through the file-loaded path (one
//! JSON line per item, already pooled to a single vector per item).

use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemMeta;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Var};
use crate::util::{fnv1a64, io_err, read_f32_matrix, write_f32_matrix};

/// Lowercase alphanumeric tokens; shared with the BM25 side so lexical
/// features line up across modules.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Extractor {
    /// Seeded random projection of hashed token counts.
    DeterministicHash { dim: usize, seed: u64 },
    /// Precomputed vectors supplied by the user (JSONL: {"item", "vector"}).
    FileLoaded { path: String },
}

impl Extractor {
    pub fn name(&self) -> String {
        match self {
            Extractor::DeterministicHash { dim, seed } => format!("hash-d{dim}-s{seed}"),
            Extractor::FileLoaded { path } => {
                format!("file-{}", crate::util::fnv1a64(path.as_bytes()))
            }
        }
    }
}

const HASH_BUCKETS: usize = 1024;

/// Frozen embedding matrix, one row per item (row order = item index).
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    pub matrix: Array2<f64>,
    pub extractor: String,
    pub corpus_hash: String,
}

impl TextEmbeddings {
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn n_items(&self) -> usize {
        self.matrix.nrows()
    }
}

fn embed_text(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    // Hashed bag of words, L2-normalized, then a per-bucket seeded random
    // row; the projection matrix is never materialized.
    let mut counts = vec![0f64; HASH_BUCKETS];
    for tok in tokenize(text) {
        counts[(fnv1a64(tok.as_bytes()) % HASH_BUCKETS as u64) as usize] += 1.0;
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut out = vec![0f64; dim];
    if norm == 0.0 {
        return out;
    }
    for (bucket, &c) in counts.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let w = c / norm;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(&(bucket as u64).to_le_bytes()));
        for o in out.iter_mut() {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *o += w * g;
        }
    }
    out
}

#[derive(Deserialize)]
struct VectorRec {
    item: String,
    vector: Vec<f64>,
}

/// Produce one frozen vector per item. The extractor owns no trainable
/// parameters; nothing here ever enters a [`ParamStore`].
pub fn extract(
    items: &[ItemMeta],
    extractor: &Extractor,
    corpus_hash: &str,
) -> Result<TextEmbeddings> {
    let matrix = match extractor {
        Extractor::DeterministicHash { dim, seed } => {
            let mut m = Array2::zeros((items.len(), *dim));
            for (i, item) in items.iter().enumerate() {
                let row = embed_text(&item.text(), *dim, *seed);
                for (j, v) in row.iter().enumerate() {
                    m[[i, j]] = *v;
                }
            }
            m
        }
        Extractor::FileLoaded { path } => {
            let path = Path::new(path);
            let reader = BufReader::new(std::fs::File::open(path).map_err(|e| io_err(path, e))?);
            let mut by_id: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
            for (lineno, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| io_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: VectorRec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
                by_id.insert(rec.item, rec.vector);
            }
            let missing: Vec<String> = items
                .iter()
                .filter(|it| !by_id.contains_key(&it.id))
                .map(|it| it.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingVectors(missing));
            }
            let dim = by_id.values().next().map(|v| v.len()).unwrap_or(0);
            let mut m = Array2::zeros((items.len(), dim));
            for (i, item) in items.iter().enumerate() {
                let v = &by_id[&item.id];
                if v.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        got: v.len(),
                        context: format!("vector for item {}", item.id),
                    });
                }
                for (j, x) in v.iter().enumerate() {
                    m[[i, j]] = *x;
                }
            }
            m
        }
    };
    for v in matrix.iter() {
        if !v.is_finite() {
            return Err(Error::Artifact("non-finite text embedding".into()));
        }
    }
    Ok(TextEmbeddings {
        matrix,
        extractor: extractor.name(),
        corpus_hash: corpus_hash.to_string(),
    })
}

// ---------------------------------------------------------------------------
// On-disk cache: JSON header + row-major f32 matrix
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    extractor: String,
    dim: usize,
    n_items: usize,
    corpus_hash: String,
}

pub fn write_embedding_cache(dir: &Path, emb: &TextEmbeddings) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let header = CacheHeader {
        extractor: emb.extractor.clone(),
        dim: emb.dim(),
        n_items: emb.n_items(),
        corpus_hash: emb.corpus_hash.clone(),
    };
    let hpath = dir.join("embeddings.json");
    std::fs::write(&hpath, serde_json::to_string_pretty(&header).unwrap() + "\n")
        .map_err(|e| io_err(&hpath, e))?;
    let data: Vec<f32> = emb.matrix.iter().map(|&v| v as f32).collect();
    write_f32_matrix(&dir.join("embeddings.f32"), emb.n_items(), emb.dim(), &data)
}

pub fn read_embedding_cache(dir: &Path) -> Result<TextEmbeddings> {
    let hpath = dir.join("embeddings.json");
    let header: CacheHeader =
        serde_json::from_str(&std::fs::read_to_string(&hpath).map_err(|e| io_err(&hpath, e))?)
            .map_err(|e| Error::Artifact(format!("{}: {e}", hpath.display())))?;
    let data = read_f32_matrix(&dir.join("embeddings.f32"), header.n_items, header.dim)?;
    let mut matrix = Array2::zeros((header.n_items, header.dim));
    for (k, v) in data.iter().enumerate() {
        matrix[[k / header.dim, k % header.dim]] = *v as f64;
    }
    Ok(TextEmbeddings {
        matrix,
        extractor: header.extractor,
        corpus_hash: header.corpus_hash,
    })
}

/// Cached extraction keyed by (extractor, corpus hash). A stale or foreign
/// cache is silently rebuilt.
pub fn extract_cached(
    items: &[ItemMeta],
    extractor: &Extractor,
    corpus_hash: &str,
    cache_dir: &Path,
) -> Result<TextEmbeddings> {
    if let Ok(cached) = read_embedding_cache(cache_dir) {
        if cached.extractor == extractor.name() && cached.corpus_hash == corpus_hash {
            return Ok(cached);
        }
    }
    let emb = extract(items, extractor, corpus_hash)?;
    write_embedding_cache(cache_dir, &emb)?;
    // Round-trip through the cache so in-memory values match the f32 file
    // bit-for-bit on every run.
    read_embedding_cache(cache_dir)
}

// ---------------------------------------------------------------------------
// Trainable projection network
// ---------------------------------------------------------------------------

/// Two affine layers with a rectifier between, mapping extractor space
/// (dim_in) to model space (dim_out). Hidden width defaults to dim_out.
pub struct ProjectionNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim_in: usize,
    pub dim_out: usize,
    /// Test hook: skip the nonlinearity so identity-shaped layers pass
    /// inputs through unchanged.
    pub linear: bool,
}

impl ProjectionNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = dim_out;
        let s1 = (1.0 / dim_in as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Self {
            w1: store.register_randn(&format!("{prefix}.w1"), dim_in, hidden, s1, rng),
            b1: store.register_zeros(&format!("{prefix}.b1"), 1, hidden),
            w2: store.register_randn(&format!("{prefix}.w2"), hidden, dim_out, s2, rng),
            b2: store.register_zeros(&format!("{prefix}.b2"), 1, dim_out),
            dim_in,
            dim_out,
            linear: false,
        }
    }

    /// Project a (n, dim_in) batch of frozen embeddings. The input enters
    /// as a constant: gradients flow into the projection parameters only.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, input: &Array2<f64>) -> Result<Var> {
        if input.ncols() != self.dim_in {
            return Err(Error::DimMismatch {
                expected: self.dim_in,
                got: input.ncols(),
                context: "projection input".into(),
            });
        }
        let x = tape.constant(input.clone());
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = if self.linear { h } else { tape.relu(h) };
        let out = tape.matmul(h, w2);
        Ok(tape.add_row(out, b2))
    }

    /// Forward pass outside any tape (evaluation-only paths).
    pub fn project_eval(&self, store: &ParamStore, input: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let v = self.project(&mut tape, store, input)?;
        Ok(tape.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthConfig};
    use crate::nn::gradcheck::check_param_grads;
    use crate::util::rng_for;
    use std::io::Write;

    fn items3() -> Vec<ItemMeta> {
        vec![
            ItemMeta {
                id: "a".into(),
                title: "red lipstick".into(),
                description: "matte gloss".into(),
            },
            ItemMeta {
                id: "b".into(),
                title: "red lipstick".into(),
                description: "matte gloss".into(),
            },
            ItemMeta {
                id: "c".into(),
                title: "camp stove".into(),
                description: "gas burner".into(),
            },
        ]
    }

    #[test]
    fn identical_texts_identical_vectors() {
        let emb = extract(
            &items3(),
            &Extractor::DeterministicHash { dim: 16, seed: 5 },
            "h",
        )
        .unwrap();
        assert_eq!(emb.matrix.row(0).to_vec(), emb.matrix.row(1).to_vec());
        assert_ne!(emb.matrix.row(0).to_vec(), emb.matrix.row(2).to_vec());
    }

    #[test]
    fn cache_files_bit_identical_across_runs() {
        let base = std::env::temp_dir().join(format!("grc-emb-{}", std::process::id()));
        let d1 = base.join("one");
        let d2 = base.join("two");
        let ex = Extractor::DeterministicHash { dim: 8, seed: 13 };
        extract_cached(&items3(), &ex, "h", &d1).unwrap();
        extract_cached(&items3(), &ex, "h", &d2).unwrap();
        let b1 = std::fs::read(d1.join("embeddings.f32")).unwrap();
        let b2 = std::fs::read(d2.join("embeddings.f32")).unwrap();
        assert_eq!(b1, b2);
        std::fs::remove_dir_all(&base).ok();
    }

    #[test]
    fn file_loaded_passthrough_roundtrip() {
        let dir = std::env::temp_dir().join(format!("grc-fl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vecs.jsonl");
        let dim = 4096usize;
        let mut f = std::fs::File::create(&path).unwrap();
        let items = items3();
        let mut want = Vec::new();
        for (i, it) in items.iter().enumerate() {
            let v: Vec<f64> = (0..dim).map(|j| (i * dim + j) as f64 * 0.001).collect();
            writeln!(f, "{}", serde_json::json!({"item": it.id, "vector": v})).unwrap();
            want.push(v);
        }
        drop(f);
        let emb = extract(
            &items,
            &Extractor::FileLoaded {
                path: path.display().to_string(),
            },
            "h",
        )
        .unwrap();
        assert_eq!(emb.dim(), dim);
        for (i, row) in want.iter().enumerate() {
            assert_eq!(&emb.matrix.row(i).to_vec(), row);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn file_loaded_missing_item_errors() {
        let dir = std::env::temp_dir().join(format!("grc-flm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vecs.jsonl");
        std::fs::write(
            &path,
            serde_json::json!({"item": "a", "vector": [1.0, 2.0]}).to_string() + "\n",
        )
        .unwrap();
        let err = extract(
            &items3(),
            &Extractor::FileLoaded {
                path: path.display().to_string(),
            },
            "h",
        )
        .unwrap_err();
        match err {
            Error::MissingVectors(ids) => assert_eq!(ids, vec!["b".to_string(), "c".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn projection_constant_map_when_weights_zero() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, "init");
        let net = ProjectionNet::new(&mut store, "proj", 6, 4, &mut rng);
        store.value_mut(net.w1).fill(0.0);
        store.value_mut(net.w2).fill(0.0);
        for (j, v) in store.value_mut(net.b2).iter_mut().enumerate() {
            *v = j as f64 + 1.0;
        }
        let input = Array2::from_shape_fn((3, 6), |(i, j)| (i + j) as f64);
        let out = net.project_eval(&store, &input).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(out[[i, j]], j as f64 + 1.0);
            }
        }
    }

    #[test]
    fn projection_identity_in_linear_mode() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(2, "init");
        let mut net = ProjectionNet::new(&mut store, "proj", 4, 4, &mut rng);
        net.linear = true;
        store.value_mut(net.w1).assign(&Array2::eye(4));
        store.value_mut(net.w2).assign(&Array2::eye(4));
        store.value_mut(net.b1).fill(0.0);
        store.value_mut(net.b2).fill(0.0);
        let input = Array2::from_shape_fn((2, 4), |(i, j)| (i as f64) - 2.0 * (j as f64));
        let out = net.project_eval(&store, &input).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(3, "init");
        let net = ProjectionNet::new(&mut store, "proj", 5, 3, &mut rng);
        let input = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let ids = [net.w1, net.b1, net.w2, net.b2];
        let loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let out = net.project(&mut tape, store, &input).unwrap();
            let sq = tape.mul(out, out);
            tape.sum_all(sq);
            tape
        };
        let max_rel = check_param_grads(&mut store, &ids, loss, 1e-5);
        assert!(max_rel < 1e-4, "rel err {max_rel}");
    }

    #[test]
    fn projection_dimension_mismatch_errors() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(4, "init");
        let net = ProjectionNet::new(&mut store, "proj", 5, 3, &mut rng);
        let input = Array2::zeros((2, 7));
        assert!(net.project_eval(&store, &input).is_err());
    }

    #[test]
    fn extractor_owns_no_trainable_parameters() {
        // Build the whole embedding path and confirm the registry saw
        // nothing from it; only the projection registers parameters.
        let mut store = ParamStore::new();
        let corpus = synth_generate(&SynthConfig::new(10, 8, 2, 0.0, 9)).unwrap();
        let _emb = extract(
            &corpus.items,
            &Extractor::DeterministicHash { dim: 8, seed: 1 },
            &corpus.content_hash(),
        )
        .unwrap();
        assert_eq!(store.len(), 0);
        let mut rng = rng_for(5, "init");
        let _net = ProjectionNet::new(&mut store, "proj", 8, 4, &mut rng);
        assert!(store.sorted_names().iter().all(|n| n.starts_with("proj.")));
    }

    #[test]
    fn projection_norm_growth_is_bounded() {
        // ||out|| <= c ||in|| + c' with c, c' fitted from operator norms
        // (Frobenius upper bounds).
        let mut store = ParamStore::new();
        let mut rng = rng_for(6, "init");
        let net = ProjectionNet::new(&mut store, "proj", 6, 4, &mut rng);
        let fro = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = fro(store.value(net.w1)) * fro(store.value(net.w2));
        let cp = fro(store.value(net.b1)) * fro(store.value(net.w2)) + fro(store.value(net.b2));
        for trial in 0..20 {
            let input = Array2::from_shape_fn((1, 6), |(_, j)| {
                ((trial * 6 + j) as f64 * 0.61).cos() * (trial as f64 + 1.0)
            });
            let out = net.project_eval(&store, &input).unwrap();
            assert!(fro(&out) <= c * fro(&input) + cp + 1e-9);
        }
    }
}
