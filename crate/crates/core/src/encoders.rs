//! The two view encoders and the contrastive alignment losses.
//!
//! The language view encodes projected item-text embeddings (one position
//! per item); the ID view encodes the flattened semantic-ID token sequence
//! (k positions per item) through learned token embeddings. Mean pooling
//! over real positions yields the per-user preference vectors, and the two
//! InfoNCE losses pull the views together at item and user level.
//!
//! As printed, the alignment objectives are log-ratios a training loop
//! would have to maximize; this implementation negates them into standard
//! InfoNCE form so that gradient descent minimizes them.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Var};
use crate::transformer::{ArchDims, TransformerEncoder};

pub struct DualEncoders {
    pub lang: TransformerEncoder,
    pub id_enc: TransformerEncoder,
    /// Token embedding table for the first k ID levels, (enc_vocab, d_tok).
    pub tok_emb: ParamId,
    /// Projection of token embeddings into model space, (d_tok, d_model).
    pub tok_proj: ParamId,
    pub k: usize,
    pub d_model: usize,
}

impl DualEncoders {
    /// `enc_vocab` spans the first k levels of the flat token space; the
    /// encoder never sees disambiguation tokens.
    pub fn new(
        store: &mut ParamStore,
        dims: ArchDims,
        k: usize,
        enc_vocab: usize,
        d_tok: usize,
        max_items: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let lang = TransformerEncoder::new(store, "enc_lang", dims, max_items, rng);
        let id_enc = TransformerEncoder::new(store, "enc_id", dims, max_items * k, rng);
        let tok_emb = store.register_randn(
            "enc_id.tok_emb",
            enc_vocab,
            d_tok,
            (1.0 / d_tok as f64).sqrt(),
            rng,
        );
        let tok_proj = store.register_randn(
            "enc_id.tok_proj",
            d_tok,
            dims.d_model,
            (1.0 / d_tok as f64).sqrt(),
            rng,
        );
        Self {
            lang,
            id_enc,
            tok_emb,
            tok_proj,
            k,
            d_model: dims.d_model,
        }
    }

    /// Contextual vectors per item position. `items_proj` is the (len, d)
    /// projected-embedding sequence; rows >= real_len are padding.
    pub fn encode_language(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        items_proj: Var,
        real_len: usize,
    ) -> Result<Var> {
        self.lang.forward(tape, store, items_proj, real_len, false)
    }

    /// Token embeddings (pre-position, pre-encoder) for a flat token
    /// sequence. Exposed so tests can check lookup behavior directly.
    pub fn id_input_embeddings(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        flat_tokens: &[usize],
    ) -> Var {
        let table = tape.param(store, self.tok_emb);
        let rows = tape.select_rows(table, flat_tokens);
        let proj = tape.param(store, self.tok_proj);
        tape.matmul(rows, proj)
    }

    /// Contextual vectors per ID token (k per item). `flat_tokens` must
    /// hold k tokens per item; `real_items` marks how many items are real.
    pub fn encode_id(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        flat_tokens: &[usize],
        real_items: usize,
    ) -> Result<Var> {
        if flat_tokens.len() % self.k != 0 {
            return Err(Error::DimMismatch {
                expected: self.k,
                got: flat_tokens.len(),
                context: "flat token sequence must hold k tokens per item".into(),
            });
        }
        let input = self.id_input_embeddings(tape, store, flat_tokens);
        self.id_enc
            .forward(tape, store, input, real_items * self.k, false)
    }

    /// Mean over the first `real_rows` positions: the preference vector.
    pub fn pool(&self, tape: &mut Tape, x: Var, real_rows: usize) -> Var {
        let rows: Vec<usize> = (0..real_rows).collect();
        tape.mean_rows(x, &rows)
    }

    /// g_i: the sum of an item's k encoded token vectors.
    pub fn item_id_repr(&self, tape: &mut Tape, c: Var, item_pos: usize) -> Var {
        let rows: Vec<usize> = (item_pos * self.k..(item_pos + 1) * self.k).collect();
        tape.sum_rows(c, &rows)
    }
}

/// Symmetric in-batch InfoNCE with inner-product similarity. Row i of
/// `anchors` and `others` is the same entity seen from the two views;
/// every other row serves as a negative. Returns zero (with a warning)
/// when the batch has no negatives.
fn info_nce(tape: &mut Tape, anchors: Var, others: Var, tau: f64, what: &str) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let n = tape.value(anchors).nrows();
    assert_eq!(n, tape.value(others).nrows());
    if n < 2 {
        log::warn!("{what}: batch of {n} has no negatives, alignment loss is 0");
        return Ok(tape.constant(Array2::zeros((1, 1))));
    }
    let diag: Vec<usize> = (0..n).collect();
    let bt = tape.transpose(others);
    let sims = tape.matmul(anchors, bt);
    let sims = tape.scale(sims, 1.0 / tau);
    let fwd = tape.ce_rows(sims, &diag);
    let simst = tape.transpose(sims);
    let bwd = tape.ce_rows(simst, &diag);
    Ok(tape.add(fwd, bwd))
}

/// Item-level alignment between language representations h_i and summed
/// ID-token representations g_i over the distinct items of a batch.
pub fn loss_item_alignment(tape: &mut Tape, h: Var, g: Var, tau: f64) -> Result<Var> {
    info_nce(tape, h, g, tau, "item alignment")
}

/// User-preference alignment between pooled views p_u and q_u.
pub fn loss_user_alignment(tape: &mut Tape, p: Var, q: Var, tau: f64) -> Result<Var> {
    info_nce(tape, p, q, tau, "user alignment")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;
    use crate::util::rng_for;

    fn dims() -> ArchDims {
        ArchDims {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            n_layers: 2,
        }
    }

    fn encoders(store: &mut ParamStore) -> DualEncoders {
        let mut rng = rng_for(11, "init");
        DualEncoders::new(store, dims(), 3, 12, 6, 10, &mut rng)
    }

    #[test]
    fn single_item_pool_equals_position_output() {
        let mut store = ParamStore::new();
        let enc = encoders(&mut store);
        let mut tape = Tape::new();
        let input = tape.constant(Array2::from_shape_fn((1, 8), |(_, j)| j as f64 * 0.1));
        let h = enc.encode_language(&mut tape, &store, input, 1).unwrap();
        let p = enc.pool(&mut tape, h, 1);
        let hv = tape.value(h).clone();
        let pv = tape.value(p).clone();
        for j in 0..8 {
            assert!((hv[[0, j]] - pv[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_items_never_change_pooled_vectors() {
        let mut store = ParamStore::new();
        let enc = encoders(&mut store);
        let real = Array2::from_shape_fn((2, 8), |(i, j)| ((i * 8 + j) as f64 * 0.23).sin());

        let pooled = |with_pads: bool| {
            let mut tape = Tape::new();
            let rows = if with_pads { 5 } else { 2 };
            let mut input = Array2::from_elem((rows, 8), 7.7); // junk pads
            for i in 0..2 {
                input.row_mut(i).assign(&real.row(i));
            }
            let x = tape.constant(input);
            let h = enc.encode_language(&mut tape, &store, x, 2).unwrap();
            let p = enc.pool(&mut tape, h, 2);
            tape.value(p).clone()
        };
        let a = pooled(false);
        let b = pooled(true);
        for j in 0..8 {
            assert!((a[[0, j]] - b[[0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn one_item_yields_k_token_vectors_and_g_sums_them() {
        let mut store = ParamStore::new();
        let enc = encoders(&mut store);
        let mut tape = Tape::new();
        let c = enc.encode_id(&mut tape, &store, &[0, 5, 9], 1).unwrap();
        assert_eq!(tape.value(c).nrows(), 3);
        let g = enc.item_id_repr(&mut tape, c, 0);
        let cv = tape.value(c).clone();
        let gv = tape.value(g).clone();
        for j in 0..8 {
            let manual = cv[[0, j]] + cv[[1, j]] + cv[[2, j]];
            assert!((gv[[0, j]] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_contract_c_is_k_times_h() {
        let mut store = ParamStore::new();
        let enc = encoders(&mut store);
        let mut tape = Tape::new();
        let items = 4usize;
        let lang_in = tape.constant(Array2::zeros((items, 8)));
        let h = enc.encode_language(&mut tape, &store, lang_in, items).unwrap();
        let tokens: Vec<usize> = (0..items * 3).map(|t| t % 12).collect();
        let c = enc.encode_id(&mut tape, &store, &tokens, items).unwrap();
        assert_eq!(tape.value(c).nrows(), 3 * tape.value(h).nrows());
    }

    #[test]
    fn same_token_shares_embedding_row_before_positions() {
        let mut store = ParamStore::new();
        let enc = encoders(&mut store);
        let mut tape = Tape::new();
        // token 7 at two different positions
        let rows = enc.id_input_embeddings(&mut tape, &store, &[7, 3, 7]);
        let v = tape.value(rows);
        for j in 0..8 {
            assert_eq!(v[[0, j]], v[[2, j]]);
        }
        // with position encoding ablated (zeroed), the encoder input at the
        // two positions is identical too
        store.value_mut(enc.id_enc.pos_emb).fill(0.0);
        let mut tape = Tape::new();
        let table = tape.param(&store, enc.tok_emb);
        let sel = tape.select_rows(table, &[7, 3, 7]);
        let proj = tape.param(&store, enc.tok_proj);
        let pre = tape.matmul(sel, proj);
        let pos_table = tape.param(&store, enc.id_enc.pos_emb);
        let pos = tape.select_rows(pos_table, &[0, 1, 2]);
        let with_pos = tape.add(pre, pos);
        let v = tape.value(with_pos);
        for j in 0..8 {
            assert_eq!(v[[0, j]], v[[2, j]]);
        }
    }

    #[test]
    fn wrong_token_count_errors() {
        let mut store = ParamStore::new();
        let enc = encoders(&mut store);
        let mut tape = Tape::new();
        assert!(enc.encode_id(&mut tape, &store, &[0, 1], 1).is_err());
    }

    /// Orthogonal identical views: closed-form InfoNCE value.
    #[test]
    fn item_alignment_closed_form_on_orthogonal_views() {
        let n = 4usize;
        let c = 1.3f64;
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            m[[i, i]] = c;
        }
        let mut tape = Tape::new();
        let h = tape.constant(m.clone());
        let g = tape.constant(m);
        let loss = loss_item_alignment(&mut tape, h, g, 1.0).unwrap();
        let got = tape.scalar_value(loss);
        let pos = (c * c).exp();
        let per_direction = -(pos / (pos + (n - 1) as f64)).ln();
        assert!(
            (got - 2.0 * per_direction).abs() < 1e-12,
            "{got} vs {}",
            2.0 * per_direction
        );
    }

    #[test]
    fn item_alignment_vanishes_as_positives_dominate() {
        let n = 3usize;
        let mut prev = f64::INFINITY;
        for &c in &[0.5, 1.0, 2.0, 4.0, 8.0] {
            let mut m = Array2::zeros((n, n));
            for i in 0..n {
                m[[i, i]] = c;
            }
            let mut tape = Tape::new();
            let h = tape.constant(m.clone());
            let g = tape.constant(m);
            let loss = loss_item_alignment(&mut tape, h, g, 1.0).unwrap();
            let got = tape.scalar_value(loss);
            assert!(got < prev, "not monotone at c={c}");
            prev = got;
        }
        assert!(prev < 1e-9, "loss should approach 0, got {prev}");
    }

    #[test]
    fn alignment_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(23, "init");
        let h = store.register_randn("h", 4, 6, 0.8, &mut rng);
        let g = store.register_randn("g", 4, 6, 0.8, &mut rng);
        let loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let hv = tape.param(store, h);
            let gv = tape.param(store, g);
            loss_item_alignment(&mut tape, hv, gv, 0.3).unwrap();
            tape
        };
        let max_rel = check_param_grads(&mut store, &[h, g], loss, 1e-5);
        assert!(max_rel < 1e-4, "rel err {max_rel}");
    }

    #[test]
    fn user_alignment_batch_of_one_is_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(Array2::from_elem((1, 4), 0.5));
        let q = tape.constant(Array2::from_elem((1, 4), 0.9));
        let loss = loss_user_alignment(&mut tape, p, q, 0.07).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let mut tape = Tape::new();
        let p = tape.constant(Array2::zeros((2, 3)));
        let q = tape.constant(Array2::zeros((2, 3)));
        assert!(loss_user_alignment(&mut tape, p, q, 0.0).is_err());
        assert!(loss_user_alignment(&mut tape, p, q, -0.1).is_err());
    }

    #[test]
    fn scaling_views_keeps_argmax_positive_pair() {
        let mut rng = rng_for(31, "scale");
        let mut store = ParamStore::new();
        let p = store.register_randn("p", 5, 4, 1.0, &mut rng);
        let q = store.register_randn("q", 5, 4, 1.0, &mut rng);
        // nudge the diagonal pairs together so positives win
        for i in 0..5 {
            let qrow = store.value(q).row(i).to_owned();
            let mut prow = store.value_mut(p).row_mut(i);
            for j in 0..4 {
                prow[j] = 0.3 * prow[j] + qrow[j];
            }
        }
        let sims = |scale: f64, store: &ParamStore| -> Vec<usize> {
            let pv = store.value(p) * scale;
            let qv = store.value(q) * scale;
            (0..5)
                .map(|u| {
                    (0..5)
                        .max_by(|&a, &b| {
                            let sa: f64 = pv.row(u).iter().zip(qv.row(a).iter()).map(|(x, y)| x * y).sum();
                            let sb: f64 = pv.row(u).iter().zip(qv.row(b).iter()).map(|(x, y)| x * y).sum();
                            sa.partial_cmp(&sb).unwrap()
                        })
                        .unwrap()
                })
                .collect()
        };
        let base = sims(1.0, &store);
        for &c in &[0.5, 2.0, 7.0] {
            assert_eq!(sims(c, &store), base, "argmax changed at scale {c}");
        }
        // the loss value itself does change
        let loss_at = |scale: f64, store: &ParamStore| {
            let mut tape = Tape::new();
            let pv = tape.constant(store.value(p) * scale);
            let qv = tape.constant(store.value(q) * scale);
            let l = loss_user_alignment(&mut tape, pv, qv, 1.0).unwrap();
            tape.scalar_value(l)
        };
        assert_ne!(loss_at(1.0, &store), loss_at(2.0, &store));
    }
}
