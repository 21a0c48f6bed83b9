//! The shared Transformer decoder over semantic-ID tokens, semantic
//! substitution for exposure-bias mitigation, temperature-scaled mutual
//! KL between the two views, and trie-constrained beam generation.
//!
//! Substitution changes decoder *inputs* only: with probability p1 an
//! example keeps all ground-truth input tokens; otherwise each of the
//! first k positions independently keeps its token with probability p2 or
//! receives the language view's top-q probability-weighted embedding mix.
//! Targets are always the ground-truth tokens.
//!
//! The mutual-KL objective as printed carries a leading minus (minimizing
//! it would push the views apart); it is implemented here as a positive
//! symmetric divergence to be minimized.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Var};
use crate::semid::{IdTrie, VocabLayout};
use crate::transformer::{ArchDims, TransformerDecoder};

pub const KL_EPS: f64 = 1e-12;

pub struct SsgDecoder {
    pub dec: TransformerDecoder,
    /// Decoder-owned token table over the full flat vocabulary plus BOS.
    pub tok_emb: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    /// Added to retrieved preference rows to mark them apart from the
    /// user's own token positions in the decoder memory.
    pub seg_retrieved: ParamId,
    pub vocab: VocabLayout,
    pub k: usize,
}

/// A q-sparse refined distribution: local token indices and their softmax
/// weights. Weights are plain numbers — substitution treats them as
/// constants, so no gradient flows through the fusion coefficients.
#[derive(Debug, Clone)]
pub struct Refined {
    pub tokens: Vec<u32>,
    pub weights: Vec<f64>,
}

/// Per-example substitution decisions, drawn up front so a seeded plan can
/// be replayed (gradient checks, determinism tests).
#[derive(Debug, Clone)]
pub struct SubstitutionPlan {
    pub keep_item: bool,
    pub keep_token: Vec<bool>,
}

impl SubstitutionPlan {
    pub fn draw(rng: &mut ChaCha8Rng, p1: f64, p2: f64, k: usize) -> Self {
        let keep_item = rng.random::<f64>() < p1;
        let keep_token = (0..k).map(|_| rng.random::<f64>() < p2).collect();
        Self {
            keep_item,
            keep_token,
        }
    }

    pub fn teacher_forcing(k: usize) -> Self {
        Self {
            keep_item: true,
            keep_token: vec![true; k],
        }
    }

    pub fn substituted(&self, level: usize) -> bool {
        !self.keep_item && level < self.keep_token.len() && !self.keep_token[level]
    }
}

impl SsgDecoder {
    pub fn new(
        store: &mut ParamStore,
        dims: ArchDims,
        vocab: VocabLayout,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = dims.d_model;
        let total = vocab.total();
        let max_len = vocab.n_levels();
        let dec = TransformerDecoder::new(store, "dec", dims, max_len, rng);
        let tok_emb = store.register_randn(
            "dec.tok_emb",
            total + 1, // final row is BOS
            d,
            (1.0 / d as f64).sqrt(),
            rng,
        );
        let out_w =
            store.register_randn("dec.out_w", d, total, (1.0 / d as f64).sqrt(), rng);
        let out_b = store.register_zeros("dec.out_b", 1, total);
        let seg_retrieved = store.register_zeros("dec.seg_retrieved", 1, d);
        Self {
            dec,
            tok_emb,
            out_w,
            out_b,
            seg_retrieved,
            vocab,
            k,
        }
    }

    pub fn bos_index(&self) -> usize {
        self.vocab.total()
    }

    fn validate_target(&self, target: &[u32]) -> Result<()> {
        let n_levels = self.vocab.n_levels();
        if !(target.len() == self.k || (target.len() == self.k + 1 && n_levels == self.k + 1)) {
            return Err(Error::BadTargetLength {
                got: target.len(),
                expected: if n_levels > self.k {
                    format!("{} or {}", self.k, self.k + 1)
                } else {
                    format!("{}", self.k)
                },
            });
        }
        for (l, &t) in target.iter().enumerate() {
            if t as usize >= self.vocab.level_sizes[l] {
                return Err(Error::DimMismatch {
                    expected: self.vocab.level_sizes[l],
                    got: t as usize,
                    context: format!("token at level {l}"),
                });
            }
        }
        Ok(())
    }

    /// Shifted ground-truth input embeddings: BOS then the first L-1
    /// target tokens.
    pub fn gt_input_embeddings(&self, tape: &mut Tape, store: &ParamStore, target: &[u32]) -> Var {
        let mut rows = vec![self.bos_index()];
        for (l, &t) in target.iter().enumerate().take(target.len() - 1) {
            rows.push(self.vocab.global(l, t));
        }
        let table = tape.param(store, self.tok_emb);
        tape.select_rows(table, &rows)
    }

    /// Decoder forward plus output head, sliced into per-level logits
    /// (one (1, V_level) row per input position).
    pub fn forward_levels(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        inputs: Var,
    ) -> Result<Vec<Var>> {
        let n_levels = tape.value(inputs).nrows();
        let hidden = self.dec.forward(tape, store, inputs, memory)?;
        let w = tape.param(store, self.out_w);
        let b = tape.param(store, self.out_b);
        let logits_all = tape.matmul(hidden, w);
        let logits_all = tape.add_row(logits_all, b);
        let mut out = Vec::with_capacity(n_levels);
        for l in 0..n_levels {
            let row = tape.select_rows(logits_all, &[l]);
            let (from, to) = self.vocab.level_range(l);
            out.push(tape.slice_cols(row, from, to));
        }
        Ok(out)
    }

    /// Standard teacher forcing: ground-truth prefix in, per-level logits
    /// out.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        target: &[u32],
    ) -> Result<Vec<Var>> {
        self.validate_target(target)?;
        let inputs = self.gt_input_embeddings(tape, store, target);
        self.forward_levels(tape, store, memory, inputs)
    }

    /// Token-level cross-entropy against the ground-truth tokens, averaged
    /// over the target's levels.
    pub fn generation_loss(&self, tape: &mut Tape, level_logits: &[Var], target: &[u32]) -> Var {
        assert_eq!(level_logits.len(), target.len());
        let mut acc: Option<Var> = None;
        for (l, &t) in target.iter().enumerate() {
            let ce = tape.ce_rows(level_logits[l], &[t as usize]);
            acc = Some(match acc {
                Some(a) => tape.add(a, ce),
                None => ce,
            });
        }
        let total = acc.expect("non-empty target");
        tape.scale(total, 1.0 / target.len() as f64)
    }

    /// Initial prediction from the language view: teacher-forced decode
    /// over the language memory, then per-level top-q refined
    /// distributions. Returns the level logits (for the KL term) alongside
    /// the refined fusion weights.
    pub fn language_view_predict(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory_lang: Var,
        target: &[u32],
        q: usize,
    ) -> Result<(Vec<Var>, Vec<Refined>)> {
        let logits = self.decode_teacher_forced(tape, store, memory_lang, target)?;
        let mut refined = Vec::with_capacity(self.k.min(target.len()));
        for logit in logits.iter().take(self.k.min(target.len())) {
            let row: Vec<f64> = tape.value(*logit).row(0).to_vec();
            refined.push(refine_top_q(&row, q)?);
        }
        Ok((logits, refined))
    }

    /// Decoder input embeddings under a substitution plan: kept positions
    /// use the ground-truth token row, substituted positions the refined
    /// probability-weighted mix of the top-q token embeddings. The
    /// disambiguation position (if any) is never substituted.
    pub fn apply_substitution(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        target: &[u32],
        plan: &SubstitutionPlan,
        refined: &[Refined],
    ) -> Var {
        let table = tape.param(store, self.tok_emb);
        let mut parts: Vec<Var> = Vec::with_capacity(target.len());
        parts.push(tape.select_rows(table, &[self.bos_index()]));
        for (l, &t) in target.iter().enumerate().take(target.len() - 1) {
            if plan.substituted(l) && l < refined.len() {
                let r = &refined[l];
                let rows: Vec<usize> =
                    r.tokens.iter().map(|&tok| self.vocab.global(l, tok)).collect();
                let gathered = tape.select_rows(table, &rows);
                let w =
                    Array2::from_shape_vec((1, r.weights.len()), r.weights.clone()).unwrap();
                let wv = tape.constant(w);
                parts.push(tape.matmul(wv, gathered));
            } else {
                parts.push(tape.select_rows(table, &[self.vocab.global(l, t)]));
            }
        }
        tape.concat_rows(&parts)
    }

    /// Memory for retrieval-augmented decoding: cached preference rows
    /// (marked with the learned segment embedding) in front of the user's
    /// own token-level encoding.
    pub fn augmented_memory(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        retrieved_q: &Array2<f64>,
        c_u: Var,
    ) -> Var {
        if retrieved_q.nrows() == 0 {
            return c_u;
        }
        let q = tape.constant(retrieved_q.clone());
        let seg = tape.param(store, self.seg_retrieved);
        let marked = tape.add_row(q, seg);
        tape.concat_rows(&[marked, c_u])
    }

    /// Sum of per-level ground-truth log-probabilities (evaluation only).
    pub fn score_id_eval(
        &self,
        store: &ParamStore,
        memory: &Array2<f64>,
        tokens: &[u32],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let mem = tape.constant(memory.clone());
        let logits = self.decode_teacher_forced(&mut tape, store, mem, tokens)?;
        let mut score = 0.0;
        for (l, &t) in tokens.iter().enumerate() {
            let row: Vec<f64> = tape.value(logits[l]).row(0).to_vec();
            score += log_softmax_1d(&row)[t as usize];
        }
        Ok(score)
    }

    /// Trie-constrained beam search. Every candidate continuation must be
    /// a valid prefix; complete IDs are ranked by the sum of their level
    /// log-probabilities, score ties broken by lexicographic token order.
    pub fn generate(
        &self,
        store: &ParamStore,
        memory: &Array2<f64>,
        trie: &IdTrie,
        beam: usize,
    ) -> Result<Vec<ScoredId>> {
        if beam == 0 {
            return Ok(Vec::new());
        }
        if beam > trie.n_items() {
            log::warn!(
                "beam width {beam} exceeds the {} valid ids, returning all",
                trie.n_items()
            );
        }
        let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
        let mut done: Vec<ScoredId> = Vec::new();
        for _level in 0..self.vocab.n_levels() {
            if alive.is_empty() {
                break;
            }
            let mut pool: Vec<(Vec<u32>, f64)> = Vec::new();
            for (prefix, score) in alive.drain(..) {
                let children = trie.continuations(&prefix);
                if children.is_empty() {
                    // complete id; the trie guarantees leaf-xor-children
                    if let Some(item) = trie.accepts(&prefix) {
                        done.push(ScoredId {
                            item,
                            tokens: prefix,
                            score,
                        });
                    }
                    continue;
                }
                let lp = self.prefix_log_probs(store, memory, &prefix)?;
                for child in children {
                    let mut tokens = prefix.clone();
                    tokens.push(child);
                    pool.push((tokens, score + lp[child as usize]));
                }
            }
            pool.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            pool.truncate(beam);
            alive = pool;
        }
        for (prefix, score) in alive {
            if let Some(item) = trie.accepts(&prefix) {
                done.push(ScoredId {
                    item,
                    tokens: prefix,
                    score,
                });
            }
        }
        done.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        done.truncate(beam);
        Ok(done)
    }

    /// Log-probabilities over the next level's vocabulary given a prefix.
    fn prefix_log_probs(
        &self,
        store: &ParamStore,
        memory: &Array2<f64>,
        prefix: &[u32],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mem = tape.constant(memory.clone());
        let mut rows = vec![self.bos_index()];
        for (l, &t) in prefix.iter().enumerate() {
            rows.push(self.vocab.global(l, t));
        }
        let table = tape.param_detached(store, self.tok_emb);
        let inputs = tape.select_rows(table, &rows);
        let logits = self.forward_levels(&mut tape, store, mem, inputs)?;
        let last = logits[prefix.len()];
        let row: Vec<f64> = tape.value(last).row(0).to_vec();
        Ok(log_softmax_1d(&row))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredId {
    pub item: usize,
    pub tokens: Vec<u32>,
    pub score: f64,
}

fn log_softmax_1d(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let logsum = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - logsum).collect()
}

/// Softmax over the top-q logits only; everything else gets weight zero.
/// Logit ties resolve to the lower token index.
pub fn refine_top_q(logits: &[f64], q: usize) -> Result<Refined> {
    if q > logits.len() {
        return Err(Error::FusionWidthTooLarge {
            q,
            v: logits.len(),
        });
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top: Vec<usize> = order[..q].to_vec();
    let max = top.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = top.iter().map(|&i| (logits[i] - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Refined {
        tokens: top.iter().map(|&i| i as u32).collect(),
        weights: exps.iter().map(|e| e / sum).collect(),
    })
}

/// Eq. "exp(z_c/phi) / sum_b exp(z_b/phi)", stabilized by max-subtraction.
pub fn temperature_scale(logits: &[f64], phi: f64) -> Result<Vec<f64>> {
    if phi <= 0.0 {
        return Err(Error::NonPositiveTemperature(phi));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / phi).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// KL(P || Q) with the 1e-12 floor applied before each log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| pi * (pi.max(KL_EPS).ln() - qi.max(KL_EPS).ln()))
        .sum()
}

/// Positive symmetric KL summed over levels, averaged over items. Inputs
/// are per-item lists of per-level probability vectors.
pub fn loss_kl_mutual(lan: &[Vec<Vec<f64>>], id: &[Vec<Vec<f64>>]) -> f64 {
    assert_eq!(lan.len(), id.len());
    if lan.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (pl, pi) in lan.iter().zip(id.iter()) {
        assert_eq!(pl.len(), pi.len());
        for (dl, di) in pl.iter().zip(pi.iter()) {
            total += kl_divergence(dl, di) + kl_divergence(di, dl);
        }
    }
    total / lan.len() as f64
}

/// Tape version of one level's symmetric KL between temperature-scaled
/// logits; gradients flow into both views.
pub fn kl_pair_tape(tape: &mut Tape, lan_logits: Var, id_logits: Var, phi: f64) -> Result<Var> {
    if phi <= 0.0 {
        return Err(Error::NonPositiveTemperature(phi));
    }
    let zl = tape.scale(lan_logits, 1.0 / phi);
    let zi = tape.scale(id_logits, 1.0 / phi);
    let pl = tape.softmax_rows(zl);
    let pi = tape.softmax_rows(zi);
    let lpl = tape.log_softmax_rows(zl);
    let lpi = tape.log_softmax_rows(zi);
    let d_l = tape.sub(lpl, lpi);
    let t1 = tape.mul(pl, d_l);
    let kl_li = tape.sum_all(t1);
    let d_i = tape.sub(lpi, lpl);
    let t2 = tape.mul(pi, d_i);
    let kl_il = tape.sum_all(t2);
    Ok(tape.add(kl_li, kl_il))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semid::{IdTrie, VocabLayout};
    use crate::util::rng_for;

    fn dims() -> ArchDims {
        ArchDims {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            n_layers: 1,
        }
    }

    fn decoder(store: &mut ParamStore, level_sizes: Vec<usize>, k: usize) -> SsgDecoder {
        let mut rng = rng_for(77, "init");
        SsgDecoder::new(store, dims(), VocabLayout::new(level_sizes), k, &mut rng)
    }

    fn memory(rows: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, 8), |(i, j)| ((i * 8 + j) as f64 * 0.19).sin())
    }

    #[test]
    fn k1_produces_one_logit_vector() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![6], 1);
        let mut tape = Tape::new();
        let mem = tape.constant(memory(4));
        let logits = dec.decode_teacher_forced(&mut tape, &store, mem, &[3]).unwrap();
        assert_eq!(logits.len(), 1);
        assert_eq!(tape.value(logits[0]).dim(), (1, 6));
    }

    #[test]
    fn identical_inputs_identical_logits() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![5, 5, 5], 3);
        let run = || {
            let mut tape = Tape::new();
            let mem = tape.constant(memory(4));
            let logits = dec
                .decode_teacher_forced(&mut tape, &store, mem, &[1, 2, 3])
                .unwrap();
            logits
                .iter()
                .map(|&l| tape.value(l).clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn causality_future_target_tokens_do_not_leak() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![5, 5, 5], 3);
        let run = |target: &[u32]| {
            let mut tape = Tape::new();
            let mem = tape.constant(memory(4));
            let logits = dec.decode_teacher_forced(&mut tape, &store, mem, target).unwrap();
            logits
                .iter()
                .map(|&l| tape.value(l).clone())
                .collect::<Vec<_>>()
        };
        // changing the level-2 target token can only affect level-3 logits
        let a = run(&[1, 2, 3]);
        let b = run(&[1, 4, 3]);
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn bad_target_length_errors() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![5, 5, 5], 3);
        let mut tape = Tape::new();
        let mem = tape.constant(memory(2));
        assert!(matches!(
            dec.decode_teacher_forced(&mut tape, &store, mem, &[1, 2]),
            Err(Error::BadTargetLength { .. })
        ));
        // k+1 without a disambiguation level is invalid too
        let mem2 = tape.constant(memory(2));
        assert!(dec
            .decode_teacher_forced(&mut tape, &store, mem2, &[1, 2, 3, 0])
            .is_err());
    }

    #[test]
    fn refine_point_mass_at_q1() {
        let r = refine_top_q(&[0.3, 2.0, -1.0], 1).unwrap();
        assert_eq!(r.tokens, vec![1]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn refine_two_logits_hand_softmax() {
        let r = refine_top_q(&[2.0, 0.0], 2).unwrap();
        assert_eq!(r.tokens, vec![0, 1]);
        let e2 = 2.0f64.exp();
        assert!((r.weights[0] - e2 / (e2 + 1.0)).abs() < 1e-10);
        assert!((r.weights[1] - 1.0 / (e2 + 1.0)).abs() < 1e-10);
        assert!((r.weights[0] - 0.8808).abs() < 1e-4);
        assert!((r.weights[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn refine_full_vocab_equals_softmax() {
        let logits = [0.5, -1.0, 2.0, 0.0];
        let r = refine_top_q(&logits, 4).unwrap();
        let full = temperature_scale(&logits, 1.0).unwrap();
        for (tok, w) in r.tokens.iter().zip(&r.weights) {
            assert!((w - full[*tok as usize]).abs() < 1e-12);
        }
        assert!(refine_top_q(&logits, 5).is_err());
    }

    #[test]
    fn substitution_plan_rates_match_monte_carlo() {
        let mut rng = rng_for(123, "substitution");
        let (p1, p2) = (0.6, 0.5);
        let k = 3;
        let n = 100_000;
        let mut substituted = 0usize;
        let mut total = 0usize;
        for _ in 0..n {
            let plan = SubstitutionPlan::draw(&mut rng, p1, p2, k);
            for l in 0..k {
                total += 1;
                if plan.substituted(l) {
                    substituted += 1;
                }
            }
        }
        let rate = substituted as f64 / total as f64;
        let expected = (1.0 - p1) * (1.0 - p2);
        assert!((rate - expected).abs() < 0.01, "rate {rate} vs {expected}");
        assert!((0.19..=0.21).contains(&rate));
    }

    #[test]
    fn substitution_p1_one_recovers_teacher_forcing() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![5, 5, 5], 3);
        let target = [1u32, 4, 2];
        let plan = SubstitutionPlan::teacher_forcing(3);
        let refined = vec![
            Refined {
                tokens: vec![0, 1],
                weights: vec![0.5, 0.5],
            };
            3
        ];
        let mut tape = Tape::new();
        let gt = dec.gt_input_embeddings(&mut tape, &store, &target);
        let sub = dec.apply_substitution(&mut tape, &store, &target, &plan, &refined);
        assert_eq!(tape.value(gt), tape.value(sub));

        // and the resulting logits equal a reference teacher-forced run
        let mut tape = Tape::new();
        let mem = tape.constant(memory(3));
        let ref_logits = dec
            .decode_teacher_forced(&mut tape, &store, mem, &target)
            .unwrap();
        let mem2 = tape.constant(memory(3));
        let inputs = dec.apply_substitution(&mut tape, &store, &target, &plan, &refined);
        let ssg_logits = dec.forward_levels(&mut tape, &store, mem2, inputs).unwrap();
        for (a, b) in ref_logits.iter().zip(&ssg_logits) {
            assert_eq!(tape.value(*a), tape.value(*b));
        }
    }

    #[test]
    fn substitution_all_positions_fused_when_p_zero() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![5, 5, 5], 3);
        let target = [1u32, 4, 2];
        let plan = SubstitutionPlan {
            keep_item: false,
            keep_token: vec![false; 3],
        };
        for l in 0..3 {
            assert!(plan.substituted(l));
        }
        let refined: Vec<Refined> = (0..3)
            .map(|l| Refined {
                tokens: vec![l as u32, (l + 1) as u32],
                weights: vec![0.7, 0.3],
            })
            .collect();
        let mut tape = Tape::new();
        let sub = dec.apply_substitution(&mut tape, &store, &target, &plan, &refined);
        // positions 1..L are fused mixes: each equals the weighted sum of
        // the named embedding rows (convex combination by construction)
        let table = store.value(dec.tok_emb).clone();
        let subv = tape.value(sub).clone();
        for l in 0..2 {
            let r = &refined[l];
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.weights.iter().all(|&w| w >= 0.0));
            for j in 0..8 {
                let want: f64 = r
                    .tokens
                    .iter()
                    .zip(&r.weights)
                    .map(|(&tok, &w)| w * table[[dec.vocab.global(l, tok), j]])
                    .sum();
                let got = subv[[l + 1, j]];
                assert!((got - want).abs() < 1e-12, "level {l} dim {j}");
            }
        }
    }

    #[test]
    fn fused_embedding_stays_in_convex_hull() {
        // 1-D least-squares membership: the fused vector reconstructs
        // exactly from the q rows with the stored nonnegative weights, so
        // the residual of the best affine fit is zero.
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![6, 6], 2);
        let logits = [1.0, 0.2, -0.5, 3.0, 0.0, -2.0];
        let r = refine_top_q(&logits, 3).unwrap();
        let table = store.value(dec.tok_emb).clone();
        let fused: Vec<f64> = (0..8)
            .map(|j| {
                r.tokens
                    .iter()
                    .zip(&r.weights)
                    .map(|(&tok, &w)| w * table[[dec.vocab.global(0, tok), j]])
                    .sum()
            })
            .collect();
        // residual of representing fused by these exact weights
        let resid: f64 = (0..8)
            .map(|j| {
                let recon: f64 = r
                    .tokens
                    .iter()
                    .zip(&r.weights)
                    .map(|(&tok, &w)| w * table[[dec.vocab.global(0, tok), j]])
                    .sum();
                (fused[j] - recon).powi(2)
            })
            .sum();
        assert!(resid < 1e-24);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn temperature_scale_cases() {
        // phi = 1 is the ordinary softmax
        let logits = [0.4, -0.3, 1.7];
        let p = temperature_scale(&logits, 1.0).unwrap();
        let max = 1.7f64;
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (a, b) in p.iter().zip(exps.iter().map(|e| e / sum)) {
            assert!((a - b).abs() < 1e-12);
        }
        // huge phi flattens toward uniform
        let p = temperature_scale(&[3.0, -1.0, 0.5, 2.0], 1e6).unwrap();
        let (mn, mx) = p
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        assert!(mx - mn < 1e-4);
        // [2, 0] at phi = 0.5 is softmax([4, 0])
        let p = temperature_scale(&[2.0, 0.0], 0.5).unwrap();
        let e4 = 4.0f64.exp();
        assert!((p[0] - e4 / (e4 + 1.0)).abs() < 1e-10);
        assert!((p[0] - 0.9820).abs() < 1e-4);
        assert!((p[1] - 0.0180).abs() < 1e-4);
        // non-positive temperature is an error
        assert!(temperature_scale(&[1.0], 0.0).is_err());
        assert!(temperature_scale(&[1.0], -2.0).is_err());
    }

    #[test]
    fn kl_identical_zero_and_hand_case() {
        let p = vec![0.2, 0.3, 0.5];
        assert!(kl_divergence(&p, &p).abs() < 1e-15);

        let p = vec![1.0, 0.0];
        let q = vec![0.5, 0.5];
        let kl_pq = kl_divergence(&p, &q);
        assert!((kl_pq - 2.0f64.ln()).abs() < 1e-12);
        // reverse term hits the floor on p's zero entry
        let kl_qp = kl_divergence(&q, &p);
        let want = 0.5 * (0.5f64.ln() - 0.0) + 0.5 * (0.5f64.ln() - KL_EPS.ln());
        assert!((kl_qp - want).abs() < 1e-9);

        let lan = vec![vec![p.clone()]];
        let id = vec![vec![q.clone()]];
        let sym_a = loss_kl_mutual(&lan, &id);
        let sym_b = loss_kl_mutual(&id, &lan);
        assert!((sym_a - sym_b).abs() < 1e-12, "symmetric under view swap");
        assert!((sym_a - (kl_pq + kl_qp)).abs() < 1e-12);
    }

    #[test]
    fn kl_tape_matches_plain_and_is_positive() {
        let mut rng = rng_for(3, "kl");
        for _ in 0..50 {
            let zl: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let zi: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let phi = 2.0;
            let mut tape = Tape::new();
            let l = tape.constant(Array2::from_shape_vec((1, 6), zl.clone()).unwrap());
            let i = tape.constant(Array2::from_shape_vec((1, 6), zi.clone()).unwrap());
            let kl = kl_pair_tape(&mut tape, l, i, phi).unwrap();
            let got = tape.scalar_value(kl);
            let pl = temperature_scale(&zl, phi).unwrap();
            let pi = temperature_scale(&zi, phi).unwrap();
            let want = kl_divergence(&pl, &pi) + kl_divergence(&pi, &pl);
            assert!((got - want).abs() < 1e-10);
            assert!(got >= 0.0);
        }
    }

    fn toy_trie(ids: &[Vec<u32>]) -> IdTrie {
        let mut trie = IdTrie::default();
        for (i, id) in ids.iter().enumerate() {
            trie.insert(id, i);
        }
        trie
    }

    #[test]
    fn generate_catalog_of_one() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![4, 4], 2);
        let trie = toy_trie(&[vec![2, 1]]);
        let out = dec.generate(&store, &memory(3), &trie, 10).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].item, 0);
        assert_eq!(out[0].tokens, vec![2, 1]);
    }

    #[test]
    fn generated_ids_always_resolve_to_catalog() {
        // randomized parameters, many trials; every emitted id must be in
        // the trie
        let ids: Vec<Vec<u32>> = vec![
            vec![0, 1],
            vec![0, 2],
            vec![1, 0],
            vec![2, 2, 0],
            vec![2, 2, 1],
        ];
        let trie = toy_trie(&ids);
        let mut trials = 0;
        for seed in 0..40 {
            let mut store = ParamStore::new();
            let mut rng = rng_for(seed, "gen");
            let dec = SsgDecoder::new(
                &mut store,
                dims(),
                VocabLayout::new(vec![3, 3, 2]),
                2,
                &mut rng,
            );
            let out = dec.generate(&store, &memory(3), &trie, 3).unwrap();
            assert!(!out.is_empty());
            for s in &out {
                trials += 1;
                assert_eq!(trie.accepts(&s.tokens), Some(s.item));
            }
        }
        assert!(trials >= 100);
    }

    #[test]
    fn full_beam_equals_exhaustive_scoring() {
        let ids: Vec<Vec<u32>> = vec![
            vec![0, 0],
            vec![0, 1],
            vec![1, 2],
            vec![2, 0, 0],
            vec![2, 0, 1],
            vec![1, 1],
        ];
        let trie = toy_trie(&ids);
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![3, 3, 2], 2);
        let mem = memory(4);
        let out = dec.generate(&store, &mem, &trie, ids.len()).unwrap();
        assert_eq!(out.len(), ids.len());

        // brute force: score every valid tuple by teacher forcing
        let mut brute: Vec<ScoredId> = ids
            .iter()
            .enumerate()
            .map(|(item, tokens)| ScoredId {
                item,
                tokens: tokens.clone(),
                score: dec.score_id_eval(&store, &mem, tokens).unwrap(),
            })
            .collect();
        brute.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        for (got, want) in out.iter().zip(&brute) {
            assert_eq!(got.item, want.item);
            assert!((got.score - want.score).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_wider_than_catalog_returns_all() {
        let ids: Vec<Vec<u32>> = vec![vec![0, 0], vec![1, 1]];
        let trie = toy_trie(&ids);
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![2, 2], 2);
        let out = dec.generate(&store, &memory(2), &trie, 50).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn generation_loss_targets_are_ground_truth_regardless_of_plan() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, vec![5, 5, 5], 3);
        let target = [1u32, 4, 2];
        let refined: Vec<Refined> = (0..3)
            .map(|_| Refined {
                tokens: vec![0, 1],
                weights: vec![0.6, 0.4],
            })
            .collect();
        let loss_for = |plan: &SubstitutionPlan, store: &ParamStore| {
            let mut tape = Tape::new();
            let mem = tape.constant(memory(3));
            let inputs = dec.apply_substitution(&mut tape, store, &target, plan, &refined);
            let logits = dec.forward_levels(&mut tape, store, mem, inputs).unwrap();
            // ce against ground truth: apply_substitution never rewrites targets
            let l = dec.generation_loss(&mut tape, &logits, &target);
            tape.scalar_value(l)
        };
        let tf = loss_for(&SubstitutionPlan::teacher_forcing(3), &store);
        let sub = loss_for(
            &SubstitutionPlan {
                keep_item: false,
                keep_token: vec![false, true, false],
            },
            &store,
        );
        assert!(tf.is_finite() && sub.is_finite());
        assert_ne!(tf, sub); // inputs differ...
                             // ...but both losses were computed against the same target tokens,
                             // which is what the call signature enforces structurally.
    }
}
