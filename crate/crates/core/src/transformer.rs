//! Transformer building blocks shared by the two view encoders, the ID
//! decoder, and the auxiliary sequential recommender: multi-head attention
//! with additive masks, post-norm residual blocks, and learned absolute
//! positions.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Var};

pub const LN_EPS: f64 = 1e-9;
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
}

impl ArchDims {
    pub fn head_dim(&self) -> usize {
        assert_eq!(self.d_model % self.n_heads, 0, "heads must divide d_model");
        self.d_model / self.n_heads
    }
}

struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct LnIds {
    g: ParamId,
    b: ParamId,
}

fn register_attn(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> AttnIds {
    let s = (1.0 / d as f64).sqrt();
    AttnIds {
        wq: store.register_randn(&format!("{prefix}.wq"), d, d, s, rng),
        wk: store.register_randn(&format!("{prefix}.wk"), d, d, s, rng),
        wv: store.register_randn(&format!("{prefix}.wv"), d, d, s, rng),
        wo: store.register_randn(&format!("{prefix}.wo"), d, d, s, rng),
    }
}

fn register_ffn(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    ffn: usize,
    rng: &mut ChaCha8Rng,
) -> FfnIds {
    FfnIds {
        w1: store.register_randn(&format!("{prefix}.w1"), d, ffn, (1.0 / d as f64).sqrt(), rng),
        b1: store.register_zeros(&format!("{prefix}.b1"), 1, ffn),
        w2: store.register_randn(
            &format!("{prefix}.w2"),
            ffn,
            d,
            (1.0 / ffn as f64).sqrt(),
            rng,
        ),
        b2: store.register_zeros(&format!("{prefix}.b2"), 1, d),
    }
}

fn register_ln(store: &mut ParamStore, prefix: &str, d: usize) -> LnIds {
    LnIds {
        g: store.register_const(&format!("{prefix}.g"), 1, d, 1.0),
        b: store.register_zeros(&format!("{prefix}.b"), 1, d),
    }
}

/// Additive attention masks: 0 keeps a (query, key) pair, -1e30 removes it.
#[derive(Debug, Clone, Copy)]
pub enum AttnMask {
    /// Keys at positions >= real_len are padding.
    Padding { real_len: usize },
    /// Strict causal: key position > query position is hidden.
    Causal,
    /// Causal among the first `real_len` keys, padding after.
    CausalPadded { real_len: usize },
    None,
}

fn mask_matrix(mask: AttnMask, n_q: usize, n_k: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_q, n_k));
    match mask {
        AttnMask::None => {}
        AttnMask::Padding { real_len } => {
            for i in 0..n_q {
                for j in real_len..n_k {
                    m[[i, j]] = MASKED;
                }
            }
        }
        AttnMask::Causal => {
            for i in 0..n_q {
                for j in (i + 1)..n_k {
                    m[[i, j]] = MASKED;
                }
            }
        }
        AttnMask::CausalPadded { real_len } => {
            for i in 0..n_q {
                for j in 0..n_k {
                    if j > i || j >= real_len {
                        m[[i, j]] = MASKED;
                    }
                }
            }
        }
    }
    m
}

fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &AttnIds,
    dims: &ArchDims,
    queries: Var,
    keys_values: Var,
    mask: AttnMask,
) -> Var {
    let n_q = tape.value(queries).nrows();
    let n_k = tape.value(keys_values).nrows();
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let wq = tape.param(store, ids.wq);
    let wk = tape.param(store, ids.wk);
    let wv = tape.param(store, ids.wv);
    let wo = tape.param(store, ids.wo);
    let q = tape.matmul(queries, wq);
    let k = tape.matmul(keys_values, wk);
    let v = tape.matmul(keys_values, wv);

    let mask = tape.constant(mask_matrix(mask, n_q, n_k));
    let mut heads = Vec::with_capacity(dims.n_heads);
    for h in 0..dims.n_heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, from, to);
        let kh = tape.slice_cols(k, from, to);
        let vh = tape.slice_cols(v, from, to);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask);
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    tape.matmul(ctx, wo)
}

fn ffn_block(tape: &mut Tape, store: &ParamStore, ids: &FfnIds, x: Var) -> Var {
    let w1 = tape.param(store, ids.w1);
    let b1 = tape.param(store, ids.b1);
    let w2 = tape.param(store, ids.w2);
    let b2 = tape.param(store, ids.b2);
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let out = tape.matmul(h, w2);
    tape.add_row(out, b2)
}

fn layer_norm(tape: &mut Tape, store: &ParamStore, ids: &LnIds, x: Var) -> Var {
    let g = tape.param(store, ids.g);
    let b = tape.param(store, ids.b);
    tape.layer_norm_rows(x, g, b, LN_EPS)
}

struct EncoderLayer {
    attn: AttnIds,
    ffn: FfnIds,
    ln1: LnIds,
    ln2: LnIds,
}

/// Post-norm Transformer encoder with learned absolute positions.
pub struct TransformerEncoder {
    pub dims: ArchDims,
    pub max_len: usize,
    pub pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: ArchDims,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = dims.d_model;
        let pos_emb = store.register_randn(
            &format!("{prefix}.pos"),
            max_len,
            d,
            (1.0 / d as f64).sqrt(),
            rng,
        );
        let layers = (0..dims.n_layers)
            .map(|l| EncoderLayer {
                attn: register_attn(store, &format!("{prefix}.layer{l}.attn"), d, rng),
                ffn: register_ffn(store, &format!("{prefix}.layer{l}.ffn"), d, dims.ffn_dim, rng),
                ln1: register_ln(store, &format!("{prefix}.layer{l}.ln1"), d),
                ln2: register_ln(store, &format!("{prefix}.layer{l}.ln2"), d),
            })
            .collect();
        Self {
            dims,
            max_len,
            pos_emb,
            layers,
        }
    }

    /// Encode a (len, d) input. Rows at positions >= `real_len` are
    /// padding: masked out of attention and meaningless in the output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        real_len: usize,
        causal: bool,
    ) -> Result<Var> {
        let len = tape.value(input).nrows();
        if len > self.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.max_len,
            });
        }
        let positions: Vec<usize> = (0..len).collect();
        let pos_table = tape.param(store, self.pos_emb);
        let pos = tape.select_rows(pos_table, &positions);
        let mut x = tape.add(input, pos);
        let mask = if causal {
            AttnMask::CausalPadded { real_len }
        } else {
            AttnMask::Padding { real_len }
        };
        for layer in &self.layers {
            let attn = multi_head_attention(tape, store, &layer.attn, &self.dims, x, x, mask);
            let res = tape.add(x, attn);
            x = layer_norm(tape, store, &layer.ln1, res);
            let ffn = ffn_block(tape, store, &layer.ffn, x);
            let res = tape.add(x, ffn);
            x = layer_norm(tape, store, &layer.ln2, res);
        }
        Ok(x)
    }
}

struct DecoderLayer {
    self_attn: AttnIds,
    cross_attn: AttnIds,
    ffn: FfnIds,
    ln1: LnIds,
    ln2: LnIds,
    ln3: LnIds,
}

/// Post-norm Transformer decoder: causal self-attention, cross-attention
/// over an encoder memory, FFN.
pub struct TransformerDecoder {
    pub dims: ArchDims,
    pub max_len: usize,
    pub pos_emb: ParamId,
    layers: Vec<DecoderLayer>,
}

impl TransformerDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: ArchDims,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = dims.d_model;
        let pos_emb = store.register_randn(
            &format!("{prefix}.pos"),
            max_len,
            d,
            (1.0 / d as f64).sqrt(),
            rng,
        );
        let layers = (0..dims.n_layers)
            .map(|l| DecoderLayer {
                self_attn: register_attn(store, &format!("{prefix}.layer{l}.self"), d, rng),
                cross_attn: register_attn(store, &format!("{prefix}.layer{l}.cross"), d, rng),
                ffn: register_ffn(store, &format!("{prefix}.layer{l}.ffn"), d, dims.ffn_dim, rng),
                ln1: register_ln(store, &format!("{prefix}.layer{l}.ln1"), d),
                ln2: register_ln(store, &format!("{prefix}.layer{l}.ln2"), d),
                ln3: register_ln(store, &format!("{prefix}.layer{l}.ln3"), d),
            })
            .collect();
        Self {
            dims,
            max_len,
            pos_emb,
            layers,
        }
    }

    /// `target_inputs` is the (len, d) shifted input embedding sequence;
    /// `memory` holds only real positions.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        target_inputs: Var,
        memory: Var,
    ) -> Result<Var> {
        let len = tape.value(target_inputs).nrows();
        if len > self.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.max_len,
            });
        }
        let positions: Vec<usize> = (0..len).collect();
        let pos_table = tape.param(store, self.pos_emb);
        let pos = tape.select_rows(pos_table, &positions);
        let mut x = tape.add(target_inputs, pos);
        for layer in &self.layers {
            let attn = multi_head_attention(
                tape,
                store,
                &layer.self_attn,
                &self.dims,
                x,
                x,
                AttnMask::Causal,
            );
            let res = tape.add(x, attn);
            x = layer_norm(tape, store, &layer.ln1, res);
            let cross = multi_head_attention(
                tape,
                store,
                &layer.cross_attn,
                &self.dims,
                x,
                memory,
                AttnMask::None,
            );
            let res = tape.add(x, cross);
            x = layer_norm(tape, store, &layer.ln2, res);
            let ffn = ffn_block(tape, store, &layer.ffn, x);
            let res = tape.add(x, ffn);
            x = layer_norm(tape, store, &layer.ln3, res);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn dims() -> ArchDims {
        ArchDims {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            n_layers: 2,
        }
    }

    fn hand_layer_norm(x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * istd;
            }
        }
        out
    }

    #[test]
    fn zero_weights_reduce_to_layer_norm_of_input() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(0, "init");
        let enc = TransformerEncoder::new(&mut store, "enc", dims(), 10, &mut rng);
        // zero every weight matrix and the positions; layer norms stay at
        // their defaults (gain 1, bias 0)
        for name in store.sorted_names() {
            if !name.contains(".ln") {
                let id = store.id(&name).unwrap();
                store.value_mut(id).fill(0.0);
            }
        }
        let input = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64 * 0.3).sin());
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = enc.forward(&mut tape, &store, x, 4, false).unwrap();
        let want = hand_layer_norm(&input);
        let got = tape.value(out);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn padding_positions_do_not_affect_real_outputs() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, "init");
        let enc = TransformerEncoder::new(&mut store, "enc", dims(), 10, &mut rng);
        let real = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64 * 0.17).cos());

        let run = |pad_rows: &[f64]| {
            let mut input = Array2::zeros((3 + pad_rows.len() / 8, 8));
            for i in 0..3 {
                input.row_mut(i).assign(&real.row(i));
            }
            for (k, &v) in pad_rows.iter().enumerate() {
                input[[3 + k / 8, k % 8]] = v;
            }
            let mut tape = Tape::new();
            let x = tape.constant(input);
            let out = enc.forward(&mut tape, &store, x, 3, false).unwrap();
            tape.value(out).clone()
        };

        let a = run(&[0.0; 16]);
        let pad: Vec<f64> = (0..16).map(|i| (i as f64) * 3.7 - 5.0).collect();
        let b = run(&pad);
        for i in 0..3 {
            for j in 0..8 {
                assert!(
                    (a[[i, j]] - b[[i, j]]).abs() < 1e-6,
                    "row {i} col {j}: {} vs {}",
                    a[[i, j]],
                    b[[i, j]]
                );
            }
        }
    }

    #[test]
    fn causal_mask_hides_future() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(2, "init");
        let enc = TransformerEncoder::new(&mut store, "enc", dims(), 10, &mut rng);
        let base = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64 * 0.11).sin());
        let mut altered = base.clone();
        for j in 0..8 {
            altered[[3, j]] = -altered[[3, j]] + 0.5;
        }
        let run = |input: &Array2<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let out = enc.forward(&mut tape, &store, x, 4, true).unwrap();
            tape.value(out).clone()
        };
        let a = run(&base);
        let b = run(&altered);
        // changing the last position leaves positions 0..3 untouched
        for i in 0..3 {
            for j in 0..8 {
                assert!((a[[i, j]] - b[[i, j]]).abs() < 1e-9);
            }
        }
        // ...and does change the last position
        let diff: f64 = (0..8).map(|j| (a[[3, j]] - b[[3, j]]).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn decoder_runs_and_respects_memory() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(3, "init");
        let dec = TransformerDecoder::new(&mut store, "dec", dims(), 6, &mut rng);
        let tgt = Array2::from_shape_fn((3, 8), |(i, j)| ((i + j) as f64 * 0.21).sin());
        let mem1 = Array2::from_shape_fn((5, 8), |(i, j)| ((i * j) as f64 * 0.13).cos());
        let mut mem2 = mem1.clone();
        mem2[[0, 0]] += 1.0;
        let run = |mem: &Array2<f64>| {
            let mut tape = Tape::new();
            let t = tape.constant(tgt.clone());
            let m = tape.constant(mem.clone());
            let out = dec.forward(&mut tape, &store, t, m).unwrap();
            tape.value(out).clone()
        };
        let a = run(&mem1);
        let b = run(&mem2);
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "memory change must reach the output");
    }

    #[test]
    fn sequence_longer_than_max_errors() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(4, "init");
        let enc = TransformerEncoder::new(&mut store, "enc", dims(), 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Array2::zeros((5, 8)));
        assert!(matches!(
            enc.forward(&mut tape, &store, x, 5, false),
            Err(Error::SequenceTooLong { len: 5, max: 3 })
        ));
    }

    #[test]
    fn encoder_gradients_flow_to_all_parameters() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(5, "init");
        let enc = TransformerEncoder::new(&mut store, "enc", dims(), 6, &mut rng);
        let input = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64 * 0.29).sin());
        store.zero_grads();
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let out = enc.forward(&mut tape, &store, x, 4, false).unwrap();
        let sq = tape.mul(out, out);
        let root = tape.sum_all(sq);
        tape.backward(root, &mut store);
        for (id, e) in store.iter() {
            let gnorm: f64 = store.grad(id).iter().map(|g| g * g).sum();
            assert!(gnorm > 0.0, "no gradient reached {}", e.name);
        }
    }
}
