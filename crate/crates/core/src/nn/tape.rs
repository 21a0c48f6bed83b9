//! Reverse-mode automatic differentiation over 2-D f64 tensors.
//!
//! A fresh tape is built per training step; parameters enter as leaf nodes
//! and their gradients are accumulated back into the [`ParamStore`] on
//! `backward`. Ops cover exactly what the models need: matmul, row-wise
//! softmax family, layer norm, gather/concat plumbing, and the fused
//! cross-entropy head. Every backward rule is checked against central
//! finite differences in this module's tests.

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

type BackFn = Box<dyn Fn(&Array2<f64>) -> Vec<(usize, Array2<f64>)>>;

struct Node {
    value: Array2<f64>,
    back: Option<BackFn>,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, back: Option<BackFn>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, back, param });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "expected scalar node");
        m[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves ----

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, None, None)
    }

    pub fn scalar(&mut self, c: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), c))
    }

    /// Leaf backed by a store parameter; gradient flows into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), None, Some(id))
    }

    /// Leaf with the parameter's value but detached from the store.
    pub fn param_detached(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(a.0, g.clone()), (b.0, g.clone())]
            })),
            None,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            Some(Box::new(move |g| vec![(a.0, g.clone()), (b.0, -g)])),
            None,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = &av * &bv;
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(a.0, g * &bv), (b.0, g * &av)]
            })),
            None,
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Some(Box::new(move |g| vec![(a.0, g * c)])), None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul shape mismatch {:?} x {:?}",
            av.dim(),
            bv.dim()
        );
        let value = av.dot(&bv);
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(a.0, g.dot(&bv.t())), (b.0, av.t().dot(g))]
            })),
            None,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(
            value,
            Some(Box::new(move |g| vec![(a.0, g.t().to_owned())])),
            None,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let value = av.mapv(|x| x.max(0.0));
        self.push(
            value,
            Some(Box::new(move |g| {
                let mask = av.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a.0, g * &mask)]
            })),
            None,
        )
    }

    /// Broadcast-add a (1,d) row to every row of a (n,d) matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row).clone();
        assert_eq!(rv.nrows(), 1);
        assert_eq!(rv.ncols(), self.value(a).ncols());
        let value = self.value(a) + &rv;
        self.push(
            value,
            Some(Box::new(move |g| {
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(a.0, g.clone()), (row.0, db)]
            })),
            None,
        )
    }

    /// Gather rows by index (embedding lookup, position slices).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let (n, d) = (av.nrows(), av.ncols());
        let mut value = Array2::zeros((idx.len(), d));
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < n, "row index {i} out of bounds {n}");
            value.row_mut(k).assign(&av.row(i));
        }
        let idx = idx.to_vec();
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut da = Array2::zeros((n, d));
                for (k, &i) in idx.iter().enumerate() {
                    let mut r = da.row_mut(i);
                    r += &g.row(k);
                }
                vec![(a.0, da)]
            })),
            None,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = Array2::zeros((total, d));
        let mut offsets = Vec::with_capacity(parts.len());
        let mut at = 0usize;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), d);
            value.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            offsets.push((p.0, at, pv.nrows()));
            at += pv.nrows();
        }
        self.push(
            value,
            Some(Box::new(move |g| {
                offsets
                    .iter()
                    .map(|&(pid, off, rows)| (pid, g.slice(s![off..off + rows, ..]).to_owned()))
                    .collect()
            })),
            None,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((n, total));
        let mut offsets = Vec::with_capacity(parts.len());
        let mut at = 0usize;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), n);
            value.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            offsets.push((p.0, at, pv.ncols()));
            at += pv.ncols();
        }
        self.push(
            value,
            Some(Box::new(move |g| {
                offsets
                    .iter()
                    .map(|&(pid, off, cols)| (pid, g.slice(s![.., off..off + cols]).to_owned()))
                    .collect()
            })),
            None,
        )
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = self.value(a);
        let (n, d) = (av.nrows(), av.ncols());
        assert!(from <= to && to <= d);
        let value = av.slice(s![.., from..to]).to_owned();
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut da = Array2::zeros((n, d));
                da.slice_mut(s![.., from..to]).assign(g);
                vec![(a.0, da)]
            })),
            None,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let sv = value.clone();
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut da = Array2::zeros(sv.raw_dim());
                for i in 0..sv.nrows() {
                    let srow = sv.row(i);
                    let grow = g.row(i);
                    let dot: f64 = srow.iter().zip(grow.iter()).map(|(s, g)| s * g).sum();
                    for j in 0..sv.ncols() {
                        da[[i, j]] = srow[j] * (grow[j] - dot);
                    }
                }
                vec![(a.0, da)]
            })),
            None,
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = log_softmax_rows(av);
        let sm = softmax_rows(av);
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut da = g.clone();
                for i in 0..sm.nrows() {
                    let gsum: f64 = g.row(i).sum();
                    for j in 0..sm.ncols() {
                        da[[i, j]] -= sm[[i, j]] * gsum;
                    }
                }
                vec![(a.0, da)]
            })),
            None,
        )
    }

    /// Row-wise layer norm with learnable (1,d) gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let (n, d) = (xv.nrows(), xv.ncols());
        assert_eq!(gv.dim(), (1, d));
        assert_eq!(bv.dim(), (1, d));

        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * istd;
            }
        }
        let mut value = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                value[[i, j]] = gv[[0, j]] * xhat[[i, j]] + bv[[0, j]];
            }
        }
        let xhat_c = xhat;
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut dx = Array2::zeros((n, d));
                let mut dgamma = Array2::zeros((1, d));
                let mut dbeta = Array2::zeros((1, d));
                for i in 0..n {
                    let mut gg = vec![0.0; d];
                    for j in 0..d {
                        gg[j] = g[[i, j]] * gv[[0, j]];
                        dgamma[[0, j]] += g[[i, j]] * xhat_c[[i, j]];
                        dbeta[[0, j]] += g[[i, j]];
                    }
                    let mean_gg: f64 = gg.iter().sum::<f64>() / d as f64;
                    let mean_gg_xhat: f64 = gg
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * xhat_c[[i, j]])
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        dx[[i, j]] =
                            (gg[j] - mean_gg - xhat_c[[i, j]] * mean_gg_xhat) * inv_std[i];
                    }
                }
                vec![(x.0, dx), (gamma.0, dgamma), (beta.0, dbeta)]
            })),
            None,
        )
    }

    /// Mean of the selected rows → (1,d).
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty());
        let sel = self.select_rows(a, rows);
        let summed = self.sum_all_rows(sel);
        self.scale(summed, 1.0 / rows.len() as f64)
    }

    /// Sum of the selected rows → (1,d).
    pub fn sum_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let sel = self.select_rows(a, rows);
        self.sum_all_rows(sel)
    }

    /// Column-wise sum over all rows → (1,d).
    pub fn sum_all_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, d) = (av.nrows(), av.ncols());
        let value = av.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut da = Array2::zeros((n, d));
                for i in 0..n {
                    da.row_mut(i).assign(&g.row(0));
                }
                vec![(a.0, da)]
            })),
            None,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, d) = (av.nrows(), av.ncols());
        let value = Array2::from_elem((1, 1), av.sum());
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(a.0, Array2::from_elem((n, d), g[[0, 0]]))]
            })),
            None,
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over rows of `-log softmax(logits)[i, target_i]` — the fused
    /// token-level cross-entropy head.
    pub fn ce_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, v) = (lv.nrows(), lv.ncols());
        assert_eq!(targets.len(), n);
        let sm = softmax_rows(lv);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < v, "target {t} out of vocab {v}");
            total -= sm[[i, t]].max(1e-300).ln();
        }
        let value = Array2::from_elem((1, 1), total / n as f64);
        let targets = targets.to_vec();
        self.push(
            value,
            Some(Box::new(move |g| {
                let scale = g[[0, 0]] / n as f64;
                let mut da = &sm * scale;
                for (i, &t) in targets.iter().enumerate() {
                    da[[i, t]] -= scale;
                }
                vec![(logits.0, da)]
            })),
            None,
        )
    }

    /// Run reverse accumulation from a scalar root. Parameter gradients are
    /// added into the store (call `zero_grads` between steps).
    pub fn backward(&self, root: Var, store: &mut ParamStore) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(pid) = node.param {
                store.accumulate_grad(pid, &g);
            }
            if let Some(back) = &node.back {
                for (pid, pg) in back(&g) {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
    }
}

/// Numerically stable row-wise softmax (plain function, shared with
/// eval-only code paths).
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= logsum;
        }
    }
    out
}
