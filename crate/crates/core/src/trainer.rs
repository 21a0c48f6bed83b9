//! Training: the composite objective, the pre-training stage over both
//! views, the fine-tuning stage with frozen encoders and retrieval-
//! augmented decoder memory, and read-only inference.
//!
//! Objective: L = L_lang + L_id + λ1·L_item + λ2·L_user + λ3·L_KL, where
//! the generation losses are token-level cross-entropy against the
//! ground-truth ID tokens. With the language view disabled only L_id
//! remains (the plain generative backbone).

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::SplitDataset;
use crate::decoder::{kl_pair_tape, ScoredId, SsgDecoder, SubstitutionPlan};
use crate::encoders::{loss_item_alignment, loss_user_alignment, DualEncoders};
use crate::error::{Error, Result};
use crate::nn::{AdamW, CosineSchedule, ParamStore, Tape, Var};
use crate::retrieval::{PreferenceCache, RetrievalContext};
use crate::semid::IdAssignment;
use crate::textembed::{ProjectionNet, TextEmbeddings};
use crate::util::{io_err, read_f64_vec, rng_for, write_f64_slice};

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

pub struct Model {
    pub store: ParamStore,
    pub proj: ProjectionNet,
    pub encoders: DualEncoders,
    pub decoder: SsgDecoder,
}

impl Model {
    pub fn new(cfg: &ExperimentConfig, assignment: &IdAssignment, d_ext: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rng_for(cfg.seed, "init");
        let proj = ProjectionNet::new(&mut store, "proj", d_ext, cfg.d_model, &mut rng);
        let k = assignment.k;
        let enc_vocab = assignment.vocab.level_range(k - 1).1;
        let encoders = DualEncoders::new(
            &mut store,
            cfg.enc_dims(),
            k,
            enc_vocab,
            cfg.token_emb_dim,
            cfg.max_seq_len,
            &mut rng,
        );
        let decoder = SsgDecoder::new(
            &mut store,
            cfg.dec_dims(),
            assignment.vocab.clone(),
            k,
            &mut rng,
        );
        Self {
            store,
            proj,
            encoders,
            decoder,
        }
    }

    /// Hash of the ID-view encoder parameters; preference caches are valid
    /// exactly as long as this does not change.
    pub fn encoder_hash(&self) -> String {
        self.store.checksum_prefix("enc_id")
    }

    /// Fine-tuning trains the decoder group only.
    pub fn freeze_for_finetune(&mut self) {
        self.store.set_all_trainable(true);
        self.store.set_trainable_prefix("proj", false);
        self.store.set_trainable_prefix("enc_lang", false);
        self.store.set_trainable_prefix("enc_id", false);
    }

    pub fn unfreeze_all(&mut self) {
        self.store.set_all_trainable(true);
    }

    /// Token-level ID-view encoding of an item sequence, outside any
    /// training tape (used where encoders are frozen).
    pub fn encode_id_eval(&self, assignment: &IdAssignment, items: &[usize]) -> Array2<f64> {
        let mut tape = Tape::new();
        let tokens: Vec<usize> = items
            .iter()
            .flat_map(|&it| assignment.encoder_tokens(it))
            .collect();
        let c = self
            .encoders
            .encode_id(&mut tape, &self.store, &tokens, items.len())
            .expect("sequence within bounds");
        tape.value(c).clone()
    }

    /// Pooled ID-view preference vector q_u for a train-split sequence.
    pub fn preference_q(&self, assignment: &IdAssignment, items: &[usize]) -> Vec<f64> {
        let c = self.encode_id_eval(assignment, items);
        let n = c.nrows() as f64;
        (0..c.ncols())
            .map(|j| c.column(j).sum() / n)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Training data plumbing
// ---------------------------------------------------------------------------

pub struct TrainData<'a> {
    pub split: &'a SplitDataset,
    pub embeddings: &'a TextEmbeddings,
    pub assignment: &'a IdAssignment,
}

/// One next-item prediction task: a chronological input prefix and the
/// ground-truth next item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub input_items: Vec<usize>,
    pub target_item: usize,
}

/// Training examples for one epoch: per user, prefix→next pairs within the
/// train split. `prefixes_per_user` caps how many are drawn (the final
/// prefix is always kept); 0 keeps them all. Order is shuffled, all
/// deterministic in (seed, epoch).
pub fn epoch_examples(data: &TrainData, cfg: &ExperimentConfig, epoch: usize) -> Vec<Example> {
    let mut rng = rng_for(cfg.seed, &format!("data-epoch-{epoch}"));
    let mut out = Vec::new();
    for (u, us) in data.split.user_splits.iter().enumerate() {
        let n = us.train.len();
        let mut ts: Vec<usize> = (1..n).collect();
        if cfg.prefixes_per_user > 0 && ts.len() > cfg.prefixes_per_user {
            let last = n - 1;
            let mut pool: Vec<usize> = (1..n - 1).collect();
            pool.shuffle(&mut rng);
            ts = pool[..cfg.prefixes_per_user - 1].to_vec();
            ts.push(last);
            ts.sort_unstable();
        }
        for t in ts {
            out.push(Example {
                user: u,
                input_items: us.train[..t].to_vec(),
                target_item: us.train[t],
            });
        }
    }
    out.shuffle(&mut rng);
    out
}

/// Validation task per user: the full train prefix predicts the
/// held-out validation item.
pub fn validation_examples(data: &TrainData) -> Vec<Example> {
    data.split
        .user_splits
        .iter()
        .enumerate()
        .map(|(u, us)| Example {
            user: u,
            input_items: us.valid_input(),
            target_item: us.valid,
        })
        .collect()
}

/// Test-time task per user: train + validation items predict the test
/// item.
pub fn test_examples(data: &TrainData) -> Vec<Example> {
    data.split
        .user_splits
        .iter()
        .enumerate()
        .map(|(u, us)| Example {
            user: u,
            input_items: us.test_input(),
            target_item: us.test,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Composite loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub gen_lang: f64,
    pub gen_id: f64,
    pub item_align: f64,
    pub user_align: f64,
    pub kl: f64,
}

impl LossBreakdown {
    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("gen_lang", self.gen_lang),
            ("gen_id", self.gen_id),
            ("item_align", self.item_align),
            ("user_align", self.user_align),
            ("kl", self.kl),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term: name.into() });
            }
        }
        Ok(())
    }
}

/// Draw one substitution plan per example from the dedicated stream.
pub fn draw_plans(
    cfg: &ExperimentConfig,
    n: usize,
    k: usize,
    epoch: usize,
) -> Vec<SubstitutionPlan> {
    let mut rng = rng_for(cfg.seed, &format!("substitution-epoch-{epoch}"));
    (0..n)
        .map(|_| SubstitutionPlan::draw(&mut rng, cfg.p1, cfg.p2, k))
        .collect()
}

/// The five loss components of one batch, as tape nodes.
pub struct BatchComponents {
    pub gen_lang: Var,
    pub gen_id: Var,
    pub item_align: Var,
    pub user_align: Var,
    pub kl: Var,
}

/// Build every loss component for one batch on the given tape. `plans`
/// carries one substitution plan per example (None = teacher forcing, as
/// in validation and the SSG-off ablation). `frozen_refined` substitutes
/// precomputed language-view fusion distributions — gradients never flow
/// through the fusion weights, so gradient checks freeze them alongside
/// the plan.
pub fn batch_components(
    tape: &mut Tape,
    model: &Model,
    data: &TrainData,
    examples: &[Example],
    cfg: &ExperimentConfig,
    plans: Option<&[SubstitutionPlan]>,
    frozen_refined: Option<&[Vec<crate::decoder::Refined>]>,
) -> Result<BatchComponents> {
    assert!(!examples.is_empty());
    if let Some(p) = plans {
        assert_eq!(p.len(), examples.len());
    }
    let store = &model.store;
    let use_lang = cfg.use_language_view;
    let k = model.encoders.k;

    // Project all distinct items of the batch once.
    let mut batch_items: Vec<usize> = examples
        .iter()
        .flat_map(|e| e.input_items.iter().copied())
        .collect();
    batch_items.sort_unstable();
    batch_items.dedup();
    let item_row: std::collections::BTreeMap<usize, usize> = batch_items
        .iter()
        .enumerate()
        .map(|(row, &it)| (it, row))
        .collect();
    let proj_all = if use_lang {
        let mut raw = Array2::zeros((batch_items.len(), data.embeddings.dim()));
        for (row, &it) in batch_items.iter().enumerate() {
            raw.row_mut(row).assign(&data.embeddings.matrix.row(it));
        }
        Some(model.proj.project(tape, store, &raw)?)
    } else {
        None
    };

    let mut gen_lang_terms: Vec<Var> = Vec::new();
    let mut gen_id_terms: Vec<Var> = Vec::new();
    let mut kl_terms: Vec<Var> = Vec::new();
    // first-occurrence item views for the item-level alignment
    let mut item_seen: std::collections::BTreeSet<usize> = Default::default();
    let mut item_h: Vec<Var> = Vec::new();
    let mut item_g: Vec<Var> = Vec::new();
    // one anchor per distinct user for the preference alignment
    let mut user_seen: std::collections::BTreeSet<usize> = Default::default();
    let mut user_p: Vec<Var> = Vec::new();
    let mut user_q: Vec<Var> = Vec::new();

    for (i, ex) in examples.iter().enumerate() {
        let n_items = ex.input_items.len();
        let target = &data.assignment.ids[ex.target_item].tokens;

        // ID view
        let tokens: Vec<usize> = ex
            .input_items
            .iter()
            .flat_map(|&it| data.assignment.encoder_tokens(it))
            .collect();
        let c_u = model.encoders.encode_id(tape, store, &tokens, n_items)?;

        // Language view
        let h_u = if use_lang {
            let rows: Vec<usize> = ex.input_items.iter().map(|it| item_row[it]).collect();
            let seq = tape.select_rows(proj_all.unwrap(), &rows);
            Some(model.encoders.encode_language(tape, store, seq, n_items)?)
        } else {
            None
        };

        // Language-view decode: generation loss and the SSG source.
        let mut refined = None;
        let mut lan_logits = None;
        if let Some(h_u) = h_u {
            let (logits, r) = if let Some(frozen) = frozen_refined {
                let logits = model.decoder.decode_teacher_forced(tape, store, h_u, target)?;
                (logits, frozen[i].clone())
            } else if cfg.ssg_teacher_forced {
                model
                    .decoder
                    .language_view_predict(tape, store, h_u, target, cfg.fusion_q)?
            } else {
                language_view_predict_free_running(model, tape, h_u, target, cfg.fusion_q)?
            };
            gen_lang_terms.push(model.decoder.generation_loss(tape, &logits, target));
            refined = Some(r);
            lan_logits = Some(logits);
        }

        // ID-view decode, with substituted inputs during SSG training.
        let id_inputs = match (plans, &refined) {
            (Some(plans), Some(refined)) if cfg.ssg_enabled => {
                model
                    .decoder
                    .apply_substitution(tape, store, target, &plans[i], refined)
            }
            _ => model.decoder.gt_input_embeddings(tape, store, target),
        };
        let id_logits = model.decoder.forward_levels(tape, store, c_u, id_inputs)?;
        gen_id_terms.push(model.decoder.generation_loss(tape, &id_logits, target));

        // Mutual KL over the first k levels.
        if cfg.ssg_enabled && cfg.lambda_kl != 0.0 {
            if let Some(lan_logits) = &lan_logits {
                let mut acc: Option<Var> = None;
                for l in 0..k.min(target.len()) {
                    let kl = kl_pair_tape(tape, lan_logits[l], id_logits[l], cfg.phi)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, kl),
                        None => kl,
                    });
                }
                if let Some(a) = acc {
                    kl_terms.push(a);
                }
            }
        }

        // Alignment anchors.
        if use_lang {
            let h_u = h_u.unwrap();
            for (pos, &it) in ex.input_items.iter().enumerate() {
                if item_seen.insert(it) {
                    item_h.push(tape.select_rows(h_u, &[pos]));
                    item_g.push(model.encoders.item_id_repr(tape, c_u, pos));
                }
            }
            if user_seen.insert(ex.user) {
                user_p.push(model.encoders.pool(tape, h_u, n_items));
                user_q.push(model.encoders.pool(tape, c_u, n_items * k));
            }
        }
    }

    let n = examples.len() as f64;
    let mean_of = |tape: &mut Tape, terms: &[Var]| -> Var {
        let sum = terms
            .iter()
            .copied()
            .reduce(|a, b| tape.add(a, b))
            .expect("non-empty");
        tape.scale(sum, 1.0 / n)
    };

    let gen_lang = if gen_lang_terms.is_empty() {
        tape.constant(Array2::zeros((1, 1)))
    } else {
        mean_of(tape, &gen_lang_terms)
    };
    let gen_id = mean_of(tape, &gen_id_terms);
    let kl = if kl_terms.is_empty() {
        tape.constant(Array2::zeros((1, 1)))
    } else {
        mean_of(tape, &kl_terms)
    };
    let (item_align, user_align) = if use_lang {
        let h = tape.concat_rows(&item_h);
        let g = tape.concat_rows(&item_g);
        let item = loss_item_alignment(tape, h, g, cfg.tau)?;
        let p = tape.concat_rows(&user_p);
        let q = tape.concat_rows(&user_q);
        let user = loss_user_alignment(tape, p, q, cfg.tau)?;
        (item, user)
    } else {
        let a = tape.constant(Array2::zeros((1, 1)));
        let b = tape.constant(Array2::zeros((1, 1)));
        (a, b)
    };

    Ok(BatchComponents {
        gen_lang,
        gen_id,
        item_align,
        user_align,
        kl,
    })
}

/// Precompute each example's refined language-view distributions at the
/// current parameters, to be frozen across a gradient check.
pub fn compute_refined(
    model: &Model,
    data: &TrainData,
    examples: &[Example],
    cfg: &ExperimentConfig,
) -> Result<Vec<Vec<crate::decoder::Refined>>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut tape = Tape::new();
        let mut raw = Array2::zeros((ex.input_items.len(), data.embeddings.dim()));
        for (row, &it) in ex.input_items.iter().enumerate() {
            raw.row_mut(row).assign(&data.embeddings.matrix.row(it));
        }
        let seq = model.proj.project(&mut tape, &model.store, &raw)?;
        let h_u =
            model
                .encoders
                .encode_language(&mut tape, &model.store, seq, ex.input_items.len())?;
        let target = &data.assignment.ids[ex.target_item].tokens;
        let (_, refined) = model.decoder.language_view_predict(
            &mut tape,
            &model.store,
            h_u,
            target,
            cfg.fusion_q,
        )?;
        out.push(refined);
    }
    Ok(out)
}

/// Full objective for one batch on a fresh tape:
/// L = L_lang + L_id + λ1·L_item + λ2·L_user + λ3·L_KL.
pub fn total_loss(
    model: &Model,
    data: &TrainData,
    examples: &[Example],
    cfg: &ExperimentConfig,
    plans: Option<&[SubstitutionPlan]>,
) -> Result<(Tape, Var, LossBreakdown)> {
    let mut tape = Tape::new();
    let parts = batch_components(&mut tape, model, data, examples, cfg, plans, None)?;
    let item_w = tape.scale(parts.item_align, cfg.lambda_item);
    let user_w = tape.scale(parts.user_align, cfg.lambda_user);
    let kl_w = tape.scale(parts.kl, cfg.lambda_kl);
    let mut total = tape.add(parts.gen_id, item_w);
    total = tape.add(total, user_w);
    total = tape.add(total, kl_w);
    total = tape.add(total, parts.gen_lang);

    let breakdown = LossBreakdown {
        total: tape.scalar_value(total),
        gen_lang: tape.scalar_value(parts.gen_lang),
        gen_id: tape.scalar_value(parts.gen_id),
        item_align: tape.scalar_value(parts.item_align),
        user_align: tape.scalar_value(parts.user_align),
        kl: tape.scalar_value(parts.kl),
    };
    breakdown.check_finite()?;
    Ok((tape, total, breakdown))
}

/// One named component of the objective, with the substitution plan and
/// refined distributions frozen — the form whose analytic gradient is
/// checkable against central finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    GenLang,
    GenIdSsg,
    ItemAlign,
    UserAlign,
    Kl,
}

pub fn component_loss(
    model: &Model,
    data: &TrainData,
    examples: &[Example],
    cfg: &ExperimentConfig,
    plans: &[SubstitutionPlan],
    frozen_refined: &[Vec<crate::decoder::Refined>],
    component: LossComponent,
) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let parts = batch_components(
        &mut tape,
        model,
        data,
        examples,
        cfg,
        Some(plans),
        Some(frozen_refined),
    )?;
    let var = match component {
        LossComponent::GenLang => parts.gen_lang,
        LossComponent::GenIdSsg => parts.gen_id,
        LossComponent::ItemAlign => parts.item_align,
        LossComponent::UserAlign => parts.user_align,
        LossComponent::Kl => parts.kl,
    };
    Ok((tape, var))
}

/// Central finite differences against the analytic gradient for a loss
/// defined over the model's parameter store; probes a deterministic
/// subset of entries in every parameter. Returns the max relative error.
pub fn fd_max_rel_error(
    model: &mut Model,
    loss: impl Fn(&Model) -> (Tape, Var),
    h: f64,
    entries_per_param: usize,
) -> f64 {
    model.store.zero_grads();
    let (tape, root) = loss(model);
    tape.backward(root, &mut model.store);
    let names = model.store.sorted_names();
    let analytic: Vec<Array2<f64>> = names
        .iter()
        .map(|n| model.store.grad(model.store.id(n).unwrap()).clone())
        .collect();

    let mut max_rel: f64 = 0.0;
    for (pi, name) in names.iter().enumerate() {
        let id = model.store.id(name).unwrap();
        let dim = model.store.value(id).raw_dim();
        let n_entries = dim[0] * dim[1];
        let stride = (n_entries / entries_per_param).max(1);
        let mut flat = 0;
        let mut probed = 0;
        while flat < n_entries && probed < entries_per_param {
            let (i, j) = (flat / dim[1], flat % dim[1]);
            let orig = model.store.value(id)[[i, j]];
            model.store.value_mut(id)[[i, j]] = orig + h;
            let (t, r) = loss(model);
            let up = t.scalar_value(r);
            model.store.value_mut(id)[[i, j]] = orig - h;
            let (t, r) = loss(model);
            let down = t.scalar_value(r);
            model.store.value_mut(id)[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][[i, j]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            flat += stride;
            probed += 1;
        }
    }
    max_rel
}

/// Free-running variant of the language-view initial prediction: the
/// decoder consumes its own argmax tokens instead of the ground truth.
fn language_view_predict_free_running(
    model: &Model,
    tape: &mut Tape,
    memory_lang: Var,
    target: &[u32],
    q: usize,
) -> Result<(Vec<Var>, Vec<crate::decoder::Refined>)> {
    let dec = &model.decoder;
    // roll out argmax tokens level by level (values only)
    let mut rolled: Vec<u32> = Vec::with_capacity(target.len());
    for l in 0..target.len() {
        let mut rows = vec![dec.bos_index()];
        for (ll, &t) in rolled.iter().enumerate() {
            rows.push(dec.vocab.global(ll, t));
        }
        let table = tape.param_detached(&model.store, dec.tok_emb);
        let inputs = tape.select_rows(table, &rows);
        let logits = dec.forward_levels(tape, &model.store, memory_lang, inputs)?;
        let row = tape.value(logits[l]).row(0).to_vec();
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .unwrap();
        rolled.push(argmax);
    }
    // one differentiable pass conditioned on the rolled-out prefix
    let mut rows = vec![dec.bos_index()];
    for (l, &t) in rolled.iter().enumerate().take(target.len() - 1) {
        rows.push(dec.vocab.global(l, t));
    }
    let table = tape.param(&model.store, dec.tok_emb);
    let inputs = tape.select_rows(table, &rows);
    let logits = dec.forward_levels(tape, &model.store, memory_lang, inputs)?;
    let mut refined = Vec::new();
    for logit in logits.iter().take(dec.k.min(target.len())) {
        let row: Vec<f64> = tape.value(*logit).row(0).to_vec();
        refined.push(crate::decoder::refine_top_q(&row, q)?);
    }
    Ok((logits, refined))
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Stop after `patience` consecutive epochs without improvement.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    pub best_epoch: usize,
    streak: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1);
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            streak: 0,
        }
    }

    /// Returns (improved, should_stop).
    pub fn observe(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.streak = 0;
            (true, false)
        } else {
            self.streak += 1;
            (false, self.streak >= self.patience)
        }
    }
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_total: f64,
    pub gen_lang: f64,
    pub gen_id: f64,
    pub item_align: f64,
    pub user_align: f64,
    pub kl: f64,
    pub val_total: f64,
    pub val_gen_id: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
    Diverged { term: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut out = LossBreakdown::default();
    for p in parts {
        out.total += p.total / n;
        out.gen_lang += p.gen_lang / n;
        out.gen_id += p.gen_id / n;
        out.item_align += p.item_align / n;
        out.user_align += p.user_align / n;
        out.kl += p.kl / n;
    }
    out
}

/// Validation loss under teacher forcing (no substitution draws).
pub fn validation_loss(
    model: &Model,
    data: &TrainData,
    cfg: &ExperimentConfig,
) -> Result<LossBreakdown> {
    let examples = validation_examples(data);
    let mut parts = Vec::new();
    for chunk in examples.chunks(cfg.batch_size.max(1)) {
        let (_, _, breakdown) = total_loss(model, data, chunk, cfg, None)?;
        parts.push(breakdown);
    }
    Ok(mean_breakdown(&parts))
}

/// Pre-train from scratch; returns the model restored to its best
/// validation epoch plus the per-epoch log.
pub fn pretrain(data: &TrainData, cfg: &ExperimentConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let mut model = Model::new(cfg, data.assignment, data.embeddings.dim());
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let per_epoch = epoch_examples(data, cfg, 0).len();
    let batches_per_epoch = per_epoch.div_ceil(cfg.batch_size.max(1));
    let schedule = CosineSchedule::new(
        cfg.learning_rate,
        cfg.warmup_ratio,
        (cfg.max_epochs * batches_per_epoch) as u64,
    );

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = model.store.clone();
    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut step: u64 = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    'training: for epoch in 0..cfg.max_epochs {
        let examples = epoch_examples(data, cfg, epoch);
        let plans = draw_plans(cfg, examples.len(), model.encoders.k, epoch);
        let mut train_parts = Vec::new();
        let mut lr_last = 0.0;
        for (chunk_idx, chunk) in examples.chunks(cfg.batch_size.max(1)).enumerate() {
            let chunk_plans = &plans[chunk_idx * cfg.batch_size..][..chunk.len()];
            model.store.zero_grads();
            let result = total_loss(&model, data, chunk, cfg, Some(chunk_plans));
            let (tape, total, breakdown) = match result {
                Ok(ok) => ok,
                Err(Error::NonFiniteLoss { term }) => {
                    log::warn!("divergence in {term} at epoch {epoch}, keeping best checkpoint");
                    stop_reason = StopReason::Diverged { term };
                    break 'training;
                }
                Err(e) => return Err(e),
            };
            tape.backward(total, &mut model.store);
            lr_last = schedule.lr_at(step);
            opt.step(&mut model.store, lr_last);
            step += 1;
            train_parts.push(breakdown);
        }
        let train = mean_breakdown(&train_parts);
        let val = validation_loss(&model, data, cfg)?;
        epochs.push(EpochLog {
            epoch,
            train_total: train.total,
            gen_lang: train.gen_lang,
            gen_id: train.gen_id,
            item_align: train.item_align,
            user_align: train.user_align,
            kl: train.kl,
            val_total: val.total,
            val_gen_id: val.gen_id,
            lr: lr_last,
        });
        let (improved, stop) = stopper.observe(epoch, val.total);
        if improved {
            best_params = model.store.clone();
        }
        if stop {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    model.store = best_params;
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch: stopper.best_epoch,
            stop_reason,
        },
    ))
}

// ---------------------------------------------------------------------------
// Fine-tuning with retrieval augmentation
// ---------------------------------------------------------------------------

/// Decoder memory for one example: the v retrieved users' cached q rows
/// (when any) in front of the target's own token-level encoding, which is
/// recomputed without gradients because the encoder is frozen.
fn finetune_memory(
    model: &Model,
    tape: &mut Tape,
    data: &TrainData,
    ex: &Example,
    contexts: Option<&[RetrievalContext]>,
    cache: Option<&PreferenceCache>,
) -> Var {
    let c_u = model.encode_id_eval(data.assignment, &ex.input_items);
    let c_u = tape.constant(c_u);
    match (contexts, cache) {
        (Some(ctxs), Some(cache)) => {
            let retrieved = &ctxs[ex.user].reranked;
            let mut q = Array2::zeros((retrieved.len(), cache.dim()));
            for (row, &u) in retrieved.iter().enumerate() {
                q.row_mut(row).assign(&cache.q(u));
            }
            model.decoder.augmented_memory(tape, &model.store, &q, c_u)
        }
        _ => c_u,
    }
}

fn finetune_batch_loss(
    model: &Model,
    data: &TrainData,
    examples: &[Example],
    contexts: Option<&[RetrievalContext]>,
    cache: Option<&PreferenceCache>,
) -> Result<(Tape, Var, f64)> {
    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(examples.len());
    for ex in examples {
        let memory = finetune_memory(model, &mut tape, data, ex, contexts, cache);
        let target = &data.assignment.ids[ex.target_item].tokens;
        let inputs = model
            .decoder
            .gt_input_embeddings(&mut tape, &model.store, target);
        let logits = model
            .decoder
            .forward_levels(&mut tape, &model.store, memory, inputs)?;
        terms.push(model.decoder.generation_loss(&mut tape, &logits, target));
    }
    let sum = terms
        .iter()
        .copied()
        .reduce(|a, b| tape.add(a, b))
        .expect("non-empty batch");
    let total = tape.scale(sum, 1.0 / examples.len() as f64);
    let value = tape.scalar_value(total);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "gen_id (fine-tune)".into(),
        });
    }
    Ok((tape, total, value))
}

/// Fine-tune the decoder (and its token embeddings) on next-item
/// generation with retrieval-augmented memory. Encoders and projection
/// stay frozen; the cache must match the current encoder.
pub fn finetune(
    model: &mut Model,
    data: &TrainData,
    contexts: &[RetrievalContext],
    cache: &PreferenceCache,
    cfg: &ExperimentConfig,
) -> Result<TrainReport> {
    cache.verify(&model.encoder_hash())?;
    model.freeze_for_finetune();
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let per_epoch = epoch_examples(data, cfg, 0).len();
    let batches_per_epoch = per_epoch.div_ceil(cfg.batch_size.max(1));
    let schedule = CosineSchedule::new(
        cfg.finetune_lr,
        cfg.warmup_ratio,
        (cfg.finetune_epochs * batches_per_epoch) as u64,
    );
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = model.store.clone();
    let mut epochs = Vec::new();
    let mut step = 0u64;
    let mut stop_reason = StopReason::MaxEpochs;

    let val_examples = validation_examples(data);
    'training: for epoch in 0..cfg.finetune_epochs {
        let examples = epoch_examples(data, cfg, epoch);
        let mut train_sum = 0.0;
        let mut batches = 0usize;
        let mut lr_last = 0.0;
        for chunk in examples.chunks(cfg.batch_size.max(1)) {
            model.store.zero_grads();
            let (tape, total, value) =
                match finetune_batch_loss(model, data, chunk, Some(contexts), Some(cache)) {
                    Ok(ok) => ok,
                    Err(Error::NonFiniteLoss { term }) => {
                        stop_reason = StopReason::Diverged { term };
                        break 'training;
                    }
                    Err(e) => return Err(e),
                };
            tape.backward(total, &mut model.store);
            lr_last = schedule.lr_at(step);
            opt.step(&mut model.store, lr_last);
            step += 1;
            train_sum += value;
            batches += 1;
        }
        let mut val_sum = 0.0;
        let mut val_batches = 0usize;
        for chunk in val_examples.chunks(cfg.batch_size.max(1)) {
            let (_, _, value) =
                finetune_batch_loss(model, data, chunk, Some(contexts), Some(cache))?;
            val_sum += value;
            val_batches += 1;
        }
        let val = val_sum / val_batches.max(1) as f64;
        let train = train_sum / batches.max(1) as f64;
        epochs.push(EpochLog {
            epoch,
            train_total: train,
            gen_lang: 0.0,
            gen_id: train,
            item_align: 0.0,
            user_align: 0.0,
            kl: 0.0,
            val_total: val,
            val_gen_id: val,
            lr: lr_last,
        });
        let (improved, stop) = stopper.observe(epoch, val);
        if improved {
            best_params = model.store.clone();
        }
        if stop {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    model.store = best_params;
    Ok(TrainReport {
        epochs,
        best_epoch: stopper.best_epoch,
        stop_reason,
    })
}

/// One fine-tune optimization step on the given examples; used by the
/// step-cost harness. Returns the wall time of forward+backward+update.
pub fn finetune_step_timed(
    model: &mut Model,
    data: &TrainData,
    examples: &[Example],
    contexts: Option<&[RetrievalContext]>,
    cache: Option<&PreferenceCache>,
    opt: &mut AdamW,
    lr: f64,
) -> Result<std::time::Duration> {
    let start = std::time::Instant::now();
    model.store.zero_grads();
    let (tape, total, _) = finetune_batch_loss(model, data, examples, contexts, cache)?;
    tape.backward(total, &mut model.store);
    opt.step(&mut model.store, lr);
    Ok(start.elapsed())
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Trie-constrained generation for the given users (read-only). Memory is
/// augmented with cached preference rows when contexts are supplied.
pub fn infer(
    model: &Model,
    data: &TrainData,
    users: &[usize],
    contexts: Option<&[RetrievalContext]>,
    cache: Option<&PreferenceCache>,
    beam: usize,
) -> Result<Vec<Vec<ScoredId>>> {
    if let Some(cache) = cache {
        cache.verify(&model.encoder_hash())?;
    }
    let mut out = Vec::with_capacity(users.len());
    for &u in users {
        let us = &data.split.user_splits[u];
        let input = us.test_input();
        let mut memory = model.encode_id_eval(data.assignment, &input);
        if let (Some(ctxs), Some(cache)) = (contexts, cache) {
            let retrieved = &ctxs[u].reranked;
            if !retrieved.is_empty() {
                let seg = model.store.value(model.decoder.seg_retrieved).clone();
                let mut aug = Array2::zeros((retrieved.len() + memory.nrows(), memory.ncols()));
                for (row, &ru) in retrieved.iter().enumerate() {
                    for j in 0..memory.ncols() {
                        aug[[row, j]] = cache.q(ru)[j] + seg[[0, j]];
                    }
                }
                for i in 0..memory.nrows() {
                    for j in 0..memory.ncols() {
                        aug[[retrieved.len() + i, j]] = memory[[i, j]];
                    }
                }
                memory = aug;
            }
        }
        out.push(
            model
                .decoder
                .generate(&model.store, &memory, &data.assignment.trie, beam)?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints and logs
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    stage: String,
    entries: Vec<(String, usize, usize)>,
}

/// Single-file archive: JSON header line, then little-endian f64 payload
/// in header order (names sorted).
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config_hash: &str,
    stage: &str,
) -> Result<()> {
    let names = store.sorted_names();
    let entries: Vec<(String, usize, usize)> = names
        .iter()
        .map(|n| {
            let v = store.value(store.id(n).unwrap());
            (n.clone(), v.nrows(), v.ncols())
        })
        .collect();
    let header = CheckpointHeader {
        config_hash: config_hash.to_string(),
        stage: stage.to_string(),
        entries,
    };
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut line = serde_json::to_string(&header).unwrap();
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
    for n in &names {
        let v = store.value(store.id(n).unwrap());
        let flat: Vec<f64> = v.iter().copied().collect();
        write_f64_slice(&mut f, &flat).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub struct LoadedCheckpoint {
    pub values: Vec<(String, Array2<f64>)>,
    pub config_hash: String,
    pub stage: String,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| io_err(path, e))?);
    let mut line = String::new();
    std::io::BufRead::read_line(&mut f, &mut line).map_err(|e| io_err(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim())
        .map_err(|e| Error::Artifact(format!("{}: bad checkpoint header: {e}", path.display())))?;
    let mut values = Vec::with_capacity(header.entries.len());
    for (name, rows, cols) in header.entries {
        let flat = read_f64_vec(&mut f, rows * cols).map_err(|e| io_err(path, e))?;
        values.push((name, Array2::from_shape_vec((rows, cols), flat).unwrap()));
    }
    Ok(LoadedCheckpoint {
        values,
        config_hash: header.config_hash,
        stage: header.stage,
    })
}

impl Model {
    /// Overwrite parameter values from a loaded checkpoint. Name sets and
    /// shapes must match the architecture exactly.
    pub fn load_values(&mut self, loaded: &LoadedCheckpoint) -> Result<()> {
        if loaded.values.len() != self.store.len() {
            return Err(Error::Artifact(format!(
                "checkpoint has {} parameters, model has {}",
                loaded.values.len(),
                self.store.len()
            )));
        }
        for (name, value) in &loaded.values {
            let id = self.store.id(name).ok_or_else(|| {
                Error::Artifact(format!("checkpoint parameter {name} not in model"))
            })?;
            if self.store.value(id).dim() != value.dim() {
                return Err(Error::Artifact(format!("shape mismatch for {name}")));
            }
            self.store.value_mut(id).assign(value);
        }
        Ok(())
    }
}

pub fn write_training_log(path: &Path, report: &TrainReport) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    writeln!(
        f,
        "epoch,train_total,gen_lang,gen_id,item_align,user_align,kl,val_total,val_gen_id,lr"
    )
    .map_err(|e| io_err(path, e))?;
    for e in &report.epochs {
        writeln!(
            f,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            e.epoch,
            e.train_total,
            e.gen_lang,
            e.gen_id,
            e.item_align,
            e.user_align,
            e.kl,
            e.val_total,
            e.val_gen_id,
            e.lr
        )
        .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
