//! Ranking metrics under the single-target leave-one-out protocol,
//! head/tail and popularity-bin breakdowns, and the teacher-forced vs
//! free-running exposure-bias probe.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SplitDataset;
use crate::error::{Error, Result};
use crate::nn::Tape;
use crate::trainer::{Model, TrainData};
use crate::util::io_err;

/// 1 when the target appears in the first k entries.
pub fn hit_at_k(ranked: &[usize], target: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::BadMetricCutoff(0));
    }
    Ok(ranked
        .iter()
        .take(k)
        .any(|&it| it == target)
        .then_some(1.0)
        .unwrap_or(0.0))
}

/// Binary-gain NDCG: 1/log2(rank+1) when the target sits at `rank`
/// (1-based) within the top k, else 0.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::BadMetricCutoff(0));
    }
    Ok(ranked
        .iter()
        .take(k)
        .position(|&it| it == target)
        .map(|pos| 1.0 / ((pos as f64 + 2.0).log2()))
        .unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub h5: f64,
    pub h10: f64,
    pub n5: f64,
    pub n10: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopularityBin {
    /// Bin edges in ln(1 + popularity).
    pub lo: f64,
    pub hi: f64,
    pub n_users: usize,
    pub h10: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: MetricSet,
    /// Absent (never 0) when a group has no users.
    pub head: Option<MetricSet>,
    pub tail: Option<MetricSet>,
    pub bins: Vec<PopularityBin>,
}

/// One evaluated user: the ranked recommendation list and the held-out
/// test target.
#[derive(Debug, Clone)]
pub struct PerUserEval {
    pub user: usize,
    pub ranked: Vec<usize>,
    pub target: usize,
}

fn metric_set(evals: &[&PerUserEval]) -> Result<Option<MetricSet>> {
    if evals.is_empty() {
        return Ok(None);
    }
    let n = evals.len() as f64;
    let mut s = MetricSet {
        n_users: evals.len(),
        ..Default::default()
    };
    for e in evals {
        s.h5 += hit_at_k(&e.ranked, e.target, 5)? / n;
        s.h10 += hit_at_k(&e.ranked, e.target, 10)? / n;
        s.n5 += ndcg_at_k(&e.ranked, e.target, 5)? / n;
        s.n10 += ndcg_at_k(&e.ranked, e.target, 10)? / n;
    }
    Ok(Some(s))
}

/// Overall, head-group, tail-group, and per-popularity-bin metrics. Users
/// are grouped by their TEST target: head/tail membership from the
/// split's partition, bins equal-width in ln(1 + popularity).
pub fn group_report(
    evals: &[PerUserEval],
    split: &SplitDataset,
    n_bins: usize,
) -> Result<MetricsReport> {
    let all: Vec<&PerUserEval> = evals.iter().collect();
    let overall = metric_set(&all)?.ok_or_else(|| Error::Artifact("no users to evaluate".into()))?;
    let head: Vec<&PerUserEval> = evals.iter().filter(|e| split.is_head(e.target)).collect();
    let tail: Vec<&PerUserEval> = evals.iter().filter(|e| !split.is_head(e.target)).collect();

    let pop = split.popularity();
    let logpop = |item: usize| (1.0 + pop[item] as f64).ln();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for e in evals {
        lo = lo.min(logpop(e.target));
        hi = hi.max(logpop(e.target));
    }
    let width = ((hi - lo) / n_bins as f64).max(1e-12);
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let blo = lo + b as f64 * width;
        let bhi = if b + 1 == n_bins { hi } else { blo + width };
        let members: Vec<&PerUserEval> = evals
            .iter()
            .filter(|e| {
                let x = logpop(e.target);
                if b + 1 == n_bins {
                    x >= blo && x <= bhi
                } else {
                    x >= blo && x < bhi
                }
            })
            .collect();
        let h10 = if members.is_empty() {
            None
        } else {
            let n = members.len() as f64;
            let mut acc = 0.0;
            for e in &members {
                acc += hit_at_k(&e.ranked, e.target, 10)?;
            }
            Some(acc / n)
        };
        bins.push(PopularityBin {
            lo: blo,
            hi: bhi,
            n_users: members.len(),
            h10,
        });
    }

    Ok(MetricsReport {
        overall,
        head: metric_set(&head)?,
        tail: metric_set(&tail)?,
        bins,
    })
}

pub fn write_report_json(path: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report).unwrap() + "\n")
        .map_err(|e| io_err(path, e))
}

pub fn write_report_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    writeln!(f, "group,n_users,h5,h10,n5,n10").map_err(|e| io_err(path, e))?;
    let mut row = |name: &str, s: &MetricSet| {
        writeln!(
            f,
            "{name},{},{:.6},{:.6},{:.6},{:.6}",
            s.n_users, s.h5, s.h10, s.n5, s.n10
        )
    };
    row("overall", &report.overall).map_err(|e| io_err(path, e))?;
    if let Some(h) = &report.head {
        row("head", h).map_err(|e| io_err(path, e))?;
    }
    if let Some(t) = &report.tail {
        row("tail", t).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Exposure-bias probe
// ---------------------------------------------------------------------------

/// Per-level argmax accuracy under two conditionings: teacher-forced
/// (ground-truth prefixes) vs free-running (the model's own argmax
/// prefixes). The level-wise difference is the exposure gap; level 1 is 0
/// by construction since both passes share the same conditioning there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExposureProbe {
    pub teacher_forced_acc: Vec<f64>,
    pub free_running_acc: Vec<f64>,
    pub gap: Vec<f64>,
    pub n_users: usize,
}

impl ExposureProbe {
    /// Mean gap over levels 2..k, the exposure-sensitive region.
    pub fn mean_gap_after_first(&self) -> f64 {
        if self.gap.len() <= 1 {
            return 0.0;
        }
        self.gap[1..].iter().sum::<f64>() / (self.gap.len() - 1) as f64
    }
}

/// Probe the model's decode path on the given users' test-time inputs.
/// Read-only: parameters are untouched.
pub fn exposure_probe(model: &Model, data: &TrainData, users: &[usize]) -> Result<ExposureProbe> {
    let k = model.encoders.k;
    let mut tf_correct = vec![0usize; k];
    let mut fr_correct = vec![0usize; k];
    for &u in users {
        let us = &data.split.user_splits[u];
        let input = us.test_input();
        let memory = model.encode_id_eval(data.assignment, &input);
        let target = &data.assignment.ids[us.test].tokens;

        // teacher-forced: ground-truth prefix at every level
        let mut tape = Tape::new();
        let mem = tape.constant(memory.clone());
        let logits = model
            .decoder
            .decode_teacher_forced(&mut tape, &model.store, mem, target)?;
        for l in 0..k.min(target.len()) {
            let row = tape.value(logits[l]).row(0).to_vec();
            if argmax(&row) == target[l] as usize {
                tf_correct[l] += 1;
            }
        }

        // free-running: the model's own argmax prefix
        let mut rolled: Vec<u32> = Vec::with_capacity(k);
        for l in 0..k.min(target.len()) {
            let mut tape = Tape::new();
            let mem = tape.constant(memory.clone());
            let mut rows = vec![model.decoder.bos_index()];
            for (ll, &t) in rolled.iter().enumerate() {
                rows.push(model.decoder.vocab.global(ll, t));
            }
            let table = tape.param_detached(&model.store, model.decoder.tok_emb);
            let inputs = tape.select_rows(table, &rows);
            let logits = model
                .decoder
                .forward_levels(&mut tape, &model.store, mem, inputs)?;
            let row = tape.value(logits[l]).row(0).to_vec();
            let pred = argmax(&row);
            if pred == target[l] as usize {
                fr_correct[l] += 1;
            }
            rolled.push(pred as u32);
        }
    }
    let n = users.len().max(1) as f64;
    let tf: Vec<f64> = tf_correct.iter().map(|&c| c as f64 / n).collect();
    let fr: Vec<f64> = fr_correct.iter().map(|&c| c as f64 / n).collect();
    let gap: Vec<f64> = tf.iter().zip(&fr).map(|(t, f)| t - f).collect();
    Ok(ExposureProbe {
        teacher_forced_acc: tf,
        free_running_acc: fr,
        gap,
        n_users: users.len(),
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap()
}
