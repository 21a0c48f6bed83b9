//! Interaction-log ingestion, 5-core filtering, leave-one-out splitting,
//! head/tail partitioning, pseudo-documents, and the seeded synthetic
//! generator used as the default test corpus.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{io_err, rng_for};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemMeta {
    pub id: String,
    pub title: String,
    pub description: String,
}

impl ItemMeta {
    /// Title plus description, the text every downstream consumer sees.
    pub fn text(&self) -> String {
        if self.description.is_empty() {
            self.title.clone()
        } else {
            format!("{} {}", self.title, self.description)
        }
    }
}

/// One user's interactions, chronologically ordered (stable sort by
/// timestamp, ties keep input order).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserEvents {
    pub user_id: String,
    /// (internal item index, timestamp)
    pub events: Vec<(usize, i64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    /// Index position is the dense internal item id.
    pub items: Vec<ItemMeta>,
    /// Index position is the dense internal user id.
    pub users: Vec<UserEvents>,
}

impl Corpus {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }

    /// Hash over item ids and texts; keys embedding caches to the corpus.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        for it in &self.items {
            buf.extend_from_slice(it.id.as_bytes());
            buf.push(0);
            buf.extend_from_slice(it.title.as_bytes());
            buf.push(0);
            buf.extend_from_slice(it.description.as_bytes());
            buf.push(0);
        }
        crate::util::sha256_hex(&buf)
    }
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct InteractionRec {
    user: String,
    item: String,
    ts: i64,
}

#[derive(Deserialize)]
struct MetaRec {
    item: String,
    title: String,
    #[serde(default)]
    description: String,
}

/// Load a JSON-lines interaction log plus item metadata into a corpus with
/// dense internal indices (items in metadata-file order, users in order of
/// first appearance).
pub fn ingest(interaction_file: &Path, meta_file: &Path) -> Result<Corpus> {
    let meta_reader =
        BufReader::new(std::fs::File::open(meta_file).map_err(|e| io_err(meta_file, e))?);
    let mut items: Vec<ItemMeta> = Vec::new();
    let mut item_index: BTreeMap<String, usize> = BTreeMap::new();
    for (lineno, line) in meta_reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(meta_file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetaRec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: meta_file.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if rec.title.is_empty() {
            return Err(Error::Malformed {
                path: meta_file.display().to_string(),
                line: lineno + 1,
                msg: format!("item {} has an empty title", rec.item),
            });
        }
        if item_index.contains_key(&rec.item) {
            return Err(Error::Malformed {
                path: meta_file.display().to_string(),
                line: lineno + 1,
                msg: format!("duplicate item id {}", rec.item),
            });
        }
        item_index.insert(rec.item.clone(), items.len());
        items.push(ItemMeta {
            id: rec.item,
            title: rec.title,
            description: rec.description,
        });
    }

    let inter_reader = BufReader::new(
        std::fs::File::open(interaction_file).map_err(|e| io_err(interaction_file, e))?,
    );
    let mut users: Vec<UserEvents> = Vec::new();
    let mut user_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut missing: Vec<String> = Vec::new();
    for (lineno, line) in inter_reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(interaction_file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: interaction_file.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let Some(&item_idx) = item_index.get(&rec.item) else {
            if !missing.contains(&rec.item) {
                missing.push(rec.item.clone());
            }
            continue;
        };
        let uid = *user_index.entry(rec.user.clone()).or_insert_with(|| {
            users.push(UserEvents {
                user_id: rec.user.clone(),
                events: Vec::new(),
            });
            users.len() - 1
        });
        users[uid].events.push((item_idx, rec.ts));
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingMeta(missing));
    }
    for u in &mut users {
        u.events.sort_by_key(|&(_, ts)| ts); // stable: ties keep input order
    }
    Ok(Corpus { items, users })
}

/// Write a corpus back out in the ingestion formats (one interaction per
/// line, one item per line).
pub fn write_interactions_jsonl(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    for u in &corpus.users {
        for &(item, ts) in &u.events {
            let rec = serde_json::json!({
                "user": u.user_id,
                "item": corpus.items[item].id,
                "ts": ts,
            });
            writeln!(f, "{rec}").map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

pub fn write_meta_jsonl(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    for it in &corpus.items {
        let rec = serde_json::json!({
            "item": it.id,
            "title": it.title,
            "description": it.description,
        });
        writeln!(f, "{rec}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 5-core filtering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterReport {
    pub users_removed: usize,
    pub items_removed: usize,
    pub passes: usize,
}

/// Iteratively drop users and items with fewer than 5 interactions until a
/// fixed point. Internal indices are re-densified; relative order is kept.
pub fn five_core_filter(corpus: &Corpus) -> Result<(Corpus, FilterReport)> {
    const MIN: usize = 5;
    let mut user_alive = vec![true; corpus.n_users()];
    let mut item_alive = vec![true; corpus.n_items()];
    let mut report = FilterReport::default();

    loop {
        let mut changed = false;
        let mut item_counts = vec![0usize; corpus.n_items()];
        for (ui, u) in corpus.users.iter().enumerate() {
            if !user_alive[ui] {
                continue;
            }
            let live: usize = u
                .events
                .iter()
                .filter(|&&(it, _)| item_alive[it])
                .count();
            if live < MIN {
                user_alive[ui] = false;
                report.users_removed += 1;
                changed = true;
            } else {
                for &(it, _) in &u.events {
                    if item_alive[it] {
                        item_counts[it] += 1;
                    }
                }
            }
        }
        for (it, alive) in item_alive.iter_mut().enumerate() {
            if *alive && item_counts[it] < MIN {
                *alive = false;
                report.items_removed += 1;
                changed = true;
            }
        }
        report.passes += 1;
        if !changed {
            break;
        }
    }

    let mut item_map = vec![usize::MAX; corpus.n_items()];
    let mut items = Vec::new();
    for (it, meta) in corpus.items.iter().enumerate() {
        if item_alive[it] {
            item_map[it] = items.len();
            items.push(meta.clone());
        }
    }
    let mut users = Vec::new();
    for (ui, u) in corpus.users.iter().enumerate() {
        if !user_alive[ui] {
            continue;
        }
        let events: Vec<(usize, i64)> = u
            .events
            .iter()
            .filter(|&&(it, _)| item_alive[it])
            .map(|&(it, ts)| (item_map[it], ts))
            .collect();
        users.push(UserEvents {
            user_id: u.user_id.clone(),
            events,
        });
    }
    if users.is_empty() || items.is_empty() {
        return Err(Error::DegenerateCorpus);
    }
    Ok((Corpus { items, users }, report))
}

// ---------------------------------------------------------------------------
// Leave-one-out split and head/tail partition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// Input items when predicting the validation target.
    pub fn valid_input(&self) -> Vec<usize> {
        self.train.clone()
    }

    /// Input items when predicting the test target (includes the
    /// validation item, which precedes it chronologically).
    pub fn test_input(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.push(self.valid);
        v
    }
}

/// Whether head/tail popularity counts train-split interactions only
/// (default; avoids leaking evaluation targets) or the whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PopularityMode {
    TrainOnly,
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitDataset {
    pub corpus: Corpus,
    pub max_len: usize,
    pub user_splits: Vec<UserSplit>,
    /// Train-split interaction count per item.
    pub popularity_train: Vec<usize>,
    /// Whole-dataset interaction count per item (after truncation).
    pub popularity_all: Vec<usize>,
    pub popularity_mode: PopularityMode,
    /// Ascending item indices.
    pub head_items: Vec<usize>,
    pub tail_items: Vec<usize>,
}

impl SplitDataset {
    pub fn n_users(&self) -> usize {
        self.user_splits.len()
    }

    pub fn n_items(&self) -> usize {
        self.corpus.n_items()
    }

    pub fn popularity(&self) -> &[usize] {
        match self.popularity_mode {
            PopularityMode::TrainOnly => &self.popularity_train,
            PopularityMode::All => &self.popularity_all,
        }
    }

    pub fn is_head(&self, item: usize) -> bool {
        self.head_items.binary_search(&item).is_ok()
    }
}

/// Per-user leave-one-out split: last item is the test target, the
/// second-to-last the validation target, the remainder trains. Sequences
/// are truncated to the most recent `m` items first.
pub fn split_leave_one_out(corpus: &Corpus, m: usize) -> Result<SplitDataset> {
    split_leave_one_out_with_mode(corpus, m, PopularityMode::TrainOnly)
}

pub fn split_leave_one_out_with_mode(
    corpus: &Corpus,
    m: usize,
    mode: PopularityMode,
) -> Result<SplitDataset> {
    let mut user_splits = Vec::with_capacity(corpus.n_users());
    let mut pop_train = vec![0usize; corpus.n_items()];
    let mut pop_all = vec![0usize; corpus.n_items()];
    for u in &corpus.users {
        let seq: Vec<usize> = u.events.iter().map(|&(it, _)| it).collect();
        let seq = if seq.len() > m {
            seq[seq.len() - m..].to_vec()
        } else {
            seq
        };
        if seq.len() < 3 {
            return Err(Error::SequenceTooShort {
                user: u.user_id.clone(),
                len: seq.len(),
            });
        }
        let test = seq[seq.len() - 1];
        let valid = seq[seq.len() - 2];
        let train = seq[..seq.len() - 2].to_vec();
        for &it in &train {
            pop_train[it] += 1;
        }
        for &it in &seq {
            pop_all[it] += 1;
        }
        user_splits.push(UserSplit { train, valid, test });
    }
    let mut split = SplitDataset {
        corpus: corpus.clone(),
        max_len: m,
        user_splits,
        popularity_train: pop_train,
        popularity_all: pop_all,
        popularity_mode: mode,
        head_items: Vec::new(),
        tail_items: Vec::new(),
    };
    let part = head_tail_partition(&split, mode);
    split.head_items = part.head_items;
    split.tail_items = part.tail_items;
    Ok(split)
}

#[derive(Debug, Clone)]
pub struct HeadTailPartition {
    /// Ascending item indices of the top-20%-by-popularity set.
    pub head_items: Vec<usize>,
    pub tail_items: Vec<usize>,
    /// Users whose test target is a head item.
    pub head_users: Vec<usize>,
    pub tail_users: Vec<usize>,
}

/// Top-20% of items by popularity form the head; ties at the boundary go
/// to the lower item index. Users are grouped by their test target.
pub fn head_tail_partition(split: &SplitDataset, mode: PopularityMode) -> HeadTailPartition {
    let pop = match mode {
        PopularityMode::TrainOnly => &split.popularity_train,
        PopularityMode::All => &split.popularity_all,
    };
    let n_items = split.corpus.n_items();
    let n_head = (0.2 * n_items as f64 + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..n_items).collect();
    order.sort_by(|&a, &b| pop[b].cmp(&pop[a]).then(a.cmp(&b)));
    let mut head_items: Vec<usize> = order[..n_head].to_vec();
    let mut tail_items: Vec<usize> = order[n_head..].to_vec();
    head_items.sort_unstable();
    tail_items.sort_unstable();

    let mut head_users = Vec::new();
    let mut tail_users = Vec::new();
    for (ui, us) in split.user_splits.iter().enumerate() {
        if head_items.binary_search(&us.test).is_ok() {
            head_users.push(ui);
        } else {
            tail_users.push(ui);
        }
    }
    HeadTailPartition {
        head_items,
        tail_items,
        head_users,
        tail_users,
    }
}

// ---------------------------------------------------------------------------
// Pseudo-documents
// ---------------------------------------------------------------------------

/// One document per user: titles and descriptions of the train-split
/// items, chronological order, space-joined. Evaluation targets never
/// contribute.
pub fn build_pseudo_documents(split: &SplitDataset) -> Vec<String> {
    split
        .user_splits
        .iter()
        .map(|us| {
            us.train
                .iter()
                .map(|&it| split.corpus.items[it].text())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Split manifest
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SplitManifestUser {
    user: String,
    train: Vec<String>,
    valid: String,
    test: String,
}

/// External-id view of the split, written as a single JSON document.
pub fn write_split_manifest(path: &Path, split: &SplitDataset) -> Result<()> {
    let users: Vec<SplitManifestUser> = split
        .user_splits
        .iter()
        .zip(&split.corpus.users)
        .map(|(us, u)| SplitManifestUser {
            user: u.user_id.clone(),
            train: us
                .train
                .iter()
                .map(|&i| split.corpus.items[i].id.clone())
                .collect(),
            valid: split.corpus.items[us.valid].id.clone(),
            test: split.corpus.items[us.test].id.clone(),
        })
        .collect();
    let doc = serde_json::json!({
        "max_len": split.max_len,
        "users": users,
        "head_items": split.head_items.iter().map(|&i| split.corpus.items[i].id.clone()).collect::<Vec<_>>(),
        "tail_items": split.tail_items.iter().map(|&i| split.corpus.items[i].id.clone()).collect::<Vec<_>>(),
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc).unwrap() + "\n")
        .map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic corpus generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    /// Power-law exponent on within-cluster item rank; 0 is uniform.
    pub skew: f64,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a draw comes from the user's own cluster.
    pub own_cluster_prob: f64,
}

impl SynthConfig {
    pub fn new(n_users: usize, n_items: usize, n_clusters: usize, skew: f64, seed: u64) -> Self {
        Self {
            n_users,
            n_items,
            n_clusters,
            skew,
            seed,
            min_len: 8,
            max_len: 14,
            own_cluster_prob: 0.8,
        }
    }
}

/// Users live in latent clusters; items carry cluster-themed text so that
/// text, collaborative structure, and (downstream) semantic IDs correlate.
/// Item popularity within a cluster follows rank^(-skew).
pub fn synth_generate(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.n_clusters == 0 {
        return Err(Error::InfeasibleSynth("n_clusters must be >= 1".into()));
    }
    if cfg.n_users < cfg.n_clusters || cfg.n_items < cfg.n_clusters {
        return Err(Error::InfeasibleSynth(format!(
            "need n_users ({}) and n_items ({}) >= n_clusters ({})",
            cfg.n_users, cfg.n_items, cfg.n_clusters
        )));
    }
    if cfg.skew < 0.0 {
        return Err(Error::InfeasibleSynth("skew must be >= 0".into()));
    }
    if cfg.min_len < 5 || cfg.max_len < cfg.min_len {
        return Err(Error::InfeasibleSynth(format!(
            "bad sequence lengths {}..{}",
            cfg.min_len, cfg.max_len
        )));
    }

    let mut rng = rng_for(cfg.seed, "synth");
    let words_per_cluster = 16usize;

    let cluster_of_item = |i: usize| i % cfg.n_clusters;
    let cluster_word = |c: usize, w: usize| format!("c{c}w{w}");

    // Item text: a handful of its own cluster's theme words.
    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let c = cluster_of_item(i);
        let mut pick = || cluster_word(c, rng.random_range(0..words_per_cluster));
        let title = format!("{} {} {}", pick(), pick(), pick());
        let body: Vec<String> = (0..5).map(|_| pick()).collect();
        let description = format!("{} gw{}", body.join(" "), rng.random_range(0..8));
        items.push(ItemMeta {
            id: format!("item{i:04}"),
            title,
            description,
        });
    }

    // Per-cluster item lists and popularity weights.
    let mut cluster_items: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clusters];
    for i in 0..cfg.n_items {
        cluster_items[cluster_of_item(i)].push(i);
    }
    let weight_of = |local_rank: usize| 1.0 / ((local_rank + 1) as f64).powf(cfg.skew);
    let cluster_weights: Vec<Vec<f64>> = cluster_items
        .iter()
        .map(|list| (0..list.len()).map(weight_of).collect())
        .collect();
    let all_items: Vec<usize> = (0..cfg.n_items).collect();
    let all_weights: Vec<f64> = all_items
        .iter()
        .map(|&i| {
            weight_of(
                cluster_items[cluster_of_item(i)]
                    .iter()
                    .position(|&x| x == i)
                    .unwrap(),
            )
        })
        .collect();

    let weighted_pick = |rng: &mut rand_chacha::ChaCha8Rng, items: &[usize], weights: &[f64]| {
        let total: f64 = weights.iter().sum();
        let mut x = rng.random::<f64>() * total;
        for (i, &w) in weights.iter().enumerate() {
            x -= w;
            if x <= 0.0 {
                return items[i];
            }
        }
        items[items.len() - 1]
    };

    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let c = u % cfg.n_clusters;
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut seen: Vec<usize> = Vec::with_capacity(len);
        let mut events = Vec::with_capacity(len);
        for j in 0..len {
            let mut choice = 0usize;
            for attempt in 0..30 {
                let own = rng.random::<f64>() < cfg.own_cluster_prob;
                choice = if own {
                    weighted_pick(&mut rng, &cluster_items[c], &cluster_weights[c])
                } else {
                    weighted_pick(&mut rng, &all_items, &all_weights)
                };
                if !seen.contains(&choice) || attempt == 29 {
                    break;
                }
            }
            seen.push(choice);
            events.push((
                choice,
                1_700_000_000 + (u as i64) * 100_000 + (j as i64) * 60,
            ));
        }
        users.push(UserEvents {
            user_id: format!("user{u:04}"),
            events,
        });
    }

    Ok(Corpus { items, users })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("grc-corpus-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_lines(path: &Path, lines: &[&str]) {
        let mut f = std::fs::File::create(path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
    }

    fn meta_line(id: &str) -> String {
        format!(r#"{{"item":"{id}","title":"title {id}","description":"desc {id}"}}"#)
    }

    #[test]
    fn ingest_three_users() {
        let dir = tmpdir("ingest3");
        let inter = dir.join("inter.jsonl");
        let meta = dir.join("meta.jsonl");
        write_lines(
            &inter,
            &[
                r#"{"user":"u1","item":"a","ts":3}"#,
                r#"{"user":"u1","item":"b","ts":1}"#,
                r#"{"user":"u2","item":"a","ts":5}"#,
                r#"{"user":"u2","item":"c","ts":4}"#,
                r#"{"user":"u3","item":"b","ts":9}"#,
                r#"{"user":"u3","item":"c","ts":8}"#,
            ],
        );
        let metas: Vec<String> = ["a", "b", "c"].iter().map(|i| meta_line(i)).collect();
        write_lines(&meta, &metas.iter().map(|s| s.as_str()).collect::<Vec<_>>());
        let corpus = ingest(&inter, &meta).unwrap();
        assert_eq!(corpus.n_users(), 3);
        assert_eq!(corpus.n_items(), 3);
        // u1 sorted by ts: b(1) then a(3)
        assert_eq!(corpus.users[0].events[0].0, 1);
        assert_eq!(corpus.users[0].events[1].0, 0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ingest_malformed_line_reports_line_number() {
        let dir = tmpdir("ingest-bad");
        let inter = dir.join("inter.jsonl");
        let meta = dir.join("meta.jsonl");
        write_lines(&inter, &["u1,i1"]);
        write_lines(&meta, &[&meta_line("i1")]);
        let err = ingest(&inter, &meta).unwrap_err();
        match err {
            Error::Malformed { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ingest_missing_meta_lists_ids() {
        let dir = tmpdir("ingest-miss");
        let inter = dir.join("inter.jsonl");
        let meta = dir.join("meta.jsonl");
        write_lines(
            &inter,
            &[
                r#"{"user":"u1","item":"ghost","ts":1}"#,
                r#"{"user":"u1","item":"a","ts":2}"#,
            ],
        );
        write_lines(&meta, &[&meta_line("a")]);
        let err = ingest(&inter, &meta).unwrap_err();
        match err {
            Error::MissingMeta(ids) => assert_eq!(ids, vec!["ghost".to_string()]),
            other => panic!("unexpected error {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ingest_duplicates_kept_order_stable() {
        // Reference loader: parse each line independently, group by user in
        // first-appearance order, stable-sort by ts.
        let dir = tmpdir("ingest-dup");
        let inter = dir.join("inter.jsonl");
        let meta = dir.join("meta.jsonl");
        let lines = [
            r#"{"user":"u1","item":"a","ts":7}"#,
            r#"{"user":"u1","item":"b","ts":7}"#,
            r#"{"user":"u1","item":"a","ts":7}"#,
            r#"{"user":"u1","item":"a","ts":2}"#,
        ];
        write_lines(&inter, &lines);
        write_lines(&meta, &[&meta_line("a"), &meta_line("b")]);
        let corpus = ingest(&inter, &meta).unwrap();

        let mut reference: Vec<(String, i64, usize)> = lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (
                    v["item"].as_str().unwrap().to_string(),
                    v["ts"].as_i64().unwrap(),
                    i,
                )
            })
            .collect();
        reference.sort_by_key(|&(_, ts, idx)| (ts, idx));

        let got: Vec<(String, i64)> = corpus.users[0]
            .events
            .iter()
            .map(|&(it, ts)| (corpus.items[it].id.clone(), ts))
            .collect();
        let want: Vec<(String, i64)> = reference.into_iter().map(|(id, ts, _)| (id, ts)).collect();
        assert_eq!(got, want);
        assert_eq!(got.len(), 4); // both duplicates kept
        std::fs::remove_dir_all(&dir).ok();
    }

    /// Corpus where every user interacts with `per_user` distinct items in
    /// a ring, enough to survive 5-core filtering.
    fn ring_corpus(n_users: usize, n_items: usize, per_user: usize) -> Corpus {
        let items = (0..n_items)
            .map(|i| ItemMeta {
                id: format!("i{i}"),
                title: format!("t{i}"),
                description: String::new(),
            })
            .collect();
        let users = (0..n_users)
            .map(|u| UserEvents {
                user_id: format!("u{u}"),
                events: (0..per_user)
                    .map(|j| (((u + j) % n_items), (j as i64) + 1))
                    .collect(),
            })
            .collect();
        Corpus { items, users }
    }

    #[test]
    fn five_core_removes_small_user() {
        let mut corpus = ring_corpus(8, 8, 6);
        corpus.users.push(UserEvents {
            user_id: "tiny".into(),
            events: vec![(0, 1), (1, 2), (2, 3), (3, 4)],
        });
        let (filtered, report) = five_core_filter(&corpus).unwrap();
        assert!(filtered.users.iter().all(|u| u.user_id != "tiny"));
        assert!(report.users_removed >= 1);
    }

    #[test]
    fn five_core_noop_when_dense() {
        let corpus = ring_corpus(8, 8, 6);
        let (filtered, report) = five_core_filter(&corpus).unwrap();
        assert_eq!(filtered.n_users(), 8);
        assert_eq!(filtered.n_items(), 8);
        assert_eq!(report.users_removed, 0);
        assert_eq!(report.items_removed, 0);
    }

    /// Fixed-point oracle: repeatedly apply a single filtering pass until
    /// nothing changes, then compare survivor sets.
    #[test]
    fn five_core_cascade_matches_fixed_point_oracle() {
        // u0..u5 interact heavily with items 0..5; u6 only holds item 6,
        // with 4 interactions, so u6 goes and item 6 follows.
        let mut corpus = ring_corpus(6, 6, 6);
        corpus.items.push(ItemMeta {
            id: "i6".into(),
            title: "t6".into(),
            description: String::new(),
        });
        corpus.users.push(UserEvents {
            user_id: "u6".into(),
            events: vec![(6, 1), (6, 2), (6, 3), (6, 4)],
        });

        // oracle
        let mut user_alive = vec![true; corpus.n_users()];
        let mut item_alive = vec![true; corpus.n_items()];
        loop {
            let mut changed = false;
            for (ui, u) in corpus.users.iter().enumerate() {
                if user_alive[ui] {
                    let c = u.events.iter().filter(|&&(it, _)| item_alive[it]).count();
                    if c < 5 {
                        user_alive[ui] = false;
                        changed = true;
                    }
                }
            }
            let mut counts = vec![0usize; corpus.n_items()];
            for (ui, u) in corpus.users.iter().enumerate() {
                if user_alive[ui] {
                    for &(it, _) in &u.events {
                        counts[it] += 1;
                    }
                }
            }
            for it in 0..corpus.n_items() {
                if item_alive[it] && counts[it] < 5 {
                    item_alive[it] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let oracle_users: Vec<String> = corpus
            .users
            .iter()
            .enumerate()
            .filter(|&(ui, _)| user_alive[ui])
            .map(|(_, u)| u.user_id.clone())
            .collect();
        let oracle_items: Vec<String> = corpus
            .items
            .iter()
            .enumerate()
            .filter(|&(it, _)| item_alive[it])
            .map(|(_, m)| m.id.clone())
            .collect();

        let (filtered, _) = five_core_filter(&corpus).unwrap();
        let got_users: Vec<String> = filtered.users.iter().map(|u| u.user_id.clone()).collect();
        let got_items: Vec<String> = filtered.items.iter().map(|m| m.id.clone()).collect();
        assert_eq!(got_users, oracle_users);
        assert_eq!(got_items, oracle_items);
        assert!(!got_items.contains(&"i6".to_string()));
    }

    #[test]
    fn five_core_degenerate_errors() {
        let corpus = ring_corpus(2, 8, 3);
        assert!(matches!(
            five_core_filter(&corpus),
            Err(Error::DegenerateCorpus)
        ));
    }

    #[test]
    fn five_core_idempotent() {
        let corpus = synth_generate(&SynthConfig::new(50, 30, 3, 1.0, 11)).unwrap();
        let (once, _) = five_core_filter(&corpus).unwrap();
        let (twice, report) = five_core_filter(&once).unwrap();
        assert_eq!(report.users_removed, 0);
        assert_eq!(report.items_removed, 0);
        assert_eq!(
            serde_json::to_string(&once).unwrap(),
            serde_json::to_string(&twice).unwrap()
        );
    }

    #[test]
    fn split_four_item_sequence() {
        let corpus = Corpus {
            items: (0..4)
                .map(|i| ItemMeta {
                    id: format!("i{i}"),
                    title: format!("t{i}"),
                    description: String::new(),
                })
                .collect(),
            users: vec![UserEvents {
                user_id: "u".into(),
                events: vec![(0, 1), (1, 2), (2, 3), (3, 4)],
            }],
        };
        let split = split_leave_one_out(&corpus, 20).unwrap();
        let us = &split.user_splits[0];
        assert_eq!(us.train, vec![0, 1]);
        assert_eq!(us.valid, 2);
        assert_eq!(us.test, 3);
    }

    #[test]
    fn split_minimal_three() {
        let corpus = Corpus {
            items: (0..3)
                .map(|i| ItemMeta {
                    id: format!("i{i}"),
                    title: "t".into(),
                    description: String::new(),
                })
                .collect(),
            users: vec![UserEvents {
                user_id: "u".into(),
                events: vec![(0, 1), (1, 2), (2, 3)],
            }],
        };
        let split = split_leave_one_out(&corpus, 20).unwrap();
        let us = &split.user_splits[0];
        assert_eq!(us.train, vec![0]);
        assert_eq!(us.valid, 1);
        assert_eq!(us.test, 2);
    }

    #[test]
    fn split_truncates_to_recent_m() {
        let n = 25usize;
        let corpus = Corpus {
            items: (0..n)
                .map(|i| ItemMeta {
                    id: format!("i{i}"),
                    title: "t".into(),
                    description: String::new(),
                })
                .collect(),
            users: vec![UserEvents {
                user_id: "u".into(),
                events: (0..n).map(|j| (j, j as i64)).collect(),
            }],
        };
        let split = split_leave_one_out(&corpus, 20).unwrap();
        let us = &split.user_splits[0];
        // manual truncation: last 20 items are 5..25
        assert_eq!(us.train, (5..23).collect::<Vec<_>>());
        assert_eq!(us.valid, 23);
        assert_eq!(us.test, 24);
    }

    #[test]
    fn head_tail_counts_and_tiebreak() {
        // 10 items with distinct train counts -> exactly 2 head items.
        let corpus = synth_generate(&SynthConfig::new(60, 10, 2, 1.2, 5)).unwrap();
        let split = split_leave_one_out(&corpus, 20).unwrap();
        assert_eq!(split.head_items.len(), 2);
        assert_eq!(split.head_items.len() + split.tail_items.len(), 10);

        // Tie at the boundary: craft popularity by hand through the oracle.
        let mut split2 = split.clone();
        split2.popularity_train = vec![9, 5, 5, 1, 1, 1, 1, 1, 1, 1]; // tie between items 1 and 2
        let part = head_tail_partition(&split2, PopularityMode::TrainOnly);
        // sort-with-tiebreak oracle
        let mut order: Vec<usize> = (0..10).collect();
        let pop = split2.popularity_train.clone();
        order.sort_by(|&a, &b| pop[b].cmp(&pop[a]).then(a.cmp(&b)));
        assert_eq!(part.head_items, {
            let mut h = order[..2].to_vec();
            h.sort_unstable();
            h
        });
        assert!(part.head_items.contains(&1));
        assert!(!part.head_items.contains(&2));
    }

    #[test]
    fn partition_covers_all_users_once() {
        let corpus = synth_generate(&SynthConfig::new(40, 20, 4, 1.0, 9)).unwrap();
        let split = split_leave_one_out(&corpus, 20).unwrap();
        let part = head_tail_partition(&split, PopularityMode::TrainOnly);
        assert_eq!(
            part.head_users.len() + part.tail_users.len(),
            split.n_users()
        );
        for u in 0..split.n_users() {
            let in_head = part.head_users.contains(&u);
            let in_tail = part.tail_users.contains(&u);
            assert!(in_head ^ in_tail);
        }
    }

    #[test]
    fn pseudo_documents_concatenate_in_order() {
        let corpus = Corpus {
            items: vec![
                ItemMeta {
                    id: "a".into(),
                    title: "red lipstick".into(),
                    description: "gloss".into(),
                },
                ItemMeta {
                    id: "b".into(),
                    title: "camping tent".into(),
                    description: String::new(),
                },
                ItemMeta {
                    id: "c".into(),
                    title: "x".into(),
                    description: "y".into(),
                },
                ItemMeta {
                    id: "d".into(),
                    title: "z".into(),
                    description: String::new(),
                },
            ],
            users: vec![UserEvents {
                user_id: "u".into(),
                events: vec![(0, 1), (1, 2), (2, 3), (3, 4)],
            }],
        };
        let split = split_leave_one_out(&corpus, 20).unwrap();
        let docs = build_pseudo_documents(&split);
        // train items are a,b only; c (valid) and d (test) never leak
        assert_eq!(docs[0], "red lipstick gloss camping tent");
    }

    #[test]
    fn pseudo_documents_never_leak_eval_targets() {
        let corpus = synth_generate(&SynthConfig::new(30, 15, 3, 0.5, 21)).unwrap();
        let split = split_leave_one_out(&corpus, 20).unwrap();
        let docs = build_pseudo_documents(&split);

        // Perturb every user's test event to a different item: train part
        // unchanged => documents and train popularity unchanged.
        let mut corpus2 = corpus.clone();
        for u in &mut corpus2.users {
            let last = u.events.len() - 1;
            let (it, ts) = u.events[last];
            u.events[last] = ((it + 1) % corpus2.items.len(), ts);
        }
        let split2 = split_leave_one_out(&corpus2, 20).unwrap();
        let docs2 = build_pseudo_documents(&split2);
        assert_eq!(docs, docs2);
        assert_eq!(split.popularity_train, split2.popularity_train);
    }

    #[test]
    fn synth_deterministic() {
        let a = synth_generate(&SynthConfig::new(40, 20, 4, 1.0, 123)).unwrap();
        let b = synth_generate(&SynthConfig::new(40, 20, 4, 1.0, 123)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = synth_generate(&SynthConfig::new(40, 20, 4, 1.0, 124)).unwrap();
        assert_ne!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&c).unwrap()
        );
    }

    #[test]
    fn synth_skew_zero_is_uniform_chi_squared() {
        let n_items = 100usize;
        let corpus = synth_generate(&SynthConfig::new(400, n_items, 4, 0.0, 77)).unwrap();
        let mut counts = vec![0f64; n_items];
        let mut total = 0f64;
        for u in &corpus.users {
            for &(it, _) in &u.events {
                counts[it] += 1.0;
                total += 1.0;
            }
        }
        let expected = total / n_items as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&o| (o - expected).powi(2) / expected)
            .sum();
        // Wilson–Hilferty upper quantile at alpha = 0.01
        let df = (n_items - 1) as f64;
        let z = 2.326_347_874_040_841; // Phi^{-1}(0.99)
        let crit = df * (1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 {chi2} >= critical {crit}");
    }

    #[test]
    fn synth_single_cluster_shares_vocabulary() {
        let corpus = synth_generate(&SynthConfig::new(10, 8, 1, 0.0, 3)).unwrap();
        for item in &corpus.items {
            for word in item.title.split_whitespace() {
                assert!(word.starts_with("c0w"), "unexpected word {word}");
            }
        }
    }

    #[test]
    fn synth_infeasible_sizes_error() {
        assert!(synth_generate(&SynthConfig::new(2, 20, 4, 0.0, 1)).is_err());
        assert!(synth_generate(&SynthConfig::new(20, 2, 4, 0.0, 1)).is_err());
        assert!(synth_generate(&SynthConfig::new(20, 20, 0, 0.0, 1)).is_err());
        assert!(synth_generate(&SynthConfig::new(20, 20, 2, -1.0, 1)).is_err());
    }

    #[test]
    fn jsonl_roundtrip_through_ingest() {
        let dir = tmpdir("roundtrip");
        let corpus = synth_generate(&SynthConfig::new(20, 12, 3, 0.8, 42)).unwrap();
        let inter = dir.join("inter.jsonl");
        let meta = dir.join("meta.jsonl");
        write_interactions_jsonl(&inter, &corpus).unwrap();
        write_meta_jsonl(&meta, &corpus).unwrap();
        let back = ingest(&inter, &meta).unwrap();
        assert_eq!(
            serde_json::to_vec(&corpus).unwrap(),
            serde_json::to_vec(&back).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}
