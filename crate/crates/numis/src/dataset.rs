//! Label tables, 64:16:20 iterative multi-label stratified splits, and
//! balanced per-concept sets via undersampling/oversampling.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("split ratios {0:?} must sum to 1")]
    BadRatios(Vec<f64>),
    #[error("dataset is empty")]
    Empty,
    #[error("concept '{0}' is degenerate: {1}")]
    DegenerateConcept(String, String),
    #[error("no positive samples for concept '{0}'")]
    NoPositives(String),
}

/// One labeled sample: an image id and its per-concept binary labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub id: String,
    pub labels: Vec<u8>,
}

/// The label CSV in memory: column names plus one row per accepted image.
#[derive(Debug, Clone, Default)]
pub struct LabelTable {
    pub concepts: Vec<String>,
    pub rows: Vec<LabelRow>,
}

impl LabelTable {
    pub fn concept_index(&self, concept: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == concept)
    }

    pub fn positives(&self, concept_idx: usize) -> usize {
        self.rows.iter().filter(|r| r.labels[concept_idx] == 1).count()
    }

    /// Serialize as CSV: header `image_id,<concept>...`, 0/1 cells, LF endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id");
        for c in &self.concepts {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.id);
            for &v in &r.labels {
                out.push(',');
                out.push(if v == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Option<LabelTable> {
        let mut lines = text.lines();
        let header = lines.next()?;
        let mut cols = header.split(',');
        if cols.next()? != "image_id" {
            return None;
        }
        let concepts: Vec<String> = cols.map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let id = parts.next()?.to_string();
            let labels: Vec<u8> = parts.map(|v| if v == "1" { 1 } else { 0 }).collect();
            if labels.len() != concepts.len() {
                return None;
            }
            rows.push(LabelRow { id, labels });
        }
        Some(LabelTable { concepts, rows })
    }
}

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.64, val: 0.16, test: 0.20, seed: 0 }
    }
}

/// Sample ids selected into one subset, in corpus order.
pub type Manifest = Vec<String>;

/// Greedy iterative stratification over multiple binary labels.
///
/// Repeatedly takes the label with the fewest unassigned positive samples and
/// deals those samples to the subset that most desires the label; ties break
/// by larger remaining capacity, then seeded-uniformly. All-negative leftovers
/// go to the subset with the most remaining room.
fn iterative_stratify(
    rows: &[&LabelRow],
    ratios: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let n_labels = rows.first().map(|r| r.labels.len()).unwrap_or(0);
    let n_subsets = ratios.len();
    let mut desired = vec![vec![0.0f64; n_subsets]; n_labels];
    for (l, d) in desired.iter_mut().enumerate() {
        let pos = rows.iter().filter(|r| r.labels[l] == 1).count() as f64;
        for (s, r) in ratios.iter().enumerate() {
            d[s] = pos * r;
        }
    }
    let mut capacity: Vec<f64> = ratios.iter().map(|r| r * rows.len() as f64).collect();
    let mut assigned: Vec<Option<usize>> = vec![None; rows.len()];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n_subsets];

    loop {
        // label with fewest remaining positive samples
        let mut pick: Option<(usize, usize)> = None;
        for l in 0..n_labels {
            let remaining = rows
                .iter()
                .enumerate()
                .filter(|(i, r)| assigned[*i].is_none() && r.labels[l] == 1)
                .count();
            if remaining > 0 && pick.map(|(_, c)| remaining < c).unwrap_or(true) {
                pick = Some((l, remaining));
            }
        }
        let Some((label, _)) = pick else { break };
        let candidates: Vec<usize> = (0..rows.len())
            .filter(|&i| assigned[i].is_none() && rows[i].labels[label] == 1)
            .collect();
        for i in candidates {
            let mut best: Vec<usize> = Vec::new();
            let mut best_desire = f64::NEG_INFINITY;
            for s in 0..n_subsets {
                if desired[label][s] > best_desire + 1e-12 {
                    best_desire = desired[label][s];
                    best = vec![s];
                } else if (desired[label][s] - best_desire).abs() <= 1e-12 {
                    best.push(s);
                }
            }
            if best.len() > 1 {
                let mut cap_best: Vec<usize> = Vec::new();
                let mut cap_max = f64::NEG_INFINITY;
                for &s in &best {
                    if capacity[s] > cap_max + 1e-12 {
                        cap_max = capacity[s];
                        cap_best = vec![s];
                    } else if (capacity[s] - cap_max).abs() <= 1e-12 {
                        cap_best.push(s);
                    }
                }
                best = cap_best;
            }
            let s = if best.len() > 1 {
                best[rng.gen_range(0..best.len())]
            } else {
                best[0]
            };
            assigned[i] = Some(s);
            out[s].push(i);
            capacity[s] -= 1.0;
            for (l, d) in desired.iter_mut().enumerate() {
                if rows[i].labels[l] == 1 {
                    d[s] -= 1.0;
                }
            }
        }
    }

    // leftover all-negative samples: deal by remaining capacity
    for i in 0..rows.len() {
        if assigned[i].is_some() {
            continue;
        }
        let mut best = 0;
        for s in 1..capacity.len() {
            if capacity[s] > capacity[best] + 1e-12 {
                best = s;
            }
        }
        assigned[i] = Some(best);
        out[best].push(i);
        capacity[best] -= 1.0;
    }
    out
}

/// 64:16:20 train/val/test split: test (20%) is carved first, then the
/// remainder is split 80:20 into train and val. Deterministic given the seed.
pub fn stratified_split(
    table: &LabelTable,
    spec: &SplitSpec,
) -> Result<(Manifest, Manifest, Manifest), DatasetError> {
    if table.rows.is_empty() {
        return Err(DatasetError::Empty);
    }
    let sum = spec.train + spec.val + spec.test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(vec![spec.train, spec.val, spec.test]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let all: Vec<&LabelRow> = table.rows.iter().collect();
    let test_ratio = spec.test;
    let first = iterative_stratify(&all, &[1.0 - test_ratio, test_ratio], &mut rng);
    let mut rest_idx = first[0].clone();
    rest_idx.sort_unstable();
    let mut test_idx = first[1].clone();
    test_idx.sort_unstable();

    let rest: Vec<&LabelRow> = rest_idx.iter().map(|&i| all[i]).collect();
    let val_ratio = spec.val / (spec.train + spec.val);
    let second = iterative_stratify(&rest, &[1.0 - val_ratio, val_ratio], &mut rng);
    let mut train_idx: Vec<usize> = second[0].iter().map(|&i| rest_idx[i]).collect();
    train_idx.sort_unstable();
    let mut val_idx: Vec<usize> = second[1].iter().map(|&i| rest_idx[i]).collect();
    val_idx.sort_unstable();

    let name = |ix: &[usize]| ix.iter().map(|&i| table.rows[i].id.clone()).collect();
    Ok((name(&train_idx), name(&val_idx), name(&test_idx)))
}

/// Per-concept positive-sample loss weight: negatives / positives on train.
pub fn positive_weights(table: &LabelTable, train_ids: &[String]) -> Result<Vec<f32>, DatasetError> {
    let members: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    let mut weights = Vec::with_capacity(table.concepts.len());
    for (c, name) in table.concepts.iter().enumerate() {
        let mut pos = 0usize;
        let mut neg = 0usize;
        for r in &table.rows {
            if !members.contains(r.id.as_str()) {
                continue;
            }
            if r.labels[c] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        if pos == 0 {
            return Err(DatasetError::DegenerateConcept(name.clone(), "no positive samples in train".into()));
        }
        if neg == 0 {
            return Err(DatasetError::DegenerateConcept(name.clone(), "no negative samples in train".into()));
        }
        weights.push(neg as f32 / pos as f32);
    }
    Ok(weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceMode {
    Undersample,
    /// Replicate positives to match a larger negative draw, capped at 10x
    /// the positive count.
    Oversample,
}

/// Exactly balanced per-concept sample-id list with labels for one concept.
pub fn balance_binary(
    table: &LabelTable,
    concept: &str,
    mode: BalanceMode,
    seed: u64,
) -> Result<Vec<(String, u8)>, DatasetError> {
    let c = table
        .concept_index(concept)
        .ok_or_else(|| DatasetError::NoPositives(concept.to_string()))?;
    let mut pos: Vec<&LabelRow> = table.rows.iter().filter(|r| r.labels[c] == 1).collect();
    let mut neg: Vec<&LabelRow> = table.rows.iter().filter(|r| r.labels[c] == 0).collect();
    if pos.is_empty() {
        return Err(DatasetError::NoPositives(concept.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, u8)> = Vec::new();
    match mode {
        BalanceMode::Undersample => {
            let k = pos.len().min(neg.len());
            neg.shuffle(&mut rng);
            pos.shuffle(&mut rng);
            for r in pos.iter().take(k) {
                out.push((r.id.clone(), 1));
            }
            for r in neg.iter().take(k) {
                out.push((r.id.clone(), 0));
            }
        }
        BalanceMode::Oversample => {
            let target = neg.len().min(pos.len() * 10);
            neg.shuffle(&mut rng);
            for (i, _) in (0..target).enumerate() {
                let r = pos[i % pos.len()];
                out.push((r.id.clone(), 1));
            }
            for r in neg.iter().take(target) {
                out.push((r.id.clone(), 0));
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}
