//! Mode discovery, diversity and rank statistics, and the per-iteration
//! metric records written as JSON lines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::edit_distance;
use crate::{Error, Result, SCHEMA_VERSION};

/// Online mode set: a candidate is accepted when its reward reaches
/// `reward_threshold` and its edit distance to every accepted mode exceeds
/// `distance_threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTracker {
    pub reward_threshold: f64,
    pub distance_threshold: usize,
    accepted: Vec<Vec<u8>>,
}

impl ModeTracker {
    pub fn new(reward_threshold: f64, distance_threshold: usize) -> Self {
        Self { reward_threshold, distance_threshold, accepted: Vec::new() }
    }

    pub fn count(&self) -> usize {
        self.accepted.len()
    }

    pub fn modes(&self) -> &[Vec<u8>] {
        &self.accepted
    }

    pub fn accepts(&self, object: &[u8], reward: f64) -> bool {
        reward >= self.reward_threshold
            && self.accepted.iter().all(|m| edit_distance(m, object) > self.distance_threshold)
    }

    /// Processes candidates in order and returns how many were accepted.
    pub fn update_modes<'a, I>(&mut self, candidates: I) -> usize
    where
        I: IntoIterator<Item = (&'a [u8], f64)>,
    {
        let before = self.accepted.len();
        for (object, reward) in candidates {
            if self.accepts(object, reward) {
                self.accepted.push(object.to_vec());
            }
        }
        self.accepted.len() - before
    }
}

/// Mean normalized edit similarity `1 - d / max_len` over all unordered
/// pairs of the `k` highest-reward objects. Reward ties keep input order.
pub fn pairwise_mean_similarity(objects: &[(Vec<u8>, f64)], k: usize, max_len: usize) -> Result<f64> {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].1.total_cmp(&objects[a].1));
    order.truncate(k);
    if order.len() < 2 {
        return Err(Error::Degenerate(format!("need at least 2 objects, got {}", order.len())));
    }
    if max_len == 0 {
        return Err(Error::Degenerate("max_len must be positive".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, &a) in order.iter().enumerate() {
        for &b in &order[i + 1..] {
            let d = edit_distance(&objects[a].0, &objects[b].0) as f64;
            total += 1.0 - d / max_len as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("spearman inputs have lengths {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Degenerate(format!("spearman needs at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("spearman of a constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStat {
    pub mean: f64,
    pub stderr: f64,
}

pub fn mean_stat(xs: &[f64]) -> MeanStat {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return MeanStat { mean: f64::NAN, stderr: f64::NAN };
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return MeanStat { mean: xs[0], stderr: 0.0 };
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    MeanStat { mean, stderr: (var / n).sqrt() }
}

/// One training iteration. `wall_ms` is null unless wall-clock recording is
/// enabled, so seeded runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub step: u64,
    pub mean_reward: f64,
    pub modes: usize,
    pub loss_tb: f64,
    pub loss_q: f64,
    pub p: f64,
    pub wall_ms: Option<f64>,
}

impl MetricRecord {
    pub fn new(step: u64, mean_reward: f64, modes: usize, loss_tb: f64, loss_q: f64, p: f64) -> Self {
        Self { schema_version: SCHEMA_VERSION, step, mean_reward, modes, loss_tb, loss_q, p, wall_ms: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
}

impl RunMetrics {
    /// Appends a record; steps must increase and mode counts must not drop.
    pub fn push(&mut self, rec: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.step <= last.step {
                return Err(Error::InvalidState(format!("step {} after step {}", rec.step, last.step)));
            }
            if rec.modes < last.modes {
                return Err(Error::InvalidState(format!("mode count fell from {} to {}", last.modes, rec.modes)));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean of `mean_reward` over the last `window` records.
    pub fn tail_mean_reward(&self, window: usize) -> Option<f64> {
        let n = self.records.len().min(window);
        if n == 0 {
            return None;
        }
        Some(self.records[self.records.len() - n..].iter().map(|r| r.mean_reward).sum::<f64>() / n as f64)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            write_record(&mut w, r)?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let mut out = RunMetrics::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            out.push(serde_json::from_str(line)?)?;
        }
        Ok(out)
    }
}

pub fn write_record<W: Write>(mut w: W, rec: &MetricRecord) -> Result<()> {
    serde_json::to_writer(&mut w, rec)?;
    w.write_all(b"\n")?;
    Ok(())
}
