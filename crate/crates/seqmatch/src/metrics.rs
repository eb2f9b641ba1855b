//! Ranking metrics and the evaluation protocol: R_n@k, MAP, MRR, P@1,
//! context filtering for human-labeled test sets, and the scorer-to-report
//! pipeline.
//!
//! Ranking is by score descending with ties broken by input candidate order
//! (stable), so evaluation is deterministic and every metric is invariant
//! under strictly increasing score transforms.

use crate::error::{Error, Result};

/// One context's scored candidate list.
#[derive(Debug, Clone)]
pub struct Group {
    pub context_id: usize,
    /// Number of utterances in the raw context, for length bucketing.
    pub context_turns: usize,
    /// (candidate id, score, positive) in input order.
    pub candidates: Vec<(usize, f64, bool)>,
}

impl Group {
    /// Candidate indices sorted by descending score, stable on ties.
    fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.sort_by(|&a, &b| {
            self.candidates[b].1.partial_cmp(&self.candidates[a].1).expect("finite scores")
        });
        order
    }

    fn positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.2).count()
    }
}

/// Per-context scored candidate lists; the unit metrics consume.
#[derive(Debug, Clone, Default)]
pub struct RankedRun {
    pub groups: Vec<Group>,
}

impl RankedRun {
    pub fn push(&mut self, group: Group) {
        assert!(group.candidates.len() >= 2, "a ranking group needs at least 2 candidates");
        assert!(group.candidates.iter().all(|c| c.1.is_finite()), "scores must be finite");
        self.groups.push(group);
    }
}

/// Per-group recall at position k in n candidates: the fraction of the
/// group's positives ranked in the top k. With the single-positive
/// convention this is exactly the 0/1 "is the positive in the top k".
pub fn recall_n_at_k(group: &Group, n: usize, k: usize) -> Result<f64> {
    if group.candidates.len() != n {
        return Err(Error::Protocol(format!(
            "R_{n}@{k}: group {} has {} candidates, expected {n}",
            group.context_id,
            group.candidates.len()
        )));
    }
    let positives = group.positives();
    if positives == 0 {
        return Err(Error::Protocol(format!(
            "R_{n}@{k}: group {} has no positive candidate",
            group.context_id
        )));
    }
    let hits = group.ranking().iter().take(k).filter(|&&i| group.candidates[i].2).count();
    Ok(hits as f64 / positives as f64)
}

pub fn mean_recall_n_at_k(run: &RankedRun, n: usize, k: usize) -> Result<f64> {
    mean_over_groups(run, |g| recall_n_at_k(g, n, k))
}

/// Average precision: mean over positives of (positives at or above its
/// rank) / rank.
pub fn average_precision(group: &Group) -> Result<f64> {
    if group.positives() == 0 {
        return Err(Error::Protocol(format!(
            "AP: group {} has no positive candidate (filter first)",
            group.context_id
        )));
    }
    let mut seen = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in group.ranking().iter().enumerate() {
        if group.candidates[i].2 {
            seen += 1;
            sum += seen as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / seen as f64)
}

pub fn mean_average_precision(run: &RankedRun) -> Result<f64> {
    mean_over_groups(run, average_precision)
}

pub fn reciprocal_rank(group: &Group) -> Result<f64> {
    if group.positives() == 0 {
        return Err(Error::Protocol(format!(
            "MRR: group {} has no positive candidate",
            group.context_id
        )));
    }
    let first =
        group.ranking().iter().position(|&i| group.candidates[i].2).expect("checked above");
    Ok(1.0 / (first + 1) as f64)
}

pub fn mrr(run: &RankedRun) -> Result<f64> {
    mean_over_groups(run, reciprocal_rank)
}

/// Fraction of groups whose top-ranked candidate is positive.
pub fn p_at_1(run: &RankedRun) -> Result<f64> {
    mean_over_groups(run, |g| {
        if g.positives() == 0 {
            return Err(Error::Protocol(format!(
                "P@1: group {} has no positive candidate",
                g.context_id
            )));
        }
        Ok(if g.candidates[g.ranking()[0]].2 { 1.0 } else { 0.0 })
    })
}

fn mean_over_groups(run: &RankedRun, f: impl Fn(&Group) -> Result<f64>) -> Result<f64> {
    if run.groups.is_empty() {
        return Err(Error::Protocol("no ranking groups".into()));
    }
    let mut sum = 0.0;
    for g in &run.groups {
        sum += f(g)?;
    }
    Ok(sum / run.groups.len() as f64)
}

/// Removes groups whose candidates are all positive or all negative (the
/// protocol for human-labeled candidate sets); returns the removed count.
pub fn filter_contexts(run: RankedRun) -> (RankedRun, usize) {
    let before = run.groups.len();
    let groups: Vec<Group> = run
        .groups
        .into_iter()
        .filter(|g| {
            let p = g.positives();
            p > 0 && p < g.candidates.len()
        })
        .collect();
    let removed = before - groups.len();
    (RankedRun { groups }, removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// R_n@k over groups of exactly n candidates.
    RecallAtK { n: usize, k: usize },
    Map,
    Mrr,
    PAt1,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::RecallAtK { n, k } => write!(f, "R{n}@{k}"),
            Metric::Map => write!(f, "MAP"),
            Metric::Mrr => write!(f, "MRR"),
            Metric::PAt1 => write!(f, "P@1"),
        }
    }
}

/// The two published metric protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// R_2@1 and R_10@{1,2,5}; groups are sampled with exactly one positive.
    Ubuntu,
    /// MAP, MRR, P@1, R_10@{1,2,5} after removing all-positive/all-negative
    /// contexts; R_2@1 is excluded because contexts may have several correct
    /// responses.
    Douban,
}

impl Protocol {
    pub fn metrics(self) -> Vec<Metric> {
        match self {
            Protocol::Ubuntu => vec![
                Metric::RecallAtK { n: 2, k: 1 },
                Metric::RecallAtK { n: 10, k: 1 },
                Metric::RecallAtK { n: 10, k: 2 },
                Metric::RecallAtK { n: 10, k: 5 },
            ],
            Protocol::Douban => vec![
                Metric::Map,
                Metric::Mrr,
                Metric::PAt1,
                Metric::RecallAtK { n: 10, k: 1 },
                Metric::RecallAtK { n: 10, k: 2 },
                Metric::RecallAtK { n: 10, k: 5 },
            ],
        }
    }

    pub fn filters(self) -> bool {
        matches!(self, Protocol::Douban)
    }
}

#[derive(Debug, Clone)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<MetricValue>,
    pub groups_evaluated: usize,
    pub groups_removed: usize,
}

impl Report {
    /// Aligned text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "groups evaluated: {} (removed by filtering: {})\n",
            self.groups_evaluated, self.groups_removed
        ));
        out.push_str(&format!("{:<8} {:>10} {:>8}\n", "metric", "value", "groups"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<8} {:>10.4} {:>8}\n",
                row.metric.to_string(),
                row.value,
                row.groups
            ));
        }
        out
    }

    /// Machine-readable line-delimited records.
    pub fn records(&self) -> String {
        self.rows
            .iter()
            .map(|r| format!("metric={}\tvalue={:.6}\tgroups={}\n", r.metric, r.value, r.groups))
            .collect()
    }
}

/// Computes a metric over the (already filtered) run.
///
/// R_n@k on groups larger than n follows the published convention: it is
/// taken over the group's first n candidates (test sets list the true
/// response first), which is how R_2@1 and R_10@k coexist on 10-candidate
/// groups. R_2@1 additionally refuses multi-positive subgroups, which would
/// bias the measure.
pub fn compute_metric(run: &RankedRun, metric: Metric) -> Result<MetricValue> {
    let value = match metric {
        Metric::RecallAtK { n, k } => {
            let mut sum = 0.0;
            for g in &run.groups {
                if g.candidates.len() < n {
                    return Err(Error::Protocol(format!(
                        "R_{n}@{k}: group {} has only {} candidates",
                        g.context_id,
                        g.candidates.len()
                    )));
                }
                let sub = Group {
                    context_id: g.context_id,
                    context_turns: g.context_turns,
                    candidates: g.candidates[..n].to_vec(),
                };
                if n == 2 && k == 1 && sub.positives() > 1 {
                    return Err(Error::Protocol(format!(
                        "R_2@1 is undefined on multi-positive groups (group {})",
                        g.context_id
                    )));
                }
                sum += recall_n_at_k(&sub, n, k)?;
            }
            if run.groups.is_empty() {
                return Err(Error::Protocol("no ranking groups".into()));
            }
            sum / run.groups.len() as f64
        }
        Metric::Map => mean_average_precision(run)?,
        Metric::Mrr => mrr(run)?,
        Metric::PAt1 => p_at_1(run)?,
    };
    Ok(MetricValue { metric, value, groups: run.groups.len() })
}

/// Scores every candidate, assembles the run, applies protocol filtering,
/// and emits the protocol's metrics. `scorer` maps an instance index to its
/// score; `groups` are index ranges into the instance list.
pub fn evaluate(
    scorer: impl Fn(usize) -> f64,
    groups: &[std::ops::Range<usize>],
    labels: &[u8],
    turn_counts: &[usize],
    protocol: Protocol,
) -> Result<(Report, RankedRun)> {
    let mut run = RankedRun::default();
    for (gid, range) in groups.iter().enumerate() {
        let candidates: Vec<(usize, f64, bool)> = range
            .clone()
            .enumerate()
            .map(|(cid, idx)| (cid, scorer(idx), labels[idx] == 1))
            .collect();
        run.push(Group { context_id: gid, context_turns: turn_counts[range.start], candidates });
    }
    let (run, removed) = if protocol.filters() { filter_contexts(run) } else { (run, 0) };
    if run.groups.is_empty() {
        return Err(Error::Protocol("no groups left to evaluate".into()));
    }
    let rows = protocol
        .metrics()
        .into_iter()
        .map(|m| compute_metric(&run, m))
        .collect::<Result<Vec<_>>>()?;
    let report = Report { rows, groups_evaluated: run.groups.len(), groups_removed: removed };
    Ok((report, run))
}

/// Context-length buckets used for length-sensitivity analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthBucket {
    /// (0, 5]
    Short,
    /// (5, 10]
    Medium,
    /// (10, inf)
    Long,
}

impl LengthBucket {
    pub fn parse(s: &str) -> Result<Self> {
        match s.replace(' ', "").as_str() {
            "(0,5]" => Ok(LengthBucket::Short),
            "(5,10]" => Ok(LengthBucket::Medium),
            "(10,)" | "(10,inf)" => Ok(LengthBucket::Long),
            other => Err(Error::Usage(format!(
                "unknown bucket {other:?}: expected (0,5], (5,10] or (10,)"
            ))),
        }
    }

    pub fn contains(self, turns: usize) -> bool {
        match self {
            LengthBucket::Short => (1..=5).contains(&turns),
            LengthBucket::Medium => (6..=10).contains(&turns),
            LengthBucket::Long => turns > 10,
        }
    }
}

pub fn bucket_run(run: &RankedRun, bucket: LengthBucket) -> RankedRun {
    RankedRun {
        groups: run.groups.iter().filter(|g| bucket.contains(g.context_turns)).cloned().collect(),
    }
}
