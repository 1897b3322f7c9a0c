//! Top-K ranking, success rate / precision / recall, frequency slices and
//! ablation comparison.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EntityId;
use crate::dataset::{DatasetError, PreparedData};
use crate::graphs::CallInteractionGraph;
use crate::model::{Ablation, Model, ModelError, ModelGraphs};
use crate::numerics::dot;
use crate::training::{TestCase, TrainConfig};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];
/// APIs called by at most this many training methods form the low slice.
pub const LOW_FREQUENCY_MAX: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no ranked list for test method {0}")]
    MissingList(EntityId),
    #[error("K values must be positive")]
    BadK,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub method: Option<EntityId>,
    /// Best first; scores non-increasing, ties by ascending id.
    pub items: Vec<(EntityId, f64)>,
}

impl RankedList {
    pub fn apis(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.items.iter().map(|(a, _)| *a)
    }
}

/// Top `k` of `scores` after dropping `exclude`; ties by ascending id.
pub fn top_k(
    scores: impl IntoIterator<Item = (EntityId, f64)>,
    exclude: &BTreeSet<EntityId>,
    k: usize,
) -> Vec<(EntityId, f64)> {
    let mut all: Vec<(EntityId, f64)> = scores.into_iter().filter(|(a, _)| !exclude.contains(a)).collect();
    let cmp = |x: &(EntityId, f64), y: &(EntityId, f64)| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0));
    if k < all.len() {
        all.select_nth_unstable_by(k, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all
}

/// Inference representations of every API, computed once per model.
pub struct ApiTable {
    reps: Vec<Vec<f64>>,
}

impl ApiTable {
    pub fn build(model: &Model, graphs: &ModelGraphs) -> Result<Self, ModelError> {
        let reps = (0..graphs.api_count() as u32)
            .into_par_iter()
            .map(|a| model.api_representation(graphs, EntityId::api(a)))
            .collect::<Result<_, _>>()?;
        Ok(Self { reps })
    }

    /// Ranks all APIs except the context for one query.
    pub fn rank(
        &self,
        model: &Model,
        graphs: &ModelGraphs,
        method: Option<EntityId>,
        context: &[EntityId],
        k: usize,
    ) -> Result<RankedList, ModelError> {
        let q = model.query_representation(graphs, method, context)?;
        let scores = self
            .reps
            .iter()
            .enumerate()
            .map(|(a, r)| (EntityId::api(a as u32), dot(&q, r)));
        let exclude = context.iter().copied().collect();
        Ok(RankedList {
            method,
            items: top_k(scores, &exclude, k),
        })
    }

    pub fn rank_all(
        &self,
        model: &Model,
        graphs: &ModelGraphs,
        cases: &[TestCase],
        k: usize,
    ) -> Result<Vec<RankedList>, ModelError> {
        cases
            .par_iter()
            .map(|c| self.rank(model, graphs, Some(c.method), &c.context, k))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub sr: f64,
    pub p: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub methods: usize,
    pub at: Vec<MetricsAtK>,
}

impl SliceMetrics {
    pub fn get(&self, k: usize) -> Option<&MetricsAtK> {
        self.at.iter().find(|m| m.k == k)
    }
}

fn list_for<'a>(lists: &'a [RankedList], case: &TestCase) -> Result<&'a RankedList, EvalError> {
    lists
        .iter()
        .find(|l| l.method == Some(case.method))
        .ok_or(EvalError::MissingList(case.method))
}

/// SR, P and R at each K, with each case's ground truth optionally
/// restricted by `keep`. Cases left with no ground truth are skipped;
/// `None` when none remain.
fn metrics_filtered(
    lists: &[RankedList],
    cases: &[TestCase],
    ks: &[usize],
    keep: impl Fn(EntityId) -> bool,
) -> Result<Option<SliceMetrics>, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::BadK);
    }
    let mut sums = vec![(0.0, 0.0, 0.0); ks.len()];
    let mut n = 0;
    for case in cases {
        let list = list_for(lists, case)?;
        let gt: BTreeSet<EntityId> = case.ground_truth.iter().copied().filter(|&g| keep(g)).collect();
        if gt.is_empty() {
            continue;
        }
        n += 1;
        for (s, &k) in sums.iter_mut().zip(ks) {
            let hits = list.apis().take(k).filter(|a| gt.contains(a)).count() as f64;
            s.0 += (hits > 0.0) as u8 as f64;
            s.1 += hits / k as f64;
            s.2 += hits / gt.len() as f64;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let nf = n as f64;
    Ok(Some(SliceMetrics {
        methods: n,
        at: ks
            .iter()
            .zip(sums)
            .map(|(&k, (sr, p, r))| MetricsAtK {
                k,
                sr: sr / nf,
                p: p / nf,
                r: r / nf,
            })
            .collect(),
    }))
}

/// Metrics over all cases. Every case needs a ranked list.
pub fn metrics(lists: &[RankedList], cases: &[TestCase], ks: &[usize]) -> Result<SliceMetrics, EvalError> {
    Ok(metrics_filtered(lists, cases, ks, |_| true)?.unwrap_or(SliceMetrics {
        methods: 0,
        at: ks
            .iter()
            .map(|&k| MetricsAtK {
                k,
                sr: 0.0,
                p: 0.0,
                r: 0.0,
            })
            .collect(),
    }))
}

/// `(low, high)` slices: ground truth restricted to APIs called by at most
/// `threshold` training methods, and to the rest.
pub fn slice_by_frequency(
    lists: &[RankedList],
    cases: &[TestCase],
    ks: &[usize],
    interaction: &CallInteractionGraph,
    threshold: usize,
) -> Result<(Option<SliceMetrics>, Option<SliceMetrics>), EvalError> {
    let low = |a: EntityId| interaction.api_frequency(a.index) <= threshold;
    Ok((
        metrics_filtered(lists, cases, ks, low)?,
        metrics_filtered(lists, cases, ks, |a| !low(a))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub ks: Vec<usize>,
    pub overall: SliceMetrics,
    pub low_frequency: Option<SliceMetrics>,
    pub high_frequency: Option<SliceMetrics>,
    pub metadata: serde_json::Value,
}

impl MetricsReport {
    pub fn build(
        variant: &str,
        lists: &[RankedList],
        cases: &[TestCase],
        ks: &[usize],
        interaction: &CallInteractionGraph,
        metadata: serde_json::Value,
    ) -> Result<Self, EvalError> {
        let overall = metrics(lists, cases, ks)?;
        let (low_frequency, high_frequency) = slice_by_frequency(lists, cases, ks, interaction, LOW_FREQUENCY_MAX)?;
        Ok(Self {
            variant: variant.to_string(),
            ks: ks.to_vec(),
            overall,
            low_frequency,
            high_frequency,
            metadata,
        })
    }

    pub fn sr(&self, k: usize) -> Option<f64> {
        self.overall.get(k).map(|m| m.sr)
    }
}

/// Flat `variant,k,slice,sr,p,r` rows; empty slices are omitted.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("variant,k,slice,sr,p,r\n");
    for rep in reports {
        let slices = [
            ("all", Some(&rep.overall)),
            ("low", rep.low_frequency.as_ref()),
            ("high", rep.high_frequency.as_ref()),
        ];
        for (name, slice) in slices {
            let Some(slice) = slice else { continue };
            for m in &slice.at {
                let _ = writeln!(out, "{},{},{},{},{},{}", rep.variant, m.k, name, m.sr, m.p, m.r);
            }
        }
    }
    out
}

/// Trains one model per variant with the same seed and split and reports
/// each on the held-out cases.
pub fn ablate_compare(
    data: &PreparedData,
    base: TrainConfig,
    variants: &[Ablation],
    ks: &[usize],
) -> Result<Vec<MetricsReport>, DatasetError> {
    let graphs = data.model_graphs();
    variants
        .iter()
        .map(|&ablation| {
            let config = TrainConfig { ablation, ..base };
            let (ck, _) = data.train(&graphs, config, |_| {})?;
            let model = ck.model().map_err(EvalError::from)?;
            let meta = serde_json::to_value(&ck.manifest).expect("manifest serializes");
            data.evaluate(ablation.as_str(), &model, &graphs, None, ks, meta)
        })
        .collect()
}

/// Area under the ROC curve of `scores` against binary `labels`, with ties
/// counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut k) = (0.0, 0);
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && scores[idx[end + 1]] == scores[idx[k]] {
            end += 1;
        }
        let avg = (k + end) as f64 / 2.0 + 1.0;
        rank_sum += (k..=end).filter(|&j| labels[idx[j]]).count() as f64 * avg;
        k = end + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(m: u32, gt: &[u32]) -> TestCase {
        TestCase {
            method: EntityId::method(m),
            context: vec![EntityId::api(100); 4],
            ground_truth: gt.iter().map(|&g| EntityId::api(g)).collect(),
        }
    }

    fn list(m: u32, apis: &[u32]) -> RankedList {
        RankedList {
            method: Some(EntityId::method(m)),
            items: apis
                .iter()
                .enumerate()
                .map(|(r, &a)| (EntityId::api(a), -(r as f64)))
                .collect(),
        }
    }

    #[test]
    fn hand_computed_case() {
        // GT {a, b}; top-10 contains a only
        let l = list(0, &[9, 1, 8, 7, 6, 5, 4, 3, 12, 11]);
        let m = metrics(&[l], &[case(0, &[1, 2])], &[10]).unwrap();
        let at = m.get(10).unwrap();
        assert_eq!((at.sr, at.p, at.r), (1.0, 0.1, 0.5));
    }

    #[test]
    fn perfect_singleton_and_misses() {
        let m = metrics(&[list(0, &[3, 4])], &[case(0, &[3])], &[1]).unwrap();
        assert_eq!((m.at[0].sr, m.at[0].p, m.at[0].r), (1.0, 1.0, 1.0));
        let m = metrics(&[list(0, &[4, 5])], &[case(0, &[3])], &DEFAULT_KS).unwrap();
        assert!(m.at.iter().all(|a| a.sr == 0.0 && a.p == 0.0 && a.r == 0.0));
    }

    #[test]
    fn missing_list_is_error() {
        assert!(matches!(
            metrics(&[list(0, &[1])], &[case(1, &[1])], &[1]),
            Err(EvalError::MissingList(_))
        ));
    }

    #[test]
    fn top_k_ties_and_exclusion() {
        let scores = vec![
            (EntityId::api(3), 1.0),
            (EntityId::api(1), 1.0),
            (EntityId::api(2), 2.0),
            (EntityId::api(0), 5.0),
        ];
        let ex = BTreeSet::from([EntityId::api(0)]);
        let top = top_k(scores.clone(), &ex, 10);
        assert_eq!(top.iter().map(|t| t.0.index).collect::<Vec<_>>(), [2, 1, 3]);
        assert_eq!(top_k(scores, &ex, 2).len(), 2);
    }

    #[test]
    fn frequency_slices() {
        let c = crate::corpus::Corpus::from_records(
            (0..4)
                .map(|k| {
                    let calls = if k < 3 {
                        vec!["x.y.Z.lo()", "x.y.Z.hi()"]
                    } else {
                        vec!["x.y.Z.hi()"]
                    };
                    (
                        k + 1,
                        crate::corpus::MethodLine {
                            project: "P".into(),
                            package: "p".into(),
                            class: "C".into(),
                            method: format!("m{k}"),
                            calls: calls.into_iter().map(String::from).collect(),
                        },
                    )
                })
                .collect(),
            vec![],
        )
        .unwrap();
        let g = CallInteractionGraph::build(&c);
        let (lo, hi) = (0u32, 1u32);
        assert_eq!(g.api_frequency(lo), 3);
        assert_eq!(g.api_frequency(hi), 4);
        let lists = [list(0, &[lo, hi]), list(1, &[hi])];
        let cases = [case(0, &[lo, hi]), case(1, &[hi])];
        let (low, high) = slice_by_frequency(&lists, &cases, &[1], &g, 3).unwrap();
        let low = low.unwrap();
        assert_eq!(low.methods, 1);
        assert_eq!(low.at[0].sr, 1.0);
        let high = high.unwrap();
        assert_eq!(high.methods, 2);
        assert_eq!(high.at[0].sr, 0.5);
        let (low, _) = slice_by_frequency(&lists[1..], &cases[1..], &[1], &g, 3).unwrap();
        assert!(low.is_none());
    }

    #[test]
    fn csv_rows() {
        let cases = [case(0, &[1])];
        let lists = [list(0, &[1])];
        let rep = MetricsReport {
            variant: "none".into(),
            ks: vec![1],
            overall: metrics(&lists, &cases, &[1]).unwrap(),
            low_frequency: None,
            high_frequency: None,
            metadata: serde_json::Value::Null,
        };
        assert_eq!(reports_csv(&[rep]), "variant,k,slice,sr,p,r\nnone,1,all,1,1,1\n");
    }

    #[test]
    fn auc_values() {
        assert_eq!(auc(&[0.1, 0.9], &[false, true]), 1.0);
        assert_eq!(auc(&[0.9, 0.1], &[false, true]), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[false, true]), 0.5);
    }
}
