//! Metrics against a brute-force recomputation, ranking invariants and the
//! co-occurrence baseline against a direct scorer.

use std::collections::{BTreeMap, BTreeSet};

use mega_core::baselines::{baseline_rank, BaselineKind};
use mega_core::corpus::{synth_api_name, synth_corpus, EntityId, EntityKind};
use mega_core::dataset::PreparedData;
use mega_core::evaluation::{metrics, ApiTable, RankedList};
use mega_core::model::{Model, ModelParams};
use mega_core::training::{TestCase, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KS: [usize; 5] = [1, 3, 5, 10, 20];

fn fixture(seed: u64) -> (Vec<RankedList>, Vec<TestCase>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_apis = rng.gen_range(8..40u32);
    let mut lists = Vec::new();
    let mut cases = Vec::new();
    for m in 0..rng.gen_range(1..12u32) {
        let mut all: Vec<u32> = (0..n_apis).collect();
        all.shuffle(&mut rng);
        let context: Vec<EntityId> = all[..4].iter().map(|&a| EntityId::api(a)).collect();
        let rest = &all[4..];
        let gt_len = rng.gen_range(1..=rest.len().min(6));
        let mut gt: Vec<u32> = rest.choose_multiple(&mut rng, gt_len).copied().collect();
        gt.shuffle(&mut rng);
        let mut ranked = rest.to_vec();
        ranked.shuffle(&mut rng);
        ranked.truncate(rng.gen_range(0..=ranked.len()));
        cases.push(TestCase {
            method: EntityId::method(m),
            context,
            ground_truth: gt.into_iter().map(EntityId::api).collect(),
        });
        lists.push(RankedList {
            method: Some(EntityId::method(m)),
            items: ranked
                .iter()
                .enumerate()
                .map(|(r, &a)| (EntityId::api(a), -(r as f64)))
                .collect(),
        });
    }
    (lists, cases)
}

/// (SR, P, R) at `k`, computed one case at a time.
fn oracle(lists: &[RankedList], cases: &[TestCase], k: usize) -> (f64, f64, f64) {
    let (mut sr, mut p, mut r) = (0.0, 0.0, 0.0);
    for c in cases {
        let list = lists.iter().find(|l| l.method == Some(c.method)).unwrap();
        let mut hits = 0usize;
        for (rank, (api, _)) in list.items.iter().enumerate() {
            if rank < k && c.ground_truth.contains(api) {
                hits += 1;
            }
        }
        if hits > 0 {
            sr += 1.0;
        }
        p += hits as f64 / k as f64;
        r += hits as f64 / c.ground_truth.len() as f64;
    }
    let n = cases.len() as f64;
    (sr / n, p / n, r / n)
}

proptest! {
    #[test]
    fn metrics_match_brute_force(seed in any::<u64>()) {
        let (lists, cases) = fixture(seed);
        let got = metrics(&lists, &cases, &KS).unwrap();
        for m in &got.at {
            let (sr, p, r) = oracle(&lists, &cases, m.k);
            prop_assert_eq!((m.sr, m.p, m.r), (sr, p, r));
        }
    }

    #[test]
    fn success_and_recall_monotone_in_k(seed in any::<u64>()) {
        let (lists, cases) = fixture(seed);
        let got = metrics(&lists, &cases, &KS).unwrap();
        for w in got.at.windows(2) {
            prop_assert!(w[0].sr <= w[1].sr);
            prop_assert!(w[0].r <= w[1].r);
        }
    }

    #[test]
    fn matches_bounded_by_k_and_ground_truth(seed in any::<u64>()) {
        let (lists, cases) = fixture(seed);
        for (l, c) in lists.iter().zip(&cases) {
            let gt: BTreeSet<EntityId> = c.ground_truth.iter().copied().collect();
            for k in KS {
                let hits = l.apis().take(k).filter(|a| gt.contains(a)).count();
                prop_assert!(hits <= k.min(gt.len()));
            }
        }
    }
}

#[test]
fn ranked_lists_never_contain_context() {
    let data = PreparedData::prepare(&synth_corpus(40, 24, 4, 5).unwrap(), 3, 15).unwrap();
    let graphs = data.model_graphs();
    let params = ModelParams::xavier(graphs.entity_count(), graphs.bucket_count(), 8, 3);
    let model = Model::new(params, TrainConfig::default().model_config()).unwrap();
    let table = ApiTable::build(&model, &graphs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let context: Vec<EntityId> = (0..4).map(|_| EntityId::api(rng.gen_range(0..24))).collect();
        let list = table.rank(&model, &graphs, None, &context, 24).unwrap();
        assert!(list.apis().all(|a| !context.contains(&a)));
        let distinct: BTreeSet<_> = context.iter().collect();
        assert_eq!(list.items.len(), 24 - distinct.len());
    }
}

#[test]
fn cooccurrence_baseline_matches_direct_scorer() {
    let data = PreparedData::prepare(&synth_corpus(60, 30, 5, 4).unwrap(), 3, 15).unwrap();
    let co = &data.graphs.cooccurrence;
    let n = co.api_count() as u32;
    let index = |k: usize| {
        let name = synth_api_name(k, 5);
        data.corpus.universe.lookup(EntityKind::Api, &name).unwrap().index
    };
    let mates: BTreeMap<u32, u32> = (0..10).map(|k| (index(k), index(k ^ 1))).collect();
    let mut planted_hits = 0;
    let mut planted_queries = 0;
    for c in &data.split.cases {
        let ctx: BTreeSet<u32> = c.context.iter().map(|a| a.index).collect();
        let mut expect: Vec<(u32, u32)> = (0..n)
            .filter(|a| !ctx.contains(a))
            .map(|a| (a, ctx.iter().map(|&x| co.weight(x, a)).sum()))
            .collect();
        expect.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        let got = baseline_rank(
            BaselineKind::Cooccurrence,
            &data.graphs,
            Some(c.method),
            &c.context,
            n as usize,
        );
        let got: Vec<(u32, u32)> = got.items.iter().map(|(a, s)| (a.index, *s as u32)).collect();
        assert_eq!(got, expect);

        for mate in ctx.iter().filter_map(|x| mates.get(x)) {
            if ctx.contains(mate) {
                continue;
            }
            let mate_score = expect.iter().find(|e| e.0 == *mate).unwrap().1;
            if expect.iter().all(|e| e.0 == *mate || e.1 < mate_score) {
                planted_queries += 1;
                planted_hits += (got[0].0 == *mate) as usize;
            }
        }
    }
    assert!(planted_queries > 0);
    assert_eq!(planted_hits, planted_queries);
}
