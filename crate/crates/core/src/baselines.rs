//! Popularity and co-occurrence-count rankers.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::EntityId;
use crate::evaluation::{top_k, RankedList};
use crate::graphs::GraphBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Number of training methods calling the API.
    Popularity,
    /// Summed raw co-occurrence weight to the distinct context APIs.
    Cooccurrence,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Popularity => "popularity",
            BaselineKind::Cooccurrence => "cooccurrence",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "popularity" => Ok(BaselineKind::Popularity),
            "cooccurrence" => Ok(BaselineKind::Cooccurrence),
            _ => Err(format!("unknown baseline `{s}` (expected popularity or cooccurrence)")),
        }
    }
}

pub fn baseline_scores(kind: BaselineKind, graphs: &GraphBundle, context: &[EntityId]) -> Vec<(EntityId, f64)> {
    let n = graphs.interaction.api_count() as u32;
    match kind {
        BaselineKind::Popularity => (0..n)
            .map(|a| (EntityId::api(a), graphs.interaction.api_frequency(a) as f64))
            .collect(),
        BaselineKind::Cooccurrence => {
            let ctx: BTreeSet<u32> = context.iter().map(|c| c.index).collect();
            (0..n)
                .map(|a| {
                    let s: u32 = ctx.iter().map(|&c| graphs.cooccurrence.weight(c, a)).sum();
                    (EntityId::api(a), s as f64)
                })
                .collect()
        }
    }
}

pub fn baseline_rank(
    kind: BaselineKind,
    graphs: &GraphBundle,
    method: Option<EntityId>,
    context: &[EntityId],
    k: usize,
) -> RankedList {
    let exclude = context.iter().copied().collect();
    RankedList {
        method,
        items: top_k(baseline_scores(kind, graphs, context), &exclude, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, EntityKind, MethodLine};

    fn bundle(seqs: &[&[&str]]) -> (Corpus, GraphBundle) {
        let lines = seqs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                (
                    k + 1,
                    MethodLine {
                        project: "P".into(),
                        package: "p".into(),
                        class: "C".into(),
                        method: format!("m{k}"),
                        calls: s.iter().map(|c| format!("x.y.Z.{c}()")).collect(),
                    },
                )
            })
            .collect();
        let c = Corpus::from_records(lines, vec![]).unwrap();
        let g = GraphBundle::build(&c, 1, 2).unwrap();
        (c, g)
    }

    fn id(c: &Corpus, n: &str) -> EntityId {
        c.universe.lookup(EntityKind::Api, &format!("x.y.Z.{n}()")).unwrap()
    }

    #[test]
    fn popularity_order() {
        let (c, g) = bundle(&[&["b", "a"], &["a"], &["a", "z"], &["a", "b"], &["a"]]);
        let r = baseline_rank(BaselineKind::Popularity, &g, None, &[id(&c, "z")], 5);
        let got: Vec<EntityId> = r.apis().collect();
        assert_eq!(got, [id(&c, "a"), id(&c, "b")]);
    }

    #[test]
    fn cooccurrence_order_and_zero_scores() {
        // ω(x,a)=3, ω(x,b)=1
        let (c, g) = bundle(&[&["x", "a"], &["x", "a"], &["a", "x"], &["x", "b"], &["q", "r"]]);
        let r = baseline_rank(BaselineKind::Cooccurrence, &g, None, &[id(&c, "x")], 10);
        let got: Vec<EntityId> = r.apis().collect();
        assert_eq!(got[..2], [id(&c, "a"), id(&c, "b")]);
        assert_eq!(r.items[0].1, 3.0);
        assert!(r.items[2..].iter().all(|&(_, s)| s == 0.0));
        assert!(!got.contains(&id(&c, "x")));
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("popularity".parse::<BaselineKind>().unwrap(), BaselineKind::Popularity);
        assert!("pop".parse::<BaselineKind>().is_err());
    }
}
