//! Interaction graphs: significant pairs as edges between features.
//!
//! Sign convention: `t > 0` means the class-1 correlation exceeds the
//! class-2 correlation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::str::FromStr;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdr::FdrCurve;
use crate::stats::StatisticTable;
use crate::tsv::{fmt_f64, parse_f64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEdge {
    pub feature_j: String,
    pub feature_k: String,
    pub t: f64,
    pub rank: usize,
    pub fdr_hat: f64,
}

/// Edges in rank order, as listed by an FDR curve.
pub fn ranked_edges(stats: &StatisticTable, curve: &FdrCurve, names: &[String]) -> Vec<RankedEdge> {
    curve
        .order
        .iter()
        .enumerate()
        .map(|(l, &idx)| {
            let (j, k) = stats.pairs.pair(idx);
            RankedEdge {
                feature_j: names[j].clone(),
                feature_k: names[k].clone(),
                t: stats.t[idx],
                rank: l + 1,
                fdr_hat: curve.fdr_hat[l],
            }
        })
        .collect()
}

/// Reads the ranked edges back from an FDR report
/// (`rank, feature_j, feature_k, t, fdr_hat_raw, fdr_hat`).
pub fn read_fdr_report<R: BufRead>(input: R) -> Result<Vec<RankedEdge>> {
    let mut edges = Vec::new();
    let mut seen_header = false;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<fdr report>", e))?;
        let lineno = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if !seen_header {
            seen_header = true;
            if cells.first() == Some(&"rank") {
                let want = ["rank", "feature_j", "feature_k", "t", "fdr_hat_raw", "fdr_hat"];
                if cells != want {
                    return Err(Error::Format(format!("unexpected FDR report header: {line}")));
                }
                continue;
            }
        }
        if cells.len() != 6 {
            return Err(Error::Parse {
                line: lineno,
                column: cells.len(),
                message: "expected 6 tab-separated fields".into(),
            });
        }
        let rank = cells[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            column: 1,
            message: format!("invalid rank '{}'", cells[0]),
        })?;
        edges.push(RankedEdge {
            feature_j: cells[1].to_string(),
            feature_k: cells[2].to_string(),
            t: parse_f64(cells[3], lineno, 4)?,
            rank,
            fdr_hat: parse_f64(cells[5], lineno, 6)?,
        });
    }
    edges.sort_by_key(|e| e.rank);
    if edges.iter().enumerate().any(|(i, e)| e.rank != i + 1) {
        return Err(Error::Format("FDR report ranks are not 1..L".into()));
    }
    Ok(edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignFilter {
    Positive,
    Negative,
    #[default]
    Both,
}

impl SignFilter {
    pub fn keeps(self, t: f64) -> bool {
        match self {
            SignFilter::Positive => t > 0.0,
            SignFilter::Negative => t < 0.0,
            SignFilter::Both => true,
        }
    }
}

impl FromStr for SignFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(SignFilter::Positive),
            "negative" => Ok(SignFilter::Negative),
            "both" => Ok(SignFilter::Both),
            _ => Err(Error::Config(format!("unknown sign filter '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    /// Sorted names of features with at least one edge.
    pub nodes: Vec<String>,
    /// Sorted by `(feature_j, feature_k)`.
    pub edges: Vec<RankedEdge>,
    /// Sorted node lists; components are ordered by their first node.
    pub components: Vec<Vec<String>>,
}

impl InteractionGraph {
    /// Canonical graph on the given edges.
    pub fn from_edges(mut edges: Vec<RankedEdge>) -> Self {
        edges.sort_by(|a, b| {
            (&a.feature_j, &a.feature_k)
                .cmp(&(&b.feature_j, &b.feature_k))
                .then(a.rank.cmp(&b.rank))
        });
        let nodes: Vec<String> = edges
            .iter()
            .flat_map(|e| [e.feature_j.clone(), e.feature_k.clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&str, usize> =
            nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut uf = UnionFind::<usize>::new(nodes.len());
        for e in &edges {
            uf.union(index[e.feature_j.as_str()], index[e.feature_k.as_str()]);
        }
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            groups.entry(uf.find(i)).or_default().push(n.clone());
        }
        let mut components: Vec<Vec<String>> = groups.into_values().collect();
        components.sort();
        Self {
            nodes,
            edges,
            components,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Index of the component holding `node`.
    pub fn component_of(&self, node: &str) -> Option<usize> {
        self.components
            .iter()
            .position(|c| c.binary_search_by(|n| n.as_str().cmp(node)).is_ok())
    }
}

/// Edges of ranks `1..=L*`, with `L*` the largest rank whose `fdr_hat` is
/// at most `cutoff`, then filtered by sign. `edges` must be in rank order.
pub fn build_graph(edges: &[RankedEdge], cutoff: f64, sign: SignFilter) -> Result<InteractionGraph> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::Config(format!("FDR cutoff {cutoff} outside (0, 1]")));
    }
    let last = edges
        .iter()
        .rposition(|e| e.fdr_hat <= cutoff)
        .map_or(0, |i| i + 1);
    Ok(InteractionGraph::from_edges(
        edges[..last]
            .iter()
            .filter(|e| sign.keeps(e.t))
            .cloned()
            .collect(),
    ))
}

/// Keeps the `m` best-ranked edges of every component.
pub fn top_edges_per_component(g: &InteractionGraph, m: usize) -> Result<InteractionGraph> {
    if m == 0 {
        return Err(Error::Config("edges per component must be at least 1".into()));
    }
    let mut by_component: Vec<Vec<&RankedEdge>> = vec![Vec::new(); g.components.len()];
    for e in &g.edges {
        let c = g
            .component_of(&e.feature_j)
            .expect("edge endpoints belong to a component");
        by_component[c].push(e);
    }
    let mut kept = Vec::new();
    for mut list in by_component {
        list.sort_by_key(|e| e.rank);
        kept.extend(list.into_iter().take(m).cloned());
    }
    Ok(InteractionGraph::from_edges(kept))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    EdgeTsv,
    Dot,
    Json,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge-tsv" | "tsv" => Ok(GraphFormat::EdgeTsv),
            "dot" => Ok(GraphFormat::Dot),
            "json" => Ok(GraphFormat::Json),
            _ => Err(Error::Config(format!("unknown graph format '{s}'"))),
        }
    }
}

fn dot_id(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

pub fn emit<W: Write>(g: &InteractionGraph, format: GraphFormat, out: &mut W) -> std::io::Result<()> {
    match format {
        GraphFormat::EdgeTsv => {
            writeln!(out, "feature_j\tfeature_k\tt\trank\tfdr_hat")?;
            for e in &g.edges {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    e.feature_j,
                    e.feature_k,
                    fmt_f64(e.t),
                    e.rank,
                    fmt_f64(e.fdr_hat)
                )?;
            }
        }
        GraphFormat::Dot => {
            writeln!(out, "graph interactions {{")?;
            for n in &g.nodes {
                writeln!(out, "  {};", dot_id(n))?;
            }
            for e in &g.edges {
                writeln!(
                    out,
                    "  {} -- {} [t={}, rank={}, fdr_hat={}];",
                    dot_id(&e.feature_j),
                    dot_id(&e.feature_k),
                    fmt_f64(e.t),
                    e.rank,
                    fmt_f64(e.fdr_hat)
                )?;
            }
            writeln!(out, "}}")?;
        }
        GraphFormat::Json => {
            serde_json::to_writer_pretty(&mut *out, g)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Parses a graph written in JSON format.
pub fn from_json(text: &str) -> Result<InteractionGraph> {
    let g: InteractionGraph =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("graph JSON: {e}")))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn edge(j: &str, k: &str, t: f64, rank: usize, fdr: f64) -> RankedEdge {
        RankedEdge {
            feature_j: j.into(),
            feature_k: k.into(),
            t,
            rank,
            fdr_hat: fdr,
        }
    }

    fn chain_and_pair() -> Vec<RankedEdge> {
        vec![
            edge("a", "b", 0.9, 1, 0.0),
            edge("x", "y", -0.8, 2, 0.0),
            edge("b", "c", 0.7, 3, 0.02),
            edge("c", "d", -0.6, 4, 0.03),
            edge("d", "e", 0.5, 5, 0.05),
            edge("a", "x", 0.1, 6, 0.5),
        ]
    }

    #[test]
    fn cutoff_below_every_estimate_gives_empty_graph() {
        let g = build_graph(&chain_and_pair()[2..], 0.01, SignFilter::Both).unwrap();
        assert!(g.is_empty());
        assert!(g.nodes.is_empty() && g.components.is_empty());
        assert!(build_graph(&chain_and_pair(), 0.0, SignFilter::Both).is_err());
    }

    #[test]
    fn positive_sign_filter() {
        let edges = vec![
            edge("a", "b", 0.4, 1, 0.0),
            edge("c", "d", -0.3, 2, 0.0),
            edge("e", "f", 0.2, 3, 0.0),
        ];
        let g = build_graph(&edges, 0.1, SignFilter::Positive).unwrap();
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.nodes, vec!["a", "b", "e", "f"]);
        let neg = build_graph(&edges, 0.1, SignFilter::Negative).unwrap();
        assert_eq!(neg.edges.len(), 1);
    }

    #[test]
    fn chain_and_isolated_pair_components() {
        let g = build_graph(&chain_and_pair(), 0.1, SignFilter::Both).unwrap();
        assert_eq!(g.edges.len(), 5);
        assert_eq!(
            g.components,
            vec![vec!["a", "b", "c", "d", "e"], vec!["x", "y"]]
        );
    }

    #[test]
    fn prefix_rule_includes_ranks_above_cutoff_before_last_qualifier() {
        let edges = vec![
            edge("a", "b", 0.9, 1, 0.05),
            edge("c", "d", 0.8, 2, 0.2),
            edge("e", "f", 0.7, 3, 0.08),
            edge("g", "h", 0.6, 4, 0.3),
        ];
        let g = build_graph(&edges, 0.1, SignFilter::Both).unwrap();
        assert_eq!(g.edges.iter().map(|e| e.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn one_edge_per_component() {
        let g = build_graph(&chain_and_pair(), 0.1, SignFilter::Both).unwrap();
        let top = top_edges_per_component(&g, 1).unwrap();
        assert_eq!(top.edges.len(), 2);
        assert_eq!(top.nodes, vec!["a", "b", "x", "y"]);
        assert_eq!(top_edges_per_component(&g, 10).unwrap(), g);
        assert!(top_edges_per_component(&g, 0).is_err());
    }

    #[test]
    fn fifty_best_edges_of_a_large_component() {
        // star plus ring on 40 nodes: one component with 400 edges
        let mut edges = Vec::new();
        let mut rank = 0;
        let names: Vec<String> = (0..40).map(|i| format!("g{i:02}")).collect();
        'outer: for i in 0..40 {
            for j in i + 1..40 {
                rank += 1;
                edges.push(edge(&names[i], &names[j], 1.0, rank, 0.0));
                if rank == 400 {
                    break 'outer;
                }
            }
        }
        // ranks scrambled relative to name order
        for (n, e) in edges.iter_mut().enumerate() {
            e.rank = (n * 7919) % 400 + 1;
        }
        edges.sort_by_key(|e| e.rank);
        let g = build_graph(&edges, 0.1, SignFilter::Both).unwrap();
        assert_eq!(g.components.len(), 1);
        let top = top_edges_per_component(&g, 50).unwrap();
        assert_eq!(top.edges.len(), 50);
        let worst_kept = top.edges.iter().map(|e| e.rank).max().unwrap();
        assert_eq!(worst_kept, 50);
    }

    #[test]
    fn golden_outputs() {
        let g = InteractionGraph::from_edges(vec![
            edge("TNF", "IL6", 0.5, 2, 0.125),
            edge("IL6", "IL1B", -0.25, 1, 0.0),
        ]);
        let mut tsv = Vec::new();
        emit(&g, GraphFormat::EdgeTsv, &mut tsv).unwrap();
        assert_eq!(
            String::from_utf8(tsv).unwrap(),
            "feature_j\tfeature_k\tt\trank\tfdr_hat\n\
             IL6\tIL1B\t-2.5000000000000000e-1\t1\t0.0000000000000000e0\n\
             TNF\tIL6\t5.0000000000000000e-1\t2\t1.2500000000000000e-1\n"
        );
        let mut dot = Vec::new();
        emit(&g, GraphFormat::Dot, &mut dot).unwrap();
        assert_eq!(
            String::from_utf8(dot).unwrap(),
            "graph interactions {\n  \"IL1B\";\n  \"IL6\";\n  \"TNF\";\n\
             \x20 \"IL6\" -- \"IL1B\" [t=-2.5000000000000000e-1, rank=1, fdr_hat=0.0000000000000000e0];\n\
             \x20 \"TNF\" -- \"IL6\" [t=5.0000000000000000e-1, rank=2, fdr_hat=1.2500000000000000e-1];\n}\n"
        );
        let mut again = Vec::new();
        emit(&g, GraphFormat::Dot, &mut again).unwrap();
        let mut first = Vec::new();
        emit(&g, GraphFormat::Dot, &mut first).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn empty_graph_documents() {
        let g = InteractionGraph::from_edges(Vec::new());
        let mut dot = Vec::new();
        emit(&g, GraphFormat::Dot, &mut dot).unwrap();
        assert_eq!(dot, b"graph interactions {\n}\n");
        let mut json = Vec::new();
        emit(&g, GraphFormat::Json, &mut json).unwrap();
        assert_eq!(from_json(std::str::from_utf8(&json).unwrap()).unwrap(), g);
    }

    #[test]
    fn json_round_trip() {
        let g = build_graph(&chain_and_pair(), 0.1, SignFilter::Both).unwrap();
        let mut json = Vec::new();
        emit(&g, GraphFormat::Json, &mut json).unwrap();
        let back = from_json(std::str::from_utf8(&json).unwrap()).unwrap();
        assert_eq!(back, g);
        let rebuilt = InteractionGraph::from_edges(back.edges.clone());
        let mut json2 = Vec::new();
        emit(&rebuilt, GraphFormat::Json, &mut json2).unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn fdr_report_reader() {
        let text = "# seed = 1\nrank\tfeature_j\tfeature_k\tt\tfdr_hat_raw\tfdr_hat\n\
                    1\ta\tb\t5.0e-1\t0.0e0\t0.0e0\n2\tc\td\t-4.0e-1\t2.0e-1\t2.0e-1\n";
        let edges = read_fdr_report(text.as_bytes()).unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!(edges[1], edge("c", "d", -0.4, 2, 0.2));
        assert!(read_fdr_report("1\ta\tb\n".as_bytes()).is_err());
        assert!(read_fdr_report("2\ta\tb\t1\t0\t0\n".as_bytes()).is_err());
    }

    fn arb_edges() -> impl Strategy<Value = Vec<RankedEdge>> {
        proptest::collection::vec((0usize..12, 0usize..12, -1.0f64..1.0, 0.0f64..1.0), 1..40)
            .prop_map(|raw| {
                let mut seen = BTreeSet::new();
                let mut edges = Vec::new();
                for (a, b, t, f) in raw {
                    let (j, k) = (a.min(b), a.max(b));
                    if j == k || t == 0.0 || !seen.insert((j, k)) {
                        continue;
                    }
                    edges.push(edge(&format!("n{j:02}"), &format!("n{k:02}"), t, 0, f));
                }
                // nondecreasing estimates, as after monotonization
                let mut fdr: Vec<f64> = edges.iter().map(|e| e.fdr_hat).collect();
                fdr.sort_by(f64::total_cmp);
                for (i, e) in edges.iter_mut().enumerate() {
                    e.rank = i + 1;
                    e.fdr_hat = fdr[i];
                }
                edges
            })
    }

    proptest! {
        #[test]
        fn components_partition_nodes(edges in arb_edges(), cutoff in 0.01f64..=1.0) {
            let g = build_graph(&edges, cutoff, SignFilter::Both).unwrap();
            let mut all: Vec<String> = g.components.concat();
            all.sort();
            prop_assert_eq!(&all, &g.nodes);
            for e in &g.edges {
                prop_assert_eq!(g.component_of(&e.feature_j), g.component_of(&e.feature_k));
            }
        }

        #[test]
        fn sign_filters_partition_edges(edges in arb_edges(), cutoff in 0.01f64..=1.0) {
            let both = build_graph(&edges, cutoff, SignFilter::Both).unwrap();
            let pos = build_graph(&edges, cutoff, SignFilter::Positive).unwrap();
            let neg = build_graph(&edges, cutoff, SignFilter::Negative).unwrap();
            prop_assert_eq!(pos.edges.len() + neg.edges.len(), both.edges.len());
            let mut union = pos.edges.clone();
            union.extend(neg.edges.clone());
            prop_assert_eq!(InteractionGraph::from_edges(union), both);
        }

        #[test]
        fn monotone_curve_thresholds_nest(edges in arb_edges(), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            let small = build_graph(&edges, lo, SignFilter::Both).unwrap();
            let large = build_graph(&edges, hi, SignFilter::Both).unwrap();
            for e in &small.edges {
                prop_assert!(large.edges.contains(e));
            }
        }
    }
}
