//! Co-purchase item graph: invoice-level co-occurrence counts, threshold
//! plus top-k pruning into a fixed directed sparse graph.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ingest::{Catalog, Transaction};

/// Symmetric co-occurrence weights prior to pruning. Stored sparse as
/// upper-triangle pair counts.
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceWeights {
    pub n: usize,
    /// (i, j) with i < j → number of invoices containing both
    pub pairs: BTreeMap<(usize, usize), u32>,
}

impl CooccurrenceWeights {
    pub fn get(&self, i: usize, j: usize) -> u32 {
        if i == j {
            return 0;
        }
        let key = (i.min(j), i.max(j));
        self.pairs.get(&key).copied().unwrap_or(0)
    }
}

/// Fixed directed sparse item graph. Neighbor lists are sorted by
/// (weight desc, node index asc) and immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemGraph {
    pub n: usize,
    pub k: usize,
    pub tau: u32,
    /// neighbors[i] = ordered outgoing (j, w_ij)
    pub neighbors: Vec<Vec<(usize, u32)>>,
}

impl ItemGraph {
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(|ns| ns.len()).sum()
    }

    pub fn out_neighbors(&self, i: usize) -> &[(usize, u32)] {
        &self.neighbors[i]
    }

    /// Edgeless graph on `n` nodes (used by graph-free baselines and fixtures).
    pub fn edgeless(n: usize) -> Self {
        ItemGraph { n, k: 0, tau: 0, neighbors: vec![Vec::new(); n] }
    }
}

/// Count invoices containing both SKUs. Each invoice contributes at most
/// one to each pair regardless of duplicated lines. Output is symmetric.
pub fn cooccurrence_counts(rows: &[Transaction], catalog: &Catalog) -> CooccurrenceWeights {
    let index: BTreeMap<&str, usize> = catalog
        .skus
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut by_invoice: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for t in rows {
        if let Some(&i) = index.get(t.sku.as_str()) {
            by_invoice.entry(t.invoice_id.as_str()).or_default().insert(i);
        }
    }

    let mut pairs: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for items in by_invoice.values() {
        let items: Vec<usize> = items.iter().copied().collect();
        for a in 0..items.len() {
            for b in a + 1..items.len() {
                *pairs.entry((items[a], items[b])).or_default() += 1;
            }
        }
    }
    CooccurrenceWeights { n: catalog.len(), pairs }
}

/// Drop edges below `tau`, then keep the `k` highest-weight outgoing
/// edges per node (ties by node index ascending). Pruning may break
/// symmetry; the result is directed.
pub fn build_graph(weights: &CooccurrenceWeights, tau: u32, k: usize) -> ItemGraph {
    assert!(tau >= 1, "tau must be >= 1");
    assert!(k >= 1, "k must be >= 1");
    let n = weights.n;
    let mut out: Vec<Vec<(usize, u32)>> = vec![Vec::new(); n];
    for (&(i, j), &w) in &weights.pairs {
        if w >= tau {
            out[i].push((j, w));
            out[j].push((i, w));
        }
    }
    for ns in &mut out {
        ns.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ns.truncate(k);
    }
    ItemGraph { n, k, tau, neighbors: out }
}

/// Weakly connected components, largest first (ties by smallest member).
pub fn weak_components(graph: &ItemGraph) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..graph.n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    for i in 0..graph.n {
        for &(j, _) in &graph.neighbors[i] {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..graph.n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut components: Vec<Vec<usize>> = groups.into_values().collect();
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    components
}

/// Edge-list CSV: src_sku, dst_sku, weight.
pub fn write_edge_list_csv<W: Write>(
    graph: &ItemGraph,
    catalog: &Catalog,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "src_sku,dst_sku,weight")?;
    for i in 0..graph.n {
        for &(j, weight) in &graph.neighbors[i] {
            writeln!(w, "{},{},{}", catalog.skus[i], catalog.skus[j], weight)?;
        }
    }
    Ok(())
}

/// Inverse of [`write_edge_list_csv`]; `k` and `tau` come from the
/// sidecar since the edge list alone does not determine them.
pub fn read_edge_list_csv<R: std::io::Read>(
    r: R,
    catalog: &Catalog,
    sidecar: &GraphSidecar,
) -> Result<ItemGraph, crate::ingest::IngestError> {
    use crate::ingest::IngestError;
    let bad = |d: String| IngestError::BadArtifact(format!("edge list csv: {d}"));
    let index: BTreeMap<&str, usize> =
        catalog.skus.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut reader = csv::Reader::from_reader(r);
    let mut neighbors: Vec<Vec<(usize, u32)>> = vec![Vec::new(); catalog.len()];
    for record in reader.records() {
        let rec = record.map_err(IngestError::Csv)?;
        if rec.len() != 3 {
            return Err(bad("expected 3 columns".into()));
        }
        let src = *index.get(&rec[0]).ok_or_else(|| bad(format!("unknown sku '{}'", &rec[0])))?;
        let dst = *index.get(&rec[1]).ok_or_else(|| bad(format!("unknown sku '{}'", &rec[1])))?;
        let weight: u32 = rec[2].parse().map_err(|_| bad("bad weight".into()))?;
        neighbors[src].push((dst, weight));
    }
    let graph = ItemGraph { n: catalog.len(), k: sidecar.k, tau: sidecar.tau, neighbors };
    if graph.edge_count() != sidecar.edges {
        return Err(bad(format!(
            "edge count {} does not match sidecar {}",
            graph.edge_count(),
            sidecar.edges
        )));
    }
    Ok(graph)
}

/// JSON sidecar describing graph shape parameters.
#[derive(Debug, Serialize, Deserialize)]
pub struct GraphSidecar {
    pub n: usize,
    pub k: usize,
    pub tau: u32,
    pub edges: usize,
}

impl GraphSidecar {
    pub fn of(graph: &ItemGraph) -> Self {
        GraphSidecar { n: graph.n, k: graph.k, tau: graph.tau, edges: graph.edge_count() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn catalog(skus: &[&str]) -> Catalog {
        Catalog {
            skus: skus.iter().map(|s| s.to_string()).collect(),
            reference_price: vec![1.0; skus.len()],
            unit_cost: vec![0.7; skus.len()],
            window_start: NaiveDate::from_ymd_opt(2011, 7, 1).unwrap(),
            window_end: NaiveDate::from_ymd_opt(2011, 12, 9).unwrap(),
        }
    }

    fn invoice_rows(invoices: &[(&str, &[&str])]) -> Vec<Transaction> {
        let ts = NaiveDate::from_ymd_opt(2011, 8, 1)
            .unwrap()
            .and_hms_opt(12, 0, 0)
            .unwrap();
        invoices
            .iter()
            .flat_map(|(inv, skus)| {
                skus.iter().map(|sku| Transaction {
                    invoice_id: inv.to_string(),
                    sku: sku.to_string(),
                    quantity: 1,
                    unit_price: 1.0,
                    timestamp: ts,
                    customer_id: Some("c".to_string()),
                    country: String::new(),
                })
            })
            .collect()
    }

    #[test]
    fn edge_list_csv_roundtrip() {
        let cat = catalog(&["A", "B", "C", "D"]);
        let rows = invoice_rows(&[
            ("1", &["A", "B", "C"]),
            ("2", &["A", "B"]),
            ("3", &["C", "D"]),
            ("4", &["C", "D"]),
        ]);
        let w = cooccurrence_counts(&rows, &cat);
        let g = build_graph(&w, 1, 2);
        let mut csv = Vec::new();
        write_edge_list_csv(&g, &cat, &mut csv).unwrap();
        let back = read_edge_list_csv(&csv[..], &cat, &GraphSidecar::of(&g)).unwrap();
        assert_eq!(back.neighbors, g.neighbors);
        assert_eq!(back.k, g.k);
        assert_eq!(back.tau, g.tau);

        let stale = GraphSidecar { n: g.n, k: g.k, tau: g.tau, edges: g.edge_count() + 1 };
        assert!(read_edge_list_csv(&csv[..], &cat, &stale).is_err());
    }

    #[test]
    fn pair_counts_match_brute_force() {
        let cat = catalog(&["A", "B", "C"]);
        let rows = invoice_rows(&[("1", &["A", "B"]), ("2", &["A", "B"]), ("3", &["A", "C"])]);
        let w = cooccurrence_counts(&rows, &cat);
        assert_eq!(w.get(0, 1), 2);
        assert_eq!(w.get(0, 2), 1);
        assert_eq!(w.get(1, 2), 0);
        assert_eq!(w.get(1, 0), 2); // symmetric
    }

    #[test]
    fn single_item_invoice_contributes_nothing() {
        let cat = catalog(&["A", "B"]);
        let rows = invoice_rows(&[("1", &["A"])]);
        let w = cooccurrence_counts(&rows, &cat);
        assert!(w.pairs.is_empty());
    }

    #[test]
    fn duplicated_lines_count_once_per_invoice() {
        let cat = catalog(&["A", "B"]);
        let rows = invoice_rows(&[("1", &["A", "A", "B"])]);
        let w = cooccurrence_counts(&rows, &cat);
        assert_eq!(w.get(0, 1), 1);
    }

    #[test]
    fn build_prunes_by_tau_and_top_k() {
        let cat = catalog(&["A", "B", "C"]);
        let rows = invoice_rows(&[("1", &["A", "B"]), ("2", &["A", "B"]), ("3", &["A", "C"])]);
        let w = cooccurrence_counts(&rows, &cat);
        let g = build_graph(&w, 1, 2);
        assert_eq!(g.out_neighbors(0), &[(1, 2), (2, 1)]);
        assert_eq!(g.out_neighbors(1), &[(0, 2)]);
        assert_eq!(g.out_neighbors(2), &[(0, 1)]);
    }

    #[test]
    fn single_node_graph_has_no_edges() {
        let w = CooccurrenceWeights { n: 1, pairs: BTreeMap::new() };
        let g = build_graph(&w, 1, 4);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn pruning_is_monotone_in_tau_and_k() {
        let mut pairs = BTreeMap::new();
        for i in 0..5usize {
            for j in i + 1..5usize {
                pairs.insert((i, j), ((i + 2 * j) % 4 + 1) as u32);
            }
        }
        let w = CooccurrenceWeights { n: 5, pairs };
        let edge_set = |g: &ItemGraph| -> BTreeSet<(usize, usize)> {
            (0..g.n)
                .flat_map(|i| g.neighbors[i].iter().map(move |&(j, _)| (i, j)))
                .collect()
        };
        let base = edge_set(&build_graph(&w, 1, 4));
        assert!(edge_set(&build_graph(&w, 2, 4)).is_subset(&base));
        assert!(edge_set(&build_graph(&w, 1, 2)).is_subset(&base));
    }

    #[test]
    fn symmetric_when_k_exceeds_degree() {
        let cat = catalog(&["A", "B", "C"]);
        let rows = invoice_rows(&[("1", &["A", "B", "C"]), ("2", &["A", "B"])]);
        let w = cooccurrence_counts(&rows, &cat);
        let g = build_graph(&w, 1, 10);
        for i in 0..g.n {
            for &(j, _) in g.out_neighbors(i) {
                assert!(g.out_neighbors(j).iter().any(|&(b, _)| b == i));
            }
        }
    }

    #[test]
    fn components_edgeless_and_pairs() {
        let g = ItemGraph::edgeless(3);
        assert_eq!(weak_components(&g).len(), 3);

        let mut pairs = BTreeMap::new();
        pairs.insert((0, 1), 5u32);
        pairs.insert((2, 3), 5u32);
        let w = CooccurrenceWeights { n: 4, pairs };
        let comps = weak_components(&build_graph(&w, 1, 2));
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0], vec![0, 1]);
        assert_eq!(comps[1], vec![2, 3]);
    }
}
