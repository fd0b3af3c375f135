//! The structured signal: an epsilon-thresholded, n-capped, symmetric
//! cosine neighbor graph over upstream embeddings.
//!
//! Each node selects its top `max_neighbors` candidates with similarity
//! strictly above `epsilon`; the edge set is the union of those directed
//! selections, so a popular node's final degree may exceed the cap. Files
//! are TSV: one line per node id (sorted), then `id_i<TAB>id_j<TAB>weight`
//! lines with `id_i < id_j`, sorted, weights printed with 9 significant
//! digits. Node lines keep isolated nodes across a round trip.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::embedding::{self, EmbeddingMatrix};

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Error, Debug)]
pub enum GraphError {
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad graph file {path} line {line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid graph config: {0}")]
    Config(String),
    #[error("invalid graph: {0}")]
    Validation(String),
    #[error("unknown node id {0:?}")]
    UnknownId(String),
    #[error(transparent)]
    Embedding(#[from] embedding::EmbeddingError),
}

/// Threshold and cap for neighbor selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    pub epsilon: f64,
    pub max_neighbors: usize,
}

impl Default for GraphConfig {
    fn default() -> GraphConfig {
        GraphConfig {
            epsilon: 0.99,
            max_neighbors: 6,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.epsilon) {
            return Err(GraphError::Config(format!(
                "epsilon must lie in [-1, 1], got {}",
                self.epsilon
            )));
        }
        if self.max_neighbors == 0 {
            return Err(GraphError::Config("max_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Undirected weighted neighbor graph. Node ids are held sorted; adjacency
/// lists are sorted by descending weight, then ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl NeighborGraph {
    fn from_edges(
        mut ids: Vec<String>,
        edges: &BTreeMap<(usize, usize), f64>,
        order: &[usize],
    ) -> NeighborGraph {
        // `order[old] = new` maps builder indices onto the sorted id order.
        ids.sort();
        let index: HashMap<String, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut adjacency = vec![Vec::new(); ids.len()];
        for (&(a, b), &w) in edges {
            let (a, b) = (order[a], order[b]);
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for (node, list) in adjacency.iter_mut().enumerate() {
            list.sort_by(|x, y| {
                y.1.total_cmp(&x.1).then_with(|| ids[x.0].cmp(&ids[y.0]))
            });
            debug_assert!(list.iter().all(|&(n, _)| n != node));
        }
        NeighborGraph {
            ids,
            index,
            adjacency,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Neighbors of one node, sorted by descending weight then ascending id.
    pub fn neighbors_of(&self, id: &str) -> Result<Vec<(&str, f64)>> {
        let &node = self
            .index
            .get(id)
            .ok_or_else(|| GraphError::UnknownId(id.to_string()))?;
        Ok(self.adjacency[node]
            .iter()
            .map(|&(n, w)| (self.ids[n].as_str(), w))
            .collect())
    }

    pub fn degree(&self, id: &str) -> Result<usize> {
        let &node = self
            .index
            .get(id)
            .ok_or_else(|| GraphError::UnknownId(id.to_string()))?;
        Ok(self.adjacency[node].len())
    }

    /// Every undirected edge once, as (id_i, id_j, weight) with id_i < id_j,
    /// sorted.
    pub fn edges(&self) -> Vec<(&str, &str, f64)> {
        let mut out = Vec::new();
        for (a, list) in self.adjacency.iter().enumerate() {
            for &(b, w) in list {
                if a < b {
                    out.push((self.ids[a].as_str(), self.ids[b].as_str(), w));
                }
            }
        }
        out.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Build the neighbor graph of an embedding matrix.
pub fn build_graph(emb: &EmbeddingMatrix, cfg: &GraphConfig) -> Result<NeighborGraph> {
    cfg.validate()?;
    if emb.len() < 2 {
        return Err(GraphError::Validation(format!(
            "need at least 2 embeddings, got {}",
            emb.len()
        )));
    }
    let n = emb.len();
    let ids = emb.ids().to_vec();

    // Directed top-n selection per node.
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        let mut candidates: Vec<(usize, f64)> = Vec::new();
        for k in 0..n {
            if k == i {
                continue;
            }
            let sim = embedding::cosine_similarity_f32(emb.row(i), emb.row(k))?;
            if sim > cfg.epsilon {
                candidates.push((k, sim));
            }
        }
        candidates.sort_by(|x, y| {
            y.1.total_cmp(&x.1).then_with(|| ids[x.0].cmp(&ids[y.0]))
        });
        candidates.truncate(cfg.max_neighbors);
        for (k, sim) in candidates {
            let key = if i < k { (i, k) } else { (k, i) };
            // S(i,k) and S(k,i) are computed identically, so a duplicate
            // insertion carries the same weight.
            edges.insert(key, sim);
        }
    }

    // Map builder indices to the sorted-id order used by the graph.
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let mut order = vec![0usize; n];
    for (new, &old) in sorted.iter().enumerate() {
        order[old] = new;
    }
    Ok(NeighborGraph::from_edges(ids, &edges, &order))
}

pub fn save_graph(path: impl AsRef<Path>, graph: &NeighborGraph) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for id in graph.node_ids() {
        text.push_str(id);
        text.push('\n');
    }
    for (a, b, w) in graph.edges() {
        text.push_str(&format!("{a}\t{b}\t{w:.8e}\n"));
    }
    fs::write(path, text).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<NeighborGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let err = |line: usize, msg: String| GraphError::Format {
        path: path.display().to_string(),
        line,
        msg,
    };

    let mut ids: Vec<String> = Vec::new();
    let mut raw_edges: Vec<(usize, String, String, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.len() {
            1 if !fields[0].is_empty() => ids.push(fields[0].to_string()),
            3 => {
                let (a, b) = (fields[0], fields[1]);
                if a >= b {
                    return Err(err(
                        line_no,
                        format!("edge {a:?} -> {b:?} is not in canonical order"),
                    ));
                }
                let w: f64 = fields[2]
                    .parse()
                    .map_err(|_| err(line_no, format!("bad weight {:?}", fields[2])))?;
                if !w.is_finite() {
                    return Err(err(line_no, format!("non-finite weight {w}")));
                }
                raw_edges.push((line_no, a.to_string(), b.to_string(), w));
            }
            _ => return Err(err(line_no, format!("expected 1 or 3 fields: {line:?}"))),
        }
    }

    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(GraphError::Validation(format!(
                "duplicate node id {id:?} in {}",
                path.display()
            )));
        }
    }
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (line_no, a, b, w) in raw_edges {
        let &ia = index
            .get(&a)
            .ok_or_else(|| err(line_no, format!("edge endpoint {a:?} is not a declared node")))?;
        let &ib = index
            .get(&b)
            .ok_or_else(|| err(line_no, format!("edge endpoint {b:?} is not a declared node")))?;
        if edges.insert((ia, ib), w).is_some() {
            return Err(err(line_no, format!("duplicate edge {a:?} -> {b:?}")));
        }
    }
    let order: Vec<usize> = {
        let mut sorted: Vec<usize> = (0..ids.len()).collect();
        sorted.sort_by(|&x, &y| ids[x].cmp(&ids[y]));
        let mut order = vec![0usize; ids.len()];
        for (new, &old) in sorted.iter().enumerate() {
            order[old] = new;
        }
        order
    };
    Ok(NeighborGraph::from_edges(ids, &edges, &order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingMatrix;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn matrix(ids: &[&str], dim: usize, rows: Vec<Vec<f32>>) -> EmbeddingMatrix {
        let data = rows.into_iter().flatten().collect();
        EmbeddingMatrix::new(ids.iter().map(|s| s.to_string()).collect(), dim, data).unwrap()
    }

    fn random_unit_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
        let ids = (0..n).map(|i| format!("s{i:03}")).collect();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            data.extend(row.iter().map(|v| (v / norm) as f32));
        }
        EmbeddingMatrix::new(ids, d, data).unwrap()
    }

    /// Quadratic reference construction with an independent cosine
    /// (normalize-then-dot rather than dot-over-norms).
    fn oracle_edges(emb: &EmbeddingMatrix, cfg: &GraphConfig) -> BTreeSet<(String, String)> {
        let n = emb.len();
        let unit: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let row: Vec<f64> = emb.row(i).iter().map(|&v| v as f64).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / norm).collect()
            })
            .collect();
        let mut edges = BTreeSet::new();
        for i in 0..n {
            let mut cand: Vec<(f64, &str, usize)> = (0..n)
                .filter(|&k| k != i)
                .map(|k| {
                    let dot: f64 = unit[i].iter().zip(&unit[k]).map(|(a, b)| a * b).sum();
                    (dot.clamp(-1.0, 1.0), emb.ids()[k].as_str(), k)
                })
                .filter(|&(s, _, _)| s > cfg.epsilon)
                .collect();
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            cand.truncate(cfg.max_neighbors);
            for (_, _, k) in cand {
                let (a, b) = (emb.ids()[i].clone(), emb.ids()[k].clone());
                let pair = if a < b { (a, b) } else { (b, a) };
                edges.insert(pair);
            }
        }
        edges
    }

    fn edge_set(graph: &NeighborGraph) -> BTreeSet<(String, String)> {
        graph
            .edges()
            .iter()
            .map(|&(a, b, _)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn identical_embeddings_form_a_complete_graph() {
        let emb = matrix(
            &["a", "b", "c"],
            2,
            vec![vec![3.0, 4.0], vec![3.0, 4.0], vec![3.0, 4.0]],
        );
        let g = build_graph(
            &emb,
            &GraphConfig {
                epsilon: 0.99,
                max_neighbors: 9,
            },
        )
        .unwrap();
        assert_eq!(g.edge_count(), 3);
        for id in ["a", "b", "c"] {
            let nbrs = g.neighbors_of(id).unwrap();
            assert_eq!(nbrs.len(), 2);
            assert!(nbrs.iter().all(|&(_, w)| w == 1.0));
        }
    }

    #[test]
    fn orthogonal_embeddings_have_no_edges() {
        let emb = matrix(
            &["a", "b", "c"],
            3,
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        );
        let g = build_graph(&emb, &GraphConfig::default()).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.len(), 3);
        assert!(g.neighbors_of("b").unwrap().is_empty());
    }

    #[test]
    fn cap_applies_before_symmetrization() {
        // Four identical vectors, cap 2: every node picks its two lowest ids,
        // so node a ends up with degree 3 after the union.
        let emb = matrix(
            &["a", "b", "c", "d"],
            2,
            vec![vec![1.0, 1.0]; 4],
        );
        let g = build_graph(
            &emb,
            &GraphConfig {
                epsilon: 0.5,
                max_neighbors: 2,
            },
        )
        .unwrap();
        let expected: BTreeSet<(String, String)> = [
            ("a", "b"),
            ("a", "c"),
            ("a", "d"),
            ("b", "c"),
            ("b", "d"),
        ]
        .iter()
        .map(|&(x, y)| (x.to_string(), y.to_string()))
        .collect();
        assert_eq!(edge_set(&g), expected);
        assert_eq!(g.degree("a").unwrap(), 3);
        assert_eq!(g.degree("d").unwrap(), 2);
    }

    #[test]
    fn threshold_is_strict() {
        // cos = 0.8 exactly for (1,0) vs (0.8, 0.6).
        let emb = matrix(
            &["a", "b"],
            2,
            vec![vec![1.0, 0.0], vec![0.8, 0.6]],
        );
        let at = build_graph(
            &emb,
            &GraphConfig {
                epsilon: 0.8,
                max_neighbors: 3,
            },
        )
        .unwrap();
        assert_eq!(at.edge_count(), 0);
        let below = build_graph(
            &emb,
            &GraphConfig {
                epsilon: 0.79,
                max_neighbors: 3,
            },
        )
        .unwrap();
        assert_eq!(below.edge_count(), 1);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let emb = random_unit_matrix(&mut rng, 50, 8);
        let cfg = GraphConfig {
            epsilon: 0.3,
            max_neighbors: 5,
        };
        let g = build_graph(&emb, &cfg).unwrap();
        assert_eq!(edge_set(&g), oracle_edges(&emb, &cfg));
        assert!(g.edge_count() > 0, "test vectors produced no edges");
        for (_, _, w) in g.edges() {
            assert!(w > cfg.epsilon);
        }
    }

    #[test]
    fn scale_invariance_of_edge_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_unit_matrix(&mut rng, 30, 8);
        let mut data = Vec::new();
        for i in 0..base.len() {
            let c = if i % 3 == 0 { 7.5 } else { 1.0 };
            data.extend(base.row(i).iter().map(|&v| v * c));
        }
        let scaled = EmbeddingMatrix::new(base.ids().to_vec(), base.dim(), data).unwrap();
        let cfg = GraphConfig {
            epsilon: 0.3,
            max_neighbors: 4,
        };
        let g1 = build_graph(&base, &cfg).unwrap();
        let g2 = build_graph(&scaled, &cfg).unwrap();
        assert_eq!(edge_set(&g1), edge_set(&g2));
        for ((_, _, w1), (_, _, w2)) in g1.edges().iter().zip(g2.edges().iter()) {
            assert!((w1 - w2).abs() < 1e-6);
        }
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let emb = random_unit_matrix(&mut rng, 50, 8);
        let cfg = GraphConfig {
            epsilon: 0.3,
            max_neighbors: 5,
        };
        let g = build_graph(&emb, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tsv");
        save_graph(&path, &g).unwrap();
        let loaded = load_graph(&path).unwrap();
        assert_eq!(loaded.node_ids(), g.node_ids());
        assert_eq!(edge_set(&loaded), edge_set(&g));
        // Weights survive the 9-significant-digit print.
        for ((_, _, w1), (_, _, w2)) in g.edges().iter().zip(loaded.edges().iter()) {
            assert!((w1 - w2).abs() < 1e-8);
        }
        // Re-saving the loaded graph is byte-identical.
        let path2 = dir.path().join("g2.tsv");
        save_graph(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn isolated_nodes_survive_a_round_trip() {
        let emb = matrix(
            &["a", "b", "c"],
            2,
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let g = build_graph(&emb, &GraphConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tsv");
        save_graph(&path, &g).unwrap();
        let loaded = load_graph(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(loaded.neighbors_of("c").unwrap().is_empty());
    }

    #[test]
    fn non_canonical_edge_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "a\nb\nb\ta\t9.90000000e-1\n").unwrap();
        assert!(matches!(
            load_graph(&path),
            Err(GraphError::Format { .. })
        ));
        fs::write(&path, "a\nb\na\tb\t9.9e-1\na\tb\t9.9e-1\n").unwrap();
        assert!(matches!(
            load_graph(&path),
            Err(GraphError::Format { .. })
        ));
        fs::write(&path, "a\na\tb\t9.9e-1\n").unwrap();
        assert!(matches!(
            load_graph(&path),
            Err(GraphError::Format { .. })
        ));
    }

    #[test]
    fn neighbors_are_sorted_by_weight_then_id() {
        let emb = matrix(
            &["q", "r", "s"],
            2,
            vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.9, 0.15]],
        );
        let g = build_graph(
            &emb,
            &GraphConfig {
                epsilon: 0.5,
                max_neighbors: 9,
            },
        )
        .unwrap();
        let nbrs = g.neighbors_of("q").unwrap();
        assert_eq!(nbrs.len(), 2);
        assert!(nbrs[0].1 >= nbrs[1].1);
        assert_eq!(nbrs[0].0, "r");
        assert!(matches!(
            g.neighbors_of("zz"),
            Err(GraphError::UnknownId(_))
        ));
    }

    #[test]
    fn too_few_embeddings_is_an_error() {
        let emb = matrix(&["only"], 2, vec![vec![1.0, 0.0]]);
        assert!(build_graph(&emb, &GraphConfig::default()).is_err());
    }
}
