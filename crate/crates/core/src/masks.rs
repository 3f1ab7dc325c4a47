//! Additive attention masks: causal, bidirectional and parent-restricted.
//!
//! A mask entry is either 0 (visible) or -inf (masked); -inf is realized
//! as a large negative constant added to the logits before softmax.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::depgraph::DepGraph;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Vanilla,
    Bidirectional,
    Parent,
}

/// A d x d visibility pattern; `true` means entry 0, `false` means -inf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    pub kind: MaskKind,
    visible: Array2<bool>,
}

impl MaskMatrix {
    pub fn dim(&self) -> usize {
        self.visible.nrows()
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[[i, j]]
    }

    /// Additive form: 0 where visible, a large negative constant where not.
    pub fn to_additive<S: Scalar>(&self) -> Array2<S> {
        self.visible
            .map(|&v| if v { S::zero() } else { S::neg_large() })
    }

    /// Rows with no visible entry (softmax would be undefined there).
    pub fn fully_masked_rows(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&i| (0..self.dim()).all(|j| !self.visible[[i, j]]))
            .collect()
    }

    /// ASCII rendering: `o` visible, `.` masked.
    pub fn to_ascii(&self) -> String {
        let d = self.dim();
        let mut s = String::with_capacity(d * (d + 1));
        for i in 0..d {
            for j in 0..d {
                s.push(if self.visible[[i, j]] { 'o' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

/// Causal mask: position i sees positions j <= i.
pub fn vanilla_mask(d: usize) -> MaskMatrix {
    MaskMatrix {
        kind: MaskKind::Vanilla,
        visible: Array2::from_shape_fn((d, d), |(i, j)| j <= i),
    }
}

/// Bidirectional mask over a prefix of n generated tokens: every position
/// sees all of them (columns 0..n), nothing else.
pub fn bidirectional_mask(d: usize, n: usize) -> MaskMatrix {
    assert!(n <= d, "prefix length {n} exceeds mask dimension {d}");
    MaskMatrix {
        kind: MaskKind::Bidirectional,
        visible: Array2::from_shape_fn((d, d), |(_, j)| j < n),
    }
}

/// Parent mask: position i sees itself and its token-level heads in the
/// graph (subword-expanded edges and edges through transition tokens
/// included). `offset` shifts graph token ids to mask rows, e.g. 1 when
/// row 0 holds BOS.
pub fn parent_mask(graph: &DepGraph, d: usize, offset: usize) -> MaskMatrix {
    assert!(
        graph.n_tokens() + offset <= d,
        "graph with {} tokens (+{offset}) exceeds mask dimension {d}",
        graph.n_tokens()
    );
    let mut visible = Array2::from_shape_fn((d, d), |(i, j)| i == j);
    for e in &graph.token_edges {
        visible[[e.dependent + offset, e.head + offset]] = true;
    }
    MaskMatrix {
        kind: MaskKind::Parent,
        visible,
    }
}

/// Incremental parent-mask maintenance for growing decode prefixes.
///
/// Equivalent to recomputing [`parent_mask`] from the graph after every
/// step; a token's row only changes when an edge into it is added.
#[derive(Debug, Clone)]
pub struct ParentMaskBuilder {
    d: usize,
    offset: usize,
    n_edges_seen: usize,
    visible: Array2<bool>,
}

impl ParentMaskBuilder {
    pub fn new(d: usize, offset: usize) -> Self {
        ParentMaskBuilder {
            d,
            offset,
            n_edges_seen: 0,
            visible: Array2::from_shape_fn((d, d), |(i, j)| i == j),
        }
    }

    /// Absorbs any token edges added to the graph since the last call.
    pub fn update(&mut self, graph: &DepGraph) {
        for e in &graph.token_edges[self.n_edges_seen..] {
            self.visible[[e.dependent + self.offset, e.head + self.offset]] = true;
        }
        self.n_edges_seen = graph.token_edges.len();
    }

    pub fn snapshot(&self) -> MaskMatrix {
        MaskMatrix {
            kind: MaskKind::Parent,
            visible: self.visible.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depgraph::tokenize_subwords;
    use crate::labels::LabelInventory;
    use crate::transitions::{execute, oracle};
    use crate::depgraph::WordTree;

    #[test]
    fn vanilla_is_lower_triangular() {
        let m = vanilla_mask(3);
        let expect = [
            [true, false, false],
            [true, true, false],
            [true, true, true],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.is_visible(i, j), expect[i][j]);
            }
        }
    }

    #[test]
    fn vanilla_d1() {
        let m = vanilla_mask(1);
        assert!(m.is_visible(0, 0));
        assert!(m.fully_masked_rows().is_empty());
    }

    #[test]
    fn bidirectional_rows_share_prefix_visibility() {
        let m = bidirectional_mask(4, 2);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.is_visible(i, j), j < 2);
            }
        }
    }

    #[test]
    fn bidirectional_full_equals_unmasked() {
        let m = bidirectional_mask(5, 5);
        assert!((0..5).all(|i| (0..5).all(|j| m.is_visible(i, j))));
    }

    #[test]
    fn vanilla_softmax_kills_future_positions() {
        // row i of softmax(L + M_v) has zero weight on j > i
        use ndarray::Array2;
        let d = 6;
        let mut logits = Array2::<f64>::zeros((d, d));
        let mut s = 0.37f64;
        logits.mapv_inplace(|_| {
            s = (s * 997.0 + 0.1).fract();
            (s - 0.5) * 4.0
        });
        let add = vanilla_mask(d).to_additive::<f64>();
        let scores = &logits + &add;
        for i in 0..d {
            let row = scores.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..d {
                let w = exps[j] / z;
                if j > i {
                    assert_eq!(w, 0.0, "weight leaked to future position");
                }
            }
        }
    }

    #[test]
    fn bidirectional_n1_softmax_is_delta_on_first() {
        let d = 4;
        let add = bidirectional_mask(d, 1).to_additive::<f64>();
        for i in 0..d {
            let row = add.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            assert_eq!(exps[0] / z, 1.0);
        }
    }

    #[test]
    fn prefix_consistency_with_vanilla() {
        // M_v row i == the visibility pattern of M_bi(d, i+1), truncated at i
        let d = 8;
        let v = vanilla_mask(d);
        for i in 0..d {
            let bi = bidirectional_mask(d, i + 1);
            for j in 0..d {
                assert_eq!(v.is_visible(i, j), bi.is_visible(i, j));
            }
        }
    }

    #[test]
    fn edgeless_parent_mask_is_identity() {
        let graph = execute(&crate::transitions::parse_sequence(
            "a b c",
            &LabelInventory::default(),
        )
        .unwrap())
        .unwrap();
        let m = parent_mask(&graph, 3, 0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.is_visible(i, j), i == j);
            }
        }
    }

    #[test]
    fn example1_parent_mask() {
        let labels = LabelInventory::default();
        let tree = WordTree {
            forms: ["John", "put", "the", "coals", "out"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            heads: vec![2, 0, 4, 2, 2],
            labels: vec![
                Some(labels.id("nsubj").unwrap()),
                None,
                Some(labels.id("det").unwrap()),
                Some(labels.id("obj").unwrap()),
                Some(labels.id("compound:prt").unwrap()),
            ],
        };
        let toks = tokenize_subwords("Jo@@ hn put the coals out").unwrap();
        let seq = oracle(&tree, &toks).unwrap();
        let graph = execute(&seq).unwrap();
        let d = graph.n_tokens();
        let m = parent_mask(&graph, d, 0);
        // positions: 0 Jo@@ 1 hn 2 put 3 LA:nsubj 4 the 5 coals 6 LA:det
        //            7 RA:obj 8 out 9 RA:compound:prt
        // "coals" (5) sees itself, put (2), and RA:obj (7) - nothing else
        for j in 0..d {
            let expect = matches!(j, 2 | 5 | 7);
            assert_eq!(m.is_visible(5, j), expect, "col {j}");
        }
    }

    #[test]
    fn incremental_matches_recomputed() {
        let labels = LabelInventory::default();
        let seq = crate::transitions::parse_sequence(
            "Jo@@ hn put LA:nsubj the coals LA:det RA:obj out RA:compound:prt",
            &labels,
        )
        .unwrap();
        let d = 10;
        let mut state = crate::transitions::StackState::new();
        let mut builder = ParentMaskBuilder::new(d, 0);
        for t in &seq {
            state = state.step(t).unwrap();
            builder.update(&state.graph);
            let recomputed = parent_mask(&state.graph, d, 0);
            assert_eq!(builder.snapshot(), recomputed);
        }
    }
}
