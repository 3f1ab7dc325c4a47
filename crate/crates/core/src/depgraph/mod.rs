//! Dependency-graph data model and word/subword bookkeeping.
//!
//! Tokens are subword pieces with the trailing-`@@` continuation
//! convention: a surface form ending in `@@` continues into the next
//! token, and the last piece of each word carries no marker. Arc and
//! sequence-control tokens live in the same positional sequence but
//! belong to no word.

pub mod conllu;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::LabelId;

/// Marker for subword continuation.
pub const CONTINUATION: &str = "@@";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    /// A subword piece of a target word.
    Subword,
    /// An arc token (`LA:label` / `RA:label`).
    Transition,
    /// Sequence control (BOS / EOS).
    Control,
}

/// One position in the generated sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// 0-based position in the sequence.
    pub id: usize,
    pub surface: String,
    pub kind: TokenKind,
    /// Word this subword belongs to; `None` for transition/control tokens.
    pub word_id: Option<usize>,
    /// True for the last subword of a word.
    pub is_word_final: bool,
}

impl Token {
    pub fn subword(id: usize, surface: &str, word_id: usize, is_word_final: bool) -> Self {
        Token {
            id,
            surface: surface.to_owned(),
            kind: TokenKind::Subword,
            word_id: Some(word_id),
            is_word_final,
        }
    }
}

/// Direction tag of a graph edge as seen from the receiving node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeDirection {
    /// Token to itself.
    SelfLoop,
    /// Toward the parent (dependent -> head).
    Left,
    /// From the parent (head -> dependent).
    Right,
}

/// Labeled head -> dependent edge at word granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordEdge {
    pub head: usize,
    pub dependent: usize,
    pub label: LabelId,
}

/// Labeled head -> dependent edge at token granularity (after subword
/// expansion; includes edges through transition tokens).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEdge {
    pub head: usize,
    pub dependent: usize,
    pub label: LabelId,
}

/// The labeled graph built over the generated sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DepGraph {
    pub tokens: Vec<Token>,
    /// Word id -> token positions of its subwords (contiguous).
    pub word_spans: Vec<Vec<usize>>,
    pub word_edges: Vec<WordEdge>,
    pub token_edges: Vec<TokenEdge>,
}

impl DepGraph {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_words(&self) -> usize {
        self.word_spans.len()
    }

    /// Word ids with no incoming word-level edge.
    pub fn roots(&self) -> Vec<usize> {
        let mut has_head = vec![false; self.word_spans.len()];
        for e in &self.word_edges {
            has_head[e.dependent] = true;
        }
        (0..self.word_spans.len()).filter(|&w| !has_head[w]).collect()
    }

    /// Surface form of a word with continuation markers merged away.
    pub fn word_form(&self, word_id: usize) -> String {
        let mut s = String::new();
        for &t in &self.word_spans[word_id] {
            let piece = &self.tokens[t].surface;
            s.push_str(piece.strip_suffix(CONTINUATION).unwrap_or(piece));
        }
        s
    }

    /// Token-level heads of token `t` (the `j` with an edge `j -> t`).
    pub fn heads_of(&self, t: usize) -> Vec<usize> {
        self.token_edges
            .iter()
            .filter(|e| e.dependent == t)
            .map(|e| e.head)
            .collect()
    }

    /// Word-level view as a [`WordTree`] (heads are 1-based, 0 = root),
    /// usable when every word has at most one head.
    pub fn to_word_tree(&self) -> WordTree {
        let mut heads = vec![0usize; self.n_words()];
        let mut labels = vec![None; self.n_words()];
        for e in &self.word_edges {
            heads[e.dependent] = e.head + 1;
            labels[e.dependent] = Some(e.label);
        }
        WordTree {
            forms: (0..self.n_words()).map(|w| self.word_form(w)).collect(),
            heads,
            labels,
        }
    }
}

/// A word-level dependency tree as read from CoNLL-U.
///
/// `heads[i]` is 1-based; 0 marks a root word. `labels[i]` is `None` only
/// for root words whose deprel was `root` (the root edge itself is not
/// represented).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordTree {
    pub forms: Vec<String>,
    pub heads: Vec<usize>,
    pub labels: Vec<Option<LabelId>>,
}

impl WordTree {
    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    /// (head, dependent, label) triples, 0-based, roots excluded.
    pub fn edges(&self) -> Vec<(usize, usize, LabelId)> {
        self.heads
            .iter()
            .enumerate()
            .filter(|(_, &h)| h != 0)
            .map(|(d, &h)| (h - 1, d, self.labels[d].expect("non-root word has a label")))
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("token {0} is a continuation with no word to continue")]
    OrphanContinuation(usize),
    #[error("sequence ends inside an open word (token {0} is not word-final)")]
    UnterminatedWord(usize),
    #[error("subwords of word {0} are not contiguous")]
    NonContiguousWord(usize),
    #[error("token {0}: word-final flag disagrees with word grouping")]
    BadFinalFlag(usize),
}

/// Groups subword tokens into words: word id -> contiguous token positions.
///
/// Transition/control tokens are skipped; exactly the subword-kind
/// tokens are partitioned.
pub fn word_subword_map(tokens: &[Token]) -> Result<HashMap<usize, Vec<usize>>, GraphError> {
    let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut open: Option<(usize, usize)> = None; // (word_id, last position)
    for tok in tokens {
        if tok.kind != TokenKind::Subword {
            continue;
        }
        let word_id = tok.word_id.ok_or(GraphError::OrphanContinuation(tok.id))?;
        match open {
            Some((w, _)) if w != word_id => return Err(GraphError::BadFinalFlag(tok.id)),
            Some((w, last)) => {
                if tok.id != last + 1 {
                    return Err(GraphError::NonContiguousWord(w));
                }
            }
            None => {
                if map.contains_key(&word_id) {
                    return Err(GraphError::NonContiguousWord(word_id));
                }
            }
        }
        map.entry(word_id).or_default().push(tok.id);
        open = if tok.is_word_final {
            None
        } else {
            Some((word_id, tok.id))
        };
    }
    if let Some((_, last)) = open {
        return Err(GraphError::UnterminatedWord(last));
    }
    Ok(map)
}

/// Splits a pre-segmented line ("Jo@@ hn put") into subword [`Token`]s.
///
/// Errors if the line ends inside an open word (trailing `@@`).
pub fn tokenize_subwords(line: &str) -> Result<Vec<Token>, GraphError> {
    let mut tokens = Vec::new();
    let mut word_id = 0usize;
    for piece in line.split_whitespace() {
        let is_final = !piece.ends_with(CONTINUATION);
        tokens.push(Token::subword(tokens.len(), piece, word_id, is_final));
        if is_final {
            word_id += 1;
        }
    }
    if let Some(last) = tokens.last() {
        if !last.is_word_final {
            return Err(GraphError::UnterminatedWord(last.id));
        }
    }
    Ok(tokens)
}

/// Number of words a segmented token list spells out.
pub fn word_count(tokens: &[Token]) -> usize {
    tokens
        .iter()
        .filter(|t| t.kind == TokenKind::Subword && t.is_word_final)
        .count()
}

/// True iff no two edges cross when drawn above the sentence: for every
/// edge (h, d), every word strictly between them is a descendant of h.
///
/// Works on forests; multiple interleaved roots come out non-projective.
pub fn is_projective(tree: &WordTree) -> bool {
    let n = tree.len();
    if n <= 1 {
        return true;
    }
    // descendants[h] via reachability over head links
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (d, &h) in tree.heads.iter().enumerate() {
        if h != 0 {
            children[h - 1].push(d);
        }
    }
    let mut descendant = vec![vec![false; n]; n];
    for start in 0..n {
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &c in &children[v] {
                if !descendant[start][c] {
                    descendant[start][c] = true;
                    stack.push(c);
                }
            }
        }
    }
    for (d, &h1) in tree.heads.iter().enumerate() {
        if h1 == 0 {
            continue;
        }
        let h = h1 - 1;
        let (lo, hi) = (h.min(d), h.max(d));
        for between in lo + 1..hi {
            if !descendant[h][between] {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelInventory;

    fn tree(heads: &[usize]) -> WordTree {
        WordTree {
            forms: (0..heads.len()).map(|i| format!("w{i}")).collect(),
            heads: heads.to_vec(),
            labels: heads.iter().map(|&h| (h != 0).then_some(0)).collect(),
        }
    }

    /// The running example: "John put the coals out".
    pub fn example1_tree() -> WordTree {
        let inv = LabelInventory::default();
        WordTree {
            forms: ["John", "put", "the", "coals", "out"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            heads: vec![2, 0, 4, 2, 2],
            labels: vec![
                Some(inv.id("nsubj").unwrap()),
                None,
                Some(inv.id("det").unwrap()),
                Some(inv.id("obj").unwrap()),
                Some(inv.id("compound:prt").unwrap()),
            ],
        }
    }

    #[test]
    fn example1_is_projective() {
        assert!(is_projective(&example1_tree()));
    }

    #[test]
    fn crossing_arcs_detected() {
        // edges 1->3 and 2->4 (1-based) cross
        assert!(!is_projective(&tree(&[0, 4, 1, 2])));
    }

    #[test]
    fn single_word_projective() {
        assert!(is_projective(&tree(&[0])));
    }

    #[test]
    fn subword_map_groups_contiguous_pieces() {
        let toks = tokenize_subwords("Jo@@ hn put").unwrap();
        let map = word_subword_map(&toks).unwrap();
        assert_eq!(map[&0], vec![0, 1]);
        assert_eq!(map[&1], vec![2]);
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn subword_map_single_threepiece_word() {
        let toks = tokenize_subwords("a@@ b@@ c").unwrap();
        let map = word_subword_map(&toks).unwrap();
        assert_eq!(map[&0], vec![0, 1, 2]);
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn subword_map_all_final_is_identity_like() {
        let toks = tokenize_subwords("a b c").unwrap();
        let map = word_subword_map(&toks).unwrap();
        assert_eq!(map.len(), 3);
        for w in 0..3 {
            assert_eq!(map[&w], vec![w]);
        }
    }

    #[test]
    fn trailing_continuation_is_an_error() {
        assert_eq!(
            tokenize_subwords("ab@@").unwrap_err(),
            GraphError::UnterminatedWord(0)
        );
    }

    #[test]
    fn orphan_word_id_is_an_error() {
        let toks = vec![Token {
            id: 0,
            surface: "x".into(),
            kind: TokenKind::Subword,
            word_id: None,
            is_word_final: true,
        }];
        assert_eq!(
            word_subword_map(&toks).unwrap_err(),
            GraphError::OrphanContinuation(0)
        );
    }
}
