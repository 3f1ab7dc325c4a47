//! The arc-standard transition system over subword sequences.
//!
//! `Subword_t` extends or opens a word instead of shifting from a buffer;
//! `LA:l` / `RA:l` connect the top two stack words and also wire the arc
//! token itself into the graph, so transition tokens get structurally
//! meaningful representations.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

use crate::depgraph::{
    word_count, DepGraph, Token, TokenEdge, TokenKind, WordEdge, WordTree, CONTINUATION,
};
use crate::labels::{LabelId, LabelInventory};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// One decoder action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transition {
    Subword { surface: String, word_final: bool },
    LeftArc(LabelId),
    RightArc(LabelId),
    Eos,
}

impl Transition {
    pub fn subword(surface: &str) -> Self {
        Transition::Subword {
            surface: surface.to_owned(),
            word_final: !surface.ends_with(CONTINUATION),
        }
    }

    pub fn is_arc(&self) -> bool {
        matches!(self, Transition::LeftArc(_) | Transition::RightArc(_))
    }

    pub fn render(&self, labels: &LabelInventory) -> String {
        match self {
            Transition::Subword { surface, .. } => surface.clone(),
            Transition::LeftArc(l) => format!("LA:{}", labels.name(*l)),
            Transition::RightArc(l) => format!("RA:{}", labels.name(*l)),
            Transition::Eos => EOS.to_owned(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransitionError {
    #[error("arc transition with {0} stack words (need 2)")]
    StackTooSmall(usize),
    #[error("arc transition while a word is still open")]
    OpenWord,
    #[error("step {index}: {source}")]
    AtStep {
        index: usize,
        #[source]
        source: Box<TransitionError>,
    },
    #[error("tree is not projective")]
    NotProjective,
    #[error("segmentation spells {found} words, tree has {expected}")]
    SegmentationMismatch { found: usize, expected: usize },
    #[error("unknown transition string `{0}`")]
    UnknownTransition(String),
}

/// Parser configuration: word stack plus the graph under construction.
///
/// A value type; `step` returns a new state, so beam hypotheses can share
/// and fork freely.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StackState {
    /// Word ids, top of stack last.
    pub sigma: Vec<usize>,
    pub graph: DepGraph,
    /// Token positions of the currently open word, if any.
    pub pending_word: Vec<usize>,
    pub finished: bool,
}

impl StackState {
    pub fn new() -> Self {
        StackState::default()
    }

    pub fn has_open_word(&self) -> bool {
        !self.pending_word.is_empty()
    }

    /// Applies one transition, returning the successor state.
    pub fn step(&self, x: &Transition) -> Result<StackState, TransitionError> {
        let mut next = self.clone();
        next.step_mut(x)?;
        Ok(next)
    }

    fn step_mut(&mut self, x: &Transition) -> Result<(), TransitionError> {
        match x {
            Transition::Subword {
                surface,
                word_final,
            } => {
                let pos = self.graph.tokens.len();
                let word_id = self.graph.word_spans.len();
                self.graph
                    .tokens
                    .push(Token::subword(pos, surface, word_id, *word_final));
                self.pending_word.push(pos);
                if *word_final {
                    let span = std::mem::take(&mut self.pending_word);
                    self.graph.word_spans.push(span);
                    self.sigma.push(word_id);
                }
            }
            Transition::LeftArc(label) => {
                // top a is the head, second b the dependent; b is popped
                self.arc_pre()?;
                let a = self.sigma[self.sigma.len() - 1];
                let b = self.sigma[self.sigma.len() - 2];
                let x_pos = self.push_arc_token(x);
                self.add_word_edge(a, b, *label);
                self.add_token_word_edge(x_pos, b, *label); // x -> b
                self.add_word_token_edge(a, x_pos, *label); // a -> x
                self.sigma.remove(self.sigma.len() - 2);
            }
            Transition::RightArc(label) => {
                // second b is the head, top a the dependent; a is popped
                self.arc_pre()?;
                let a = self.sigma[self.sigma.len() - 1];
                let b = self.sigma[self.sigma.len() - 2];
                let x_pos = self.push_arc_token(x);
                self.add_word_edge(b, a, *label);
                self.add_token_word_edge(x_pos, a, *label); // x -> a
                self.add_word_token_edge(b, x_pos, *label); // b -> x
                self.sigma.pop();
            }
            Transition::Eos => {
                self.finished = true;
            }
        }
        Ok(())
    }

    fn arc_pre(&self) -> Result<(), TransitionError> {
        if self.has_open_word() {
            return Err(TransitionError::OpenWord);
        }
        if self.sigma.len() < 2 {
            return Err(TransitionError::StackTooSmall(self.sigma.len()));
        }
        Ok(())
    }

    fn push_arc_token(&mut self, x: &Transition) -> usize {
        let pos = self.graph.tokens.len();
        let surface = match x {
            Transition::LeftArc(l) => format!("LA:#{l}"),
            Transition::RightArc(l) => format!("RA:#{l}"),
            _ => unreachable!(),
        };
        self.graph.tokens.push(Token {
            id: pos,
            surface,
            kind: TokenKind::Transition,
            word_id: None,
            is_word_final: false,
        });
        pos
    }

    /// Word-level edge, expanded to every subword pair of the two words.
    fn add_word_edge(&mut self, head: usize, dependent: usize, label: LabelId) {
        self.graph.word_edges.push(WordEdge {
            head,
            dependent,
            label,
        });
        let heads = self.graph.word_spans[head].clone();
        let deps = self.graph.word_spans[dependent].clone();
        for &h in &heads {
            for &d in &deps {
                self.graph.token_edges.push(TokenEdge {
                    head: h,
                    dependent: d,
                    label,
                });
            }
        }
    }

    /// Edge from a transition token to every subword of `word`.
    fn add_token_word_edge(&mut self, tok: usize, word: usize, label: LabelId) {
        for &d in &self.graph.word_spans[word].clone() {
            self.graph.token_edges.push(TokenEdge {
                head: tok,
                dependent: d,
                label,
            });
        }
    }

    /// Edge from every subword of `word` to a transition token.
    fn add_word_token_edge(&mut self, word: usize, tok: usize, label: LabelId) {
        for &h in &self.graph.word_spans[word].clone() {
            self.graph.token_edges.push(TokenEdge {
                head: h,
                dependent: tok,
                label,
            });
        }
    }
}

/// Folds [`StackState::step`] over a sequence. The root edge is never
/// emitted; whatever remains on the stack stays a root. Stops at EOS.
pub fn execute(seq: &[Transition]) -> Result<DepGraph, TransitionError> {
    let mut state = StackState::new();
    for (index, x) in seq.iter().enumerate() {
        state = state.step(x).map_err(|source| TransitionError::AtStep {
            index,
            source: Box::new(source),
        })?;
        if state.finished {
            break;
        }
    }
    Ok(state.graph)
}

/// Shortest arc-standard derivation of a projective tree.
///
/// Scans words left to right, emitting the subword tokens of each word and
/// then reducing eagerly: an arc fires as soon as the dependent below it
/// has collected all of its own children, with LeftArc tried first. The
/// root edge is omitted; no EOS is appended.
pub fn oracle(tree: &WordTree, segmented: &[Token]) -> Result<Vec<Transition>, TransitionError> {
    if !crate::depgraph::is_projective(tree) {
        return Err(TransitionError::NotProjective);
    }
    let n = tree.len();
    let found = word_count(segmented);
    if found != n {
        return Err(TransitionError::SegmentationMismatch { found, expected: n });
    }

    let mut n_children = vec![0usize; n];
    for &h in &tree.heads {
        if h != 0 {
            n_children[h - 1] += 1;
        }
    }
    let mut attached = vec![0usize; n];
    let mut out = Vec::new();
    let mut stack: Vec<usize> = Vec::new();

    let mut reduce = |stack: &mut Vec<usize>, out: &mut Vec<Transition>, attached: &mut [usize]| {
        while stack.len() >= 2 {
            let a = stack[stack.len() - 1];
            let b = stack[stack.len() - 2];
            if tree.heads[b] == a + 1 && attached[b] == n_children[b] {
                out.push(Transition::LeftArc(tree.labels[b].expect("non-root")));
                attached[a] += 1;
                stack.remove(stack.len() - 2);
            } else if tree.heads[a] == b + 1 && attached[a] == n_children[a] {
                out.push(Transition::RightArc(tree.labels[a].expect("non-root")));
                attached[b] += 1;
                stack.pop();
            } else {
                break;
            }
        }
    };

    let mut word = 0usize;
    for tok in segmented {
        if tok.kind != TokenKind::Subword {
            continue;
        }
        out.push(Transition::Subword {
            surface: tok.surface.clone(),
            word_final: tok.is_word_final,
        });
        if tok.is_word_final {
            stack.push(word);
            word += 1;
            reduce(&mut stack, &mut out, &mut attached);
        }
    }
    // projective single-rooted trees reduce to one stack word; forests
    // keep one word per root
    let roots = tree.heads.iter().filter(|&&h| h == 0).count();
    if stack.len() != roots.max(1) {
        return Err(TransitionError::NotProjective);
    }
    Ok(out)
}

/// How EOS is constrained during decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EosMode {
    /// EOS only with a single finished word on the stack (tree output).
    Strict,
    /// EOS always available (forest output); the default.
    Lenient,
}

/// Joint vocabulary over subword types, arc transitions and controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    entries: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
    /// ids `transition_start .. transition_start + 2 * n_labels`
    transition_start: usize,
    n_labels: usize,
}

impl Vocabulary {
    /// Builds the joint vocabulary: controls, then subword types in the
    /// given order, then `LA:l` for every label, then `RA:l`.
    pub fn build<I, S>(subword_types: I, labels: &LabelInventory) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut entries: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
        let mut seen: HashMap<String, usize> =
            entries.iter().cloned().zip(0..).map(|(s, i)| (s, i)).collect();
        for t in subword_types {
            let t = t.as_ref();
            if !seen.contains_key(t) {
                seen.insert(t.to_owned(), entries.len());
                entries.push(t.to_owned());
            }
        }
        let transition_start = entries.len();
        for l in labels.names() {
            entries.push(format!("LA:{l}"));
        }
        for l in labels.names() {
            entries.push(format!("RA:{l}"));
        }
        let lookup = entries
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Vocabulary {
            entries,
            lookup,
            transition_start,
            n_labels: labels.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of arc-transition entries (2 per label).
    pub fn n_transition_tokens(&self) -> usize {
        2 * self.n_labels
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn unk(&self) -> usize {
        2
    }

    pub fn id(&self, s: &str) -> Option<usize> {
        self.lookup.get(s).copied()
    }

    pub fn id_or_unk(&self, s: &str) -> usize {
        self.id(s).unwrap_or(self.unk())
    }

    pub fn surface(&self, id: usize) -> &str {
        &self.entries[id]
    }

    pub fn is_transition(&self, id: usize) -> bool {
        (self.transition_start..self.transition_start + 2 * self.n_labels).contains(&id)
    }

    pub fn is_subword(&self, id: usize) -> bool {
        id >= 3 && id < self.transition_start
    }

    pub fn is_control(&self, id: usize) -> bool {
        id < 3
    }

    /// True for subword entries that close a word (no trailing `@@`).
    pub fn is_word_final_subword(&self, id: usize) -> bool {
        self.is_subword(id) && !self.entries[id].ends_with(CONTINUATION)
    }

    pub fn transition_id(&self, t: &Transition) -> Option<usize> {
        match t {
            Transition::Subword { surface, .. } => self.id(surface),
            Transition::LeftArc(l) => Some(self.transition_start + l),
            Transition::RightArc(l) => Some(self.transition_start + self.n_labels + l),
            Transition::Eos => Some(self.eos()),
        }
    }

    /// Decodes a vocabulary id into the transition it performs.
    /// Controls other than EOS return `None`.
    pub fn transition_of(&self, id: usize) -> Option<Transition> {
        if id == self.eos() {
            return Some(Transition::Eos);
        }
        if self.is_subword(id) {
            return Some(Transition::subword(&self.entries[id]));
        }
        if self.is_transition(id) {
            let off = id - self.transition_start;
            return Some(if off < self.n_labels {
                Transition::LeftArc(off)
            } else {
                Transition::RightArc(off - self.n_labels)
            });
        }
        None
    }

    pub fn rebuild_lookup(&mut self) {
        self.lookup = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
    }
}

/// Which vocabulary entries may legally extend `state`.
///
/// Subwords are valid while `remaining_subwords` (if given) is positive;
/// with exactly one slot left only word-final subwords remain so a word
/// can never be left open when the budget runs out. Arcs need two stack
/// words and no open word. Strict EOS needs a lone finished word.
pub fn valid_mask(
    state: &StackState,
    vocab: &Vocabulary,
    eos_mode: EosMode,
    remaining_subwords: Option<usize>,
) -> Vec<bool> {
    let mut mask = vec![false; vocab.len()];
    let arcs_ok = !state.has_open_word() && state.sigma.len() >= 2;
    let eos_ok = match eos_mode {
        EosMode::Lenient => true,
        EosMode::Strict => state.sigma.len() == 1 && !state.has_open_word(),
    };
    for id in 0..vocab.len() {
        mask[id] = if id == vocab.eos() {
            eos_ok
        } else if vocab.is_subword(id) {
            match remaining_subwords {
                Some(0) => false,
                Some(1) => vocab.is_word_final_subword(id),
                _ => true,
            }
        } else if vocab.is_transition(id) {
            arcs_ok
        } else {
            false // BOS / UNK are never generated
        };
    }
    mask
}

/// Renders a transition sequence as a space-separated line
/// (`Jo@@ hn put LA:nsubj ...`).
pub fn render_sequence(seq: &[Transition], labels: &LabelInventory) -> String {
    seq.iter()
        .map(|t| t.render(labels))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses the textual form back into transitions.
pub fn parse_sequence(
    line: &str,
    labels: &LabelInventory,
) -> Result<Vec<Transition>, TransitionError> {
    line.split_whitespace()
        .map(|tok| {
            if tok == EOS {
                Ok(Transition::Eos)
            } else if let Some(l) = tok.strip_prefix("LA:") {
                labels
                    .id(l)
                    .map(Transition::LeftArc)
                    .map_err(|_| TransitionError::UnknownTransition(tok.to_owned()))
            } else if let Some(l) = tok.strip_prefix("RA:") {
                labels
                    .id(l)
                    .map(Transition::RightArc)
                    .map_err(|_| TransitionError::UnknownTransition(tok.to_owned()))
            } else {
                Ok(Transition::subword(tok))
            }
        })
        .collect()
}
