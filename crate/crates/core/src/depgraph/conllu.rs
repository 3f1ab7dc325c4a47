//! CoNLL-U reading and writing.
//!
//! Only the basic columns are interpreted: ID, FORM, HEAD, DEPREL.
//! Multiword-token ranges ("1-2") and empty nodes ("1.1") are skipped,
//! as are comment lines.

use thiserror::Error;

use crate::depgraph::WordTree;
use crate::labels::{LabelError, LabelInventory};

#[derive(Debug, Error)]
pub enum ConlluError {
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: malformed {what}: `{value}`")]
    Malformed {
        line: usize,
        what: &'static str,
        value: String,
    },
    #[error("line {line}: head {head} out of range for a {len}-word sentence")]
    HeadOutOfRange { line: usize, head: usize, len: usize },
    #[error("sentence ending at line {line}: cyclic head references")]
    Cyclic { line: usize },
    #[error("line {line}: {source}")]
    Label {
        line: usize,
        #[source]
        source: LabelError,
    },
}

/// Parses CoNLL-U text into one [`WordTree`] per sentence.
pub fn parse_conllu(text: &str, labels: &LabelInventory) -> Result<Vec<WordTree>, ConlluError> {
    let mut trees = Vec::new();
    // (form, head, deprel, source line) for the current sentence
    let mut rows: Vec<(String, usize, String, usize)> = Vec::new();
    let mut last_line = 0usize;

    let mut flush = |rows: &mut Vec<(String, usize, String, usize)>,
                     end_line: usize|
     -> Result<Option<WordTree>, ConlluError> {
        if rows.is_empty() {
            return Ok(None);
        }
        let len = rows.len();
        let mut forms = Vec::with_capacity(len);
        let mut heads = Vec::with_capacity(len);
        let mut labels_out = Vec::with_capacity(len);
        for (form, head, deprel, line) in rows.iter() {
            if *head > len {
                return Err(ConlluError::HeadOutOfRange {
                    line: *line,
                    head: *head,
                    len,
                });
            }
            forms.push(form.clone());
            heads.push(*head);
            labels_out.push(if *head == 0 {
                None
            } else {
                Some(labels.id(deprel).map_err(|source| ConlluError::Label {
                    line: *line,
                    source,
                })?)
            });
        }
        // cycle check: every word must reach the root through head links
        for start in 0..len {
            let mut v = start;
            let mut steps = 0;
            while heads[v] != 0 {
                v = heads[v] - 1;
                steps += 1;
                if steps > len {
                    return Err(ConlluError::Cyclic { line: end_line });
                }
            }
        }
        rows.clear();
        Ok(Some(WordTree {
            forms,
            heads,
            labels: labels_out,
        }))
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.trim_end_matches(['\r']);
        if line.is_empty() {
            if let Some(t) = flush(&mut rows, line_no)? {
                trees.push(t);
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ConlluError::ColumnCount {
                line: line_no,
                found: cols.len(),
            });
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue; // multiword range or empty node
        }
        let expected_id = rows.len() + 1;
        let parsed_id: usize = id.parse().map_err(|_| ConlluError::Malformed {
            line: line_no,
            what: "token id",
            value: id.to_owned(),
        })?;
        if parsed_id != expected_id {
            return Err(ConlluError::Malformed {
                line: line_no,
                what: "token id (out of order)",
                value: id.to_owned(),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| ConlluError::Malformed {
            line: line_no,
            what: "head",
            value: cols[6].to_owned(),
        })?;
        rows.push((cols[1].to_owned(), head, cols[7].to_owned(), line_no));
    }
    if let Some(t) = flush(&mut rows, last_line)? {
        trees.push(t);
    }
    Ok(trees)
}

/// Renders a [`WordTree`] back to CoNLL-U; unused columns are `_`.
/// Root words get head 0 and deprel `root`.
pub fn write_conllu(tree: &WordTree, labels: &LabelInventory) -> String {
    let mut out = String::new();
    for i in 0..tree.len() {
        let deprel = match tree.labels[i] {
            Some(l) => labels.name(l),
            None => "root",
        };
        out.push_str(&format!(
            "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_\n",
            i + 1,
            tree.forms[i],
            tree.heads[i],
            deprel
        ));
    }
    out.push('\n');
    out
}

/// Renders a list of trees, blank line after each sentence.
pub fn write_conllu_corpus(trees: &[WordTree], labels: &LabelInventory) -> String {
    trees.iter().map(|t| write_conllu(t, labels)).collect()
}
