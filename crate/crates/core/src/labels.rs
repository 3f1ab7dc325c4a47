//! Dependency-label inventory.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a [`LabelInventory`].
pub type LabelId = usize;

/// Default inventory: 45 Universal Dependencies relations (the universal
/// set plus the language-specific subtypes common in UD 2.x English and
/// German treebanks, trimmed to 45 entries).
pub const DEFAULT_LABELS: [&str; 45] = [
    "acl",
    "acl:relcl",
    "advcl",
    "advmod",
    "amod",
    "appos",
    "aux",
    "aux:pass",
    "case",
    "cc",
    "cc:preconj",
    "ccomp",
    "compound",
    "compound:prt",
    "conj",
    "cop",
    "csubj",
    "csubj:pass",
    "dep",
    "det",
    "det:predet",
    "discourse",
    "expl",
    "fixed",
    "flat",
    "flat:foreign",
    "iobj",
    "mark",
    "nmod",
    "nmod:npmod",
    "nmod:poss",
    "nmod:tmod",
    "nsubj",
    "nsubj:pass",
    "nummod",
    "obj",
    "obl",
    "obl:npmod",
    "obl:tmod",
    "orphan",
    "parataxis",
    "punct",
    "root",
    "vocative",
    "xcomp",
];

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("unknown dependency label `{0}`")]
    Unknown(String),
    #[error("duplicate label `{0}` in inventory")]
    Duplicate(String),
    #[error("empty label inventory")]
    Empty,
    #[error("cannot read label file: {0}")]
    Io(#[from] std::io::Error),
}

/// Closed set of dependency labels, fixing the `LabelId` numbering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelInventory {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, LabelId>,
}

impl LabelInventory {
    pub fn new<I, S>(names: I) -> Result<Self, LabelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(LabelError::Empty);
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(LabelError::Duplicate(n.clone()));
            }
        }
        Ok(LabelInventory { names, index })
    }

    /// One label per line, blank lines and `#` comments skipped.
    pub fn from_file(path: &Path) -> Result<Self, LabelError> {
        let text = std::fs::read_to_string(path)?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned),
        )
    }

    pub fn id(&self, name: &str) -> Result<LabelId, LabelError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| LabelError::Unknown(name.to_owned()))
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Rebuild the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }
}

impl Default for LabelInventory {
    fn default() -> Self {
        Self::new(DEFAULT_LABELS).expect("default inventory is well formed")
    }
}

impl fmt::Display for LabelInventory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} labels", self.names.len())
    }
}
