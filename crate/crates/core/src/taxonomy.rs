//! Two-level label space: every action class hangs under exactly one body class.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The body ≺ action hierarchy. Indices are dense and zero-based at both levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTree {
    pub n_body: usize,
    pub n_action: usize,
    /// `parent[a]` is the body class of action `a`.
    pub parent: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub body_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub action_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelPair {
    pub body: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeViolation {
    NoBodyClasses,
    FewerActionsThanBodies {
        n_body: usize,
        n_action: usize,
    },
    ParentLength {
        expected: usize,
        found: usize,
    },
    ParentOutOfRange {
        action: usize,
        parent: usize,
    },
    ChildlessBody {
        body: usize,
    },
    NameCount {
        level: &'static str,
        expected: usize,
        found: usize,
    },
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeViolation::NoBodyClasses => write!(f, "n_body must be >= 1"),
            TreeViolation::FewerActionsThanBodies { n_body, n_action } => {
                write!(f, "n_action ({n_action}) < n_body ({n_body})")
            }
            TreeViolation::ParentLength { expected, found } => {
                write!(f, "parent has {found} entries, expected {expected}")
            }
            TreeViolation::ParentOutOfRange { action, parent } => {
                write!(f, "action {action} has parent {parent} outside body range")
            }
            TreeViolation::ChildlessBody { body } => write!(f, "body {body} has no child action"),
            TreeViolation::NameCount { level, expected, found } => {
                write!(f, "{level}_names has {found} entries, expected {expected}")
            }
        }
    }
}

impl ActionTree {
    /// Builds a tree from the number of children under each body class, in order.
    pub fn from_group_sizes(children: &[usize]) -> Self {
        let parent: Vec<usize> = children
            .iter()
            .enumerate()
            .flat_map(|(b, &n)| std::iter::repeat_n(b, n))
            .collect();
        ActionTree {
            n_body: children.len(),
            n_action: parent.len(),
            parent,
            body_names: Vec::new(),
            action_names: Vec::new(),
        }
    }

    /// Checks every structural invariant. Violations are returned as data.
    pub fn validate(&self) -> std::result::Result<(), Vec<TreeViolation>> {
        let mut out = Vec::new();
        if self.n_body == 0 {
            out.push(TreeViolation::NoBodyClasses);
        }
        if self.n_action < self.n_body {
            out.push(TreeViolation::FewerActionsThanBodies {
                n_body: self.n_body,
                n_action: self.n_action,
            });
        }
        if self.parent.len() != self.n_action {
            out.push(TreeViolation::ParentLength {
                expected: self.n_action,
                found: self.parent.len(),
            });
        }
        let mut has_child = vec![false; self.n_body];
        for (action, &parent) in self.parent.iter().enumerate() {
            match has_child.get_mut(parent) {
                Some(flag) => *flag = true,
                None => out.push(TreeViolation::ParentOutOfRange { action, parent }),
            }
        }
        for (body, seen) in has_child.iter().enumerate() {
            if !seen {
                out.push(TreeViolation::ChildlessBody { body });
            }
        }
        for (level, names, expected) in [
            ("body", &self.body_names, self.n_body),
            ("action", &self.action_names, self.n_action),
        ] {
            if !names.is_empty() && names.len() != expected {
                out.push(TreeViolation::NameCount {
                    level,
                    expected,
                    found: names.len(),
                });
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    pub fn body_of(&self, action: usize) -> Result<usize> {
        self.parent.get(action).copied().ok_or(Error::Range {
            what: "action class",
            index: action,
            len: self.n_action,
        })
    }

    pub fn label(&self, action: usize) -> Result<LabelPair> {
        Ok(LabelPair {
            body: self.body_of(action)?,
            action,
        })
    }

    pub fn children(&self, body: usize) -> impl Iterator<Item = usize> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter(move |(_, &p)| p == body)
            .map(|(a, _)| a)
    }

    /// Loads a standalone tree document (`n_body`, `n_action`, `parent`, optional names).
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tree: ActionTree = serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        tree.validate_strict()?;
        Ok(tree)
    }

    pub(crate) fn validate_strict(&self) -> Result<()> {
        self.validate().map_err(|v| {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            Error::Contract(format!("invalid action tree: {}", msgs.join("; ")))
        })
    }
}

impl LabelPair {
    pub fn consistent(&self, tree: &ActionTree) -> bool {
        tree.parent.get(self.action) == Some(&self.body)
    }
}
