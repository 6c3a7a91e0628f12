//! Task categories and the fixed instruction strings prepended to texts
//! before tokenization. Queries and documents get different strings, which
//! is what lets one model serve both sides of retrieval.
//!
//! The exact bytes matter: a retrained checkpoint only reproduces its
//! training-time conditioning if serving applies identical prefixes, so the
//! ten strings are pinned by a golden-file test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five supported task categories. The label set is closed; unknown
/// labels are rejected wherever they are parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Nl2Code,
    TechQa,
    Code2Code,
    Code2Nl,
    Code2Completion,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::Nl2Code,
        TaskType::TechQa,
        TaskType::Code2Code,
        TaskType::Code2Nl,
        TaskType::Code2Completion,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TaskType::Nl2Code => "nl2code",
            TaskType::TechQa => "techqa",
            TaskType::Code2Code => "code2code",
            TaskType::Code2Nl => "code2nl",
            TaskType::Code2Completion => "code2completion",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.label() == s)
            .ok_or_else(|| {
                Error::Data(format!(
                    "unknown task label '{s}' (expected one of nl2code, techqa, code2code, \
                     code2nl, code2completion)"
                ))
            })
    }
}

impl std::fmt::Display for TaskType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Which side of a retrieval pair a text belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Document,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Query, Role::Document];

    pub fn label(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Document => "document",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|r| r.label() == s).ok_or_else(|| {
            Error::Data(format!(
                "unknown role label '{s}' (expected 'query' or 'document')"
            ))
        })
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Instruction string for a (task, role) combination. The trailing `\n` is a
/// real line feed and is part of the string.
pub fn prefix_for(task: TaskType, role: Role) -> &'static str {
    match (task, role) {
        (TaskType::Nl2Code, Role::Query) => {
            "Find the most relevant code snippet given the following query:\n"
        }
        (TaskType::Nl2Code, Role::Document) => "Candidate code snippet:\n",
        (TaskType::TechQa, Role::Query) => {
            "Find the most relevant answer given the following question:\n"
        }
        (TaskType::TechQa, Role::Document) => "Candidate answer:\n",
        (TaskType::Code2Code, Role::Query) => {
            "Find an equivalent code snippet given the following code snippet:\n"
        }
        (TaskType::Code2Code, Role::Document) => "Candidate code snippet:\n",
        (TaskType::Code2Nl, Role::Query) => {
            "Find the most relevant comment given the following code snippet:\n"
        }
        (TaskType::Code2Nl, Role::Document) => "Candidate comment:\n",
        (TaskType::Code2Completion, Role::Query) => {
            "Find the most relevant completion given the following start of code snippet:\n"
        }
        (TaskType::Code2Completion, Role::Document) => "Candidate completion:\n",
    }
}

/// Prepend the instruction string for (task, role) to `text`. Tokenization
/// truncates from the tail, so the prefix survives any length budget that
/// can hold it.
pub fn apply_prefix(task: TaskType, role: Role, text: &str) -> String {
    let prefix = prefix_for(task, role);
    let mut out = String::with_capacity(prefix.len() + text.len());
    out.push_str(prefix);
    out.push_str(text);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ten_prefixes_end_with_line_feed() {
        for task in TaskType::ALL {
            for role in Role::ALL {
                let p = prefix_for(task, role);
                assert!(p.ends_with('\n'), "{task}/{role}");
                assert!(!p[..p.len() - 1].contains('\n'), "{task}/{role}");
            }
        }
    }

    #[test]
    fn labels_round_trip() {
        for task in TaskType::ALL {
            assert_eq!(TaskType::from_label(task.label()).unwrap(), task);
        }
        for role in Role::ALL {
            assert_eq!(Role::from_label(role.label()).unwrap(), role);
        }
    }

    #[test]
    fn unknown_task_is_rejected() {
        let err = TaskType::from_label("sql2code").unwrap_err();
        assert!(err.to_string().contains("unknown task"), "{err}");
    }

    #[test]
    fn serde_uses_lowercase_labels() {
        for task in TaskType::ALL {
            let json = serde_json::to_string(&task).unwrap();
            assert_eq!(json, format!("\"{}\"", task.label()));
        }
        assert_eq!(serde_json::to_string(&Role::Document).unwrap(), "\"document\"");
    }

    #[test]
    fn apply_prefix_concatenates() {
        let out = apply_prefix(TaskType::TechQa, Role::Document, "42");
        assert_eq!(out, "Candidate answer:\n42");
    }

    #[test]
    fn apply_prefix_on_empty_payload_is_prefix_alone() {
        let out = apply_prefix(TaskType::Code2Nl, Role::Query, "");
        assert_eq!(out, prefix_for(TaskType::Code2Nl, Role::Query));
    }

    #[test]
    fn apply_prefix_is_length_additive() {
        for task in TaskType::ALL {
            for role in Role::ALL {
                let payload = "fn main() { println!(\"hi\"); }";
                let out = apply_prefix(task, role, payload);
                assert_eq!(out.len(), prefix_for(task, role).len() + payload.len());
            }
        }
    }
}
