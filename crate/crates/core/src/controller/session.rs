use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::taskgraph::ArgKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Append-only conversation log plus the resources the user has mentioned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSession {
    pub id: String,
    turns: Vec<Turn>,
    resource_index: BTreeMap<String, ArgKind>,
}

impl ChatSession {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, role: Role, text: impl Into<String>) {
        self.turns.push(Turn {
            role,
            text: text.into(),
        });
    }

    pub fn register_resource(&mut self, name: impl Into<String>, kind: ArgKind) {
        self.resource_index.insert(name.into(), kind);
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn resources(&self) -> &BTreeMap<String, ArgKind> {
        &self.resource_index
    }

    /// The last `window` turns as `role: text` lines, or `[]` when empty.
    pub fn render_log(&self, window: usize) -> String {
        let start = self.turns.len().saturating_sub(window);
        let lines: Vec<String> = self.turns[start..]
            .iter()
            .map(|t| format!("{}: {}", t.role, t.text))
            .collect();
        if lines.is_empty() {
            "[]".to_string()
        } else {
            format!("\n{}\n", lines.join("\n"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_is_truncated_to_window() {
        let mut s = ChatSession::new("s");
        assert_eq!(s.render_log(10), "[]");
        for i in 0..12 {
            s.push(if i % 2 == 0 { Role::User } else { Role::Assistant }, format!("m{i}"));
        }
        let log = s.render_log(10);
        assert!(!log.contains("m0\n") && !log.contains("m1\n"));
        assert!(log.contains("user: m2\n") && log.contains("assistant: m11\n"));
        assert_eq!(log.trim().lines().count(), 10);
    }
}
