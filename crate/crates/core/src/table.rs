use serde::{Deserialize, Serialize};

/// A relational table as column names plus row cells.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<String>>) -> Self {
        Self { columns, rows }
    }

    /// GitHub-style markdown rendering. Pipes inside cells are escaped.
    pub fn to_markdown(&self) -> String {
        let escape = |c: &str| c.replace('|', "\\|").replace('\n', " ");
        let mut out = String::new();
        out.push_str("| ");
        out.push_str(
            &self
                .columns
                .iter()
                .map(|c| escape(c))
                .collect::<Vec<_>>()
                .join(" | "),
        );
        out.push_str(" |\n|");
        for _ in &self.columns {
            out.push_str(" --- |");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str("| ");
            out.push_str(&row.iter().map(|c| escape(c)).collect::<Vec<_>>().join(" | "));
            out.push_str(" |\n");
        }
        out
    }

    /// Canonical structural serialization: header then rows, cells separated
    /// by unit separators. Stable input for content hashing.
    pub fn serialize_structural(&self) -> String {
        let mut out = self.columns.join("\u{1f}");
        for row in &self.rows {
            out.push('\u{1e}');
            out.push_str(&row.join("\u{1f}"));
        }
        out
    }
}
