//! RFC-4180-style CSV output: UTF-8, `.` decimal separator, mandatory
//! header row, fields quoted (with doubled inner quotes) whenever they
//! contain a comma, a quote, or a line break.

use std::fmt::Write as _;

/// Quotes a single field if it contains a delimiter, a quote, or a line
/// break; inner quotes are doubled.
fn quote_field(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        let mut out = String::with_capacity(field.len() + 2);
        out.push('"');
        for ch in field.chars() {
            if ch == '"' {
                out.push('"');
            }
            out.push(ch);
        }
        out.push('"');
        out
    } else {
        field.to_string()
    }
}

/// An in-memory CSV table with a mandatory header; rows must match the
/// header width. Numbers are rendered with the shortest round-trip decimal
/// form, so identical inputs produce identical bytes.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    /// Starts a table from its header row.
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row of preformatted fields. Panics if the width differs
    /// from the header (a programming error in the pipeline, not bad input).
    pub fn push_row(&mut self, fields: Vec<String>) {
        assert_eq!(
            fields.len(),
            self.header.len(),
            "CSV row width {} does not match header width {}",
            fields.len(),
            self.header.len()
        );
        self.rows.push(fields);
    }

    /// Renders the table as CRLF-free, LF-terminated CSV text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let write_row = |out: &mut String, row: &[String]| {
            let mut first = true;
            for field in row {
                if !first {
                    out.push(',');
                }
                first = false;
                let _ = write!(out, "{}", quote_field(field));
            }
            out.push('\n');
        };
        write_row(&mut out, &self.header);
        for row in &self.rows {
            write_row(&mut out, row);
        }
        out
    }
}

/// Formats an `f64` for CSV cells (shortest round-trip form).
pub fn num(v: f64) -> String {
    format!("{v}")
}
