//! Plain-text tables for `--format table`.

use serde_json::{Map, Value};

const CELL_WIDTH: usize = 48;

/// Renders a payload: arrays of objects as one table, objects as a
/// field/value table followed by a table per nested array of objects.
pub fn render(data: &Value, total_count: Option<u64>) -> String {
    let mut out = String::new();
    match data {
        Value::Array(items) => {
            out.push_str(&array_table(items));
            if let Some(total) = total_count {
                out.push_str(&format!("({} of {total})\n", items.len()));
            }
        }
        Value::Object(map) => out.push_str(&object_table(map)),
        other => {
            out.push_str(&cell(other));
            out.push('\n');
        }
    }
    out
}

fn object_table(map: &Map<String, Value>) -> String {
    let mut rows = Vec::new();
    let mut nested = Vec::new();
    for (k, v) in map {
        match v {
            Value::Array(items) if items.iter().any(Value::is_object) => nested.push((k, items)),
            _ => rows.push(vec![k.clone(), cell(v)]),
        }
    }
    let mut out = table(&["field".into(), "value".into()], &rows);
    for (k, items) in nested {
        out.push_str(&format!("\n{k}:\n"));
        out.push_str(&array_table(items));
    }
    out
}

fn array_table(items: &[Value]) -> String {
    let mut columns: Vec<String> = Vec::new();
    for item in items {
        if let Value::Object(map) = item {
            for k in map.keys() {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
    }
    if columns.is_empty() {
        let rows: Vec<Vec<String>> = items.iter().map(|v| vec![cell(v)]).collect();
        return table(&["value".into()], &rows);
    }
    let rows: Vec<Vec<String>> = items
        .iter()
        .map(|item| {
            columns
                .iter()
                .map(|c| item.get(c).map(cell).unwrap_or_default())
                .collect()
        })
        .collect();
    table(&columns, &rows)
}

fn cell(v: &Value) -> String {
    let text = match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let text = text.replace(['\n', '\t'], " ");
    if text.chars().count() > CELL_WIDTH {
        let cut: String = text.chars().take(CELL_WIDTH - 3).collect();
        format!("{cut}...")
    } else {
        text
    }
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        format!("{}\n", padded.join("  ").trim_end())
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(&rule));
    for row in rows {
        out.push_str(&line(row));
    }
    out
}
