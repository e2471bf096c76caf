//! Result-table writers: JSON for machines, CSV for the tables, TSV for
//! plotting sparsity against average wQL per defense.

use std::path::{Path, PathBuf};

use crate::metrics::Stat;

use super::{CellStats, HarnessError, ResultTable, TableRow};

/// Canonical JSON bytes for a table; determinism tests compare these.
pub fn table_to_json(table: &ResultTable) -> String {
    let mut s = serde_json::to_string_pretty(table).expect("table serializes");
    s.push('\n');
    s
}

pub fn table_from_json(json: &str) -> Result<ResultTable, HarnessError> {
    serde_json::from_str(json).map_err(|e| HarnessError::Io(e.to_string()))
}

const CELL_FIELDS: [&str; 4] = ["avg_wql", "avg_wql_target", "wape", "wse"];

/// CSV with one "mean ± std" column per (defense, metric) pair; parses back
/// to full precision.
pub fn table_to_csv(table: &ResultTable) -> String {
    let mut out = String::from("row,n_windows");
    for col in &table.columns {
        for field in CELL_FIELDS {
            out.push(',');
            out.push_str(&format!("{col}/{field}"));
        }
    }
    out.push('\n');
    for row in &table.rows {
        let n = row
            .cells
            .iter()
            .flatten()
            .map(|c| c.n_windows)
            .next()
            .unwrap_or(0);
        out.push_str(&format!("{},{}", row.key, n));
        for cell in &row.cells {
            match cell {
                Some(c) => {
                    for stat in [&c.avg_wql, &c.avg_wql_target, &c.wape, &c.wse] {
                        out.push(',');
                        out.push_str(&stat.display_cell());
                    }
                }
                None => out.push_str(",,,,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Rebuild a table (cells only; diagnostics are not carried by CSV).
pub fn table_from_csv(csv: &str) -> Result<ResultTable, HarnessError> {
    let bad = |msg: String| HarnessError::Io(format!("csv parse: {msg}"));
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() < 2 + CELL_FIELDS.len() || fields[0] != "row" {
        return Err(bad("unexpected header".into()));
    }
    let cell_cols = &fields[2..];
    if !cell_cols.len().is_multiple_of(CELL_FIELDS.len()) {
        return Err(bad("ragged cell columns".into()));
    }
    let mut columns = Vec::new();
    for chunk in cell_cols.chunks(CELL_FIELDS.len()) {
        let name = chunk[0]
            .strip_suffix("/avg_wql")
            .ok_or_else(|| bad(format!("unexpected column `{}`", chunk[0])))?;
        columns.push(name.to_string());
    }

    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != fields.len() {
            return Err(bad(format!(
                "row `{}` has {} fields",
                parts[0],
                parts.len()
            )));
        }
        let n_windows: usize = parts[1].parse().map_err(|_| bad("bad n_windows".into()))?;
        let mut cells = Vec::with_capacity(columns.len());
        for chunk in parts[2..].chunks(CELL_FIELDS.len()) {
            if chunk.iter().all(|c| c.is_empty()) {
                cells.push(None);
                continue;
            }
            let parse = |text: &str| {
                Stat::parse_cell(text).ok_or_else(|| bad(format!("bad stat cell `{text}`")))
            };
            cells.push(Some(CellStats {
                avg_wql: parse(chunk[0])?,
                avg_wql_target: parse(chunk[1])?,
                wape: parse(chunk[2])?,
                wse: parse(chunk[3])?,
                n_windows,
            }));
        }
        rows.push(TableRow {
            key: parts[0].to_string(),
            cells,
        });
    }
    Ok(ResultTable {
        schema: 1,
        seed: 0,
        dims: 0,
        columns,
        rows,
        diagnostics: Vec::new(),
    })
}

/// Plot-ready TSV: a sparsity column (0 for the clean baseline) plus one
/// full-grid avg-wQL mean per defense.
pub fn table_to_tsv(table: &ResultTable, dims: usize, n_targets: usize) -> String {
    let mut out = String::from("k");
    for col in &table.columns {
        out.push('\t');
        out.push_str(col);
    }
    out.push('\n');
    for row in &table.rows {
        let k_label = match row.key.as_str() {
            "no attack" => "0".to_string(),
            "full attack" => (dims - n_targets).to_string(),
            other => other.to_string(),
        };
        out.push_str(&k_label);
        for cell in &row.cells {
            out.push('\t');
            if let Some(c) = cell {
                out.push_str(&format!("{}", c.avg_wql.mean));
            }
        }
        out.push('\n');
    }
    out
}

/// Write all three formats into a directory; returns the written paths.
pub fn write_reports(
    table: &ResultTable,
    dir: impl AsRef<Path>,
    n_targets: usize,
) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(e.to_string()))?;
    let io = |e: std::io::Error| HarnessError::Io(e.to_string());
    let json_path = dir.join("table.json");
    std::fs::write(&json_path, table_to_json(table)).map_err(io)?;
    let csv_path = dir.join("table.csv");
    std::fs::write(&csv_path, table_to_csv(table)).map_err(io)?;
    let tsv_path = dir.join("table.tsv");
    std::fs::write(&tsv_path, table_to_tsv(table, table.dims, n_targets)).map_err(io)?;
    Ok(vec![json_path, csv_path, tsv_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run_experiment;

    #[test]
    fn report_round_trips_preserve_cells() {
        let cfg = crate::harness::tests::tiny_config(11);
        let table = run_experiment(&cfg).unwrap();

        // JSON -> CSV -> JSON keeps every cell bit-exact
        let csv = table_to_csv(&table);
        let back = table_from_csv(&csv).unwrap();
        assert_eq!(back.columns, table.columns);
        assert_eq!(back.rows.len(), table.rows.len());
        for (a, b) in table.rows.iter().zip(&back.rows) {
            assert_eq!(a.key, b.key);
            assert_eq!(a.cells, b.cells);
        }

        // JSON parse is the identity
        let json = table_to_json(&table);
        let back = table_from_json(&json).unwrap();
        assert_eq!(back, table);

        // "mean ± std" text cells parse back to two floats
        let cell = table.cell("1", "no defense").unwrap();
        let parsed = Stat::parse_cell(&cell.avg_wql.display_cell()).unwrap();
        assert_eq!(parsed, cell.avg_wql);
    }

    #[test]
    fn tsv_has_k_column_plus_one_per_defense() {
        let cfg = crate::harness::tests::tiny_config(13);
        let table = run_experiment(&cfg).unwrap();
        let tsv = table_to_tsv(&table, table.dims, 1);
        let mut lines = tsv.lines();
        assert_eq!(lines.next().unwrap(), "k\tno defense");
        let first: Vec<&str> = lines.next().unwrap().split('\t').collect();
        assert_eq!(first[0], "0"); // the clean baseline plots at k = 0
        assert_eq!(first.len(), 2);
        assert!(first[1].parse::<f64>().is_ok());
        assert_eq!(tsv.lines().count(), 1 + table.rows.len());
    }

    #[test]
    fn write_reports_emits_three_files() {
        let cfg = crate::harness::tests::tiny_config(17);
        let table = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_reports(&table, dir.path(), 1).unwrap();
        assert_eq!(files.len(), 3);
        for f in files {
            assert!(f.exists());
            assert!(std::fs::metadata(&f).unwrap().len() > 0);
        }
    }
}
