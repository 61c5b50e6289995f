//! Accuracy tables: one per (mode, source domain), targets × archs as
//! columns, methods as rows in a fixed order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::results::{ResultsRow, RowKind};
use crate::dataset::Mode;
use crate::error::{Error, Result};
use crate::model::Arch;

pub const EMPTY_CELL: &str = "—";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

/// Mean accuracy over the seeds that produced one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub seeds: usize,
    /// Rows for this cell that carry an error instead of an accuracy.
    pub failed: usize,
}

impl Cell {
    pub fn render(&self) -> String {
        let mut s = format!("{:.2} (n={})", 100.0 * self.mean, self.seeds);
        if self.failed > 0 {
            let _ = write!(s, " [{} failed]", self.failed);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub mode: Mode,
    pub source: u8,
    /// `(target, arch name)` per column.
    pub columns: Vec<(u8, String)>,
    /// Always [`RowKind::ORDER`], one entry per column each.
    pub rows: Vec<(RowKind, Vec<Option<Cell>>)>,
}

impl Table {
    pub fn title(&self) -> String {
        format!("{} models accuracy - source domain {}", self.mode.as_str().to_uppercase(), self.source)
    }

    fn header(&self) -> Vec<String> {
        std::iter::once("method".to_string())
            .chain(self.columns.iter().map(|(t, a)| format!("target {t} / {a}")))
            .collect()
    }

    fn body(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(kind, cells)| {
                std::iter::once(kind.label().to_string())
                    .chain(cells.iter().map(|c| c.map_or_else(|| EMPTY_CELL.to_string(), |c| c.render())))
                    .collect()
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n", self.title());
        let header = self.header();
        let _ = writeln!(s, "| {} |", header.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
        for row in self.body() {
            let _ = writeln!(s, "| {} |", row.join(" | "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let quote = |f: &str| {
            if f.contains([',', '"', '\n']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.to_string()
            }
        };
        let line = |fields: &[String]| fields.iter().map(|f| quote(f)).collect::<Vec<_>>().join(",") + "\n";
        let mut s = format!("# {}\n", self.title());
        s.push_str(&line(&self.header()));
        for row in self.body() {
            s.push_str(&line(&row));
        }
        s
    }

    pub fn file_stem(&self) -> String {
        format!("{}_source{}", self.mode, self.source)
    }
}

fn arch_rank(name: &str) -> (usize, String) {
    let pos = Arch::ALL.iter().position(|a| a.name() == name).unwrap_or(Arch::ALL.len());
    (pos, name.to_string())
}

/// Builds all tables from store rows. Errors on an empty store.
pub fn build_tables(rows: &[ResultsRow]) -> Result<Vec<Table>> {
    if rows.is_empty() {
        return Err(Error::Results("results store is empty".into()));
    }
    let mut groups: BTreeMap<(Mode, u8), Vec<&ResultsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.mode, r.source)).or_default().push(r);
    }
    let mut tables = Vec::new();
    for ((mode, source), rs) in groups {
        let mut columns: Vec<(u8, String)> = rs.iter().map(|r| (r.target, r.arch.clone())).collect();
        columns.sort_by_key(|(t, a)| (*t, arch_rank(a)));
        columns.dedup();
        let table_rows = RowKind::ORDER
            .iter()
            .map(|&kind| {
                let cells = columns
                    .iter()
                    .map(|(t, a)| {
                        let hits: Vec<&&ResultsRow> =
                            rs.iter().filter(|r| r.method == kind && r.target == *t && &r.arch == a).collect();
                        let acc: Vec<f64> = hits.iter().filter_map(|r| r.accuracy).collect();
                        let failed = hits.len() - acc.len();
                        (!acc.is_empty()).then(|| Cell {
                            mean: acc.iter().sum::<f64>() / acc.len() as f64,
                            seeds: acc.len(),
                            failed,
                        })
                    })
                    .collect();
                (kind, cells)
            })
            .collect();
        tables.push(Table { mode, source, columns, rows: table_rows });
    }
    Ok(tables)
}

pub fn render(tables: &[Table], format: Format) -> String {
    tables
        .iter()
        .map(|t| match format {
            Format::Csv => t.to_csv(),
            Format::Markdown => t.to_markdown(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}
