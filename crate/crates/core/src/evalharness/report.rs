use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::promptkit::Placement;

/// One CSV row: the result of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub model: String,
    pub case: u8,
    pub placement: Placement,
    /// Fine-tuned modules, e.g. `LLM` or `VE+MMA+LLM`; `none` for a base
    /// model.
    pub modules: String,
    pub acc: f64,
    pub mf1: f64,
    pub n: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Models as rows, (task, case) as columns; accuracy only.
    ModelsByCases,
    /// Placements as rows, (task, modules, metric) as columns.
    Placements,
    /// Module sets as rows, (task, metric) as columns.
    Modules,
}

impl std::str::FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "models-by-cases" | "models_by_cases" | "cases" => Ok(Layout::ModelsByCases),
            "placements" => Ok(Layout::Placements),
            "modules" => Ok(Layout::Modules),
            other => Err(format!(
                "unknown layout {other:?}; expected models-by-cases, placements or modules"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("no runs to report")]
    Empty,
    #[error("runs disagree on {axis}: {values:?}")]
    MixedAxis { axis: &'static str, values: Vec<String> },
    #[error("two runs fill cell ({row}, {column})")]
    DuplicateCell { row: String, column: String },
    #[error("row {row} has no run for column {column}")]
    MissingCell { row: String, column: String },
    #[error("csv: {0}")]
    Csv(String),
}

/// A rendered table: CSV is authoritative, markdown is derived from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub csv: String,
    pub markdown: String,
}

fn sort_key(r: &ReportRow) -> (String, String, u8, Placement, String) {
    (r.task.clone(), r.model.clone(), r.case, r.placement, r.modules.clone())
}

fn write_csv(rows: &[ReportRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ReportError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn read_csv(text: &str) -> Result<Vec<ReportRow>, ReportError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<ReportRow>, _>>()
        .map_err(|e| ReportError::Csv(e.to_string()))
}

/// Builds the CSV for `runs` and renders `layout` from it.
pub fn report(runs: &[ReportRow], layout: Layout) -> Result<Report, ReportError> {
    if runs.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut rows = runs.to_vec();
    rows.sort_by_key(sort_key);
    let csv = write_csv(&rows)?;
    let markdown = render(&read_csv(&csv)?, layout)?;
    Ok(Report { csv, markdown })
}

fn single<T: Ord + ToString>(axis: &'static str, values: impl Iterator<Item = T>) -> Result<(), ReportError> {
    let set: BTreeSet<T> = values.collect();
    if set.len() > 1 {
        return Err(ReportError::MixedAxis {
            axis,
            values: set.iter().map(ToString::to_string).collect(),
        });
    }
    Ok(())
}

fn pct(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

struct Grid {
    corner: String,
    columns: Vec<String>,
    rows: Vec<String>,
    cells: BTreeMap<(usize, usize), f64>,
}

impl Grid {
    fn build<R: Ord + Clone + ToString, C: Ord + Clone + ToString>(
        corner: &str,
        entries: Vec<(R, C, f64)>,
    ) -> Result<Grid, ReportError> {
        let row_keys: Vec<R> = entries
            .iter()
            .map(|e| e.0.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let col_keys: Vec<C> = entries
            .iter()
            .map(|e| e.1.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut cells = BTreeMap::new();
        for (r, c, v) in &entries {
            let ri = row_keys.binary_search(r).expect("row key");
            let ci = col_keys.binary_search(c).expect("column key");
            if cells.insert((ri, ci), *v).is_some() {
                return Err(ReportError::DuplicateCell {
                    row: r.to_string(),
                    column: c.to_string(),
                });
            }
        }
        for (ri, r) in row_keys.iter().enumerate() {
            for (ci, c) in col_keys.iter().enumerate() {
                if !cells.contains_key(&(ri, ci)) {
                    return Err(ReportError::MissingCell {
                        row: r.to_string(),
                        column: c.to_string(),
                    });
                }
            }
        }
        Ok(Grid {
            corner: corner.to_string(),
            columns: col_keys.iter().map(ToString::to_string).collect(),
            rows: row_keys.iter().map(ToString::to_string).collect(),
            cells,
        })
    }

    fn markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| {} | {} |", self.corner, self.columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(self.columns.len()));
        let col_max: Vec<f64> = (0..self.columns.len())
            .map(|c| {
                (0..self.rows.len())
                    .map(|r| self.cells[&(r, c)])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for (ri, name) in self.rows.iter().enumerate() {
            let cells: Vec<String> = (0..self.columns.len())
                .map(|ci| {
                    let v = self.cells[&(ri, ci)];
                    if v == col_max[ci] {
                        format!("**{}**", pct(v))
                    } else {
                        pct(v)
                    }
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", name, cells.join(" | "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Label(Vec<String>);

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

fn label(parts: &[&str]) -> Label {
    Label(parts.iter().map(|s| s.to_string()).collect())
}

fn render(rows: &[ReportRow], layout: Layout) -> Result<String, ReportError> {
    let (title, grid) = match layout {
        Layout::ModelsByCases => {
            single("placement", rows.iter().map(|r| r.placement))?;
            single("modules", rows.iter().map(|r| r.modules.clone()))?;
            let entries = rows
                .iter()
                .map(|r| {
                    (
                        r.model.clone(),
                        label(&[&format!("Task {}", r.task), &format!("Case {}", r.case)]),
                        r.acc,
                    )
                })
                .collect();
            ("Accuracy by model and prompt case", Grid::build("Model", entries)?)
        }
        Layout::Placements => {
            single("model", rows.iter().map(|r| r.model.clone()))?;
            single("case", rows.iter().map(|r| r.case))?;
            let mut entries = Vec::new();
            for r in rows {
                for (metric, v) in [("ACC", r.acc), ("MF1", r.mf1)] {
                    entries.push((
                        r.placement,
                        label(&[&format!("Task {}", r.task), &r.modules, metric]),
                        v,
                    ));
                }
            }
            ("Performance by image placement", Grid::build("Placement", entries)?)
        }
        Layout::Modules => {
            single("model", rows.iter().map(|r| r.model.clone()))?;
            single("case", rows.iter().map(|r| r.case))?;
            single("placement", rows.iter().map(|r| r.placement))?;
            let mut entries = Vec::new();
            for r in rows {
                for (metric, v) in [("ACC", r.acc), ("MF1", r.mf1)] {
                    entries.push((r.modules.clone(), label(&[&format!("Task {}", r.task), metric]), v));
                }
            }
            ("Performance by fine-tuned modules", Grid::build("Modules", entries)?)
        }
    };
    Ok(format!("## {title}\n\n{}", grid.markdown()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(task: &str, model: &str, case: u8, acc: f64) -> ReportRow {
        ReportRow {
            task: task.into(),
            model: model.into(),
            case,
            placement: Placement::Corresponding,
            modules: "none".into(),
            acc,
            mf1: acc,
            n: 100,
        }
    }

    #[test]
    fn single_run_is_one_cell() {
        let r = report(&[row("1", "m", 4, 0.5)], Layout::ModelsByCases).unwrap();
        assert_eq!(
            r.markdown,
            "## Accuracy by model and prompt case\n\n| Model | Task 1 Case 4 |\n|---|---:|\n| m | **50.00%** |\n"
        );
        assert_eq!(
            r.csv,
            "task,model,case,placement,modules,acc,mf1,n\n1,m,4,corresponding,none,0.5,0.5,100\n"
        );
    }

    #[test]
    fn ties_are_both_bold() {
        let r = report(
            &[row("1", "a", 4, 0.9), row("1", "b", 4, 0.9), row("1", "c", 4, 0.1)],
            Layout::ModelsByCases,
        )
        .unwrap();
        assert_eq!(r.markdown.matches("**90.00%**").count(), 2);
        assert!(r.markdown.contains("| c | 10.00% |"));
    }

    #[test]
    fn grid_shape_and_order_independence() {
        let mut runs = Vec::new();
        for t in ["1", "2", "3"] {
            for m in ["a", "b"] {
                for c in 1..=4 {
                    runs.push(row(t, m, c, 0.25 * f64::from(c)));
                }
            }
        }
        let r = report(&runs, Layout::ModelsByCases).unwrap();
        let header = r.markdown.lines().nth(2).unwrap();
        assert_eq!(header.matches(" | ").count(), 12);
        runs.reverse();
        assert_eq!(report(&runs, Layout::ModelsByCases).unwrap(), r);
    }

    #[test]
    fn inconsistent_axes() {
        let mut b = row("1", "b", 4, 0.5);
        b.placement = Placement::Front;
        assert!(matches!(
            report(&[row("1", "a", 4, 0.5), b], Layout::ModelsByCases),
            Err(ReportError::MixedAxis { axis: "placement", .. })
        ));
        assert!(matches!(
            report(&[row("1", "a", 4, 0.5), row("1", "b", 3, 0.5)], Layout::ModelsByCases),
            Err(ReportError::MissingCell { .. })
        ));
        assert!(matches!(
            report(&[row("1", "a", 4, 0.5), row("1", "a", 4, 0.6)], Layout::ModelsByCases),
            Err(ReportError::DuplicateCell { .. })
        ));
        assert_eq!(report(&[], Layout::Modules), Err(ReportError::Empty));
    }

    #[test]
    fn placement_layout() {
        let mut runs = Vec::new();
        for (p, acc) in [
            (Placement::Front, 0.4),
            (Placement::Corresponding, 0.9),
            (Placement::End, 0.45),
        ] {
            for modules in ["none", "LLM"] {
                let mut r = row("1", "toy", 4, acc);
                r.placement = p;
                r.modules = modules.into();
                runs.push(r);
            }
        }
        let md = report(&runs, Layout::Placements).unwrap().markdown;
        assert!(md.contains("| Placement | Task 1 LLM ACC | Task 1 LLM MF1 | Task 1 none ACC | Task 1 none MF1 |"));
        assert!(md.contains("| corresponding | **90.00%** |"));
    }
}
