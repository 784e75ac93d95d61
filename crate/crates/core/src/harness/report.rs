//! Report tables and the on-disk bundle. Everything here is a pure function
//! of [`ExperimentResults`], so regenerating a bundle from the same results
//! file yields identical bytes.

use std::path::Path;

use super::{ExperimentResults, RatioResult};
use crate::error::{Error, Result};
use crate::verify::{VerificationMethod, VerificationVerdict};

/// Whether a decision is the one the experiment should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Expected,
    Unexpected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Full precision, used in CSV.
    pub raw: String,
    /// Rounded for terminals.
    pub display: String,
    pub outcome: Option<Outcome>,
}

impl Cell {
    fn text(s: impl Into<String>) -> Self {
        let s = s.into();
        Cell {
            raw: s.clone(),
            display: s,
            outcome: None,
        }
    }

    fn num(v: f64, decimals: usize) -> Self {
        Cell {
            raw: format!("{v}"),
            display: format!("{v:.decimals$}"),
            outcome: None,
        }
    }

    fn empty() -> Self {
        Cell::text("")
    }

    fn verdict(v: Option<&VerificationVerdict>, expect: bool) -> Self {
        match v {
            None => Cell::empty(),
            Some(v) => Cell {
                raw: format!("{}", v.statistic),
                display: format!("{:.3}", v.statistic),
                outcome: Some(if v.decision == expect {
                    Outcome::Expected
                } else {
                    Outcome::Unexpected
                }),
            },
        }
    }

    fn flag(pass: bool) -> Self {
        Cell {
            raw: pass.to_string(),
            display: if pass { "pass" } else { "FAIL" }.into(),
            outcome: Some(if pass {
                Outcome::Expected
            } else {
                Outcome::Unexpected
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(&self.headers).map_err(err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.raw.as_str()))
                .map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn find(verdicts: &[VerificationVerdict], m: VerificationMethod) -> Option<&VerificationVerdict> {
    verdicts.iter().find(|v| v.method == m)
}

const VERDICT_HEADERS: [&str; 3] = ["wb_test_log10p", "bb_loss_gap", "wb_marked_log10p"];

fn verdict_cells(verdicts: &[VerificationVerdict], expect: bool) -> Vec<Cell> {
    [
        VerificationMethod::WhiteboxTestProbe,
        VerificationMethod::Blackbox,
        VerificationMethod::WhiteboxMarkedProbe,
    ]
    .into_iter()
    .map(|m| Cell::verdict(find(verdicts, m), expect))
    .collect()
}

fn headers(lead: &[&str]) -> Vec<String> {
    lead.iter()
        .chain(VERDICT_HEADERS.iter())
        .map(|s| s.to_string())
        .collect()
}

/// Marker accuracy, then one row per ratio for the marked-trained model.
/// Verdicts are expected to decide True.
pub fn effectiveness_table(r: &ExperimentResults) -> Table {
    let mut rows = vec![];
    let mut marker = vec![
        Cell::text(&r.dataset_id),
        Cell::text("marker"),
        Cell::num(r.marker.accuracy_pct, 2),
    ];
    marker.extend((0..3).map(|_| Cell::empty()));
    rows.push(marker);
    for ratio in &r.ratios {
        let mut row = vec![
            Cell::text(&r.dataset_id),
            Cell::num(ratio.wm_ratio, 2),
            Cell::num(ratio.adversary.accuracy_pct, 2),
        ];
        row.extend(verdict_cells(
            &ratio.requirements.effectiveness.verdicts,
            true,
        ));
        rows.push(row);
    }
    Table {
        title: "Effectiveness (marked-trained models)".into(),
        headers: headers(&["dataset", "wm_ratio", "accuracy_pct"]),
        rows,
    }
}

/// Reference models trained without the marked data. Verdicts are expected
/// to decide False.
pub fn integrity_table(r: &ExperimentResults) -> Table {
    let mut rows = vec![];
    for ratio in &r.ratios {
        for m in &ratio.requirements.integrity.models {
            let acc = r
                .references
                .iter()
                .find(|n| n.name == m.name)
                .map(|n| n.model.accuracy_pct);
            let mut row = vec![
                Cell::text(&r.dataset_id),
                Cell::num(ratio.wm_ratio, 2),
                Cell::text(&m.name),
                acc.map_or_else(Cell::empty, |a| Cell::num(a, 2)),
            ];
            row.extend(verdict_cells(&m.verdicts, false));
            rows.push(row);
        }
    }
    Table {
        title: "Integrity (reference models)".into(),
        headers: headers(&["dataset", "wm_ratio", "reference", "accuracy_pct"]),
        rows,
    }
}

pub fn extraction_table(r: &ExperimentResults) -> Option<Table> {
    let rows: Vec<Vec<Cell>> = r
        .ratios
        .iter()
        .filter_map(|ratio| ratio.extraction.as_ref().map(|x| (ratio, x)))
        .map(|(ratio, x)| {
            let s = &x.survival;
            vec![
                Cell::text(&r.dataset_id),
                Cell::num(ratio.wm_ratio, 2),
                Cell::num(100.0 * s.victim_accuracy, 2),
                Cell::num(100.0 * s.surrogate_accuracy, 2),
                Cell::num(s.accuracy_gap_pp, 2),
                s.agreement
                    .map_or_else(Cell::empty, |a| Cell::num(100.0 * a, 2)),
                Cell::verdict(find(&s.victim_verdicts, VerificationMethod::Blackbox), true),
                Cell::verdict(
                    find(&s.surrogate_verdicts, VerificationMethod::Blackbox),
                    true,
                ),
                Cell::verdict(
                    find(&s.victim_verdicts, VerificationMethod::WhiteboxMarkedProbe),
                    true,
                ),
                Cell::verdict(
                    find(
                        &s.surrogate_verdicts,
                        VerificationMethod::WhiteboxMarkedProbe,
                    ),
                    true,
                ),
                Cell::text(s.gap_flag.clone().unwrap_or_default()),
            ]
        })
        .collect();
    if rows.is_empty() {
        return None;
    }
    Some(Table {
        title: "Extraction survival".into(),
        headers: [
            "dataset",
            "wm_ratio",
            "victim_accuracy_pct",
            "surrogate_accuracy_pct",
            "accuracy_gap_pp",
            "agreement_pct",
            "victim_bb",
            "surrogate_bb",
            "victim_wb_marked",
            "surrogate_wb_marked",
            "flag",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    })
}

pub fn requirements_table(r: &ExperimentResults) -> Table {
    let rows = r
        .ratios
        .iter()
        .map(|ratio: &RatioResult| {
            let q = &ratio.requirements;
            vec![
                Cell::num(ratio.wm_ratio, 2),
                Cell::num(q.utility.gap_pp, 2),
                Cell::flag(q.utility.pass),
                Cell::flag(q.effectiveness.flag.is_none()),
                Cell::flag(q.integrity.pass),
                Cell::num(q.stealthiness.report.psnr_db, 2),
                Cell::flag(q.stealthiness.pass),
                ratio
                    .smallest_sufficient_budget
                    .map_or_else(|| Cell::text("none"), |b| Cell::text(b.to_string())),
                Cell::text(ratio.marked_pairs.to_string()),
            ]
        })
        .collect();
    Table {
        title: "Requirements".into(),
        headers: [
            "wm_ratio",
            "utility_gap_pp",
            "utility",
            "effectiveness",
            "integrity",
            "psnr_db",
            "stealthiness",
            "smallest_sufficient_budget",
            "marked_pairs",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    }
}

pub fn sweep_csv(r: &ExperimentResults) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["wm_ratio", "budget", "statistic", "decision"])
        .map_err(err)?;
    for ratio in &r.ratios {
        for p in &ratio.sweep {
            w.write_record([
                ratio.wm_ratio.to_string(),
                p.budget.to_string(),
                p.statistic.to_string(),
                p.decision.to_string(),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn report_json(r: &ExperimentResults) -> Result<String> {
    Ok(serde_json::to_string_pretty(r)? + "\n")
}

/// Writes `report.json`, `effectiveness.csv`, `integrity.csv`,
/// `requirements.csv`, `sweep.csv` and, with extraction, `extraction.csv`.
pub fn write_bundle(r: &ExperimentResults, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("report.json", report_json(r)?)?;
    write("effectiveness.csv", effectiveness_table(r).to_csv()?)?;
    write("integrity.csv", integrity_table(r).to_csv()?)?;
    write("requirements.csv", requirements_table(r).to_csv()?)?;
    write("sweep.csv", sweep_csv(r)?)?;
    match extraction_table(r) {
        Some(t) => write("extraction.csv", t.to_csv()?)?,
        None => {
            let p = dir.join("extraction.csv");
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    Ok(())
}
