//! Terminal tables. Expected outcomes are green, unexpected ones red.

use comfy_table::presets::UTF8_FULL_CONDENSED;
use comfy_table::{Cell, Color, Table};
use radmark::extraction::SurvivalReport;
use radmark::harness::report::{self, Outcome};
use radmark::harness::{ExperimentResults, RequirementReport};
use radmark::verify::{SweepPoint, VerificationVerdict};

fn colored(text: &str, outcome: Option<Outcome>) -> Cell {
    let c = Cell::new(text);
    match outcome {
        Some(Outcome::Expected) => c.fg(Color::Green),
        Some(Outcome::Unexpected) => c.fg(Color::Red),
        None => c,
    }
}

fn base(headers: &[String]) -> Table {
    let mut t = Table::new();
    t.load_preset(UTF8_FULL_CONDENSED).set_header(headers);
    t
}

fn from_report(t: &report::Table) -> String {
    let mut out = base(&t.headers);
    for row in &t.rows {
        out.add_row(row.iter().map(|c| colored(&c.display, c.outcome)));
    }
    format!("{}\n{out}", t.title)
}

pub fn verdict_table(v: &VerificationVerdict) -> String {
    let mut t =
        base(&["method", "statistic", "threshold", "decision", "samples"].map(String::from));
    t.add_row(vec![
        Cell::new(v.method.as_str()),
        Cell::new(format!("{:.4}", v.statistic)),
        Cell::new(format!("{:.4}", v.threshold)),
        colored(if v.decision { "True" } else { "False" }, None),
        Cell::new(v.samples_used),
    ]);
    t.to_string()
}

fn pass(p: bool) -> Cell {
    colored(
        if p { "pass" } else { "FAIL" },
        Some(if p {
            Outcome::Expected
        } else {
            Outcome::Unexpected
        }),
    )
}

fn decision(v: &VerificationVerdict, expect: bool) -> Cell {
    let o = if v.decision == expect {
        Outcome::Expected
    } else {
        Outcome::Unexpected
    };
    colored(
        &format!(
            "{:.3} ({})",
            v.statistic,
            if v.decision { "True" } else { "False" }
        ),
        Some(o),
    )
}

pub fn requirement_table(r: &RequirementReport) -> String {
    let mut t = base(&["requirement", "detail", "result"].map(String::from));
    let u = &r.utility;
    t.add_row(vec![
        Cell::new("utility"),
        Cell::new(format!(
            "clean {:.2}%, marked {:.2}%, gap {:.2} pp",
            u.acc_clean, u.acc_marked, u.gap_pp
        )),
        pass(u.pass),
    ]);
    for v in &r.effectiveness.verdicts {
        t.add_row(vec![
            Cell::new("effectiveness"),
            Cell::new(v.method.as_str()),
            decision(v, true),
        ]);
    }
    if let Some(f) = &r.effectiveness.flag {
        t.add_row(vec![Cell::new("effectiveness"), Cell::new(f), pass(false)]);
    }
    for m in &r.integrity.models {
        for v in &m.verdicts {
            t.add_row(vec![
                Cell::new("integrity"),
                Cell::new(format!("{}: {}", m.name, v.method.as_str())),
                decision(v, false),
            ]);
        }
    }
    let s = &r.stealthiness;
    t.add_row(vec![
        Cell::new("stealthiness"),
        Cell::new(format!(
            "PSNR {:.2} dB (min {:.2}), Linf {:.4}{}",
            s.report.psnr_db,
            s.budget.min_psnr_db,
            s.report.linf_pixel,
            s.budget
                .max_linf
                .map(|b| format!(" (max {b:.4})"))
                .unwrap_or_default()
        )),
        pass(s.pass),
    ]);
    for x in &r.robustness {
        t.add_row(vec![
            Cell::new("robustness"),
            Cell::new(x.transform.name()),
            decision(&x.verdict, true),
        ]);
    }
    t.to_string()
}

pub fn sweep_table(points: &[SweepPoint]) -> String {
    let mut t = base(&["budget", "statistic", "decision"].map(String::from));
    let step = (points.len() / 20).max(1);
    for (i, p) in points.iter().enumerate() {
        if i % step == 0 || i + 1 == points.len() {
            t.add_row(vec![
                Cell::new(p.budget),
                Cell::new(format!("{:.4}", p.statistic)),
                colored(if p.decision { "True" } else { "False" }, None),
            ]);
        }
    }
    t.to_string()
}

pub fn survival_table(r: &SurvivalReport) -> String {
    let mut t = base(&["model", "accuracy", "verdicts"].map(String::from));
    for (name, acc, verdicts) in [
        ("victim", r.victim_accuracy, &r.victim_verdicts),
        ("surrogate", r.surrogate_accuracy, &r.surrogate_verdicts),
    ] {
        let text: Vec<String> = verdicts
            .iter()
            .map(|v| format!("{} {:.3} ({})", v.method.as_str(), v.statistic, v.decision))
            .collect();
        t.add_row(vec![
            Cell::new(name),
            Cell::new(format!("{:.2}%", 100.0 * acc)),
            Cell::new(text.join("\n")),
        ]);
    }
    let mut out = t.to_string();
    if let Some(a) = r.agreement {
        out.push_str(&format!("\nheld-out top-1 agreement {:.2}%", 100.0 * a));
    }
    out.push_str(&format!("\naccuracy gap {:.2} pp", r.accuracy_gap_pp));
    if let Some(f) = &r.gap_flag {
        out.push_str(&format!("\nwarning: {f}"));
    }
    out
}

pub fn print_results(r: &ExperimentResults) {
    println!("{}", from_report(&report::effectiveness_table(r)));
    let integrity = report::integrity_table(r);
    if !integrity.rows.is_empty() {
        println!("{}", from_report(&integrity));
    }
    if let Some(t) = report::extraction_table(r) {
        println!("{}", from_report(&t));
    }
    println!("{}", from_report(&report::requirements_table(r)));
}
