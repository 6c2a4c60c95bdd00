//! Plain-text report writers: `name = value` metric files, TSV tables for
//! selection audits, loss traces, and score rankings, and the theory
//! verification summary. Floats print in shortest round-trip form so every
//! report parses back to the exact numbers that were written.

use std::fs;
use std::path::Path;

use meds_core::selection::SelectionAuditRow;
use meds_core::theory::TheoremReport;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed report: {0}")]
    Malformed(&'static str),
}

pub fn format_metrics(rows: &[(String, f64)]) -> String {
    let mut out = String::new();
    for (name, value) in rows {
        out.push_str(name);
        out.push_str(" = ");
        out.push_str(&value.to_string());
        out.push('\n');
    }
    out
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[(String, f64)]) -> Result<(), ReportError> {
    fs::write(path, format_metrics(rows))?;
    Ok(())
}

pub fn parse_metrics(text: &str) -> Result<Vec<(String, f64)>, ReportError> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once(" = ")
            .ok_or(ReportError::Malformed("expected `name = value`"))?;
        let value: f64 = value
            .parse()
            .map_err(|_| ReportError::Malformed("metric value is not a float"))?;
        rows.push((name.to_string(), value));
    }
    Ok(rows)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>, ReportError> {
    parse_metrics(&fs::read_to_string(path)?)
}

pub fn write_audit(path: impl AsRef<Path>, rows: &[SelectionAuditRow]) -> Result<(), ReportError> {
    let mut out = String::from(
        "epoch\titeration\tclass\talpha\tcritical\tthreshold\tclass_size\tselected\tcontaminated\n",
    );
    for row in rows {
        let contaminated = match row.contaminated {
            Some(c) => c.to_string(),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row.epoch,
            row.iteration,
            row.class_id,
            row.alpha,
            row.critical,
            row.threshold,
            row.class_size,
            row.selected,
            contaminated
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_loss_history(path: impl AsRef<Path>, losses: &[f64]) -> Result<(), ReportError> {
    let mut out = String::from("iteration\tloss\n");
    for (i, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{}\t{}\n", i + 1, loss));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One line of a score ranking, highest score first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub rank: usize,
    pub index: usize,
    pub class_id: u32,
    pub score: f64,
    pub label: Option<bool>,
}

/// Descending by score; ties keep dataset order so rankings are stable.
pub fn ranking_rows(
    scores: &[f64],
    class_ids: &[u32],
    labels: Option<&[bool]>,
) -> Vec<RankingRow> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .enumerate()
        .map(|(rank, index)| RankingRow {
            rank: rank + 1,
            index,
            class_id: class_ids[index],
            score: scores[index],
            label: labels.map(|l| l[index]),
        })
        .collect()
}

pub fn write_ranking(path: impl AsRef<Path>, rows: &[RankingRow]) -> Result<(), ReportError> {
    let mut out = String::from("rank\tindex\tclass\tscore\tlabel\n");
    for row in rows {
        let label = match row.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "-",
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.rank, row.index, row.class_id, row.score, label
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ranking(path: impl AsRef<Path>) -> Result<Vec<RankingRow>, ReportError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("rank\tindex\tclass\tscore\tlabel") => {}
        _ => return Err(ReportError::Malformed("missing ranking header")),
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(ReportError::Malformed("ranking row needs five fields"));
        }
        let parse_int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| ReportError::Malformed("bad integer in ranking"))
        };
        let label = match fields[4] {
            "1" => Some(true),
            "0" => Some(false),
            "-" => None,
            _ => return Err(ReportError::Malformed("label must be 0, 1 or -")),
        };
        rows.push(RankingRow {
            rank: parse_int(fields[0])?,
            index: parse_int(fields[1])?,
            class_id: fields[2]
                .parse()
                .map_err(|_| ReportError::Malformed("bad class id in ranking"))?,
            score: fields[3]
                .parse()
                .map_err(|_| ReportError::Malformed("bad score in ranking"))?,
            label,
        });
    }
    Ok(rows)
}

/// Human-readable summary of one verified instance.
pub fn format_theorem_report(report: &TheoremReport, tolerance: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "pool_size = {}\nstrictly_separable = {}\n",
        report.pool_size, report.separable
    ));
    if let Some(peak) = &report.peak {
        out.push_str(&format!(
            "peak: pi_norm = {} continuous_m = {} integer_argmax = {} ok = {}\n",
            peak.pi_norm,
            peak.continuous,
            peak.integer,
            peak.holds()
        ));
    }
    out.push_str("m\tgap\tfirst_order\tremainder_bound\tok\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.m,
            row.gap,
            row.first_order,
            row.remainder_bound,
            row.holds(tolerance)
        ));
    }
    out.push_str(&format!("holds = {}\n", report.holds(tolerance)));
    out
}
