//! Rows of numeric bound checks and their CSV form.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "true",
            Status::Fail => "false",
            Status::NotApplicable => "n/a",
        }
    }

    pub fn is_fail(&self) -> bool {
        *self == Status::Fail
    }
}

/// One inequality `lhs ≤ bound` evaluated numerically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check_name: String,
    pub j: Option<u32>,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    pub lhs: C64,
    pub stat_error: f64,
    pub tail_bound: f64,
    pub bound: f64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// One-sided pass rule: |lhs| + 3σ + tail ≤ bound.
pub fn one_sided(lhs: C64, stat_error: f64, tail: f64, bound: f64) -> Status {
    if lhs.norm() + 3.0 * stat_error + tail <= bound {
        Status::Pass
    } else {
        Status::Fail
    }
}

impl CheckRow {
    pub fn new(name: &str, j: Option<u32>, r: Option<f64>, lhs: C64, stat_error: f64, tail: f64, bound: f64) -> Self {
        CheckRow {
            check_name: name.to_string(),
            j,
            r,
            lhs,
            stat_error,
            tail_bound: tail,
            bound,
            status: one_sided(lhs, stat_error, tail, bound),
            note: String::new(),
        }
    }

    pub fn not_applicable(mut self, why: &str) -> Self {
        self.status = Status::NotApplicable;
        self.note = why.to_string();
        self
    }

    pub fn with_note(mut self, note: &str) -> Self {
        self.note = note.to_string();
        self
    }
}

pub const CHECK_HEADER: [&str; 9] =
    ["check_name", "j", "R", "lhs_re", "lhs_im", "stat_error", "tail_bound", "bound", "pass"];

fn fmt_opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes check rows as CSV with a header line.
pub fn write_checks<W: std::io::Write>(w: W, rows: &[CheckRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CHECK_HEADER)?;
    for r in rows {
        wr.write_record([
            r.check_name.clone(),
            fmt_opt(r.j),
            fmt_opt(r.r),
            format!("{:e}", r.lhs.re),
            format!("{:e}", r.lhs.im),
            format!("{:e}", r.stat_error),
            format!("{:e}", r.tail_bound),
            format!("{:e}", r.bound),
            r.status.as_str().to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_rule_is_one_sided() {
        assert_eq!(one_sided(C64::new(1.0, 0.0), 0.1, 0.0, 1.31), Status::Pass);
        assert_eq!(one_sided(C64::new(1.0, 0.0), 0.1, 0.02, 1.31), Status::Fail);
        assert_eq!(one_sided(C64::new(0.0, 0.0), 0.0, 0.0, 0.0), Status::Pass);
    }

    #[test]
    fn csv_header_and_quoting() {
        let rows = vec![CheckRow::new("lemma1,a", Some(1), None, C64::new(0.5, 0.0), 0.0, 1e-9, 1.0)];
        let mut buf = Vec::new();
        write_checks(&mut buf, &rows).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "check_name,j,R,lhs_re,lhs_im,stat_error,tail_bound,bound,pass");
        assert!(lines.next().unwrap().starts_with("\"lemma1,a\",1,,5e-1"));
    }
}
