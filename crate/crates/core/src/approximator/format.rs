//! Plain-text serialization of [`ThetaParams`].
//!
//! ```text
//! QPTHETA <n_x> <n_u> <N> <gamma>
//! STAGE_COST <k>          followed by n_x+n_u rows
//! TERMINAL_COST           followed by n_x rows
//! STAGE_LINEAR <k>        followed by one row
//! TERMINAL_LINEAR         followed by one row
//! OFFSET                  followed by one value
//! EQ_MATRIX <rows> <cols> followed by <rows> rows
//! INEQ_MATRIX <rows> <cols>
//! BOUNDS                  followed by the lower row and the upper row
//! SLACK_W                 followed by one row
//! TRAINABLE <count>       followed by one slot per line
//! END
//! ```
//!
//! Numbers are written with 17 significant digits; empty rows are written as `-`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::theta::{DecisionLayout, ParamSlot, ThetaParams};
use crate::error::{Error, Result, io_err};

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let row: Vec<String> = values.map(|v| fmt_f64(*v)).collect();
    if row.is_empty() {
        out.push('-');
    } else {
        out.push_str(&row.join(" "));
    }
    out.push('\n');
}

fn push_matrix(out: &mut String, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        push_row(out, m.row(r).iter());
    }
}

fn slot_to_text(slot: &ParamSlot) -> String {
    let stage = |s: Option<usize>| s.map_or_else(|| "*".to_string(), |k| k.to_string());
    match *slot {
        ParamSlot::StageCost { stage: s, row, col } => format!("stage_cost {} {row} {col}", stage(s)),
        ParamSlot::TerminalCost { row, col } => format!("terminal_cost {row} {col}"),
        ParamSlot::StageLinear { stage: s, index } => format!("stage_linear {} {index}", stage(s)),
        ParamSlot::TerminalLinear { index } => format!("terminal_linear {index}"),
        ParamSlot::Offset => "offset".to_string(),
        ParamSlot::EqMatrix { row, col } => format!("eq {row} {col}"),
        ParamSlot::IneqMatrix { row, col } => format!("ineq {row} {col}"),
    }
}

pub fn theta_to_text(theta: &ThetaParams) -> String {
    let l = theta.layout;
    let mut out = String::new();
    writeln!(out, "QPTHETA {} {} {} {}", l.n_x, l.n_u, l.horizon, fmt_f64(theta.discount)).unwrap();
    for (k, h) in theta.stage_cost.iter().enumerate() {
        writeln!(out, "STAGE_COST {k}").unwrap();
        push_matrix(&mut out, h);
    }
    out.push_str("TERMINAL_COST\n");
    push_matrix(&mut out, &theta.terminal_cost);
    for (k, q) in theta.stage_linear.iter().enumerate() {
        writeln!(out, "STAGE_LINEAR {k}").unwrap();
        push_row(&mut out, q.iter());
    }
    out.push_str("TERMINAL_LINEAR\n");
    push_row(&mut out, theta.terminal_linear.iter());
    writeln!(out, "OFFSET\n{}", fmt_f64(theta.offset)).unwrap();
    let c = &theta.eq_matrix;
    writeln!(out, "EQ_MATRIX {} {}", c.nrows(), c.ncols()).unwrap();
    push_matrix(&mut out, c);
    let g = &theta.ineq_matrix;
    writeln!(out, "INEQ_MATRIX {} {}", g.nrows(), g.ncols()).unwrap();
    push_matrix(&mut out, g);
    out.push_str("BOUNDS\n");
    push_row(&mut out, theta.lower.iter());
    push_row(&mut out, theta.upper.iter());
    out.push_str("SLACK_W\n");
    push_row(&mut out, theta.slack_weights.iter());
    writeln!(out, "TRAINABLE {}", theta.trainable.len()).unwrap();
    for slot in &theta.trainable {
        out.push_str(&slot_to_text(slot));
        out.push('\n');
    }
    out.push_str("END\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, text)) => {
                self.line = i + 1;
                Ok(text.trim())
            }
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    /// Next line, which must start with `keyword`; returns the remaining tokens.
    fn header(&mut self, keyword: &str) -> Result<Vec<&'a str>> {
        let text = self.next()?;
        let mut tokens = text.split_whitespace();
        if tokens.next() != Some(keyword) {
            return Err(self.err(format!("expected {keyword}, found {text:?}")));
        }
        Ok(tokens.collect())
    }

    fn usize_token(&self, token: Option<&&str>) -> Result<usize> {
        token
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| self.err("expected an integer"))
    }

    fn row(&mut self, len: usize) -> Result<Vec<f64>> {
        let text = self.next()?;
        if text == "-" {
            return if len == 0 {
                Ok(Vec::new())
            } else {
                Err(self.err("expected values, found empty row"))
            };
        }
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| self.err(format!("bad number: {e}")))?;
        if values.len() != len {
            return Err(self.err(format!("expected {len} values, found {}", values.len())));
        }
        Ok(values)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.row(cols)?);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn slot(&mut self) -> Result<ParamSlot> {
        let text = self.next()?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let num = |i: usize| -> Result<usize> { self.usize_token(tokens.get(i)) };
        let stage = |i: usize| -> Result<Option<usize>> {
            match tokens.get(i) {
                Some(&"*") => Ok(None),
                _ => num(i).map(Some),
            }
        };
        Ok(match tokens.first().copied() {
            Some("stage_cost") => ParamSlot::StageCost {
                stage: stage(1)?,
                row: num(2)?,
                col: num(3)?,
            },
            Some("terminal_cost") => ParamSlot::TerminalCost {
                row: num(1)?,
                col: num(2)?,
            },
            Some("stage_linear") => ParamSlot::StageLinear {
                stage: stage(1)?,
                index: num(2)?,
            },
            Some("terminal_linear") => ParamSlot::TerminalLinear { index: num(1)? },
            Some("offset") => ParamSlot::Offset,
            Some("eq") => ParamSlot::EqMatrix {
                row: num(1)?,
                col: num(2)?,
            },
            Some("ineq") => ParamSlot::IneqMatrix {
                row: num(1)?,
                col: num(2)?,
            },
            _ => return Err(self.err(format!("unknown slot {text:?}"))),
        })
    }
}

pub fn theta_from_text(text: &str) -> Result<ThetaParams> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    let head = lines.header("QPTHETA")?;
    if head.len() != 4 {
        return Err(lines.err("header needs n_x n_u N gamma"));
    }
    let n_x = lines.usize_token(head.first())?;
    let n_u = lines.usize_token(head.get(1))?;
    let horizon = lines.usize_token(head.get(2))?;
    let discount: f64 = head[3].parse().map_err(|_| lines.err("bad discount"))?;
    let layout = DecisionLayout::new(n_x, n_u, horizon);
    let mut theta = ThetaParams::zeros(layout, discount);
    let stage = layout.stage_len();

    for k in 0..horizon {
        let h = lines.header("STAGE_COST")?;
        if lines.usize_token(h.first())? != k {
            return Err(lines.err("stage blocks out of order"));
        }
        theta.stage_cost[k] = lines.matrix(stage, stage)?;
    }
    lines.header("TERMINAL_COST")?;
    theta.terminal_cost = lines.matrix(n_x, n_x)?;
    for k in 0..horizon {
        let h = lines.header("STAGE_LINEAR")?;
        if lines.usize_token(h.first())? != k {
            return Err(lines.err("stage blocks out of order"));
        }
        theta.stage_linear[k] = DVector::from_vec(lines.row(stage)?);
    }
    lines.header("TERMINAL_LINEAR")?;
    theta.terminal_linear = DVector::from_vec(lines.row(n_x)?);
    lines.header("OFFSET")?;
    theta.offset = lines.row(1)?[0];
    let h = lines.header("EQ_MATRIX")?;
    let (r, c) = (lines.usize_token(h.first())?, lines.usize_token(h.get(1))?);
    theta.eq_matrix = lines.matrix(r, c)?;
    let h = lines.header("INEQ_MATRIX")?;
    let (r, c) = (lines.usize_token(h.first())?, lines.usize_token(h.get(1))?);
    theta.ineq_matrix = lines.matrix(r, c)?;
    lines.header("BOUNDS")?;
    theta.lower = DVector::from_vec(lines.row(r)?);
    theta.upper = DVector::from_vec(lines.row(r)?);
    lines.header("SLACK_W")?;
    theta.slack_weights = DVector::from_vec(lines.row(r)?);
    let h = lines.header("TRAINABLE")?;
    let count = lines.usize_token(h.first())?;
    theta.trainable = (0..count).map(|_| lines.slot()).collect::<Result<_>>()?;
    lines.header("END")?;
    theta.validate()?;
    Ok(theta)
}

pub fn write_theta(path: &Path, theta: &ThetaParams) -> Result<()> {
    std::fs::write(path, theta_to_text(theta)).map_err(io_err(path))
}

pub fn read_theta(path: &Path) -> Result<ThetaParams> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    theta_from_text(&text)
}
