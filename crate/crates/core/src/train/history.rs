use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::write_atomic;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_acc,val_acc,train_loss,val_loss";

pub fn history_to_csv(history: &[EpochStats]) -> Result<String> {
    if history.is_empty() {
        return Err(invalid!("history is empty"));
    }
    let mut s = format!("{HISTORY_HEADER}\n");
    for e in history {
        writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch, e.train_acc, e.val_acc, e.train_loss, e.val_loss
        )
        .expect("writing to a String");
    }
    Ok(s)
}

pub fn history_from_csv(text: &str) -> Result<Vec<EpochStats>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(invalid!("history CSV must start with `{HISTORY_HEADER}`"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |k: usize| -> Result<f64> {
                f.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| invalid!("history line {} is malformed: `{line}`", i + 2))
            };
            Ok(EpochStats {
                epoch: num(0)? as usize,
                train_acc: num(1)?,
                val_acc: num(2)?,
                train_loss: num(3)?,
                val_loss: num(4)?,
            })
        })
        .collect()
}

/// Writes the CSV and, when `svg` is given, a chart next to it.
pub fn export_history(history: &[EpochStats], csv: impl AsRef<Path>, svg: Option<&Path>) -> Result<()> {
    write_atomic(csv.as_ref(), history_to_csv(history)?.as_bytes())?;
    if let Some(svg) = svg {
        write_atomic(svg, history_to_svg(history)?.as_bytes())?;
    }
    Ok(())
}

const CHART_W: f64 = 400.0;
const CHART_H: f64 = 300.0;
const MARGIN: f64 = 40.0;

/// Two side-by-side line charts, accuracy and loss, each with a train and a
/// validation polyline.
pub fn history_to_svg(history: &[EpochStats]) -> Result<String> {
    if history.is_empty() {
        return Err(invalid!("history is empty"));
    }
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{CHART_H}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        2.0 * CHART_W
    );
    let acc: Vec<(f64, f64)> = history.iter().map(|e| (e.train_acc, e.val_acc)).collect();
    let loss: Vec<(f64, f64)> = history.iter().map(|e| (e.train_loss, e.val_loss)).collect();
    chart(&mut s, 0.0, "accuracy", &acc, Some((0.0, 1.0)));
    chart(&mut s, CHART_W, "loss", &loss, None);
    s.push_str("</svg>\n");
    Ok(s)
}

fn chart(s: &mut String, x0: f64, title: &str, series: &[(f64, f64)], range: Option<(f64, f64)>) {
    let (lo, hi) = range.unwrap_or_else(|| {
        let finite = series.iter().flat_map(|&(a, b)| [a, b]).filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if lo.is_finite() && hi > lo {
            (lo.min(0.0), hi)
        } else {
            (0.0, lo.abs().max(1.0))
        }
    });
    let (pw, ph) = (CHART_W - 2.0 * MARGIN, CHART_H - 2.0 * MARGIN);
    let n = series.len();
    let px = |i: usize| x0 + MARGIN + if n > 1 { pw * i as f64 / (n - 1) as f64 } else { pw / 2.0 };
    let py = |v: f64| MARGIN + ph * (1.0 - ((v - lo) / (hi - lo)).clamp(0.0, 1.0));
    let points = |pick: fn(&(f64, f64)) -> f64| {
        series
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{:.2},{:.2}", px(i), py(pick(p))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(s, "<g class=\"chart\" id=\"{title}\">");
    let _ = writeln!(
        s,
        "<rect x=\"{:.2}\" y=\"{MARGIN}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#999\"/>",
        x0 + MARGIN
    );
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"24\">{title}</text>", x0 + MARGIN);
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\">{hi:.3}</text>", x0 + 2.0, MARGIN + 4.0);
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\">{lo:.3}</text>", x0 + 2.0, MARGIN + ph);
    let _ = writeln!(
        s,
        "<polyline class=\"train\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>",
        points(|p| p.0)
    );
    let _ = writeln!(
        s,
        "<polyline class=\"val\" fill=\"none\" stroke=\"#ff7f0e\" stroke-width=\"2\" points=\"{}\"/>",
        points(|p| p.1)
    );
    s.push_str("</g>\n");
}
