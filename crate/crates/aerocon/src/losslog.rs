//! Per-step loss log: `epoch batch L_total L_q1 L_q2 L_g1 L_g2 lr`.

use std::fmt::Write as _;

use aerocon_core::pipeline::LossRecord;

pub const HEADER: &str = "# epoch batch total lq1 lq2 lg1 lg2 lr";

/// Values are written in shortest round-trip form.
pub fn render_line(r: &LossRecord) -> String {
    format!(
        "{} {} {:e} {:e} {:e} {:e} {:e} {:e}",
        r.epoch, r.batch, r.total, r.lq1, r.lq2, r.lg1, r.lg2, r.lr
    )
}

pub fn render(log: &[LossRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in log {
        writeln!(out, "{}", render_line(r)).unwrap();
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<LossRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(' ').collect();
        let [epoch, batch, total, lq1, lq2, lg1, lg2, lr] = f[..] else {
            return Err(format!("line {}: expected 8 fields", i + 1));
        };
        let int = |s: &str| s.parse::<usize>().map_err(|_| format!("line {}: bad integer {s:?}", i + 1));
        let float = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: bad number {s:?}", i + 1));
        out.push(LossRecord {
            epoch: int(epoch)?,
            batch: int(batch)?,
            total: float(total)?,
            lq1: float(lq1)?,
            lq2: float(lq2)?,
            lg1: float(lg1)?,
            lg2: float(lg2)?,
            lr: float(lr)?,
        });
    }
    Ok(out)
}
