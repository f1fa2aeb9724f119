//! Per-trajectory step log: a header comment, then `step timestep loss s_raw t_raw` per line.

use std::fmt::Write as _;
use std::path::Path;

use super::write_atomic;
use crate::diffusion::StepRecord;
use crate::error::{Error, Result};

const FORMAT: &str = "trajectory";

pub fn format_trajectory(seed: u64, records: &[StepRecord]) -> String {
    let mut s = format!("# seed {seed}\n# step timestep loss s_raw t_raw\n");
    for r in records {
        let _ = writeln!(s, "{} {} {:e} {:e} {:e}", r.step, r.timestep, r.loss, r.s_raw, r.t_raw);
    }
    s
}

/// Parsed lines as `(step, timestep, loss, s_raw, t_raw)`.
pub fn parse_trajectory(text: &str) -> Result<Vec<(usize, usize, f64, f64, f64)>> {
    let bad = |n: usize, d: &str| Error::MalformedHeader {
        format: FORMAT,
        detail: format!("line {n}: {d}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(n + 1, "expected 5 fields"));
        }
        let u = |s: &str| s.parse::<usize>().map_err(|_| bad(n + 1, "bad integer"));
        let x = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 1, "bad number"));
        out.push((u(f[0])?, u(f[1])?, x(f[2])?, x(f[3])?, x(f[4])?));
    }
    Ok(out)
}

pub fn write_trajectory(path: &Path, seed: u64, records: &[StepRecord]) -> Result<()> {
    write_atomic(path, format_trajectory(seed, records).as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(usize, usize, f64, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let r = StepRecord {
            step: 1,
            timestep: 1000,
            loss: 0.125,
            ssim_term: 0.1,
            l1_term: 0.2,
            reg_term: 0.0,
            s_raw: 0.5413,
            t_raw: -4.99,
            valid_pixels: 10,
        };
        let text = format_trajectory(3, &[r]);
        let back = parse_trajectory(&text).unwrap();
        assert_eq!(back, vec![(1, 1000, 0.125, 0.5413, -4.99)]);
    }
}
