//! Line-based rig description:
//!
//! ```text
//! # comment
//! [left]
//! fx=100 fy=100 cx=15.5 cy=15.5
//! E= 1 0 0 0  0 1 0 0  0 0 1 0  0 0 0 1
//! [right]
//! ...
//! ```
//!
//! `E` is the camera-to-world transform, 16 numbers row-major, possibly spread over several
//! lines. Rotations within 1e-6 of orthonormal are accepted and re-orthonormalized.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::scene::{check_rigid, CameraView, Intrinsics};

pub const FILE_TOLERANCE: f64 = 1e-6;
const FORMAT: &str = "calibration";

#[derive(Default)]
struct Partial {
    fx: Option<f64>,
    fy: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    e: Option<Vec<f64>>,
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::MalformedHeader {
        format: FORMAT,
        detail: detail.into(),
    }
}

pub fn parse_calibration(text: &str) -> Result<(CameraView, CameraView)> {
    let mut sections: [Partial; 2] = Default::default();
    let mut current: Option<usize> = None;
    let mut pending: Option<(String, usize, Vec<f64>)> = None;

    let finish = |sections: &mut [Partial; 2],
                  cur: Option<usize>,
                  p: &mut Option<(String, usize, Vec<f64>)>|
     -> Result<()> {
        if let Some((key, want, vals)) = p.take() {
            if vals.len() != want {
                return Err(malformed(format!(
                    "`{key}` needs {want} number(s), found {}",
                    vals.len()
                )));
            }
            let s = &mut sections[cur.expect("pending key implies a section")];
            match key.as_str() {
                "fx" => s.fx = Some(vals[0]),
                "fy" => s.fy = Some(vals[0]),
                "cx" => s.cx = Some(vals[0]),
                "cy" => s.cy = Some(vals[0]),
                _ => s.e = Some(vals),
            }
        }
        Ok(())
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            finish(&mut sections, current, &mut pending)?;
            current = match line {
                "[left]" => Some(0),
                "[right]" => Some(1),
                _ => return Err(malformed(format!("line {}: unknown section {line}", lineno + 1))),
            };
            continue;
        }
        let spaced = line.replace('=', "= ");
        for tok in spaced.split_whitespace() {
            if let Some(key) = tok.strip_suffix('=') {
                finish(&mut sections, current, &mut pending)?;
                if current.is_none() {
                    return Err(malformed(format!("line {}: `{key}` outside a section", lineno + 1)));
                }
                let want = match key {
                    "fx" | "fy" | "cx" | "cy" => 1,
                    "E" => 16,
                    _ => return Err(malformed(format!("line {}: unknown key `{key}`", lineno + 1))),
                };
                pending = Some((key.to_string(), want, Vec::with_capacity(want)));
            } else {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| malformed(format!("line {}: bad number `{tok}`", lineno + 1)))?;
                match pending.as_mut() {
                    Some((_, want, vals)) if vals.len() < *want => vals.push(v),
                    _ => return Err(malformed(format!("line {}: stray value `{tok}`", lineno + 1))),
                }
            }
        }
    }
    finish(&mut sections, current, &mut pending)?;

    let [l, r] = sections;
    Ok((build("left", l)?, build("right", r)?))
}

fn build(name: &str, p: Partial) -> Result<CameraView> {
    let need = |v: Option<f64>, key: &str| v.ok_or_else(|| Error::MissingField(format!("{name}.{key}")));
    let k = Intrinsics::new(need(p.fx, "fx")?, need(p.fy, "fy")?, need(p.cx, "cx")?, need(p.cy, "cy")?);
    let e = p.e.ok_or_else(|| Error::MissingField(format!("{name}.E")))?;
    let mut m = Matrix4::from_row_slice(&e);
    check_rigid(&m, FILE_TOLERANCE)?;
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(u * vt));
    m.fixed_view_mut::<1, 4>(3, 0).copy_from_slice(&[0.0, 0.0, 0.0, 1.0]);
    CameraView::new(k, m)
}

pub fn format_calibration(left: &CameraView, right: &CameraView) -> String {
    let mut s = String::new();
    for (name, v) in [("left", left), ("right", right)] {
        let k = v.intrinsics();
        let _ = writeln!(s, "[{name}]");
        let _ = writeln!(s, "fx={:?} fy={:?} cx={:?} cy={:?}", k.fx, k.fy, k.cx, k.cy);
        let _ = write!(s, "E=");
        let e = v.extrinsic();
        for i in 0..4 {
            for j in 0..4 {
                let _ = write!(s, " {:?}", e[(i, j)]);
            }
        }
        s.push('\n');
    }
    s
}

pub fn read_calibration(path: &Path) -> Result<(CameraView, CameraView)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration(&text)
}

pub fn write_calibration(path: &Path, left: &CameraView, right: &CameraView) -> Result<()> {
    write_atomic(path, format_calibration(left, right).as_bytes())
}
