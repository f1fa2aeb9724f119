//! File formats: PFM depth maps, calibration text, 8-bit images, configuration and
//! trajectory logs.

mod calibration;
mod config;
mod images;
mod pfm;
mod trajectory;

pub use calibration::{format_calibration, parse_calibration, read_calibration, write_calibration};
pub use config::{
    Mode, ParamInit, Paths, PriorConfig, PriorKind, ReprojectionConfig, RunConfig, ScaleSearchConfig,
    TrainSection,
};
pub use images::{read_image, write_image, write_mask};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use trajectory::{format_trajectory, parse_trajectory, read_trajectory, write_trajectory};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidValue(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
