//! File formats: RVOL volumes, a NIfTI-1 subset, landmark lists, training
//! curves and run manifests. Every writer goes through [`write_atomic`].

mod curves;
mod landmarks;
mod manifest;
pub mod nifti;
pub mod rvol;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use curves::{moving_average, read_loss_csv, read_val_csv, write_curves, write_curves_svg, CurvePaths};
pub use landmarks::{read_landmarks, write_landmarks};
pub use manifest::Manifest;
pub use nifti::{read_nifti1, write_nifti1, NiftiVolume};
pub use rvol::{read_rvol, write_rvol, Rvol};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
