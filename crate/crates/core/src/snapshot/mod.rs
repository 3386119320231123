//! On-disk formats: JSON Lines run files, MTEN binary tensors, network
//! directories (`layers.json` plus tensor files) and analysis reports.

mod layers;
mod mten;
mod report;
mod runfile;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use layers::{read_network, write_network, LAYERS_FILE};
pub use mten::{
    decode_tensor, encode_tensor, read_tensor, write_tensor, write_tensor_as, Dtype, MAGIC, VERSION,
};
pub use report::{
    curves_csv, diverging_color, heatmap_csv, heatmap_svg, write_report, CURVES_HEADER,
    REPORT_SCHEMA,
};
pub use runfile::{open_run, read_run, resolve_lipschitz, write_run, write_run_to, RunReader};

/// Writes through a temporary file in the target directory, then renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
