//! Feature containers, manifests, pre-sampling and synthetic data.

mod manifest;
mod nsf;
mod presample;
mod record;
mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use manifest::{write_dataset, Dataset, DatasetManifest, ManifestEntry};
pub use nsf::{decode_matrix, encode_matrix, read_feature_file, write_feature_file, NSF_MAGIC};
pub use presample::{presample, presample_indices, PresampleConfig};
pub use record::VideoRecord;
pub use synth::{generate_synthetic_dataset, SynthConfig, SyntheticData};

use crate::error::{Error, Result};

/// Writes to a sibling temp file, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(path).with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
