use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write-then-fsync-then-rename. Readers see either the old or the new file,
/// never a torn one.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no parent", path.display())))?;
    fs::create_dir_all(parent).map_err(Error::DurableWrite)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(&tmp)
            .map_err(Error::DurableWrite)?;
        f.write_all(bytes).map_err(Error::DurableWrite)?;
        f.sync_all().map_err(Error::DurableWrite)?;
    }
    fs::rename(&tmp, path).map_err(Error::DurableWrite)?;
    sync_dir(parent)
}

pub fn sync_dir(dir: &Path) -> Result<()> {
    // Directory fsync is best effort on platforms that refuse it.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

#[cfg(unix)]
pub fn restrict_permissions(path: &Path) -> Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(0o600)).map_err(Error::DurableWrite)
}

#[cfg(not(unix))]
pub fn restrict_permissions(_path: &Path) -> Result<()> {
    Ok(())
}
