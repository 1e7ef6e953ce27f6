//! Atomic file writes: everything lands in a sibling temp file first and is
//! renamed into place, so readers never see half a CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{LabError, LabResult};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> LabResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| LabError::Usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(LabError::io(path, e));
    }
    Ok(())
}

/// Serialises rows with a header into an in-memory CSV and writes it atomically.
pub fn write_csv<R, I>(path: &Path, header: &[&str], rows: I) -> LabResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| LabError::format(path, e.to_string());
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn create_dir(path: &Path) -> LabResult<()> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

pub fn read_to_string(path: &Path) -> LabResult<String> {
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn csv_rows_are_quoted_as_needed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_csv(&p, &["a", "b"], [["1", "x,y"]]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n1,\"x,y\"\n");
    }
}
