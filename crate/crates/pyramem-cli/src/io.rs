//! File plumbing shared by every subcommand.

use std::path::Path;

use pyramem::grid::GridTensor;
use pyramem::harness::kv_lines;
use pyramem::ptns::{PtnsFile, PtnsLevel, PtnsPayload};
use pyramem::{Error, Result};

/// Reads a dense, single-level f32 tensor file as a grid.
pub fn read_grid(path: &Path) -> Result<GridTensor> {
    let file = PtnsFile::read_from(path)?;
    if file.levels.len() != 1 {
        return Err(Error::Domain(format!(
            "{}: expected a single-level grid, found {} levels",
            path.display(),
            file.levels.len()
        )));
    }
    let level = &file.levels[0];
    if level.stored_count() != level.node_count() {
        return Err(Error::Domain(format!(
            "{}: grid tensors must be dense",
            path.display()
        )));
    }
    let PtnsPayload::F32(data) = &level.payload else {
        return Err(Error::Domain(format!(
            "{}: grid tensors must hold f32 channels",
            path.display()
        )));
    };
    GridTensor::new(
        level.res.iter().map(|&r| r as usize).collect(),
        level.channels as usize,
        data.clone(),
    )
}

/// Writes a grid as a dense, single-level f32 tensor file.
pub fn write_grid(path: &Path, grid: &GridTensor) -> Result<()> {
    let file = PtnsFile {
        dim: grid.res().len() as u8,
        levels: vec![PtnsLevel {
            res: grid.res().iter().map(|&r| r as u32).collect(),
            channels: grid.channels() as u32,
            retained: None,
            payload: PtnsPayload::F32(grid.data().to_vec()),
        }],
    };
    file.write_to(path)
}

/// Creates `dir` fresh. A pre-existing, non-empty directory is refused
/// unless `force` clears it first.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::Domain(format!(
                "{} is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        if occupied {
            std::fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Echoes the effective run configuration into the output directory.
pub fn write_config(dir: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let path = dir.join("config.txt");
    std::fs::write(&path, kv_lines(pairs)).map_err(|e| io_err(&path, e))
}

/// Writes a text report file.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
