use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::world::{DatasetSummary, Trajectory, WorldConfig};
use super::{EnemyRoomError, Result};

pub const GENERATOR_VERSION: &str = "enemyroom-surrogate/1";

/// Sidecar written next to every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub generator_version: String,
    pub seed: u64,
    pub config: WorldConfig,
    pub summary: DatasetSummary,
}

/// `data.jsonl` -> `data.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EnemyRoomError + '_ {
    move |source| EnemyRoomError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path, line: usize) -> impl Fn(serde_json::Error) -> EnemyRoomError + '_ {
    move |source| EnemyRoomError::Json {
        path: path.display().to_string(),
        line,
        source,
    }
}

/// Writes one trajectory per line plus the metadata sidecar.
pub fn write_dataset(path: &Path, data: &[Trajectory], meta: &DatasetMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut buf = Vec::with_capacity(data.len() * 160);
    for (i, t) in data.iter().enumerate() {
        serde_json::to_writer(&mut buf, t).map_err(json_err(path, i + 1))?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(io_err(path))?;
    let mp = meta_path(path);
    let mut text = serde_json::to_string_pretty(meta).map_err(json_err(&mp, 0))?;
    text.push('\n');
    fs::write(&mp, text).map_err(io_err(&mp))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(json_err(path, i + 1))?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    serde_json::from_str(&text).map_err(json_err(&mp, 0))
}
