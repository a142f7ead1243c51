//! Plain-text event files and raw voxel dumps.
//!
//! Event file: a header line `W H t_start t_end`, then one `t x y p` record per line.
//! Voxel dump: little-endian `f32`, bin-major, with a TOML sidecar holding the shape.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Event, EventStream, VoxelGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_events(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let mut out = String::with_capacity(24 * (stream.len() + 1));
    writeln!(
        out,
        "{} {} {} {}",
        stream.width, stream.height, stream.t_start, stream.t_end
    )
    .expect("writing to a String");
    for e in &stream.events {
        writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p).expect("writing to a String");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::input(path, e.to_string()))?;
    let bad = |line: usize, msg: &str| Error::input(path, format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(bad(1, "header must be `W H t_start t_end`"));
    }
    let width: usize = fields[0].parse().map_err(|_| bad(1, "bad width"))?;
    let height: usize = fields[1].parse().map_err(|_| bad(1, "bad height"))?;
    let t_start: f64 = fields[2].parse().map_err(|_| bad(1, "bad t_start"))?;
    let t_end: f64 = fields[3].parse().map_err(|_| bad(1, "bad t_end"))?;

    let mut events = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad(i + 1, "record must be `t x y p`"));
        }
        let t: f64 = f[0].parse().map_err(|_| bad(i + 1, "bad timestamp"))?;
        let x: u32 = f[1].parse().map_err(|_| bad(i + 1, "bad x"))?;
        let y: u32 = f[2].parse().map_err(|_| bad(i + 1, "bad y"))?;
        let p: i8 = f[3].parse().map_err(|_| bad(i + 1, "bad polarity"))?;
        events.push(Event { t, x, y, p });
    }
    EventStream::new(events, t_start, t_end, width, height)
        .map_err(|e| Error::input(path, e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct VoxelHeader {
    bins: usize,
    height: usize,
    width: usize,
    dtype: String,
    order: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// Writes `path` (raw data) and `path` with a `.toml` extension (shape header).
pub fn write_voxels(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = grid
        .tensor()
        .data()
        .iter()
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes)?;
    let header = VoxelHeader {
        bins: grid.bins(),
        height: grid.height(),
        width: grid.width(),
        dtype: "f32le".into(),
        order: "bin-major".into(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(sidecar(path), text)?;
    Ok(())
}

pub fn read_voxels(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::input(&side, e.to_string()))?;
    let header: VoxelHeader =
        toml::from_str(&text).map_err(|e| Error::input(&side, e.to_string()))?;
    if header.dtype != "f32le" || header.order != "bin-major" {
        return Err(Error::input(&side, "unsupported voxel encoding"));
    }
    let bytes = fs::read(path).map_err(|e| Error::input(path, e.to_string()))?;
    let n = header.bins * header.height * header.width;
    if bytes.len() != 4 * n {
        return Err(Error::input(
            path,
            format!("expected {} bytes, found {}", 4 * n, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    VoxelGrid::from_tensor(Tensor::new([header.bins, header.height, header.width], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::voxelize;

    #[test]
    fn event_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.txt");
        let s = EventStream::new(
            vec![
                Event { t: 0.125, x: 1, y: 0, p: 1 },
                Event { t: 0.1 + 0.2, x: 0, y: 2, p: -1 },
            ],
            0.0,
            1.0,
            3,
            4,
        )
        .unwrap();
        write_events(&p, &s).unwrap();
        assert_eq!(read_events(&p).unwrap(), s);
    }

    #[test]
    fn malformed_event_files_are_input_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        for body in ["", "3 4 0\n", "3 4 0 1\n0.5 1 1\n", "3 4 0 1\n0.5 9 1 1\n", "3 4 0 1\n0.5 1 1 2\n"] {
            fs::write(&p, body).unwrap();
            let err = read_events(&p).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{body:?}: {err}");
        }
        assert_eq!(read_events(dir.path().join("missing.txt")).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn voxel_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vox.raw");
        let s = EventStream::new(
            vec![Event { t: 0.3, x: 1, y: 1, p: 1 }, Event { t: 0.9, x: 0, y: 1, p: -1 }],
            0.0,
            1.0,
            2,
            2,
        )
        .unwrap();
        let g = voxelize(&s, 5).unwrap();
        write_voxels(&p, &g).unwrap();
        let back = read_voxels(&p).unwrap();
        assert_eq!(back.tensor().shape(), &[5, 2, 2]);
        assert!(back.tensor().max_abs_diff(g.tensor()) < 1e-7);
        assert!(fs::read_to_string(dir.path().join("vox.toml")).unwrap().contains("bins = 5"));
    }
}
