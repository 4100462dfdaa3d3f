//! Binary containers.
//!
//! Every file starts with a 16-byte magic (ASCII tag, NUL-padded), then a
//! little-endian `u64` byte length and a UTF-8 JSON header of that length,
//! then a little-endian numeric payload whose layout the header describes.
//!
//! * datasets, triplet stores, rollout fields: magic `PDETTC01`, `f32` payload
//! * model checkpoints: magic `PDETTCPM`, `f64` payload

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::euler::{
    Channel, Dataset, DatasetSpec, GridSpec, ICSpec, Normalization, Snapshot, Split, Trajectory,
    N_CHANNELS,
};

pub const DATA_MAGIC: &[u8; 8] = b"PDETTC01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDETTCPM";
const MAGIC_LEN: usize = 16;
const MAX_HEADER: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },
    #[error("malformed header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed container: {0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn padded_magic(tag: &[u8; 8]) -> [u8; MAGIC_LEN] {
    let mut m = [0u8; MAGIC_LEN];
    m[..8].copy_from_slice(tag);
    m
}

pub fn write_header<W: Write>(w: &mut W, tag: &[u8; 8], header: &[u8]) -> std::io::Result<()> {
    w.write_all(&padded_magic(tag))?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)
}

/// Reads the magic and header, leaving `r` at the start of the payload.
pub fn read_header<R: Read, H: DeserializeOwned>(r: &mut R, tag: &[u8; 8]) -> Result<H, IoError> {
    let mut magic = [0u8; MAGIC_LEN];
    r.read_exact(&mut magic)
        .map_err(|e| IoError::Format(format!("truncated magic: {e}")))?;
    if magic != padded_magic(tag) {
        return Err(IoError::BadMagic {
            expected: String::from_utf8_lossy(tag).into_owned(),
            found: magic.to_vec(),
        });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|e| IoError::Format(format!("truncated header length: {e}")))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(IoError::Format(format!(
            "header length {len} is implausible"
        )));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|e| IoError::Format(format!("truncated header: {e}")))?;
    Ok(serde_json::from_slice(&buf)?)
}

pub fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, IoError> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| IoError::Format(format!("truncated f32 payload: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect())
}

pub fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, IoError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| IoError::Format(format!("truncated f64 payload: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<(), IoError> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(()),
        Ok(_) => Err(IoError::Format("trailing bytes after payload".into())),
        Err(e) => Err(IoError::Format(e.to_string())),
    }
}

/// `foo.bin` -> `foo.bin.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn channel_order() -> Vec<String> {
    Channel::ALL.iter().map(|c| c.name().to_string()).collect()
}

/// Writes `header` + `payload` as a data container and its JSON sidecar.
pub fn write_data_container<H: Serialize>(
    path: &Path,
    header: &H,
    payload: &[f64],
) -> Result<(), IoError> {
    let json = serde_json::to_vec(header)?;
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_header(&mut w, DATA_MAGIC, &json).map_err(io_err(path))?;
    write_f32s(&mut w, payload).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(header)?).map_err(io_err(&side))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub record_type: String,
    pub channel_order: Vec<String>,
    /// Payload axis order, slowest first.
    pub layout: String,
    pub spec: DatasetSpec,
    pub n_trajectories: usize,
    pub n_times: usize,
    pub times: Vec<f64>,
    pub ics: Vec<ICSpec>,
    pub splits: Vec<Split>,
    pub normalization: Normalization,
    #[serde(default)]
    pub config_digest: Option<String>,
}

const DATASET_LAYOUT: &str = "trajectory,time,channel,y,x";

pub fn save_dataset(
    path: &Path,
    ds: &Dataset,
    config_digest: Option<String>,
) -> Result<(), IoError> {
    let n_times = ds
        .trajectories
        .first()
        .map_or(ds.spec.solver.n_times, Trajectory::len);
    let times = ds.trajectories.first().map_or_else(
        || uniform_times(n_times, ds.spec.solver.t_final),
        Trajectory::times,
    );
    let header = DatasetHeader {
        record_type: "DATASET".into(),
        channel_order: channel_order(),
        layout: DATASET_LAYOUT.into(),
        spec: ds.spec.clone(),
        n_trajectories: ds.len(),
        n_times,
        times,
        ics: ds.trajectories.iter().map(|t| t.ic().clone()).collect(),
        splits: ds.splits.clone(),
        normalization: ds.normalization,
        config_digest,
    };
    let mut payload = Vec::with_capacity(ds.len() * n_times * N_CHANNELS * ds.grid().cells());
    for traj in &ds.trajectories {
        for s in traj.snapshots() {
            for f in s.fields() {
                payload.extend_from_slice(f);
            }
        }
    }
    write_data_container(path, &header, &payload)
}

fn uniform_times(n: usize, t_final: f64) -> Vec<f64> {
    (0..n)
        .map(|k| t_final * k as f64 / (n.max(2) - 1) as f64)
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetHeader), IoError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let h: DatasetHeader = read_header(&mut r, DATA_MAGIC)?;
    if h.record_type != "DATASET" {
        return Err(IoError::Format(format!(
            "expected a DATASET record, found {}",
            h.record_type
        )));
    }
    if h.ics.len() != h.n_trajectories
        || h.splits.len() != h.n_trajectories
        || h.times.len() != h.n_times
    {
        return Err(IoError::Format("header counts are inconsistent".into()));
    }
    let grid: GridSpec = h.spec.grid;
    let per_snap = N_CHANNELS * grid.cells();
    let mut trajectories = Vec::with_capacity(h.n_trajectories);
    for ic in &h.ics {
        let mut snaps = Vec::with_capacity(h.n_times);
        for &t in &h.times {
            let data = read_f32s(&mut r, per_snap)?;
            snaps.push(
                Snapshot::from_channel_major(grid, t, &data)
                    .map_err(|e| IoError::Format(e.to_string()))?,
            );
        }
        trajectories
            .push(Trajectory::new(ic.clone(), snaps).map_err(|e| IoError::Format(e.to_string()))?);
    }
    expect_eof(&mut r)?;
    let ds = Dataset {
        spec: h.spec.clone(),
        trajectories,
        splits: h.splits.clone(),
        normalization: h.normalization,
    };
    Ok((ds, h))
}

/// Snapshot sequence container (record types `ROLLOUT`, `SNAPSHOTS`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotsHeader {
    pub record_type: String,
    pub channel_order: Vec<String>,
    pub layout: String,
    pub grid: GridSpec,
    pub times: Vec<f64>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_snapshots(
    path: &Path,
    record_type: &str,
    snaps: &[Snapshot],
    meta: serde_json::Value,
) -> Result<(), IoError> {
    let grid = *snaps
        .first()
        .ok_or_else(|| IoError::Format("no snapshots to write".into()))?
        .grid();
    let header = SnapshotsHeader {
        record_type: record_type.into(),
        channel_order: channel_order(),
        layout: "snapshot,channel,y,x".into(),
        grid,
        times: snaps.iter().map(Snapshot::t).collect(),
        meta,
    };
    let payload: Vec<f64> = snaps.iter().flat_map(|s| s.to_channel_major()).collect();
    write_data_container(path, &header, &payload)
}

pub fn load_snapshots(path: &Path) -> Result<(Vec<Snapshot>, SnapshotsHeader), IoError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let h: SnapshotsHeader = read_header(&mut r, DATA_MAGIC)?;
    let per = N_CHANNELS * h.grid.cells();
    let mut out = Vec::with_capacity(h.times.len());
    for &t in &h.times {
        let data = read_f32s(&mut r, per)?;
        out.push(
            Snapshot::from_channel_major(h.grid, t, &data)
                .map_err(|e| IoError::Format(e.to_string()))?,
        );
    }
    expect_eof(&mut r)?;
    Ok((out, h))
}

/// Writes a checkpoint container: header JSON then `f64` blobs.
pub fn write_checkpoint_container<H: Serialize>(
    path: &Path,
    header: &H,
    blobs: &[&[f64]],
) -> Result<(), IoError> {
    let json = serde_json::to_vec(header)?;
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_header(&mut w, CHECKPOINT_MAGIC, &json).map_err(io_err(path))?;
    for b in blobs {
        write_f64s(&mut w, b).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a checkpoint header and then `sizes` consecutive `f64` blobs.
pub fn read_checkpoint_container<H: DeserializeOwned>(
    path: &Path,
    sizes: impl FnOnce(&H) -> Vec<usize>,
) -> Result<(H, Vec<Vec<f64>>), IoError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let h: H = read_header(&mut r, CHECKPOINT_MAGIC)?;
    let blobs = sizes(&h)
        .into_iter()
        .map(|n| read_f64s(&mut r, n))
        .collect::<Result<Vec<_>, _>>()?;
    expect_eof(&mut r)?;
    Ok((h, blobs))
}
