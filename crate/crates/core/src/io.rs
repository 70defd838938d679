//! File formats for fields, trajectories, observations and ensemble
//! checkpoints.
//!
//! Floating-point values are written with the shortest representation that
//! parses back to the same bits.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enkf::{AugmentedState, Ensemble, MeasurementBatch, ObsKind};
use crate::error::{Error, Result};
use crate::forward::DynamicState;
use crate::grid::{Grid2D, LogPermField};

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

#[derive(Serialize, Deserialize)]
struct FieldRow {
    cell: usize,
    x: f64,
    y: f64,
    log10k: f64,
}

/// `cell,x,y,log10k` with cell-centre coordinates in metres.
pub fn write_field_csv(path: &Path, field: &LogPermField) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (cell, v) in field.values.iter().enumerate() {
        let (x, y) = field.grid.center(cell);
        w.serialize(FieldRow { cell, x, y, log10k: *v })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a field written by [`write_field_csv`] onto `grid`.
pub fn read_field_csv(path: &Path, grid: Grid2D) -> Result<LogPermField> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut values = vec![f64::NAN; grid.n_cells()];
    for row in csv::Reader::from_reader(file).deserialize() {
        let row: FieldRow = row?;
        if row.cell >= values.len() {
            return Err(Error::invalid(format!("{}: cell {} outside the grid", path.display(), row.cell)));
        }
        values[row.cell] = row.log10k;
    }
    LogPermField::new(grid, values)
}

/// Long-format trajectory `step,cell,h,c`; `c` is empty without transport.
pub fn write_trajectory_csv(path: &Path, snapshots: &[(usize, DynamicState)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "cell", "h", "c"])?;
    for (step, s) in snapshots {
        for (cell, h) in s.head.iter().enumerate() {
            let c = s.conc.as_ref().map(|c| c[cell].to_string()).unwrap_or_default();
            w.write_record([step.to_string(), cell.to_string(), h.to_string(), c])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn site_label(grid: &Grid2D, kind: ObsKind, cell: usize) -> String {
    let (i, j) = grid.coords(cell);
    let k = match kind {
        ObsKind::Head => "h",
        ObsKind::Concentration => "c",
    };
    format!("{k}_{i}_{j}")
}

/// Wide observation table: `time_index,step` followed by one column per
/// observer named `<h|c>_<i>_<j>`.
pub fn write_observations_csv(path: &Path, grid: &Grid2D, batches: &[MeasurementBatch]) -> Result<()> {
    let mut w = csv_writer(path)?;
    if let Some(first) = batches.first() {
        let mut header = vec!["time_index".to_string(), "step".to_string()];
        header.extend(first.sites.iter().map(|s| site_label(grid, s.kind, s.cell)));
        w.write_record(&header)?;
    }
    for b in batches {
        let mut row = vec![b.time_index.to_string(), b.step.to_string()];
        row.extend(b.values.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One column of a binary dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub len: usize,
    /// Offset in values (not bytes) from the start of the data file.
    pub offset: usize,
}

/// JSON sidecar of a binary column dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnManifest {
    /// Always `f64-le`.
    pub dtype: String,
    pub columns: Vec<ColumnInfo>,
    /// Hex SHA-256 of the data file.
    pub sha256: String,
    /// Free-form metadata, e.g. grid or layout.
    pub meta: serde_json::Value,
}

fn dump_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// A named column of values.
pub type NamedColumn = (String, Vec<f64>);

/// Writes named `f64` columns as little-endian values to `<stem>.bin` and a
/// manifest to `<stem>.json`.
pub fn write_columns(stem: &Path, columns: &[NamedColumn], meta: serde_json::Value) -> Result<()> {
    let (bin, json) = dump_paths(stem);
    let mut bytes = Vec::with_capacity(columns.iter().map(|c| c.1.len() * 8).sum());
    let mut infos = Vec::with_capacity(columns.len());
    let mut offset = 0;
    for (name, values) in columns {
        infos.push(ColumnInfo { name: name.clone(), len: values.len(), offset });
        offset += values.len();
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = ColumnManifest {
        dtype: "f64-le".into(),
        columns: infos,
        sha256: hex::encode(Sha256::digest(&bytes)),
        meta,
    };
    let mut f = fs::File::create(&bin).map_err(|e| Error::file(&bin, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(&bin, e))?;
    fs::write(&json, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::file(&json, e))?;
    Ok(())
}

/// Reads a dump written by [`write_columns`], verifying its checksum.
pub fn read_columns(stem: &Path) -> Result<(ColumnManifest, Vec<NamedColumn>)> {
    let (bin, json) = dump_paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::file(&json, e))?;
    let manifest: ColumnManifest = serde_json::from_str(&text)?;
    let mut bytes = Vec::new();
    fs::File::open(&bin)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(&bin, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(Error::invalid(format!("{}: checksum does not match its manifest", bin.display())));
    }
    let total: usize = manifest.columns.iter().map(|c| c.len).sum();
    if bytes.len() != total * 8 {
        return Err(Error::ShapeMismatch { expected: total * 8, found: bytes.len() });
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let columns = manifest
        .columns
        .iter()
        .map(|c| (c.name.clone(), values[c.offset..c.offset + c.len].to_vec()))
        .collect();
    Ok((manifest, columns))
}

#[derive(Serialize, Deserialize)]
struct EnsembleMeta {
    grid: Grid2D,
    has_conc: bool,
    n_e: usize,
}

/// Checkpoints an ensemble as one column per member (augmented vectors).
pub fn save_ensemble(stem: &Path, ensemble: &Ensemble) -> Result<()> {
    let layout = ensemble.layout();
    let x = ensemble.to_matrix();
    let columns = (0..ensemble.len()).map(|i| (format!("member_{i}"), x.column(i).iter().copied().collect())).collect::<Vec<_>>();
    let meta = EnsembleMeta { grid: layout.grid, has_conc: layout.has_conc, n_e: ensemble.len() };
    write_columns(stem, &columns, serde_json::to_value(meta)?)
}

pub fn load_ensemble(stem: &Path) -> Result<Ensemble> {
    let (manifest, columns) = read_columns(stem)?;
    let meta: EnsembleMeta = serde_json::from_value(manifest.meta)?;
    let n = meta.grid.n_cells();
    let mut members = Vec::with_capacity(columns.len());
    for (_, col) in columns {
        let mut member = AugmentedState {
            params: LogPermField::constant(meta.grid, 0.0),
            state: DynamicState { head: vec![0.0; n], conc: meta.has_conc.then(|| vec![0.0; n]) },
        };
        if col.len() != member.layout().len() {
            return Err(Error::ShapeMismatch { expected: member.layout().len(), found: col.len() });
        }
        member.read_column(&col);
        members.push(member);
    }
    Ensemble::new(members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enkf::ObsSite;

    #[test]
    fn field_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid2D::new(3, 2, 2.0, 2.0).unwrap();
        let field = LogPermField::new(grid, vec![-12.1, -11.9, 0.1 + 0.2, -12.0 / 7.0, 1e-300, -13.5]).unwrap();
        let path = dir.path().join("f.csv");
        write_field_csv(&path, &field).unwrap();
        assert_eq!(read_field_csv(&path, grid).unwrap(), field);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("cell,x,y,log10k\n0,1.0,1.0,-12.1\n"));
        assert!(read_field_csv(&path, Grid2D::new(2, 2, 1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn ensemble_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid2D::new(2, 2, 1.0, 1.0).unwrap();
        let member = |k: f64| AugmentedState {
            params: LogPermField::new(grid, vec![k, k + 0.1, k + 0.2, k / 3.0]).unwrap(),
            state: DynamicState { head: vec![10.0, 10.5, 11.0, 10.25], conc: Some(vec![0.06, 0.07, 0.08, 0.065]) },
        };
        let ens = Ensemble::new(vec![member(-12.0), member(-12.5), member(-11.7)]).unwrap();
        let stem = dir.path().join("ckpt");
        save_ensemble(&stem, &ens).unwrap();
        assert_eq!(load_ensemble(&stem).unwrap(), ens);

        let mut bytes = fs::read(stem.with_extension("bin")).unwrap();
        bytes[3] ^= 1;
        fs::write(stem.with_extension("bin"), bytes).unwrap();
        assert!(load_ensemble(&stem).is_err());
    }

    #[test]
    fn observation_table_layout() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid2D::new(4, 4, 1.0, 1.0).unwrap();
        let sites = vec![ObsSite { cell: 5, kind: ObsKind::Head }, ObsSite { cell: 14, kind: ObsKind::Concentration }];
        let batches: Vec<MeasurementBatch> = (1..=3)
            .map(|j| MeasurementBatch {
                time_index: j,
                step: 2 * j,
                sites: sites.clone(),
                values: vec![10.0 + j as f64, 0.06],
                noise_std: vec![0.05, 0.007],
            })
            .collect();
        let path = dir.path().join("obs.csv");
        write_observations_csv(&path, &grid, &batches).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time_index,step,h_1_1,c_2_3");
        assert_eq!(lines[3], "3,6,13,0.06");
    }

    #[test]
    fn trajectory_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let s = DynamicState { head: vec![1.0, 2.0], conc: None };
        write_trajectory_csv(&path, &[(0, s.clone()), (5, s)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("5,1,2,\n"));
    }
}
