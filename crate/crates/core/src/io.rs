//! File formats.
//!
//! Float grids (volumes, images) and network parameters are raw
//! little-endian `f32` files next to a JSON sidecar with the same stem; every
//! function here takes the path of the JSON file. Poses and geometry are
//! plain JSON, point sets and tables are CSV, registration records are
//! JSON lines.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImagingGeometry, RigidPose, Vec2, Vec3};
use crate::imaging::Image;
use crate::pipeline::dataset::{Dataset, DatasetCase, DatasetConfig};
use crate::pipeline::metrics::MetricsSummary;
use crate::pipeline::register::RegistrationRecord;
use crate::pipeline::train::LossCurveRow;
use crate::tracknet::{NetworkConfig, NetworkParams, Tensor};
use crate::volume::VoxelVolume;

fn raw_path(json: &Path) -> PathBuf {
    json.with_extension("raw")
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn write_f32(path: &Path, data: impl Iterator<Item = f32>) -> Result<()> {
    ensure_parent(path)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * expected {
        return Err(Error::validation(
            path.display().to_string(),
            format!("expected {} bytes, found {}", 4 * expected, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: f64,
    data_file: String,
}

pub fn write_volume(path: &Path, vol: &VoxelVolume) -> Result<()> {
    let raw = raw_path(path);
    write_f32(&raw, vol.data.iter().copied())?;
    write_json(
        path,
        &VolumeHeader {
            dims: vol.dims,
            spacing_mm: vol.spacing_mm,
            data_file: file_name(&raw),
        },
    )
}

pub fn read_volume(path: &Path) -> Result<VoxelVolume> {
    let h: VolumeHeader = read_json(path)?;
    let data = read_f32(&raw_path(path), h.dims.iter().product())?;
    VoxelVolume::from_data(h.dims, h.spacing_mm, data)
}

#[derive(Serialize, Deserialize)]
struct ImageHeader {
    width: usize,
    height: usize,
    pixel_spacing_mm: f64,
    data_file: String,
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let raw = raw_path(path);
    write_f32(&raw, img.data.iter().copied())?;
    write_json(
        path,
        &ImageHeader {
            width: img.width,
            height: img.height,
            pixel_spacing_mm: img.pixel_spacing_mm,
            data_file: file_name(&raw),
        },
    )
}

pub fn read_image(path: &Path) -> Result<Image> {
    let h: ImageHeader = read_json(path)?;
    let data = read_f32(&raw_path(path), h.width * h.height)?;
    Image::from_data(h.width, h.height, h.pixel_spacing_mm, data)
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamsManifest {
    network: NetworkConfig,
    data_file: String,
    tensors: Vec<TensorEntry>,
}

/// Values are stored as `f32`; parameters that are already `f32`-exact
/// (see [`NetworkParams::round_to_f32`]) roundtrip bitwise.
pub fn write_params(path: &Path, params: &NetworkParams) -> Result<()> {
    let raw = raw_path(path);
    let mut offset = 0;
    let tensors = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                byte_offset: offset,
            };
            offset += 4 * t.len();
            e
        })
        .collect();
    write_f32(
        &raw,
        params.tensors.iter().flat_map(|t| t.data.iter().map(|&v| v as f32)),
    )?;
    write_json(
        path,
        &ParamsManifest {
            network: params.config,
            data_file: file_name(&raw),
            tensors,
        },
    )
}

pub fn read_params(path: &Path) -> Result<NetworkParams> {
    let m: ParamsManifest = read_json(path)?;
    m.network.validate()?;
    let mut params = NetworkParams::zeros(m.network);
    let raw = read_f32(&raw_path(path), params.num_values())?;
    for entry in &m.tensors {
        let i = params.index_of(&entry.name).ok_or_else(|| {
            Error::validation("params.tensors", format!("unknown tensor {}", entry.name))
        })?;
        let t = &mut params.tensors[i];
        if t.shape != entry.shape {
            return Err(Error::validation(
                format!("params.{}", entry.name),
                format!("shape {:?} does not match network {:?}", entry.shape, t.shape),
            ));
        }
        let start = entry.byte_offset / 4;
        let end = start + t.len();
        if entry.byte_offset % 4 != 0 || end > raw.len() {
            return Err(Error::validation(format!("params.{}", entry.name), "bad byte offset"));
        }
        *t = Tensor::from_vec(&entry.shape, raw[start..end].iter().map(|&v| v as f64).collect());
    }
    if m.tensors.len() != params.tensors.len() {
        return Err(Error::validation("params.tensors", "missing tensors"));
    }
    Ok(params)
}

pub fn write_pose(path: &Path, pose: &RigidPose) -> Result<()> {
    write_json(path, pose)
}

pub fn read_pose(path: &Path) -> Result<RigidPose> {
    let p: RigidPose = read_json(path)?;
    if !p.is_finite() {
        return Err(Error::validation("pose", "must be finite"));
    }
    Ok(p)
}

pub fn read_geometry(path: &Path) -> Result<ImagingGeometry> {
    let g: ImagingGeometry = read_json(path)?;
    g.validate()?;
    Ok(g)
}

#[derive(Serialize, Deserialize)]
struct PointRow {
    index: usize,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
}

pub fn write_points(path: &Path, points: &[Vec3]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for (index, p) in points.iter().enumerate() {
        w.serialize(PointRow {
            index,
            x_mm: p.x,
            y_mm: p.y,
            z_mm: p.z,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_points(path: &Path) -> Result<Vec<Vec3>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows: Vec<PointRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|r| r.index);
    Ok(rows.iter().map(|r| Vec3::new(r.x_mm, r.y_mm, r.z_mm)).collect())
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_metrics(path: &Path, m: &MetricsSummary) -> Result<()> {
    write_csv_rows(path, std::slice::from_ref(m))
}

pub fn read_metrics(path: &Path) -> Result<MetricsSummary> {
    read_csv_rows(path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::validation("metrics", "empty file"))
}

pub fn write_loss_curve(path: &Path, rows: &[LossCurveRow]) -> Result<()> {
    write_csv_rows(path, rows)
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossCurveRow>> {
    read_csv_rows(path)
}

pub fn write_records(path: &Path, records: &[RegistrationRecord]) -> Result<()> {
    ensure_parent(path)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RegistrationRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::validation(format!("records line {}", n + 1), e.to_string())
        })?);
    }
    Ok(out)
}

/// One case file of a stored dataset.
#[derive(Serialize, Deserialize)]
struct CaseFile {
    id: String,
    volume: usize,
    gt_pose: RigidPose,
    initial_pose: RigidPose,
    xrays: Vec<String>,
    gt_pois_px: Vec<Vec<Vec2>>,
    gt_pois_3d: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct Split {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    config: DatasetConfig,
    seed: u64,
    volume_seeds: Vec<u64>,
    volumes: Vec<String>,
    pois: Vec<String>,
    landmarks: Vec<String>,
    drrs: Vec<Vec<String>>,
    cases: Vec<String>,
    split: Split,
}

/// Writes the dataset under `dir` with `manifest.json` at its root. Paths in
/// the manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let mut manifest = DatasetManifest {
        config: ds.config.clone(),
        seed: ds.config.seed,
        volume_seeds: (0..ds.volumes.len())
            .map(|i| ds.config.volume_spec(i).rng_seed)
            .collect(),
        volumes: Vec::new(),
        pois: Vec::new(),
        landmarks: Vec::new(),
        drrs: Vec::new(),
        cases: Vec::new(),
        split: Split {
            train: ds.train.iter().map(|&i| ds.cases[i].id.clone()).collect(),
            val: Vec::new(),
            test: ds.test.iter().map(|&i| ds.cases[i].id.clone()).collect(),
        },
    };
    for (i, v) in ds.volumes.iter().enumerate() {
        let vp = format!("volumes/v{i:03}.json");
        write_volume(&dir.join(&vp), v)?;
        manifest.volumes.push(vp);
        let pp = format!("pois/v{i:03}.csv");
        write_points(&dir.join(&pp), &ds.pois[i])?;
        manifest.pois.push(pp);
        let lp = format!("landmarks/v{i:03}.csv");
        write_points(&dir.join(&lp), &ds.landmarks[i])?;
        manifest.landmarks.push(lp);
        let mut views = Vec::new();
        for (k, img) in ds.drrs[i].iter().enumerate() {
            let p = format!("drrs/v{i:03}-view{k}.json");
            write_image(&dir.join(&p), img)?;
            views.push(p);
        }
        manifest.drrs.push(views);
    }
    for c in &ds.cases {
        let mut xrays = Vec::new();
        for (k, img) in c.xrays.iter().enumerate() {
            let p = format!("xrays/{}-view{k}.json", c.id);
            write_image(&dir.join(&p), img)?;
            xrays.push(p);
        }
        let cp = format!("cases/{}.json", c.id);
        write_json(
            &dir.join(&cp),
            &CaseFile {
                id: c.id.clone(),
                volume: c.volume,
                gt_pose: c.gt_pose,
                initial_pose: c.initial_pose,
                xrays,
                gt_pois_px: c.gt_pois_px.clone(),
                gt_pois_3d: c.gt_pois_3d.clone(),
            },
        )?;
        manifest.cases.push(cp);
    }
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Reads a dataset written by [`write_dataset`]; `manifest` is the path of
/// its `manifest.json`.
pub fn read_dataset(manifest: &Path) -> Result<Dataset> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let m: DatasetManifest = read_json(manifest)?;
    m.config.validate()?;
    let volumes = m
        .volumes
        .iter()
        .map(|p| read_volume(&dir.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let read_sets = |ps: &[String]| ps.iter().map(|p| read_points(&dir.join(p))).collect::<Result<Vec<_>>>();
    let pois = read_sets(&m.pois)?;
    let landmarks = read_sets(&m.landmarks)?;
    let drrs = m
        .drrs
        .iter()
        .map(|v| v.iter().map(|p| read_image(&dir.join(p))).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    if pois.len() != volumes.len() || landmarks.len() != volumes.len() || drrs.len() != volumes.len() {
        return Err(Error::validation("manifest", "per-volume lists differ in length"));
    }
    let mut cases = Vec::with_capacity(m.cases.len());
    for p in &m.cases {
        let c: CaseFile = read_json(&dir.join(p))?;
        if c.volume >= volumes.len() {
            return Err(Error::validation(format!("case {}", c.id), "volume index out of range"));
        }
        cases.push(DatasetCase {
            xrays: c
                .xrays
                .iter()
                .map(|x| read_image(&dir.join(x)))
                .collect::<Result<Vec<_>>>()?,
            id: c.id,
            volume: c.volume,
            gt_pose: c.gt_pose,
            initial_pose: c.initial_pose,
            gt_pois_px: c.gt_pois_px,
            gt_pois_3d: c.gt_pois_3d,
        });
    }
    let lookup = |ids: &[String]| {
        ids.iter()
            .map(|id| {
                cases
                    .iter()
                    .position(|c| &c.id == id)
                    .ok_or_else(|| Error::validation("manifest.split", format!("unknown case {id}")))
            })
            .collect::<Result<Vec<_>>>()
    };
    let train = lookup(&m.split.train)?;
    let test = lookup(&m.split.test)?;
    Ok(Dataset {
        config: m.config,
        volumes,
        pois,
        landmarks,
        drrs,
        cases,
        train,
        test,
    })
}
