//! Synthetic datasets, CSV and IDX ingestion, and the train/held-out split.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use dpgan_core::data::Dataset;
use dpgan_core::eval::ModeSpec;
use dpgan_core::Matrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DatasetConfig, DatasetKind};
use crate::error::{Error, Result};

/// Centers of a `k`-mode ring of the given radius, mode `c` at angle `2 pi c / k`.
pub fn ring_centers(k: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Centers of a 5x5 lattice spanning `[-half_width, half_width]^2`, row major.
pub fn grid_centers(half_width: f64) -> Vec<Vec<f64>> {
    let step = half_width / 2.0;
    (0..25).map(|i| vec![(i % 5) as f64 * step - half_width, (i / 5) as f64 * step - half_width]).collect()
}

fn mixture(centers: &[Vec<f64>], std: f64, n: usize, seed: u64) -> Result<Dataset> {
    let k = centers.len();
    if k < 2 || n < k {
        return Err(Error::config(format!("need at least 2 modes and n >= modes, got {k} modes and n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for v in &centers[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push(v + std * z);
        }
        y.push(c);
    }
    Ok(Dataset::new(Matrix::from_vec(n, 2, x)?, Some(y), k)?)
}

/// `n` labelled points on a `k`-mode ring: class `c` is centered at angle
/// `2 pi c / k` with isotropic Gaussian noise. Classes are balanced up to rounding.
pub fn make_ring_dataset(k: usize, radius: f64, std: f64, n: usize, seed: u64) -> Result<Dataset> {
    mixture(&ring_centers(k, radius), std, n, seed)
}

/// `n` labelled points on a 5x5 grid of Gaussians.
pub fn make_grid_dataset(half_width: f64, std: f64, n: usize, seed: u64) -> Result<Dataset> {
    mixture(&grid_centers(half_width), std, n, seed)
}

/// Writes features and labels as CSV with a trailing `label` column.
pub fn export_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    if data.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, row) in data.features.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = &data.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::format(path, offset, format!("{kind:?}")),
    }
}

/// Reads a CSV with a header row. A column named `label` holds class ids
/// (`0..K`); every other column is a numeric feature.
pub fn ingest_csv(path: &Path, rescale: bool) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let label_col = header.iter().position(|h| h.trim() == "label");
    let dim = header.len() - usize::from(label_col.is_some());
    if dim == 0 {
        return Err(Error::format(path, 0, "no feature columns"));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        for (j, field) in rec.iter().enumerate() {
            if Some(j) == label_col {
                let l: usize = field.trim().parse().map_err(|_| {
                    Error::format(path, offset, format!("label {field:?} is not a non-negative integer"))
                })?;
                y.push(l);
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(path, offset, format!("feature {field:?} in column {j} is not a number")))?;
                if !v.is_finite() {
                    return Err(Error::format(path, offset, format!("non-finite feature in column {j}")));
                }
                x.push(v);
            }
        }
    }
    let n = x.len() / dim;
    if n == 0 {
        return Err(Error::format(path, 0, "no data rows"));
    }
    if rescale {
        rescale_unit(&mut x);
    }
    let labels = label_col.map(|_| y);
    let classes = labels.as_ref().map_or(0, |l| l.iter().max().map_or(0, |m| m + 1));
    Ok(Dataset::new(Matrix::from_vec(n, dim, x)?, labels, classes)?)
}

/// Min-max rescale of all values to `[-1, 1]`; a constant input maps to 0.
pub fn rescale_unit(x: &mut [f64]) {
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    for v in x.iter_mut() {
        *v = if span > 0.0 { 2.0 * (*v - lo) / span - 1.0 } else { 0.0 };
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, at as u64, "truncated header"))
}

/// Reads an IDX image file (unsigned bytes, magic `0x00000803`) and its
/// label file (magic `0x00000801`). Each image is flattened to one row.
pub fn ingest_idx(image_path: &Path, label_path: &Path, rescale: bool) -> Result<Dataset> {
    let img = read_all(image_path)?;
    let magic = be_u32(&img, 0, image_path)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(image_path, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(&img, 4, image_path)? as usize;
    let rows = be_u32(&img, 8, image_path)? as usize;
    let cols = be_u32(&img, 12, image_path)? as usize;
    let dim = rows * cols;
    let need = 16 + n * dim;
    if img.len() < need {
        return Err(Error::format(image_path, img.len() as u64, format!("truncated: {n} images need {need} bytes")));
    }
    let lab = read_all(label_path)?;
    let magic = be_u32(&lab, 0, label_path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(label_path, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let nl = be_u32(&lab, 4, label_path)? as usize;
    if nl != n {
        return Err(Error::format(label_path, 4, format!("{nl} labels for {n} images")));
    }
    if lab.len() < 8 + n {
        return Err(Error::format(label_path, lab.len() as u64, "truncated label data"));
    }
    let mut x: Vec<f64> = img[16..need].iter().map(|&b| b as f64).collect();
    if rescale {
        rescale_unit(&mut x);
    }
    let y: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = y.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset::new(Matrix::from_vec(n, dim, x)?, Some(y), classes)?)
}

/// Training split, held-out split, and mode centers when the data has them.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub held_out: Dataset,
    pub modes: Option<ModeSpec>,
}

/// Shuffles record indices with `seed` and cuts at `train_fraction`.
/// Fails if the two index sets intersect.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((data.len() as f64) * train_fraction).round() as usize;
    if cut == 0 || cut >= data.len() {
        return Err(Error::config(format!("split of {} records at {train_fraction} leaves a side empty", data.len())));
    }
    let (tr, ho) = idx.split_at(cut);
    let seen: HashSet<usize> = tr.iter().copied().collect();
    if ho.iter().any(|i| seen.contains(i)) {
        return Err(Error::config("train and held-out splits overlap"));
    }
    Ok((data.subset(tr), data.subset(ho)))
}

/// Builds or reads the configured dataset and splits it.
pub fn load(cfg: &DatasetConfig, run_seed: u64) -> Result<LoadedData> {
    let seed = cfg.data_seed.unwrap_or(run_seed);
    let (mut data, centers) = match cfg.kind {
        DatasetKind::Ring => {
            (make_ring_dataset(cfg.modes, cfg.radius, cfg.std, cfg.n, seed)?, Some(ring_centers(cfg.modes, cfg.radius)))
        }
        DatasetKind::Grid => (make_grid_dataset(cfg.radius, cfg.std, cfg.n, seed)?, Some(grid_centers(cfg.radius))),
        DatasetKind::Csv => {
            let p = cfg.path.as_deref().ok_or_else(|| Error::config("csv dataset needs dataset.path"))?;
            (ingest_csv(p, cfg.rescale.unwrap_or(false))?, None)
        }
        DatasetKind::Idx => {
            let p = cfg.path.as_deref().ok_or_else(|| Error::config("idx dataset needs dataset.path"))?;
            let l = cfg.labels_path.as_deref().ok_or_else(|| Error::config("idx dataset needs dataset.labels_path"))?;
            (ingest_idx(p, l, cfg.rescale.unwrap_or(true))?, None)
        }
    };
    if !cfg.labelled {
        data.labels = None;
        data.num_classes = 0;
    }
    let modes = centers.map(|c| ModeSpec::new(c, cfg.capture_radius)).transpose()?;
    let (train, held_out) = split(&data, cfg.train_fraction, seed ^ 0x5_9117)?;
    Ok(LoadedData { train, held_out, modes })
}
