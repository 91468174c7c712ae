//! Dataset ingestion, normalization and class-incremental task splitting.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::GrayImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::{LabeledSet, Task, TaskSequence};

/// Where samples come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedurally drawn grayscale glyphs, one glyph type per class.
    SyntheticShapes,
    /// IDX-format image and label files (the MNIST family layout).
    IdxImageFiles,
    /// Rows of `label,x1,x2,...` with an optional header.
    CsvPoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetDescriptor {
    pub source: DataSource,
    /// IDX image file or CSV file, depending on `source`.
    pub path: PathBuf,
    /// IDX label file.
    pub labels_path: PathBuf,
    /// Square image side after resizing; ignored for point data.
    pub resolution: usize,
    pub num_classes: usize,
    /// Samples kept per class before the train/test split.
    pub per_class_cap: usize,
    pub test_fraction: f64,
    /// Target value range after normalization.
    pub range: [f64; 2],
}

impl Default for DatasetDescriptor {
    fn default() -> Self {
        Self {
            source: DataSource::SyntheticShapes,
            path: PathBuf::new(),
            labels_path: PathBuf::new(),
            resolution: 16,
            num_classes: 10,
            per_class_cap: 600,
            test_fraction: 1.0 / 6.0,
            range: [-0.5, 0.5],
        }
    }
}

impl DatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.per_class_cap < 2 {
            return Err(Error::Config("dataset needs at least one class and two samples per class".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        let needs_path = self.source != DataSource::SyntheticShapes;
        if needs_path && self.path.as_os_str().is_empty() {
            return Err(Error::Config("dataset path is required for file sources".into()));
        }
        if self.source == DataSource::IdxImageFiles && self.labels_path.as_os_str().is_empty() {
            return Err(Error::Config("labels_path is required for IDX sources".into()));
        }
        if !(self.range[0] < self.range[1]) {
            return Err(Error::Config("range must be increasing".into()));
        }
        if self.resolution < 4 && self.source != DataSource::CsvPoints {
            return Err(Error::Config("image resolution must be at least 4".into()));
        }
        Ok(())
    }
}

/// A full labeled dataset before task splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub data_shape: Vec<usize>,
    pub num_classes: usize,
}

/// Number of glyph types the synthetic source can draw.
pub const SYNTHETIC_CLASSES: usize = 10;

/// Render one jittered glyph of `class` as intensities in [0, 1], row major.
pub fn render_glyph(class: usize, resolution: usize, rng: &mut Rng) -> Vec<f64> {
    let cx = 0.5 + rng.random_range(-0.08..0.08);
    let cy = 0.5 + rng.random_range(-0.08..0.08);
    let scale = rng.random_range(0.8..1.1);
    let width = rng.random_range(0.05..0.085);
    let angle: f64 = rng.random_range(-0.15..0.15);
    let amp = rng.random_range(0.75..1.0);
    let (sin, cos) = angle.sin_cos();
    let res = resolution as f64;
    let mut out = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        for col in 0..resolution {
            let px = (col as f64 + 0.5) / res - cx;
            let py = (row as f64 + 0.5) / res - cy;
            let x = (cos * px + sin * py) / scale;
            let y = (-sin * px + cos * py) / scale;
            let d = glyph_distance(class, x, y, width) * scale;
            out.push(amp * (0.5 - d * res).clamp(0.0, 1.0));
        }
    }
    out
}

fn segment(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let h = (((x - a.0) * dx + (y - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (x - a.0 - h * dx).hypot(y - a.1 - h * dy)
}

/// Signed distance to glyph `class` centred at the origin, in unit
/// coordinates; negative inside.
fn glyph_distance(class: usize, x: f64, y: f64, w: f64) -> f64 {
    let r = x.hypot(y);
    match class % SYNTHETIC_CLASSES {
        0 => (r - 0.3).abs() - w,
        1 => r - 0.22,
        2 => segment(x, y, (-0.32, 0.0), (0.32, 0.0)) - w,
        3 => segment(x, y, (0.0, -0.32), (0.0, 0.32)) - w,
        4 => segment(x, y, (-0.3, 0.0), (0.3, 0.0)).min(segment(x, y, (0.0, -0.3), (0.0, 0.3))) - w,
        5 => segment(x, y, (-0.25, -0.25), (0.25, 0.25)).min(segment(x, y, (-0.25, 0.25), (0.25, -0.25))) - w,
        6 => {
            let q = (x.abs() - 0.27, y.abs() - 0.27);
            let outside = q.0.max(0.0).hypot(q.1.max(0.0));
            (outside + q.0.max(q.1).min(0.0)).abs() - w
        }
        7 => {
            // Filled upward triangle.
            let edges = [
                segment(x, y, (-0.3, 0.22), (0.3, 0.22)),
                segment(x, y, (0.3, 0.22), (0.0, -0.3)),
                segment(x, y, (0.0, -0.3), (-0.3, 0.22)),
            ];
            let d = edges.iter().cloned().fold(f64::INFINITY, f64::min);
            let inside = y < 0.22 && (x.abs() * 0.52 / 0.3) < (y + 0.3);
            if inside { -d } else { d }
        }
        8 => ((x + 0.18).hypot(y) - 0.11).min((x - 0.18).hypot(y) - 0.11),
        _ => segment(x, y, (-0.22, -0.3), (-0.22, 0.28)).min(segment(x, y, (-0.22, 0.28), (0.28, 0.28))) - w,
    }
}

fn synthetic(desc: &DatasetDescriptor, rng: &mut Rng) -> Result<(LabeledSet, Vec<usize>)> {
    if desc.num_classes > SYNTHETIC_CLASSES {
        return Err(Error::Config(format!("synthetic shapes provide at most {SYNTHETIC_CLASSES} classes")));
    }
    let d = desc.resolution * desc.resolution;
    let n = desc.num_classes * desc.per_class_cap;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..desc.num_classes {
        for _ in 0..desc.per_class_cap {
            data.extend(render_glyph(class, desc.resolution, rng));
            labels.push(class);
        }
    }
    let x = Array2::from_shape_vec((n, d), data).expect("sized above");
    Ok((LabeledSet::new(x, labels)?, vec![desc.resolution, desc.resolution]))
}

fn read_idx(path: &Path, expected_dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("not an IDX file"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned byte IDX data is supported"));
    }
    let ndim = bytes[3] as usize;
    if ndim != expected_dims || bytes.len() < 4 + 4 * ndim {
        return Err(bad("unexpected number of dimensions"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let body = bytes[4 + 4 * ndim..].to_vec();
    if body.len() != dims.iter().product::<usize>() {
        return Err(bad("payload size does not match header"));
    }
    Ok((dims, body))
}

fn idx_images(desc: &DatasetDescriptor, images: &Path, labels: &Path) -> Result<(LabeledSet, Vec<usize>)> {
    let (idims, pixels) = read_idx(images, 3)?;
    let (ldims, label_bytes) = read_idx(labels, 1)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(Error::Dataset("image and label counts differ".into()));
    }
    let res = desc.resolution as u32;
    let d = desc.resolution * desc.resolution;
    let mut data = Vec::with_capacity(n * d);
    for k in 0..n {
        let img = GrayImage::from_raw(w as u32, h as u32, pixels[k * h * w..(k + 1) * h * w].to_vec())
            .expect("buffer sized from header");
        let img = if (w as u32, h as u32) == (res, res) { img } else { resize(&img, res, res, FilterType::Triangle) };
        data.extend(img.as_raw().iter().map(|&p| f64::from(p) / 255.0));
    }
    let y: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    if let Some(&label) = y.iter().find(|&&l| l >= desc.num_classes) {
        return Err(Error::LabelOutOfRange { label, classes: desc.num_classes });
    }
    let x = Array2::from_shape_vec((n, d), data).expect("sized above");
    Ok((LabeledSet::new(x, y)?, vec![desc.resolution, desc.resolution]))
}

fn csv_points(desc: &DatasetDescriptor, path: &Path) -> Result<(LabeledSet, Vec<usize>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.len() >= 2 => {
                let label = v[0];
                if label < 0.0 || label.fract() != 0.0 || label as usize >= desc.num_classes {
                    return Err(Error::Dataset(format!("row {}: invalid label {label}", k + 1)));
                }
                y.push(label as usize);
                rows.push(v[1..].to_vec());
            }
            Err(_) if k == 0 => continue,
            _ => return Err(Error::Dataset(format!("row {}: expected label and at least one value", k + 1))),
        }
    }
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dataset("csv rows are empty or ragged".into()));
    }
    let x = Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("rows share a width");
    Ok((LabeledSet::new(x, y)?, vec![d]))
}

/// Map raw values to `range`: images from [0, 1], points by global min-max.
fn normalize(x: &mut Array2<f64>, source: DataSource, range: [f64; 2]) {
    let (lo, hi) = match source {
        DataSource::CsvPoints => {
            let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, if hi > lo { hi } else { lo + 1.0 })
        }
        _ => (0.0, 1.0),
    };
    let span = range[1] - range[0];
    x.mapv_inplace(|v| range[0] + span * (v - lo) / (hi - lo));
}

/// Load the configured source, cap each class, normalize and split each
/// class into train and test rows.
pub fn load_dataset(desc: &DatasetDescriptor, rng: &mut Rng) -> Result<Dataset> {
    desc.validate()?;
    let (mut all, data_shape) = match &desc.source {
        DataSource::SyntheticShapes => synthetic(desc, rng)?,
        DataSource::IdxImageFiles => idx_images(desc, &desc.path, &desc.labels_path)?,
        DataSource::CsvPoints => csv_points(desc, &desc.path)?,
    };
    normalize(&mut all.x, desc.source, desc.range);
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for class in 0..desc.num_classes {
        let mut rows: Vec<usize> = (0..all.len()).filter(|&r| all.y[r] == class).collect();
        rows.shuffle(rng);
        rows.truncate(desc.per_class_cap);
        let n_test = ((rows.len() as f64) * desc.test_fraction).round() as usize;
        test_rows.extend_from_slice(&rows[..n_test]);
        train_rows.extend_from_slice(&rows[n_test..]);
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    Ok(Dataset {
        train: all.select(&train_rows),
        test: all.select(&test_rows),
        data_shape,
        num_classes: desc.num_classes,
    })
}

/// Partition classes into `num_tasks` disjoint groups of `classes_per_task`.
/// With `class_order` the first classes of that order are used as given;
/// otherwise the classes are shuffled with `rng`.
pub fn split_tasks(
    data: &Dataset,
    num_tasks: usize,
    classes_per_task: usize,
    class_order: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<TaskSequence> {
    let need = num_tasks * classes_per_task;
    if num_tasks < 1 || classes_per_task < 1 {
        return Err(Error::Config("tasks and classes per task must be positive".into()));
    }
    if data.num_classes < need {
        return Err(Error::Dataset(format!(
            "{num_tasks} tasks of {classes_per_task} classes need {need} classes, dataset has {}",
            data.num_classes
        )));
    }
    let order: Vec<usize> = match class_order {
        Some(o) => {
            if o.len() < need {
                return Err(Error::Config(format!("class_order lists {} classes, need {need}", o.len())));
            }
            o.to_vec()
        }
        None => {
            let mut o: Vec<usize> = (0..data.num_classes).collect();
            o.shuffle(rng);
            o
        }
    };
    let tasks = order[..need]
        .chunks(classes_per_task)
        .map(|classes| Task {
            classes: classes.to_vec(),
            train: data.train.filter_classes(classes),
            test: data.test.filter_classes(classes),
        })
        .collect();
    TaskSequence::new(tasks, data.num_classes, data.data_shape.clone())
}

/// [`load_dataset`] followed by [`split_tasks`], both drawing from `rng`.
pub fn load_and_split(
    desc: &DatasetDescriptor,
    num_tasks: usize,
    classes_per_task: usize,
    class_order: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<(Dataset, TaskSequence)> {
    let data = load_dataset(desc, rng)?;
    let seq = split_tasks(&data, num_tasks, classes_per_task, class_order, rng)?;
    Ok((data, seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn small() -> DatasetDescriptor {
        DatasetDescriptor { per_class_cap: 12, ..Default::default() }
    }

    #[test]
    fn synthetic_values_in_range_and_split_sizes() {
        let data = load_dataset(&small(), &mut stream(0, Stream::DataSplit)).unwrap();
        assert_eq!(data.data_shape, vec![16, 16]);
        assert_eq!(data.train.len(), 100);
        assert_eq!(data.test.len(), 20);
        assert!(data.train.x.iter().all(|v| (-0.5..=0.5).contains(v)));
        // Every glyph lights up some pixels.
        assert!(data.train.x.rows().into_iter().all(|r| r.iter().any(|&v| v > 0.0)));
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let mut rng = stream(4, Stream::DataSplit);
        let (_, seq) = load_and_split(&small(), 5, 2, None, &mut rng).unwrap();
        let mut all = seq.classes_seen(5);
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for t in seq.tasks() {
            assert!(t.train.y.iter().all(|y| t.classes.contains(y)));
        }
    }

    #[test]
    fn explicit_order_and_insufficient_classes() {
        let mut rng = stream(0, Stream::DataSplit);
        let data = load_dataset(&small(), &mut rng).unwrap();
        let seq = split_tasks(&data, 2, 2, Some(&[9, 8, 7, 6]), &mut rng).unwrap();
        assert_eq!(seq.task(1).classes, vec![9, 8]);
        assert!(split_tasks(&data, 6, 2, None, &mut rng).is_err());
    }

    #[test]
    fn csv_points_are_rescaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        fs::write(&path, "label,a,b\n0,0,10\n1,5,0\n1,2,2\n0,1,1\n").unwrap();
        let desc = DatasetDescriptor {
            source: DataSource::CsvPoints,
            path,
            num_classes: 2,
            per_class_cap: 2,
            test_fraction: 0.5,
            ..Default::default()
        };
        let data = load_dataset(&desc, &mut stream(0, Stream::DataSplit)).unwrap();
        assert_eq!(data.data_shape, vec![2]);
        assert_eq!(data.train.len() + data.test.len(), 4);
        let all: Vec<f64> = data.train.x.iter().chain(data.test.x.iter()).cloned().collect();
        assert!(all.contains(&-0.5) && all.contains(&0.5));
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        let mut ib = vec![0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 4, 0, 0, 0, 4];
        for k in 0..4u8 {
            ib.extend(std::iter::repeat_n(k * 80, 16));
        }
        fs::write(&img, ib).unwrap();
        fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 4, 0, 1, 0, 1]).unwrap();
        let desc = DatasetDescriptor {
            source: DataSource::IdxImageFiles,
            path: img,
            labels_path: lab,
            resolution: 4,
            num_classes: 2,
            per_class_cap: 2,
            test_fraction: 0.5,
            ..Default::default()
        };
        let data = load_dataset(&desc, &mut stream(0, Stream::DataSplit)).unwrap();
        assert_eq!(data.train.len(), 2);
        assert_eq!(data.train.dim(), 16);
        assert!(data.train.x.iter().all(|v| (-0.5..=0.5).contains(v)));
    }
}
