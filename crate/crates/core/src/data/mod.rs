//! Labeled vehicle images: records, manifest I/O, synthetic rendering, pair
//! sampling and identity-disjoint splits.

mod sampling;
pub mod synthetic;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::losses::Attributes;
use crate::tensor::ImageTensor;
pub use sampling::{sample_pairs, split_train_test, PairSample};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

/// Column names of the manifest header, in canonical order.
pub const MANIFEST_COLUMNS: [&str; 5] = ["image_path", "vehicle_id", "camera_id", "color_id", "type_id"];

/// Attribute value written to a manifest for an unlabeled attribute.
pub const UNLABELED: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VehicleRecord {
    pub image_path: String,
    pub vehicle_id: u32,
    pub camera_id: u32,
    /// `None` when the colour is not annotated.
    pub color_id: Option<u32>,
    /// `None` when the type is not annotated.
    pub type_id: Option<u32>,
}

impl VehicleRecord {
    /// Both attributes, or `None` if either one is missing.
    pub fn attributes(&self) -> Option<Attributes> {
        Some((self.color_id?, self.type_id?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<VehicleRecord>,
    pub num_identities: usize,
    pub num_colors: usize,
    pub num_types: usize,
    pub num_cameras: usize,
}

fn label_space<I: Iterator<Item = u32>>(labels: I) -> usize {
    labels.max().map_or(0, |m| m as usize + 1)
}

impl Dataset {
    /// Builds a dataset whose label-space sizes are one past the largest
    /// label observed.
    pub fn new(records: Vec<VehicleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(r) = records.iter().find(|r| r.image_path.is_empty()) {
            return Err(Error::Config(format!("record for vehicle {} has an empty image_path", r.vehicle_id)));
        }
        Ok(Self {
            num_identities: label_space(records.iter().map(|r| r.vehicle_id)),
            num_colors: label_space(records.iter().filter_map(|r| r.color_id)),
            num_types: label_space(records.iter().filter_map(|r| r.type_id)),
            num_cameras: label_space(records.iter().map(|r| r.camera_id)),
            records,
        })
    }

    pub fn records(&self) -> &[VehicleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct vehicle ids, ascending.
    pub fn identities(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.vehicle_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Dataset::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }
}

fn parse_label(raw: &str, column: &str, line: u64, allow_unlabeled: bool) -> Result<Option<u32>> {
    let value: i64 = raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("{column}: `{raw}` is not an integer"),
    })?;
    if allow_unlabeled && value == UNLABELED {
        return Ok(None);
    }
    u32::try_from(value).map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("{column}: `{raw}` is out of range"),
    })
}

/// Reads a manifest CSV. Row order is preserved.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    read_manifest(file)
}

pub fn read_manifest<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.clone(),
        Ok(_) => return Err(Error::EmptyDataset),
        Err(e) => return Err(e.into()),
    };
    let mut columns = [0usize; 5];
    for (slot, name) in columns.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(columns[i]).unwrap_or("");
        let image_path = field(0).to_string();
        if image_path.is_empty() {
            return Err(Error::Parse {
                line,
                message: "image_path is empty".into(),
            });
        }
        records.push(VehicleRecord {
            image_path,
            vehicle_id: parse_label(field(1), MANIFEST_COLUMNS[1], line, false)?.expect("labeled"),
            camera_id: parse_label(field(2), MANIFEST_COLUMNS[2], line, false)?.expect("labeled"),
            color_id: parse_label(field(3), MANIFEST_COLUMNS[3], line, true)?,
            type_id: parse_label(field(4), MANIFEST_COLUMNS[4], line, true)?,
        });
    }
    Dataset::new(records)
}

pub fn write_manifest<W: Write>(mut w: W, records: &[VehicleRecord]) -> Result<()> {
    writeln!(w, "{}", MANIFEST_COLUMNS.join(","))?;
    let attr = |v: Option<u32>| v.map_or(UNLABELED, i64::from);
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.image_path,
            r.vehicle_id,
            r.camera_id,
            attr(r.color_id),
            attr(r.type_id)
        )?;
    }
    Ok(())
}

pub fn save_manifest(path: &Path, records: &[VehicleRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    write_manifest(&mut f, records)?;
    f.flush()?;
    Ok(())
}

/// Maps 8-bit RGB to a 3 × H × W tensor in [-1, 1].
pub fn rgb_to_tensor(img: &image::RgbImage) -> ImageTensor<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        let v = img.get_pixel(x as u32, y as u32)[c] as f32;
        v / 127.5 - 1.0
    })
}

/// Loads every image of `dataset`, resolving relative paths against `root`.
pub fn load_images(dataset: &Dataset, root: &Path, side: usize) -> Result<Vec<ImageTensor<f32>>> {
    dataset
        .records()
        .iter()
        .map(|r| {
            let path = resolve(root, &r.image_path);
            let img = image::open(&path)
                .map_err(|source| Error::Image { path: path.clone(), source })?
                .to_rgb8();
            if img.width() as usize != side || img.height() as usize != side {
                return Err(Error::shape("image file", format!("{side}x{side}"), format!("{}x{}", img.width(), img.height())));
            }
            Ok(rgb_to_tensor(&img))
        })
        .collect()
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}
