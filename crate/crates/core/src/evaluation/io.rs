//! Feature files and report output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{EvalReport, FeatureSet, QueryOutcome};
use crate::data::{load_manifest, save_manifest};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"AGNF";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features<W: Write>(mut w: W, features: &FeatureSet) -> Result<()> {
    w.write_all(&FEATURE_MAGIC)?;
    w.write_u32::<LittleEndian>(FEATURE_VERSION)?;
    w.write_u32::<LittleEndian>(features.len() as u32)?;
    w.write_u32::<LittleEndian>(features.dim() as u32)?;
    for &v in features.vectors.iter() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

/// Reads the matrix part of a feature file.
pub fn read_feature_matrix<R: Read>(mut r: R) -> Result<Array2<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::FeatureFile(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FEATURE_VERSION {
        return Err(Error::FeatureFile(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0f32; n * d];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|e| Error::FeatureFile(format!("truncated data: {e}")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::FeatureFile("trailing bytes after feature data".into()));
    }
    Array2::from_shape_vec((n, d), data.into_iter().map(f64::from).collect())
        .map_err(|e| Error::FeatureFile(e.to_string()))
}

/// Path of the manifest written next to a feature file.
pub fn companion_manifest(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes `path` and its companion manifest CSV.
pub fn save_features(path: &Path, features: &FeatureSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, features)?;
    w.flush()?;
    save_manifest(&companion_manifest(path), &features.meta)
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let vectors = read_feature_matrix(BufReader::new(File::open(path)?))?;
    let meta = load_manifest(&companion_manifest(path))?;
    FeatureSet::new(vectors, meta.records().to_vec())
}

/// Key/value text with the CMC curve as a comma list.
pub fn write_report_text<W: Write>(mut w: W, report: &EvalReport) -> Result<()> {
    writeln!(w, "protocol={}", report.protocol)?;
    writeln!(w, "seed={}", report.seed)?;
    writeln!(w, "num_queries={}", report.num_queries)?;
    writeln!(w, "num_skipped={}", report.num_skipped)?;
    writeln!(w, "num_gallery={}", report.num_gallery)?;
    writeln!(w, "map={:.6}", report.map)?;
    for k in [1, 5, 10] {
        writeln!(w, "rank{k}={:.6}", report.rank(k))?;
    }
    let cmc: Vec<String> = report.cmc.iter().map(|v| format!("{v:.6}")).collect();
    writeln!(w, "cmc={}", cmc.join(","))?;
    Ok(())
}

pub fn write_cmc_csv<W: Write>(w: W, report: &EvalReport) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["rank", "match_rate"])?;
    for (k, v) in report.cmc.iter().enumerate() {
        csv.write_record([(k + 1).to_string(), format!("{v:.6}")])?;
    }
    csv.flush()?;
    Ok(())
}

/// One row per query; dropped queries have empty `ap` and `first_match_rank`.
pub fn write_queries_csv<W: Write>(w: W, queries: &FeatureSet, outcomes: &[QueryOutcome]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["query", "image_path", "vehicle_id", "camera_id", "n_gt", "ap", "first_match_rank"])?;
    for (i, (rec, o)) in queries.meta.iter().zip(outcomes).enumerate() {
        csv.write_record([
            i.to_string(),
            rec.image_path.clone(),
            rec.vehicle_id.to_string(),
            rec.camera_id.to_string(),
            o.n_gt.to_string(),
            o.ap.map(|v| format!("{v:.6}")).unwrap_or_default(),
            o.first_match_rank.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Writes `report.txt`, `cmc.csv` and `queries.csv` into `dir`.
pub fn save_report(dir: &Path, report: &EvalReport, queries: &FeatureSet, outcomes: &[QueryOutcome]) -> Result<()> {
    write_report_text(BufWriter::new(File::create(dir.join("report.txt"))?), report)?;
    write_cmc_csv(File::create(dir.join("cmc.csv"))?, report)?;
    write_queries_csv(File::create(dir.join("queries.csv"))?, queries, outcomes)?;
    Ok(())
}
