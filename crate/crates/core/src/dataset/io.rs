//! Feature file formats.
//!
//! Binary layout (little-endian): magic `UDAF`, u32 version (currently 1),
//! u32 n, u32 m, u8 has_labels, then `n*m` f32 features row-major, then `n`
//! i32 labels when the flag is set. The CSV alternative uses a
//! `f0,...,f{m-1}[,label]` header with one sample per row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{DatasetError, FeatureSet};

const MAGIC: &[u8; 4] = b"UDAF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Binary,
    Csv,
}

impl FileFormat {
    /// Picks the format from the file extension: `.csv` is CSV, anything
    /// else is treated as the binary container.
    pub fn from_path(path: &Path) -> FileFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

pub fn write_features(path: &Path, set: &FeatureSet, format: FileFormat) -> Result<(), DatasetError> {
    match format {
        FileFormat::Binary => write_binary(path, set),
        FileFormat::Csv => write_csv(path, set),
    }
}

pub fn load_features(path: &Path, format: FileFormat) -> Result<FeatureSet, DatasetError> {
    match format {
        FileFormat::Binary => load_binary(path),
        FileFormat::Csv => load_csv(path),
    }
}

fn write_binary(path: &Path, set: &FeatureSet) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(set.n() as u32).to_le_bytes())?;
    w.write_all(&(set.dim() as u32).to_le_bytes())?;
    w.write_all(&[u8::from(set.labels().is_some())])?;
    for i in 0..set.n() {
        for j in 0..set.dim() {
            w.write_all(&(set.features()[(i, j)] as f32).to_le_bytes())?;
        }
    }
    if let Some(labels) = set.labels() {
        for &l in labels {
            let l = i32::try_from(l)
                .map_err(|_| DatasetError::Format(format!("label {l} exceeds i32 range")))?;
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_binary(path: &Path) -> Result<FeatureSet, DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;

    if buf.len() < 17 {
        return Err(DatasetError::Format("file shorter than header".into()));
    }
    if &buf[0..4] != MAGIC {
        return Err(DatasetError::Format("bad magic, expected UDAF".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(DatasetError::Format(format!("unsupported version {version}")));
    }
    let n = u32_at(8) as usize;
    let m = u32_at(12) as usize;
    let has_labels = match buf[16] {
        0 => false,
        1 => true,
        b => return Err(DatasetError::Format(format!("bad has_labels byte {b}"))),
    };
    if n == 0 || m == 0 {
        return Err(DatasetError::Format("empty shape in header".into()));
    }
    let feat_bytes = n
        .checked_mul(m)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| DatasetError::Format("shape overflow".into()))?;
    let label_bytes = if has_labels { n * 4 } else { 0 };
    let expected = 17 + feat_bytes + label_bytes;
    if buf.len() != expected {
        return Err(DatasetError::Format(format!(
            "expected {expected} bytes for declared shape, found {}",
            buf.len()
        )));
    }

    let mut features = DMatrix::<f64>::zeros(n, m);
    let mut at = 17;
    for i in 0..n {
        for j in 0..m {
            let v = f32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(DatasetError::NonFinite);
            }
            features[(i, j)] = f64::from(v);
            at += 4;
        }
    }
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = i32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
            if l < 0 {
                return Err(DatasetError::Format(format!("negative label {l}")));
            }
            labels.push(l as usize);
            at += 4;
        }
        Some(labels)
    } else {
        None
    };
    FeatureSet::new(features, labels)
}

fn write_csv(path: &Path, set: &FeatureSet) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..set.dim()).map(|j| format!("f{j}")).collect();
    if set.labels().is_some() {
        writeln!(w, "{},label", header.join(","))?;
    } else {
        writeln!(w, "{}", header.join(","))?;
    }
    for i in 0..set.n() {
        let row: Vec<String> = (0..set.dim())
            .map(|j| format!("{}", set.features()[(i, j)]))
            .collect();
        match set.labels() {
            Some(labels) => writeln!(w, "{},{}", row.join(","), labels[i])?,
            None => writeln!(w, "{}", row.join(","))?,
        }
    }
    w.flush()?;
    Ok(())
}

fn load_csv(path: &Path) -> Result<FeatureSet, DatasetError> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines
        .next()
        .ok_or_else(|| DatasetError::Format("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_labels = cols.last() == Some(&"label");
    let m = if has_labels { cols.len() - 1 } else { cols.len() };
    if m == 0 {
        return Err(DatasetError::Format("CSV has no feature columns".into()));
    }
    for (j, col) in cols.iter().take(m).enumerate() {
        if *col != format!("f{j}") {
            return Err(DatasetError::Format(format!(
                "unexpected column {j} header {col:?}, expected \"f{j}\""
            )));
        }
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut n = 0;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(DatasetError::Format(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        for field in fields.iter().take(m) {
            let v: f64 = field
                .parse()
                .map_err(|_| DatasetError::Format(format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(DatasetError::NonFinite);
            }
            rows.push(v);
        }
        if has_labels {
            let l: usize = fields[m]
                .parse()
                .map_err(|_| DatasetError::Format(format!("bad label {:?}", fields[m])))?;
            labels.push(l);
        }
        n += 1;
    }
    if n == 0 {
        return Err(DatasetError::Format("CSV has no data rows".into()));
    }
    let features = DMatrix::from_row_slice(n, m, &rows);
    FeatureSet::new(features, has_labels.then_some(labels))
}
