//! On-disk formats: raw binary point clouds, plain-text clouds, the CSV
//! dataset index, descriptor CSVs, and recall-curve CSVs.
//!
//! A binary cloud is nothing but consecutive little-endian
//! (f64 x, f64 y, f64 z) records; the point count is the file size divided
//! by 24. The index is a CSV with header `path,northing,easting,split,run`
//! where paths are resolved relative to the index file's directory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

/// One point-cloud record of a dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexRow {
    /// Cloud file path as written in the CSV, relative to the index.
    pub path: String,
    pub northing: f64,
    pub easting: f64,
    /// Split tag, conventionally `train` or `test`.
    pub split: String,
    /// Run identifier grouping clouds captured together.
    pub run: String,
}

impl IndexRow {
    /// World position with the vertical axis at zero; benchmark distances
    /// are planar.
    pub fn position(&self) -> [f64; 3] {
        [self.northing, self.easting, 0.0]
    }
}

const INDEX_HEADER: &str = "path,northing,easting,split,run";

/// Writes an index CSV, header first.
pub fn save_index<W: Write>(w: &mut W, rows: &[IndexRow]) -> Result<()> {
    writeln!(w, "{INDEX_HEADER}")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            row.path, row.northing, row.easting, row.split, row.run
        )?;
    }
    Ok(())
}

/// Reads an index CSV. The header line is required.
pub fn load_index<R: Read>(r: R) -> Result<Vec<IndexRow>> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("index is empty".into()))??;
    if header.trim() != INDEX_HEADER {
        return Err(Error::Parse(format!(
            "index header is {header:?}, expected {INDEX_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!(
                "index row {} has {} fields, expected 5",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("index row {}: bad {what} {s:?}", i + 2)))
        };
        rows.push(IndexRow {
            path: fields[0].trim().to_string(),
            northing: num(fields[1], "northing")?,
            easting: num(fields[2], "easting")?,
            split: fields[3].trim().to_string(),
            run: fields[4].trim().to_string(),
        });
    }
    Ok(rows)
}

pub fn save_index_file(path: impl AsRef<Path>, rows: &[IndexRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_index(&mut w, rows)
}

pub fn load_index_file(path: impl AsRef<Path>) -> Result<Vec<IndexRow>> {
    load_index(File::open(path)?)
}

/// Resolves an index row's cloud path against the index file's location.
pub fn resolve_cloud_path(index_path: &Path, row: &IndexRow) -> PathBuf {
    let p = Path::new(&row.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        index_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Writes a cloud as raw little-endian f64 triples.
pub fn save_cloud_bin<W: Write>(w: &mut W, points: &[[f64; 3]]) -> Result<()> {
    for p in points {
        for v in p {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a raw binary cloud; the point count is the byte length over 24.
pub fn load_cloud_bin<R: Read>(r: &mut R) -> Result<Vec<[f64; 3]>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 24 != 0 {
        return Err(Error::Parse(format!(
            "cloud byte length {} is not a multiple of 24",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 24);
    for rec in bytes.chunks_exact(24) {
        let mut p = [0.0; 3];
        for (axis, v) in p.iter_mut().enumerate() {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&rec[axis * 8..axis * 8 + 8]);
            *v = f64::from_le_bytes(raw);
        }
        points.push(p);
    }
    Ok(points)
}

/// Writes a cloud as one `x y z` line per point.
pub fn save_cloud_txt<W: Write>(w: &mut W, points: &[[f64; 3]]) -> Result<()> {
    for p in points {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    Ok(())
}

/// Reads the plain-text cloud format.
pub fn load_cloud_txt<R: Read>(r: R) -> Result<Vec<[f64; 3]>> {
    let mut points = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p = [0.0; 3];
        let mut fields = line.split_whitespace();
        for v in &mut p {
            let field = fields
                .next()
                .ok_or_else(|| Error::Parse(format!("cloud line {} has under 3 fields", i + 1)))?;
            *v = field
                .parse()
                .map_err(|_| Error::Parse(format!("cloud line {}: bad number {field:?}", i + 1)))?;
        }
        if fields.next().is_some() {
            return Err(Error::Parse(format!("cloud line {} has over 3 fields", i + 1)));
        }
        points.push(p);
    }
    Ok(points)
}

pub fn save_cloud_bin_file(path: impl AsRef<Path>, points: &[[f64; 3]]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_cloud_bin(&mut w, points)
}

pub fn load_cloud_bin_file(path: impl AsRef<Path>) -> Result<Vec<[f64; 3]>> {
    let mut r = BufReader::new(File::open(path)?);
    load_cloud_bin(&mut r)
}

/// Loads a cloud by extension: `.txt` as text, anything else as binary.
pub fn load_cloud_file(path: impl AsRef<Path>) -> Result<Vec<[f64; 3]>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "txt") {
        load_cloud_txt(File::open(path)?)
    } else {
        load_cloud_bin_file(path)
    }
}

/// Descriptors with the metadata retrieval needs.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    pub ids: Vec<String>,
    /// One row per id, same order.
    pub descriptors: Array2<f64>,
    /// Planar positions lifted to 3-vectors with zero vertical component.
    pub positions: Vec<[f64; 3]>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Writes a descriptor CSV with header `id,northing,easting,f0..f{d-1}`.
pub fn save_descriptors<W: Write>(w: &mut W, set: &DescriptorSet) -> Result<()> {
    assert_eq!(set.descriptors.nrows(), set.ids.len());
    assert_eq!(set.positions.len(), set.ids.len());
    let dim = set.descriptors.ncols();
    write!(w, "id,northing,easting")?;
    for j in 0..dim {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for i in 0..set.len() {
        write!(w, "{},{},{}", set.ids[i], set.positions[i][0], set.positions[i][1])?;
        for v in set.descriptors.row(i) {
            // 17 significant digits round-trip any f64 exactly.
            write!(w, ",{v:.17e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a descriptor CSV written by [`save_descriptors`].
pub fn load_descriptors<R: Read>(r: R) -> Result<DescriptorSet> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("descriptor file is empty".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 4 || cols[..3] != ["id", "northing", "easting"] {
        return Err(Error::Parse(format!(
            "descriptor header starts with {:?}, expected id,northing,easting,f0..",
            &cols[..cols.len().min(3)]
        )));
    }
    let dim = cols.len() - 3;
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(Error::Parse(format!(
                "descriptor row {} has {} fields, expected {}",
                i + 2,
                fields.len(),
                dim + 3
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("descriptor row {}: bad number {s:?}", i + 2)))
        };
        ids.push(fields[0].trim().to_string());
        positions.push([num(fields[1])?, num(fields[2])?, 0.0]);
        for f in &fields[3..] {
            values.push(num(f)?);
        }
    }
    let n = ids.len();
    let descriptors = Array2::from_shape_vec((n, dim), values)
        .map_err(|_| Error::Parse("descriptor rows are ragged".into()))?;
    Ok(DescriptorSet {
        ids,
        descriptors,
        positions,
    })
}

pub fn save_descriptors_file(path: impl AsRef<Path>, set: &DescriptorSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_descriptors(&mut w, set)
}

pub fn load_descriptors_file(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    load_descriptors(File::open(path)?)
}

/// Writes a recall curve as `n,recall` rows with a header.
pub fn save_curve<W: Write>(w: &mut W, curve: &[(usize, f64)]) -> Result<()> {
    writeln!(w, "n,recall")?;
    for (n, recall) in curve {
        writeln!(w, "{n},{recall}")?;
    }
    Ok(())
}

pub fn save_curve_file(path: impl AsRef<Path>, curve: &[(usize, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_curve(&mut w, curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn index_roundtrips() {
        let rows = vec![
            IndexRow {
                path: "clouds/a.bin".into(),
                northing: 0.0,
                easting: 60.0,
                split: "train".into(),
                run: "0".into(),
            },
            IndexRow {
                path: "clouds/b.bin".into(),
                northing: -12.5,
                easting: 0.25,
                split: "test".into(),
                run: "2".into(),
            },
        ];
        let mut buf = Vec::new();
        save_index(&mut buf, &rows).unwrap();
        let back = load_index(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn index_rejects_bad_header_and_ragged_rows() {
        let err = load_index("path,x\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("header"));
        let data = format!("{INDEX_HEADER}\na.bin,1,2,train\n");
        let err = load_index(data.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("fields"), "{err}");
    }

    #[test]
    fn binary_cloud_roundtrips_and_infers_count_from_size() {
        let points = vec![[0.1, -0.2, 0.3], [1.0, 2.0, -3.0], [f64::MIN_POSITIVE, 0.0, 1e300]];
        let mut buf = Vec::new();
        save_cloud_bin(&mut buf, &points).unwrap();
        assert_eq!(buf.len(), 24 * points.len());
        let back = load_cloud_bin(&mut buf.as_slice()).unwrap();
        assert_eq!(back, points);
    }

    #[test]
    fn binary_cloud_rejects_partial_records() {
        let mut buf = Vec::new();
        save_cloud_bin(&mut buf, &[[1.0, 2.0, 3.0]]).unwrap();
        buf.pop();
        let err = load_cloud_bin(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("multiple of 24"));
    }

    #[test]
    fn text_cloud_roundtrips() {
        let points = vec![[0.5, -0.25, 0.125], [3.0, 4.0, 5.0]];
        let mut buf = Vec::new();
        save_cloud_txt(&mut buf, &points).unwrap();
        let back = load_cloud_txt(buf.as_slice()).unwrap();
        assert_eq!(back, points);
        assert!(load_cloud_txt("1 2\n".as_bytes()).is_err());
        assert!(load_cloud_txt("1 2 3 4\n".as_bytes()).is_err());
    }

    #[test]
    fn descriptor_csv_roundtrips_exactly() {
        let set = DescriptorSet {
            ids: vec!["scene0_copy0".into(), "scene1_copy2".into()],
            descriptors: array![[1.0, -2.0, 0.1 + 0.2], [0.0, 1e-300, 3.5]],
            positions: vec![[0.0, 0.0, 0.0], [60.0, 120.0, 0.0]],
        };
        let mut buf = Vec::new();
        save_descriptors(&mut buf, &set).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,northing,easting,f0,f1,f2\n"));
        let back = load_descriptors(buf.as_slice()).unwrap();
        assert_eq!(back.ids, set.ids);
        assert_eq!(back.descriptors, set.descriptors);
        assert_eq!(back.positions, set.positions);
    }

    #[test]
    fn curve_csv_has_expected_shape() {
        let mut buf = Vec::new();
        save_curve(&mut buf, &[(1, 0.5), (2, 0.75), (3, 1.0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "n,recall\n1,0.5\n2,0.75\n3,1\n");
    }

    #[test]
    fn cloud_paths_resolve_relative_to_index() {
        let row = IndexRow {
            path: "clouds/a.bin".into(),
            northing: 0.0,
            easting: 0.0,
            split: "train".into(),
            run: "0".into(),
        };
        let resolved = resolve_cloud_path(Path::new("/data/set/index.csv"), &row);
        assert_eq!(resolved, PathBuf::from("/data/set/clouds/a.bin"));
    }

    #[test]
    fn file_helpers_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud_path = dir.path().join("c.bin");
        let points = vec![[1.0, 2.0, 3.0]];
        save_cloud_bin_file(&cloud_path, &points).unwrap();
        assert_eq!(load_cloud_file(&cloud_path).unwrap(), points);
        let txt_path = dir.path().join("c.txt");
        let mut w = BufWriter::new(File::create(&txt_path).unwrap());
        save_cloud_txt(&mut w, &points).unwrap();
        drop(w);
        assert_eq!(load_cloud_file(&txt_path).unwrap(), points);
    }
}
