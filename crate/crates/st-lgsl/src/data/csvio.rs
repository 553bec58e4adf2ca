//! CSV interchange: sparse `src,dst,value` triplets for adjacency/distance
//! tables, dense matrices for graph export, and a plain time×node CSV
//! converter into the STLG container.

use std::path::Path;

use super::{save_dataset, TrafficSeries};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write the nonzero entries of a square matrix as `src,dst,value` rows,
/// sorted by (src, dst) so identical matrices produce identical bytes.
pub fn save_triplets(path: &Path, mat: &Tensor<f64>) -> Result<()> {
    let shape = mat.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Data(format!(
            "triplet export needs a square matrix, got {shape:?}"
        )));
    }
    let m = shape[0];
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["src", "dst", "value"])
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for i in 0..m {
        for j in 0..m {
            let v = mat.get2(i, j);
            if v != 0.0 {
                w.write_record([i.to_string(), j.to_string(), v.to_string()])
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            }
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read `src,dst,value` triplets into a dense square matrix. Unlisted pairs
/// are 0. With `num_nodes = None` the size is inferred as max index + 1.
pub fn load_triplets(path: &Path, num_nodes: Option<usize>) -> Result<Tensor<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut max_idx = 0usize;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if rec.len() != 3 {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected src,dst,value",
                path.display(),
                line + 2,
                rec.len()
            )));
        }
        let parse = |field: &str, what: &str| -> Result<f64> {
            field.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}: cannot parse {what} {field:?}",
                    path.display(),
                    line + 2
                ))
            })
        };
        let src = parse(&rec[0], "src")? as usize;
        let dst = parse(&rec[1], "dst")? as usize;
        let val = parse(&rec[2], "value")?;
        max_idx = max_idx.max(src).max(dst);
        triplets.push((src, dst, val));
    }
    let m = match num_nodes {
        Some(m) => {
            if max_idx >= m && !triplets.is_empty() {
                return Err(Error::Data(format!(
                    "{}: node index {max_idx} out of range for {m} nodes",
                    path.display()
                )));
            }
            m
        }
        None => {
            if triplets.is_empty() {
                return Err(Error::Data(format!(
                    "{}: no triplets and no node count given",
                    path.display()
                )));
            }
            max_idx + 1
        }
    };
    let mut mat = Tensor::zeros(&[m, m]);
    for (i, j, v) in triplets {
        mat.set2(i, j, v);
    }
    Ok(mat)
}

/// Write a dense matrix, one CSV row per matrix row, 6 decimal places.
pub fn save_dense_csv(path: &Path, mat: &Tensor<f64>) -> Result<()> {
    let shape = mat.shape();
    if shape.len() != 2 {
        return Err(Error::Data(format!(
            "dense CSV export needs a matrix, got {shape:?}"
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = String::new();
    for i in 0..rows {
        for j in 0..cols {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.6}", mat.get2(i, j)));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a dense numeric CSV (no header) into a matrix.
pub fn load_dense_csv(path: &Path) -> Result<Tensor<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Data(format!(
                    "{}: row {} has {} columns, expected {c}",
                    path.display(),
                    line + 1,
                    rec.len()
                )))
            }
            _ => {}
        }
        for field in rec.iter() {
            data.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}: cannot parse {field:?}",
                    path.display(),
                    line + 1
                ))
            })?);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    Tensor::from_vec(vec![rows, cols], data)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Convert a plain CSV series (rows = time steps, columns = nodes, single
/// feature) into an STLG file. A non-numeric first row is treated as a
/// header; empty or unparsable cells become NaN for the load-time policy.
pub fn convert_csv_to_stlg(src: &Path, dst: &Path) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(src)
        .map_err(|e| Error::Data(format!("{}: {e}", src.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut cols = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", src.display())))?;
        let parsed: Vec<f64> = rec
            .iter()
            .map(|f| {
                let f = f.trim();
                if f.is_empty() {
                    f64::NAN
                } else {
                    f.parse::<f64>().unwrap_or(f64::NAN)
                }
            })
            .collect();
        if line == 0 && parsed.iter().all(|v| v.is_nan()) && !rec.is_empty() {
            // every cell failed to parse: header row
            cols = Some(rec.len());
            continue;
        }
        match cols {
            None => cols = Some(parsed.len()),
            Some(c) if c != parsed.len() => {
                return Err(Error::Data(format!(
                    "{}: row {} has {} columns, expected {c}",
                    src.display(),
                    line + 1,
                    parsed.len()
                )))
            }
            _ => {}
        }
        rows.push(parsed);
    }
    let m = cols.ok_or_else(|| Error::Data(format!("{}: empty file", src.display())))?;
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: no data rows to convert",
            src.display()
        )));
    }
    let t = rows.len();
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    let series = TrafficSeries::new(m, 1, t, values)?;
    save_dataset(dst, &series)
}
