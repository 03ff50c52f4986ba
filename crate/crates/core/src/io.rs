//! Data persistence: the matrix file format (binary with a CSV alternative
//! of identical semantics), JSON checkpoints, and CSV report writers.
//!
//! Binary layout, all little-endian:
//! magic `STSEPMTX`, version u32, flags u32 (bit 0 row-major, bit 1 grid
//! present, bit 2 times present), rows u64, cols u64, optional grid height
//! and width u64, `rows * cols` f64 payload, optional `rows` f64 times.
//!
//! The CSV form carries the same information: optional `# grid: HxW` and
//! `# times: ...` comment lines followed by comma-separated rows. Floats are
//! written in shortest round-trip form, so CSV and binary interconvert
//! losslessly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, DataMatrix, ElboBreakdown, GridGeometry};

const MAGIC: &[u8; 8] = b"STSEPMTX";
const VERSION: u32 = 1;
const FLAG_ROW_MAJOR: u32 = 1;
const FLAG_GRID: u32 = 2;
const FLAG_TIMES: u32 = 4;

/// Reads a matrix file, binary or CSV (detected by content).
pub fn read_matrix(path: &Path) -> Result<DataMatrix> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 8];
    let n = file.read(&mut head)?;
    if n == 8 && &head == MAGIC {
        read_binary(file)
    } else {
        drop(file);
        read_csv(path)
    }
}

/// Writes a matrix file; a `.csv` extension selects the CSV form.
pub fn write_matrix(data: &DataMatrix, path: &Path) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        write_csv(data, path)
    } else {
        write_binary(data, path)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::MalformedHeader("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::MalformedHeader("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64_block(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::SizeMismatch(format!("{what}: expected {count} values")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_binary(mut file: File) -> Result<DataMatrix> {
    let version = read_u32(&mut file)?;
    if version != VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let flags = read_u32(&mut file)?;
    if flags & FLAG_ROW_MAJOR == 0 {
        return Err(Error::MalformedHeader(
            "column-major payloads are not supported".into(),
        ));
    }
    let rows = read_u64(&mut file)? as usize;
    let cols = read_u64(&mut file)? as usize;
    let grid = if flags & FLAG_GRID != 0 {
        let height = read_u64(&mut file)? as usize;
        let width = read_u64(&mut file)? as usize;
        if height * width != cols {
            return Err(Error::MalformedHeader(format!(
                "grid {height}x{width} does not cover {cols} columns"
            )));
        }
        GridGeometry::Lattice { height, width }
    } else {
        GridGeometry::Flat { len: cols }
    };

    let payload = read_f64_block(&mut file, rows * cols, "payload")?;
    let times = if flags & FLAG_TIMES != 0 {
        Some(Array1::from_vec(read_f64_block(&mut file, rows, "times")?))
    } else {
        None
    };
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::SizeMismatch(format!(
            "{} trailing bytes after payload",
            rest.len()
        )));
    }

    let values = Array2::from_shape_vec((rows, cols), payload)
        .map_err(|e| Error::SizeMismatch(e.to_string()))?;
    DataMatrix::new(values, times, grid)
}

fn write_binary(data: &DataMatrix, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let mut flags = FLAG_ROW_MAJOR;
    if matches!(data.grid, GridGeometry::Lattice { .. }) {
        flags |= FLAG_GRID;
    }
    if data.observed_times.is_some() {
        flags |= FLAG_TIMES;
    }
    out.write_all(&flags.to_le_bytes())?;
    out.write_all(&(data.n_subjects() as u64).to_le_bytes())?;
    out.write_all(&(data.n_features() as u64).to_le_bytes())?;
    if let GridGeometry::Lattice { height, width } = data.grid {
        out.write_all(&(height as u64).to_le_bytes())?;
        out.write_all(&(width as u64).to_le_bytes())?;
    }
    for v in data.values.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    if let Some(times) = &data.observed_times {
        for t in times.iter() {
            out.write_all(&t.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_csv(path: &Path) -> Result<DataMatrix> {
    let reader = BufReader::new(File::open(path)?);
    let mut grid: Option<GridGeometry> = None;
    let mut times: Option<Array1<f64>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(spec) = comment.strip_prefix("grid:") {
                let dims: Vec<&str> = spec.trim().split('x').collect();
                if dims.len() != 2 {
                    return Err(Error::MalformedHeader(format!("bad grid spec '{spec}'")));
                }
                let height = dims[0].trim().parse::<usize>().map_err(|e| {
                    Error::MalformedHeader(format!("grid height: {e}"))
                })?;
                let width = dims[1].trim().parse::<usize>().map_err(|e| {
                    Error::MalformedHeader(format!("grid width: {e}"))
                })?;
                grid = Some(GridGeometry::Lattice { height, width });
            } else if let Some(spec) = comment.strip_prefix("times:") {
                let parsed: std::result::Result<Vec<f64>, _> = spec
                    .trim()
                    .split(',')
                    .map(|tok| tok.trim().parse::<f64>())
                    .collect();
                times = Some(Array1::from_vec(parsed.map_err(|e| {
                    Error::Parse(format!("times on line {}: {e}", lineno + 1))
                })?));
            }
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = trimmed
            .split(',')
            .map(|tok| tok.trim().parse::<f64>())
            .collect();
        rows.push(parsed.map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?);
    }

    if rows.is_empty() {
        return Err(Error::MalformedHeader("no data rows".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::SizeMismatch("ragged CSV rows".into()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let nrows = flat.len() / cols;
    let values = Array2::from_shape_vec((nrows, cols), flat)
        .map_err(|e| Error::SizeMismatch(e.to_string()))?;
    let grid = grid.unwrap_or(GridGeometry::Flat { len: cols });
    DataMatrix::new(values, times, grid)
}

fn write_csv(data: &DataMatrix, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    if let GridGeometry::Lattice { height, width } = data.grid {
        writeln!(out, "# grid: {height}x{width}")?;
    }
    if let Some(times) = &data.observed_times {
        let joined: Vec<String> = times.iter().map(|t| format!("{t}")).collect();
        writeln!(out, "# times: {}", joined.join(","))?;
    }
    for row in data.values.rows() {
        let joined: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", joined.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a checkpoint as a pretty JSON document.
pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, ckpt)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = BufReader::new(File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(file)?;
    if ckpt.format_version != Checkpoint::FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported checkpoint version {}",
            ckpt.format_version
        )));
    }
    Ok(ckpt)
}

/// Writes a fit trace as CSV: iteration, the five bound terms, total.
pub fn write_trace_csv(iterations: &[ElboBreakdown], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "iteration,loglik,constraint,kl_spatial,kl_freq,kl_weights,total"
    )?;
    for (i, b) in iterations.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{}",
            b.loglik, b.constraint, b.kl_spatial, b.kl_freq, b.kl_weights, b.total
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a model-selection sweep as CSV, one row per (fold, candidate).
pub fn write_sweep_csv(cells: &[crate::eval::SweepCell], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "fold,n_sources,final_elbo,converged,map_norms,error")?;
    for c in cells {
        let norms: Vec<String> = c.map_norms.iter().map(|v| format!("{v}")).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.fold,
            c.n_sources,
            c.final_elbo,
            c.converged,
            norms.join(";"),
            c.error.as_deref().unwrap_or("")
        )?;
    }
    out.flush()?;
    Ok(())
}
