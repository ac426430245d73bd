//! CSV import and export for fields, kernels, control series, trajectories
//! and histories.
//!
//! Every real is written as `{:.16e}` (17 significant digits) with `\n` line
//! endings, so identical inputs give byte-identical files. Readers check the
//! header and require node and time columns to match the grid within `1e-9`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::grid::{Field, Grid, KernelSlice, TimeGrid};

const COORD_TOL: f64 = 1e-9;

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn file_err(path: &str, message: impl ToString) -> Error {
    Error::File {
        path: path.to_string(),
        message: message.to_string(),
    }
}

/// A header row followed by rows of reals.
fn write_rows<W: Write>(out: W, name: &str, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(header).map_err(|e| file_err(name, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| file_err(name, e))?;
    }
    w.flush().map_err(|e| file_err(name, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| file_err(&path.display().to_string(), e))
}

fn read_rows<R: Read>(input: R, name: &str, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| file_err(name, e))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    if found != header {
        return Err(file_err(name, format!("expected header {}, found {}", header.join(","), found.join(","))));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| file_err(name, e))?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| file_err(name, format!("row {}: cannot parse {s:?} as a number", k + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(file_err(name, format!("row {}: expected {} columns", k + 1, header.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| file_err(&path.display().to_string(), e))
}

fn check_coord(name: &str, row: usize, what: &str, got: f64, expected: f64) -> Result<()> {
    if (got - expected).abs() > COORD_TOL * expected.abs().max(1.0) {
        return Err(file_err(name, format!("row {}: {what} = {got} does not match grid value {expected}", row + 1)));
    }
    Ok(())
}

fn check_count(name: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(file_err(name, format!("{got} data rows, expected {expected}")));
    }
    Ok(())
}

pub fn write_field_to<W: Write>(out: W, field: &Field, grid: &Grid) -> Result<()> {
    let rows = grid
        .nodes()
        .iter()
        .zip(field.iter())
        .map(|(&y, &v)| vec![format_real(y), format_real(v)]);
    write_rows(out, "field", &["y", "value"], rows)
}

pub fn read_field_from<R: Read>(input: R, name: &str, grid: &Grid) -> Result<Field> {
    let rows = read_rows(input, name, &["y", "value"])?;
    check_count(name, rows.len(), grid.len())?;
    for (i, row) in rows.iter().enumerate() {
        check_coord(name, i, "y", row[0], grid.nodes()[i])?;
    }
    Field::new(rows.into_iter().map(|r| r[1]).collect()).map_err(|e| file_err(name, e))
}

pub fn write_kernel_to<W: Write>(out: W, kernel: &KernelSlice, grid: &Grid) -> Result<()> {
    let y = grid.nodes();
    let n = grid.len();
    let rows = (0..n * n).map(|k| {
        let (i, j) = (k / n, k % n);
        vec![format_real(y[i]), format_real(y[j]), format_real(kernel.get(i, j))]
    });
    write_rows(out, "kernel", &["y", "z", "value"], rows)
}

pub fn read_kernel_from<R: Read>(input: R, name: &str, grid: &Grid) -> Result<KernelSlice> {
    let rows = read_rows(input, name, &["y", "z", "value"])?;
    let n = grid.len();
    check_count(name, rows.len(), n * n)?;
    let mut m = nalgebra::DMatrix::zeros(n, n);
    for (k, row) in rows.iter().enumerate() {
        let (i, j) = (k / n, k % n);
        check_coord(name, k, "y", row[0], grid.nodes()[i])?;
        check_coord(name, k, "z", row[1], grid.nodes()[j])?;
        m[(i, j)] = row[2];
    }
    KernelSlice::new(m).map_err(|e| file_err(name, e))
}

/// Bias slices as `t,y,value` at the control times `t_0 … t_{steps−1}`.
pub fn write_bias_series_to<W: Write>(out: W, a: &[Field], grid: &Grid, time: &TimeGrid) -> Result<()> {
    let rows = a.iter().enumerate().flat_map(|(l, f)| {
        let t = time.time(l);
        grid.nodes()
            .iter()
            .zip(f.iter())
            .map(move |(&y, &v)| vec![format_real(t), format_real(y), format_real(v)])
    });
    write_rows(out, "bias series", &["t", "y", "value"], rows)
}

pub fn read_bias_series_from<R: Read>(input: R, name: &str, grid: &Grid, time: &TimeGrid) -> Result<Vec<Field>> {
    let rows = read_rows(input, name, &["t", "y", "value"])?;
    let n = grid.len();
    check_count(name, rows.len(), n * time.steps())?;
    let mut out = Vec::with_capacity(time.steps());
    for (l, chunk) in rows.chunks(n).enumerate() {
        for (i, row) in chunk.iter().enumerate() {
            check_coord(name, l * n + i, "t", row[0], time.time(l))?;
            check_coord(name, l * n + i, "y", row[1], grid.nodes()[i])?;
        }
        out.push(Field::new(chunk.iter().map(|r| r[2]).collect()).map_err(|e| file_err(name, e))?);
    }
    Ok(out)
}

/// Kernel slices as `t,y,z,value`, row-major within each time.
pub fn write_kernel_series_to<W: Write>(out: W, b: &[KernelSlice], grid: &Grid, time: &TimeGrid) -> Result<()> {
    let n = grid.len();
    let y = grid.nodes();
    let rows = b.iter().enumerate().flat_map(move |(l, k)| {
        let t = time.time(l);
        (0..n * n).map(move |idx| {
            let (i, j) = (idx / n, idx % n);
            vec![format_real(t), format_real(y[i]), format_real(y[j]), format_real(k.get(i, j))]
        })
    });
    write_rows(out, "kernel series", &["t", "y", "z", "value"], rows)
}

pub fn read_kernel_series_from<R: Read>(input: R, name: &str, grid: &Grid, time: &TimeGrid) -> Result<Vec<KernelSlice>> {
    let rows = read_rows(input, name, &["t", "y", "z", "value"])?;
    let n = grid.len();
    check_count(name, rows.len(), n * n * time.steps())?;
    let mut out = Vec::with_capacity(time.steps());
    for (l, chunk) in rows.chunks(n * n).enumerate() {
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for (k, row) in chunk.iter().enumerate() {
            let (i, j) = (k / n, k % n);
            let at = l * n * n + k;
            check_coord(name, at, "t", row[0], time.time(l))?;
            check_coord(name, at, "y", row[1], grid.nodes()[i])?;
            check_coord(name, at, "z", row[2], grid.nodes()[j])?;
            m[(i, j)] = row[3];
        }
        out.push(KernelSlice::new(m).map_err(|e| file_err(name, e))?);
    }
    Ok(out)
}

/// States (or co-states) at `t_0 … t_steps` as `t,y,value`.
pub fn write_states_to<W: Write>(out: W, states: &[Field], grid: &Grid, time: &TimeGrid) -> Result<()> {
    let rows = states.iter().enumerate().flat_map(|(l, f)| {
        let t = time.time(l);
        grid.nodes()
            .iter()
            .zip(f.iter())
            .map(move |(&y, &v)| vec![format_real(t), format_real(y), format_real(v)])
    });
    write_rows(out, "trajectory", &["t", "y", "value"], rows)
}

pub fn read_states_from<R: Read>(input: R, name: &str, grid: &Grid, time: &TimeGrid) -> Result<Vec<Field>> {
    let rows = read_rows(input, name, &["t", "y", "value"])?;
    let n = grid.len();
    if rows.len() % n != 0 || rows.len() / n > time.steps() + 1 {
        return Err(file_err(name, format!("{} rows do not form whole time slices", rows.len())));
    }
    rows.chunks(n)
        .enumerate()
        .map(|(l, chunk)| {
            for (i, row) in chunk.iter().enumerate() {
                check_coord(name, l * n + i, "t", row[0], time.time(l))?;
                check_coord(name, l * n + i, "y", row[1], grid.nodes()[i])?;
            }
            Field::new(chunk.iter().map(|r| r[2]).collect()).map_err(|e| file_err(name, e))
        })
        .collect()
}

/// Named columns sharing one time axis, e.g. Lyapunov traces.
pub fn write_columns_to<W: Write>(out: W, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    let len = columns.iter().map(|c| c.len()).max().unwrap_or(0);
    let rows = (0..len).map(|k| {
        columns
            .iter()
            .map(|c| c.get(k).map_or_else(String::new, |&v| format_real(v)))
            .collect()
    });
    write_rows(out, "table", header, rows)
}

/// `iter,value` with integer iteration counters.
pub fn write_history_to<W: Write>(out: W, values: &[f64]) -> Result<()> {
    let rows = values.iter().enumerate().map(|(k, &v)| vec![k.to_string(), format_real(v)]);
    write_rows(out, "history", &["iter", "value"], rows)
}

macro_rules! path_variants {
    ($( $write:ident => $write_to:ident ( $($arg:ident : $ty:ty),* ); )*) => {
        $(
            pub fn $write(path: &Path, $($arg: $ty),*) -> Result<()> {
                let name = path.display().to_string();
                let mut w = create(path)?;
                $write_to(&mut w, $($arg),*)?;
                w.flush().map_err(|e| file_err(&name, e))
            }
        )*
    };
}

path_variants! {
    write_field => write_field_to(field: &Field, grid: &Grid);
    write_kernel => write_kernel_to(kernel: &KernelSlice, grid: &Grid);
    write_bias_series => write_bias_series_to(a: &[Field], grid: &Grid, time: &TimeGrid);
    write_kernel_series => write_kernel_series_to(b: &[KernelSlice], grid: &Grid, time: &TimeGrid);
    write_states => write_states_to(states: &[Field], grid: &Grid, time: &TimeGrid);
    write_columns => write_columns_to(header: &[&str], columns: &[&[f64]]);
    write_history => write_history_to(values: &[f64]);
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, grid: &Grid) -> Result<()> {
    write_states(path, &traj.states, grid, &traj.time)
}

pub fn read_field(path: &Path, grid: &Grid) -> Result<Field> {
    read_field_from(open(path)?, &path.display().to_string(), grid)
}

pub fn read_kernel(path: &Path, grid: &Grid) -> Result<KernelSlice> {
    read_kernel_from(open(path)?, &path.display().to_string(), grid)
}

pub fn read_bias_series(path: &Path, grid: &Grid, time: &TimeGrid) -> Result<Vec<Field>> {
    read_bias_series_from(open(path)?, &path.display().to_string(), grid, time)
}

pub fn read_kernel_series(path: &Path, grid: &Grid, time: &TimeGrid) -> Result<Vec<KernelSlice>> {
    read_kernel_series_from(open(path)?, &path.display().to_string(), grid, time)
}

pub fn read_states(path: &Path, grid: &Grid, time: &TimeGrid) -> Result<Vec<Field>> {
    read_states_from(open(path)?, &path.display().to_string(), grid, time)
}
