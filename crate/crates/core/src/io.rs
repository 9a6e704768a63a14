//! File formats: matrix text files, trajectory CSV, pole specifications and
//! system manifests.
//!
//! Matrix files hold `rows cols` on the first line and then one row per line,
//! entries in 17 significant digits. Trajectory CSV has the header
//! `t,i,u_1..u_m,x_1..x_n,xd_1..xd_n` with one row per (grid time, segment).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Deserialize;

use crate::error::{dim_err, Error, Result};
use crate::invopt::ReferenceBundle;
use crate::linalg::Mat;
use crate::poleplace::{PoleEntry, PoleSpec};
use crate::system::{LtiSystem, TrajectoryData};
use crate::trajref::ReferenceSet;

fn parse_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse(msg.into()))
}

/// Shortest exact-enough decimal: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn format_matrix(m: &Mat) -> String {
    let mut s = format!("{} {}\n", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_f64(m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_matrix(text: &str) -> Result<Mat> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let head = lines.next().ok_or_else(|| Error::Parse("empty matrix file".into()))?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| Error::Parse(format!("bad matrix header '{head}'"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return parse_err(format!("matrix header must be 'rows cols', got '{head}'"));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for (r, line) in lines.by_ref().take(rows).enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("row {}: bad number '{t}'", r + 1))))
            .collect::<Result<_>>()?;
        if vals.len() != cols {
            return parse_err(format!("row {} has {} entries, expected {cols}", r + 1, vals.len()));
        }
        data.extend(vals);
    }
    if data.len() != rows * cols {
        return parse_err(format!("expected {rows} rows, found {}", data.len() / cols.max(1)));
    }
    if lines.next().is_some() {
        return parse_err("trailing data after the last matrix row");
    }
    Ok(Mat::from_row_slice(rows, cols, &data))
}

pub fn write_matrix(path: &Path, m: &Mat) -> Result<()> {
    fs::write(path, format_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Mat> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    parse_matrix(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn header(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (1..=k).map(move |i| format!("{prefix}_{i}"))
}

/// Trajectory data as CSV text. Rows run segment by segment.
pub fn format_trajectory_csv(d: &TrajectoryData) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["t".to_string(), "i".to_string()];
    head.extend(header("u", d.m()));
    head.extend(header("x", d.n()));
    head.extend(header("xd", d.n()));
    w.write_record(&head).map_err(csv_err)?;
    for i in 0..d.segments() {
        for (j, &t) in d.grid().iter().enumerate() {
            let c = d.column(i, j);
            let mut row = vec![fmt_f64(t), i.to_string()];
            row.extend(d.u().column(c).iter().map(|v| fmt_f64(*v)));
            row.extend(d.x().column(c).iter().map(|v| fmt_f64(*v)));
            row.extend(d.xd().column(c).iter().map(|v| fmt_f64(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_trajectory_csv(path: &Path, d: &TrajectoryData) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_trajectory_csv(d)?.as_bytes())?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Columns of a trajectory-style CSV, one entry per row.
#[derive(Debug, Clone)]
pub struct SampleTable {
    pub t: Vec<f64>,
    /// Segment index or trajectory id.
    pub id: Vec<usize>,
    pub u: Option<Mat>,
    pub x: Mat,
    pub xd: Option<Mat>,
}

/// Index of the columns `prefix_1..prefix_k`, requiring contiguous numbering.
fn numbered(headers: &csv::StringRecord, prefix: &str) -> Result<Vec<usize>> {
    let mut found: BTreeMap<usize, usize> = BTreeMap::new();
    for (pos, h) in headers.iter().enumerate() {
        if let Some(k) = h.strip_prefix(prefix).and_then(|r| r.strip_prefix('_')) {
            let k: usize = k.parse().map_err(|_| Error::Parse(format!("bad column name '{h}'")))?;
            if found.insert(k, pos).is_some() {
                return parse_err(format!("duplicate column '{h}'"));
            }
        }
    }
    if found.keys().copied().ne(1..=found.len()) {
        return parse_err(format!("columns {prefix}_* must be numbered 1..k"));
    }
    Ok(found.into_values().collect())
}

pub fn parse_sample_table(text: &str, id_column: &str) -> Result<SampleTable> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = r.headers().map_err(csv_err)?.clone();
    let pos = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing column '{name}'")))
    };
    let (tc, ic) = (pos("t")?, pos(id_column)?);
    let (uc, xc, xdc) = (numbered(&headers, "u")?, numbered(&headers, "x")?, numbered(&headers, "xd")?);
    if xc.is_empty() {
        return parse_err("no state columns x_1..x_n");
    }
    if !xdc.is_empty() && xdc.len() != xc.len() {
        return parse_err(format!("{} xd columns for {} states", xdc.len(), xc.len()));
    }
    let (mut t, mut id) = (Vec::new(), Vec::new());
    let (mut u, mut x, mut xd) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |c: usize| -> Result<f64> {
            let s = rec.get(c).unwrap_or("");
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {}: bad number '{s}'", line + 2)))
        };
        t.push(num(tc)?);
        let s = rec.get(ic).unwrap_or("");
        id.push(s.parse::<usize>().map_err(|_| Error::Parse(format!("row {}: bad index '{s}'", line + 2)))?);
        for &c in &uc {
            u.push(num(c)?);
        }
        for &c in &xc {
            x.push(num(c)?);
        }
        for &c in &xdc {
            xd.push(num(c)?);
        }
    }
    if t.is_empty() {
        return parse_err("no data rows");
    }
    let rows = t.len();
    let mat = |k: usize, v: Vec<f64>| Mat::from_column_slice(k, rows, &v);
    Ok(SampleTable {
        u: (!uc.is_empty()).then(|| mat(uc.len(), u)),
        x: mat(xc.len(), x),
        xd: (!xdc.is_empty()).then(|| mat(xdc.len(), xd)),
        t,
        id,
    })
}

/// Trajectory data from CSV. The segment length is not stored in the file.
pub fn parse_trajectory_csv(text: &str, t_seg: f64) -> Result<TrajectoryData> {
    let tab = parse_sample_table(text, "i")?;
    let (u, xd) = match (tab.u, tab.xd) {
        (Some(u), Some(xd)) => (u, xd),
        _ => return parse_err("trajectory data needs u_* and xd_* columns"),
    };
    let n_seg = tab.id.iter().max().map_or(0, |m| m + 1);
    let rows = tab.t.len();
    if n_seg == 0 || rows % n_seg != 0 {
        return dim_err(format!("{rows} rows do not split into {n_seg} equal segments"));
    }
    let q = rows / n_seg;
    let grid = tab.t[..q].to_vec();
    for (r, (&t, &i)) in tab.t.iter().zip(&tab.id).enumerate() {
        if i != r / q || t != grid[r % q] {
            return parse_err(format!(
                "row {}: expected segment {} at grid time {}, rows must run segment by segment",
                r + 2,
                r / q,
                grid[r % q]
            ));
        }
    }
    TrajectoryData::from_parts(t_seg, n_seg, grid, u, tab.x, xd, None)
}

pub fn read_trajectory_csv(path: &Path, t_seg: f64) -> Result<TrajectoryData> {
    let text = fs::read_to_string(path)?;
    parse_trajectory_csv(&text, t_seg)
}

/// Reference trajectories from CSV. Column `i` (or `traj_id`) names the trajectory; every
/// trajectory must be sampled at the same times. `u_*` columns are ignored.
pub fn parse_reference_csv(text: &str) -> Result<ReferenceSet> {
    let id = if text.lines().next().is_some_and(|h| h.split(',').any(|c| c.trim() == "traj_id")) {
        "traj_id"
    } else {
        "i"
    };
    let tab = parse_sample_table(text, id)?;
    let mut times: Vec<f64> = tab.t.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let ids: Vec<usize> = {
        let mut v = tab.id.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (n, r) = (tab.x.nrows(), ids.len());
    if times.len() * r != tab.t.len() {
        return dim_err("every reference trajectory must be sampled at the same times");
    }
    let mut xi = vec![Mat::from_element(n, r, f64::NAN); times.len()];
    let mut xid = tab.xd.as_ref().map(|_| vec![Mat::from_element(n, r, f64::NAN); times.len()]);
    for row in 0..tab.t.len() {
        let k = times.partition_point(|t| *t < tab.t[row]);
        let c = ids.partition_point(|i| *i < tab.id[row]);
        xi[k].set_column(c, &tab.x.column(row));
        if let (Some(d), Some(src)) = (xid.as_mut(), tab.xd.as_ref()) {
            d[k].set_column(c, &src.column(row));
        }
    }
    if xi.iter().any(|m| m.iter().any(|v| v.is_nan())) {
        return parse_err("duplicate (t, i) rows in reference data");
    }
    ReferenceSet::new(times, xi, xid)
}

pub fn read_reference_csv(path: &Path) -> Result<ReferenceSet> {
    parse_reference_csv(&fs::read_to_string(path)?)
}

pub fn format_bundle_csv(b: &ReferenceBundle) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["t".to_string(), "traj_id".to_string()];
    head.extend(header("u", b.m()));
    head.extend(header("x", b.n()));
    head.extend(header("xd", b.n()));
    w.write_record(&head).map_err(csv_err)?;
    for c in 0..b.samples() {
        let mut row = vec![fmt_f64(b.times()[c]), b.traj_ids()[c].to_string()];
        row.extend(b.u_hat().column(c).iter().map(|v| fmt_f64(*v)));
        row.extend(b.xi_hat().column(c).iter().map(|v| fmt_f64(*v)));
        row.extend(b.xid_hat().column(c).iter().map(|v| fmt_f64(*v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn parse_bundle_csv(text: &str) -> Result<ReferenceBundle> {
    let tab = parse_sample_table(text, "traj_id")?;
    match (tab.u, tab.xd) {
        (Some(u), Some(xd)) => ReferenceBundle::new(tab.x, xd, u, tab.t, tab.id),
        _ => parse_err("closed-loop bundle needs u_* and xd_* columns"),
    }
}

pub fn read_bundle_csv(path: &Path) -> Result<ReferenceBundle> {
    parse_bundle_csv(&fs::read_to_string(path)?)
}

/// Pole specification from a JSON list of `{re, im, multiplicity}`.
pub fn parse_pole_spec(text: &str) -> Result<PoleSpec> {
    let entries: Vec<PoleEntry> =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("pole specification: {e}")))?;
    PoleSpec::new(entries)
}

pub fn read_pole_spec(path: &Path) -> Result<PoleSpec> {
    parse_pole_spec(&fs::read_to_string(path)?)
}

/// Read `A` and `B` matrix files.
pub fn read_system(a: &Path, b: &Path, label: &str) -> Result<LtiSystem> {
    LtiSystem::new(read_matrix(a)?, read_matrix(b)?, label)
}

#[derive(Debug, Clone, Deserialize)]
struct ManifestEntry {
    name: String,
    a: PathBuf,
    b: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
struct Manifest {
    systems: Vec<ManifestEntry>,
}

/// Systems listed in `dir/manifest.json` as `{"systems": [{"name", "a", "b"}]}`,
/// with matrix paths relative to `dir`.
pub fn load_system_dir(dir: &Path) -> Result<Vec<LtiSystem>> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let man: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("system manifest: {e}")))?;
    man.systems
        .iter()
        .map(|e| read_system(&dir.join(&e.a), &dir.join(&e.b), &e.name))
        .collect()
}

/// Vector from a single-column or single-row matrix file.
pub fn matrix_to_vector(m: &Mat) -> Result<DVector<f64>> {
    match m.shape() {
        (_, 1) => Ok(m.column(0).into_owned()),
        (1, _) => Ok(m.row(0).transpose()),
        s => dim_err(format!("expected a vector, got a {}x{} matrix", s.0, s.1)),
    }
}
