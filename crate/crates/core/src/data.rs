//! Domain types and CSV ingestion.
//!
//! A [`Dataset`] couples cluster-level records (outcome counts, offsets,
//! covariates) with cell-level records (error-prone exposure predictions,
//! features, optional gold-standard measurements) and an optional adjacency
//! structure between clusters. String identifiers from the input files are
//! mapped to dense indices at load time; all downstream math works on
//! indices.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

/// One cluster: outcome count `y`, person-time offset, covariate vector and
/// the range of its member cells inside [`Dataset::cells`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub cluster_id: String,
    pub y: u64,
    pub n_offset: f64,
    pub x: Vec<f64>,
    pub cell_range: Range<usize>,
}

impl ClusterRecord {
    /// Event rate `y / n_offset`.
    pub fn ybar(&self) -> f64 {
        self.y as f64 / self.n_offset
    }

    /// Number of member cells.
    pub fn n_cells(&self) -> usize {
        self.cell_range.len()
    }
}

/// One cell: error-prone exposure prediction `s_tilde`, feature vector `w`,
/// and the gold-standard measurement when the cell is in the validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell_id: String,
    /// Dense index of the parent cluster.
    pub cluster: usize,
    pub s_tilde: f64,
    pub s_observed: Option<f64>,
    pub w: Vec<f64>,
}

/// Symmetric cluster adjacency stored as neighbor lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// All-empty adjacency over `n` clusters (spatial effect disabled).
    pub fn empty(n: usize) -> Self {
        Adjacency {
            neighbors: vec![Vec::new(); n],
        }
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// True when no edges exist, in which case the CAR effect is disabled.
    pub fn is_empty(&self) -> bool {
        self.neighbors.iter().all(Vec::is_empty)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }
}

/// A validated dataset: clusters, cells grouped by cluster, adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clusters: Vec<ClusterRecord>,
    pub cells: Vec<CellRecord>,
    pub adjacency: Adjacency,
    /// Covariate dimension.
    pub p: usize,
    /// Cell feature dimension.
    pub q: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    pub fn m(&self) -> usize {
        self.cells.len()
    }

    /// Cells belonging to cluster `i`.
    pub fn cells_of(&self, i: usize) -> &[CellRecord] {
        &self.cells[self.clusters[i].cell_range.clone()]
    }

    /// Indices of cells with a gold-standard measurement.
    pub fn validation_cells(&self) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&j| self.cells[j].s_observed.is_some())
            .collect()
    }

    pub fn validation_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| c.s_observed.is_some())
            .count()
    }

    pub fn ybar(&self) -> Vec<f64> {
        self.clusters.iter().map(ClusterRecord::ybar).collect()
    }

    pub fn offsets(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.n_offset).collect()
    }

    /// Builds a dataset from in-memory parts, grouping cells by cluster and
    /// checking every invariant the CSV loader enforces.
    pub fn from_parts(
        mut clusters: Vec<ClusterRecord>,
        cells: Vec<(String, String, f64, Option<f64>, Vec<f64>)>,
        adjacency: Option<Adjacency>,
    ) -> Result<Dataset> {
        let p = clusters.first().map_or(0, |c| c.x.len());
        let mut index = HashMap::new();
        for (i, c) in clusters.iter().enumerate() {
            if index.insert(c.cluster_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate cluster_id \"{}\"",
                    c.cluster_id
                )));
            }
            if c.x.len() != p {
                return Err(Error::Validation(format!(
                    "cluster \"{}\": covariate length {} != {}",
                    c.cluster_id,
                    c.x.len(),
                    p
                )));
            }
            if !(c.n_offset > 0.0) || !c.n_offset.is_finite() {
                return Err(Error::Validation(format!(
                    "cluster \"{}\": n_offset must be positive and finite",
                    c.cluster_id
                )));
            }
        }

        let q = cells.first().map_or(0, |c| c.4.len());
        let mut grouped: Vec<Vec<CellRecord>> = vec![Vec::new(); clusters.len()];
        for (cell_id, cluster_id, s_tilde, s_observed, w) in cells {
            let &i = index.get(&cluster_id).ok_or_else(|| {
                Error::Validation(format!(
                    "cell \"{cell_id}\" references unknown cluster \"{cluster_id}\""
                ))
            })?;
            if w.len() != q {
                return Err(Error::Validation(format!(
                    "cell \"{cell_id}\": feature length {} != {}",
                    w.len(),
                    q
                )));
            }
            grouped[i].push(CellRecord {
                cell_id,
                cluster: i,
                s_tilde,
                s_observed,
                w,
            });
        }

        let mut flat = Vec::new();
        for (i, group) in grouped.into_iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Validation(format!(
                    "cluster \"{}\" has no cells",
                    clusters[i].cluster_id
                )));
            }
            let start = flat.len();
            flat.extend(group);
            clusters[i].cell_range = start..flat.len();
        }

        let adjacency = adjacency.unwrap_or_else(|| Adjacency::empty(clusters.len()));
        if adjacency.neighbors.len() != clusters.len() {
            return Err(Error::Validation(
                "adjacency dimension does not match cluster count".into(),
            ));
        }

        Ok(Dataset {
            clusters,
            cells: flat,
            adjacency,
            p,
            q,
        })
    }

    /// Loads and validates a dataset from CSV files.
    ///
    /// `clusters.csv` header: `cluster_id,y,n_offset,x1..xp` (p inferred).
    /// `cells.csv` header: `cell_id,cluster_id,s_tilde,s_observed,w1..wq`;
    /// an empty `s_observed` field means unobserved.
    /// `adjacency.csv` header: `cluster_id_a,cluster_id_b`, one edge per row,
    /// symmetrized on load. A missing adjacency file disables the spatial
    /// effect.
    pub fn load(
        clusters_path: &Path,
        cells_path: &Path,
        adjacency_path: Option<&Path>,
    ) -> Result<Dataset> {
        let (clusters, index, _p) = load_clusters(clusters_path)?;
        let (cells, _q) = load_cells(cells_path, &index)?;
        let adjacency = match adjacency_path {
            Some(path) => Some(load_adjacency(path, &index, clusters.len())?),
            None => None,
        };
        let cells = cells
            .into_iter()
            .map(|c| (c.cell_id, index_name(&clusters, c.cluster), c.s_tilde, c.s_observed, c.w))
            .collect();
        let ds = Dataset::from_parts(clusters, cells, adjacency)?;
        Ok(ds)
    }

    /// Writes `clusters.csv` and `cells.csv` under `dir`. Numeric fields use
    /// the shortest round-trip representation, so a write/load cycle
    /// reproduces the dataset exactly.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let cl_path = dir.join("clusters.csv");
        let mut out = buf_writer(&cl_path)?;
        let mut header = String::from("cluster_id,y,n_offset");
        for k in 1..=self.p {
            header.push_str(&format!(",x{k}"));
        }
        wln(&mut out, &cl_path, &header)?;
        for c in &self.clusters {
            let mut line = format!("{},{},{}", c.cluster_id, c.y, fmt(c.n_offset));
            for v in &c.x {
                line.push(',');
                line.push_str(&fmt(*v));
            }
            wln(&mut out, &cl_path, &line)?;
        }
        out.flush()
            .map_err(|e| Error::Io { path: cl_path.clone(), source: e })?;

        let ce_path = dir.join("cells.csv");
        let mut out = buf_writer(&ce_path)?;
        let mut header = String::from("cell_id,cluster_id,s_tilde,s_observed");
        for k in 1..=self.q {
            header.push_str(&format!(",w{k}"));
        }
        wln(&mut out, &ce_path, &header)?;
        for c in &self.cells {
            let observed = c.s_observed.map(|v| fmt(v)).unwrap_or_default();
            let mut line = format!(
                "{},{},{},{}",
                c.cell_id,
                self.clusters[c.cluster].cluster_id,
                fmt(c.s_tilde),
                observed
            );
            for v in &c.w {
                line.push(',');
                line.push_str(&fmt(*v));
            }
            wln(&mut out, &ce_path, &line)?;
        }
        out.flush()
            .map_err(|e| Error::Io { path: ce_path.clone(), source: e })?;

        if !self.adjacency.is_empty() {
            self.write_adjacency(&dir.join("adjacency.csv"))?;
        }
        Ok(())
    }

    pub fn write_adjacency(&self, path: &Path) -> Result<()> {
        let mut out = buf_writer(path)?;
        wln(&mut out, path, "cluster_id_a,cluster_id_b")?;
        for (i, nbrs) in self.adjacency.neighbors.iter().enumerate() {
            for &j in nbrs {
                if i < j {
                    let line = format!(
                        "{},{}",
                        self.clusters[i].cluster_id, self.clusters[j].cluster_id
                    );
                    wln(&mut out, path, &line)?;
                }
            }
        }
        out.flush()
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Ok(())
    }
}

fn index_name(clusters: &[ClusterRecord], i: usize) -> String {
    clusters[i].cluster_id.clone()
}

/// Per-cluster aggregates of the error-prone predictions: `z_tilde` is the
/// plain mean of `s_tilde`, `z_hat` the mean of calibrated predictions when
/// a calibration has been run.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateExposures {
    pub z_tilde: Vec<f64>,
    pub z_hat: Option<Vec<f64>>,
}

/// Computes the per-cluster mean of the error-prone predictions.
pub fn aggregate_epe(ds: &Dataset) -> AggregateExposures {
    let z_tilde = (0..ds.n())
        .map(|i| {
            let cells = ds.cells_of(i);
            cells.iter().map(|c| c.s_tilde).sum::<f64>() / cells.len() as f64
        })
        .collect();
    AggregateExposures {
        z_tilde,
        z_hat: None,
    }
}

fn buf_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn wln(out: &mut BufWriter<File>, path: &Path, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Shortest representation that parses back to the identical f64.
fn fmt(v: f64) -> String {
    format!("{v}")
}

struct RawCell {
    cell_id: String,
    cluster: usize,
    s_tilde: f64,
    s_observed: Option<f64>,
    w: Vec<f64>,
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file))
}

fn parse_f64(field: &str, name: &str, path: &Path, line: u64) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("non-numeric {name} field \"{field}\""),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{name} is not finite"),
        });
    }
    Ok(v)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn load_clusters(path: &Path) -> Result<(Vec<ClusterRecord>, HashMap<String, usize>, usize)> {
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?
        .clone();
    let fixed = ["cluster_id", "y", "n_offset"];
    for (k, want) in fixed.iter().enumerate() {
        if headers.get(k).map(str::trim) != Some(*want) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column \"{want}\" (header: {headers:?})"),
            });
        }
    }
    let p = headers.len() - fixed.len();
    for k in 0..p {
        let want = format!("x{}", k + 1);
        if headers.get(fixed.len() + k).map(str::trim) != Some(want.as_str()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected covariate column \"{want}\""),
            });
        }
    }

    let mut clusters = Vec::new();
    let mut index = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        let line = record_line(&record);
        let id = record.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "empty cluster_id".into(),
            });
        }
        let y_field = record.get(1).unwrap_or("");
        let y: u64 = y_field.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("y must be a nonnegative integer, got \"{y_field}\""),
        })?;
        let n_offset = parse_f64(record.get(2).unwrap_or(""), "n_offset", path, line)?;
        if n_offset <= 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "n_offset must be positive".into(),
            });
        }
        let mut x = Vec::with_capacity(p);
        for k in 0..p {
            x.push(parse_f64(
                record.get(3 + k).unwrap_or(""),
                &format!("x{}", k + 1),
                path,
                line,
            )?);
        }
        if index.insert(id.clone(), clusters.len()).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate cluster_id \"{id}\""),
            });
        }
        clusters.push(ClusterRecord {
            cluster_id: id,
            y,
            n_offset,
            x,
            cell_range: 0..0,
        });
    }
    Ok((clusters, index, p))
}

fn load_cells(path: &Path, index: &HashMap<String, usize>) -> Result<(Vec<RawCell>, usize)> {
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?
        .clone();
    let fixed = ["cell_id", "cluster_id", "s_tilde", "s_observed"];
    for (k, want) in fixed.iter().enumerate() {
        if headers.get(k).map(str::trim) != Some(*want) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column \"{want}\" (header: {headers:?})"),
            });
        }
    }
    let q = headers.len() - fixed.len();
    for k in 0..q {
        let want = format!("w{}", k + 1);
        if headers.get(fixed.len() + k).map(str::trim) != Some(want.as_str()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected feature column \"{want}\""),
            });
        }
    }

    let mut cells = Vec::new();
    let mut seen = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        let line = record_line(&record);
        let cell_id = record.get(0).unwrap_or("").trim().to_string();
        if cell_id.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "empty cell_id".into(),
            });
        }
        if seen.insert(cell_id.clone(), line).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate cell_id \"{cell_id}\""),
            });
        }
        let cluster_id = record.get(1).unwrap_or("").trim();
        let &cluster = index.get(cluster_id).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("unknown cluster_id \"{cluster_id}\""),
        })?;
        let s_tilde = parse_f64(record.get(2).unwrap_or(""), "s_tilde", path, line)?;
        let s_field = record.get(3).unwrap_or("").trim();
        let s_observed = if s_field.is_empty() {
            None
        } else {
            Some(parse_f64(s_field, "s_observed", path, line)?)
        };
        let mut w = Vec::with_capacity(q);
        for k in 0..q {
            w.push(parse_f64(
                record.get(4 + k).unwrap_or(""),
                &format!("w{}", k + 1),
                path,
                line,
            )?);
        }
        cells.push(RawCell {
            cell_id,
            cluster,
            s_tilde,
            s_observed,
            w,
        });
    }
    Ok((cells, q))
}

fn load_adjacency(path: &Path, index: &HashMap<String, usize>, n: usize) -> Result<Adjacency> {
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?
        .clone();
    for (k, want) in ["cluster_id_a", "cluster_id_b"].iter().enumerate() {
        if headers.get(k).map(str::trim) != Some(*want) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column \"{want}\""),
            });
        }
    }
    let mut neighbors = vec![Vec::new(); n];
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        let line = record_line(&record);
        let mut pair = [0usize; 2];
        for (k, slot) in pair.iter_mut().enumerate() {
            let id = record.get(k).unwrap_or("").trim();
            *slot = *index.get(id).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("unknown cluster_id \"{id}\""),
            })?;
        }
        let [a, b] = pair;
        if a == b {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "self-adjacency is not allowed".into(),
            });
        }
        if !neighbors[a].contains(&b) {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
    }
    for nbrs in &mut neighbors {
        nbrs.sort_unstable();
    }
    Ok(Adjacency { neighbors })
}
