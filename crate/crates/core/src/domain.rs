//! Observation window, event data, covariate grids and representative points.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An event `(t, x1, x2)`.
pub type Point = [f64; 3];

/// Spatio-temporal observation domain `[t_min,t_max] x [x1_min,x1_max] x [x2_min,x2_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t_min: f64,
    pub t_max: f64,
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
}

impl Default for Window {
    /// The normalized window `[0,10] x [0,1] x [0,1]`.
    fn default() -> Self {
        Window {
            t_min: 0.0,
            t_max: 10.0,
            x1_min: 0.0,
            x1_max: 1.0,
            x2_min: 0.0,
            x2_max: 1.0,
        }
    }
}

impl Window {
    pub fn new(t: (f64, f64), x1: (f64, f64), x2: (f64, f64)) -> Result<Self> {
        let w = Window {
            t_min: t.0,
            t_max: t.1,
            x1_min: x1.0,
            x1_max: x1.1,
            x2_min: x2.0,
            x2_max: x2.1,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (lo, hi) = self.bounds(axis);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidArgument(format!(
                    "window axis {axis} has bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn bounds(&self, axis: usize) -> (f64, f64) {
        match axis {
            0 => (self.t_min, self.t_max),
            1 => (self.x1_min, self.x1_max),
            2 => (self.x2_min, self.x2_max),
            _ => panic!("axis {axis} out of range"),
        }
    }

    pub fn extent(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds(axis);
        hi - lo
    }

    pub fn volume(&self) -> f64 {
        self.extent(0) * self.extent(1) * self.extent(2)
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| {
            let (lo, hi) = self.bounds(a);
            p[a] >= lo && p[a] <= hi
        })
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        [0, 1, 2].map(|a| {
            let (lo, hi) = self.bounds(a);
            lo + (hi - lo) * rng.gen::<f64>()
        })
    }

    /// Centers of a regular `n[0] x n[1] x n[2]` partition, t-major.
    pub fn cell_centers(&self, n: [usize; 3]) -> Vec<Point> {
        let axis = |a: usize| -> Vec<f64> {
            let (lo, hi) = self.bounds(a);
            let w = (hi - lo) / n[a] as f64;
            (0..n[a]).map(|i| lo + (i as f64 + 0.5) * w).collect()
        };
        let (ts, x1s, x2s) = (axis(0), axis(1), axis(2));
        let mut out = Vec::with_capacity(ts.len() * x1s.len() * x2s.len());
        for &t in &ts {
            for &a in &x1s {
                for &b in &x2s {
                    out.push([t, a, b]);
                }
            }
        }
        out
    }

    /// The same window with the two spatial axes exchanged.
    pub fn swap_space(&self) -> Window {
        Window {
            x1_min: self.x2_min,
            x1_max: self.x2_max,
            x2_min: self.x1_min,
            x2_max: self.x1_max,
            ..*self
        }
    }
}

/// One realization: events sorted by time, no repeated timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    pub seq_id: String,
    pub events: Vec<Point>,
}

impl EventSequence {
    /// Sorts by time and checks window membership and timestamp uniqueness.
    pub fn new(seq_id: impl Into<String>, mut events: Vec<Point>, window: &Window) -> Result<Self> {
        let seq_id = seq_id.into();
        for (i, e) in events.iter().enumerate() {
            if !e.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("event {i} of '{seq_id}'")));
            }
            if !window.contains(e) {
                return Err(Error::OutOfWindow {
                    seq_id: seq_id.clone(),
                    row: i,
                    detail: format!("{e:?}"),
                });
            }
        }
        events.sort_by(|a, b| a[0].total_cmp(&b[0]));
        if let Some(w) = events.windows(2).position(|w| w[0][0] == w[1][0]) {
            return Err(Error::DuplicateEvent {
                seq_id,
                t: events[w][0],
                row: w + 1,
            });
        }
        Ok(EventSequence { seq_id, events })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn first_time(&self) -> Option<f64> {
        self.events.first().map(|e| e[0])
    }
}

/// A dataset: independent realizations over one window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceSet {
    pub sequences: Vec<EventSequence>,
}

impl SequenceSet {
    pub fn new(sequences: Vec<EventSequence>) -> Self {
        SequenceSet { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn mean_events(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.n_events() as f64 / self.len() as f64
        }
    }

    /// First `ceil(fraction * len)` sequences (at least one).
    pub fn fraction(&self, fraction: f64) -> SequenceSet {
        let n = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len().max(1));
        SequenceSet::new(self.sequences.iter().take(n).cloned().collect())
    }
}

/// Formats with 12 significant digits, shortest round-trip form.
pub fn format_number(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    format!("{rounded}")
}

fn parse_field(rec: &csv::StringRecord, idx: usize, row: usize, name: &str) -> Result<f64> {
    let raw = rec.get(idx).ok_or_else(|| Error::MalformedRow {
        row,
        reason: format!("missing column '{name}'"),
    })?;
    raw.trim().parse::<f64>().map_err(|_| Error::MalformedRow {
        row,
        reason: format!("column '{name}' is not a number: '{raw}'"),
    })
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_err(row: usize, e: csv::Error) -> Error {
    Error::MalformedRow {
        row,
        reason: e.to_string(),
    }
}

/// Reads an events CSV with header `seq_id,t,x1,x2`. Row numbers in errors
/// are file line numbers (the header is line 1).
pub fn load_sequences(path: impl AsRef<Path>, window: &Window) -> Result<SequenceSet> {
    let path = path.as_ref();
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(1, e))?.clone();
    let expected = ["seq_id", "t", "x1", "x2"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::MalformedRow {
            row: 1,
            reason: format!("expected header seq_id,t,x1,x2, found {:?}", headers),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(Point, usize)>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| csv_err(row, e))?;
        if rec.len() != 4 {
            return Err(Error::MalformedRow {
                row,
                reason: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let id = rec.get(0).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(Error::MalformedRow {
                row,
                reason: "empty seq_id".into(),
            });
        }
        let p = [
            parse_field(&rec, 1, row, "t")?,
            parse_field(&rec, 2, row, "x1")?,
            parse_field(&rec, 3, row, "x2")?,
        ];
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::MalformedRow {
                row,
                reason: "non-finite coordinate".into(),
            });
        }
        if !window.contains(&p) {
            return Err(Error::OutOfWindow {
                seq_id: id,
                row,
                detail: format!("({}, {}, {})", p[0], p[1], p[2]),
            });
        }
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push((p, row));
    }

    let mut sequences = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]));
        if let Some(w) = rows.windows(2).find(|w| w[0].0[0] == w[1].0[0]) {
            return Err(Error::DuplicateEvent {
                seq_id: id,
                t: w[1].0[0],
                row: w[0].1.max(w[1].1),
            });
        }
        sequences.push(EventSequence {
            seq_id: id,
            events: rows.into_iter().map(|(p, _)| p).collect(),
        });
    }
    Ok(SequenceSet::new(sequences))
}

/// Writes an events CSV. Sequences with no events leave no rows.
pub fn write_sequences(set: &SequenceSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "seq_id,t,x1,x2").map_err(io)?;
    for s in &set.sequences {
        for e in &s.events {
            writeln!(
                w,
                "{},{},{},{}",
                s.seq_id,
                format_number(e[0]),
                format_number(e[1]),
                format_number(e[2])
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Covariate vectors sampled on a regular (t, x1, x2) grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateGrid {
    knots: [Vec<f64>; 3],
    k: usize,
    /// Row-major over (t, x1, x2), `k` values per cell.
    values: Vec<f64>,
}

impl CovariateGrid {
    pub fn new(knots: [Vec<f64>; 3], k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Shape("covariate dimension must be positive".into()));
        }
        for (a, ks) in knots.iter().enumerate() {
            if ks.is_empty() {
                return Err(Error::Shape(format!("axis {a} has no knots")));
            }
            if ks.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Shape(format!("axis {a} knots not strictly increasing")));
            }
        }
        let cells = knots.iter().map(|k| k.len()).product::<usize>();
        if values.len() != cells * k {
            return Err(Error::Shape(format!(
                "expected {} covariate values, found {}",
                cells * k,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("covariate value {i}")));
        }
        Ok(CovariateGrid { knots, k, values })
    }

    /// Samples `f` at every knot of the Cartesian grid.
    pub fn from_fn<F: Fn(&Point) -> Vec<f64>>(knots: [Vec<f64>; 3], k: usize, f: F) -> Result<Self> {
        let mut values = Vec::new();
        for &t in &knots[0] {
            for &a in &knots[1] {
                for &b in &knots[2] {
                    let z = f(&[t, a, b]);
                    if z.len() != k {
                        return Err(Error::Shape(format!("covariate function returned {} values", z.len())));
                    }
                    values.extend(z);
                }
            }
        }
        Self::new(knots, k, values)
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn knots(&self, axis: usize) -> &[f64] {
        &self.knots[axis]
    }

    pub fn n_cells(&self) -> usize {
        self.knots.iter().map(|k| k.len()).product()
    }

    pub fn cell(&self, idx: [usize; 3]) -> &[f64] {
        let n1 = self.knots[1].len();
        let n2 = self.knots[2].len();
        let flat = (idx[0] * n1 + idx[1]) * n2 + idx[2];
        &self.values[flat * self.k..(flat + 1) * self.k]
    }

    /// Index of the knot nearest to `x` on `axis`; ties go to the lower index.
    pub fn nearest_knot(&self, axis: usize, x: f64) -> usize {
        let ks = &self.knots[axis];
        let hi = ks.partition_point(|&k| k < x);
        if hi == 0 {
            return 0;
        }
        if hi == ks.len() {
            return ks.len() - 1;
        }
        let lo = hi - 1;
        if (x - ks[lo]) <= (ks[hi] - x) {
            lo
        } else {
            hi
        }
    }

    /// Covariate vector at the per-axis nearest knot.
    pub fn lookup(&self, p: &Point) -> &[f64] {
        self.cell([0, 1, 2].map(|a| self.nearest_knot(a, p[a])))
    }

    /// The same grid with the x1 and x2 axes exchanged.
    pub fn swap_space(&self) -> CovariateGrid {
        let [t, a, b] = &self.knots;
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..t.len() {
            for j in 0..b.len() {
                for l in 0..a.len() {
                    values.extend_from_slice(self.cell([i, l, j]));
                }
            }
        }
        CovariateGrid {
            knots: [t.clone(), b.clone(), a.clone()],
            k: self.k,
            values,
        }
    }
}

/// Reads a covariate CSV with header `t,x1,x2,z0..z{K-1}` enumerating a full grid.
pub fn load_covariate_grid(path: impl AsRef<Path>) -> Result<CovariateGrid> {
    let path = path.as_ref();
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(1, e))?.clone();
    if headers.len() < 4 || headers.get(0) != Some("t") || headers.get(1) != Some("x1") || headers.get(2) != Some("x2") {
        return Err(Error::MalformedRow {
            row: 1,
            reason: "expected header t,x1,x2,z0,...".into(),
        });
    }
    let k = headers.len() - 3;
    for (i, h) in headers.iter().skip(3).enumerate() {
        if h != format!("z{i}") {
            return Err(Error::MalformedRow {
                row: 1,
                reason: format!("expected covariate column z{i}, found '{h}'"),
            });
        }
    }

    let mut rows: Vec<(Point, Vec<f64>, usize)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| csv_err(row, e))?;
        if rec.len() != k + 3 {
            return Err(Error::MalformedRow {
                row,
                reason: format!("expected {} fields, found {}", k + 3, rec.len()),
            });
        }
        let p = [
            parse_field(&rec, 0, row, "t")?,
            parse_field(&rec, 1, row, "x1")?,
            parse_field(&rec, 2, row, "x2")?,
        ];
        let mut z = Vec::with_capacity(k);
        for c in 0..k {
            let v = parse_field(&rec, 3 + c, row, "z")?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("covariate at row {row}")));
            }
            z.push(v);
        }
        rows.push((p, z, row));
    }
    if rows.is_empty() {
        return Err(Error::IncompleteGrid {
            expected: 1,
            found: 0,
        });
    }

    let knots: [Vec<f64>; 3] = [0, 1, 2].map(|a| {
        let mut ks: Vec<f64> = rows.iter().map(|r| r.0[a]).collect();
        ks.sort_by(f64::total_cmp);
        ks.dedup();
        ks
    });
    let cells: usize = knots.iter().map(|k| k.len()).product();
    if rows.len() != cells {
        return Err(Error::IncompleteGrid {
            expected: cells,
            found: rows.len(),
        });
    }
    let mut values = vec![f64::NAN; cells * k];
    let mut seen = vec![false; cells];
    for (p, z, row) in rows {
        let idx: Vec<usize> = (0..3)
            .map(|a| knots[a].binary_search_by(|x| x.total_cmp(&p[a])).unwrap_or(0))
            .collect();
        let flat = (idx[0] * knots[1].len() + idx[1]) * knots[2].len() + idx[2];
        if seen[flat] {
            return Err(Error::MalformedRow {
                row,
                reason: "duplicate grid cell".into(),
            });
        }
        seen[flat] = true;
        values[flat * k..(flat + 1) * k].copy_from_slice(&z);
    }
    let found = seen.iter().filter(|&&s| s).count();
    if found != cells {
        return Err(Error::IncompleteGrid {
            expected: cells,
            found,
        });
    }
    CovariateGrid::new(knots, k, values)
}

pub fn write_covariate_grid(grid: &CovariateGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let zs: Vec<String> = (0..grid.k).map(|i| format!("z{i}")).collect();
    writeln!(w, "t,x1,x2,{}", zs.join(",")).map_err(io)?;
    for (i, &t) in grid.knots[0].iter().enumerate() {
        for (j, &a) in grid.knots[1].iter().enumerate() {
            for (l, &b) in grid.knots[2].iter().enumerate() {
                let z: Vec<String> = grid.cell([i, j, l]).iter().map(|&v| format_number(v)).collect();
                writeln!(
                    w,
                    "{},{},{},{}",
                    format_number(t),
                    format_number(a),
                    format_number(b),
                    z.join(",")
                )
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Fixed grid of representative points with their covariate vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub points: Vec<Point>,
    pub covariates: Vec<Vec<f64>>,
    pub counts: [usize; 3],
}

impl RepresentativeSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.first().map_or(0, |c| c.len())
    }
}

/// `n` evenly spaced values spanning `[lo, hi]` with endpoints; a single
/// value sits at the midpoint.
pub fn axis_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Cartesian product of evenly spaced axis points (t-major) with each point's
/// covariates taken from the nearest grid knot per axis.
pub fn build_representative_set(
    window: &Window,
    counts: [usize; 3],
    grid: &CovariateGrid,
) -> Result<RepresentativeSet> {
    if counts.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "representative counts must be positive, got {counts:?}"
        )));
    }
    if grid.n_cells() == 0 {
        return Err(Error::InvalidArgument("empty covariate grid".into()));
    }
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let (lo, hi) = window.bounds(a);
            axis_points(lo, hi, counts[a])
        })
        .collect();
    let mut points = Vec::with_capacity(counts.iter().product());
    let mut covariates = Vec::with_capacity(points.capacity());
    for &t in &axes[0] {
        for &a in &axes[1] {
            for &b in &axes[2] {
                let p = [t, a, b];
                covariates.push(grid.lookup(&p).to_vec());
                points.push(p);
            }
        }
    }
    Ok(RepresentativeSet {
        points,
        covariates,
        counts,
    })
}

/// Orders sequences by first event time (empty ones last) and cuts
/// contiguous blocks: floor counts for the first two splits, remainder to
/// the last.
pub fn split_by_time(
    data: &SequenceSet,
    ratios: (f64, f64, f64),
) -> Result<(SequenceSet, SequenceSet, SequenceSet)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = data.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} sequences three ways"
        )));
    }
    let mut ordered: Vec<&EventSequence> = data.sequences.iter().collect();
    ordered.sort_by(|x, y| {
        let kx = x.first_time().unwrap_or(f64::INFINITY);
        let ky = y.first_time().unwrap_or(f64::INFINITY);
        kx.total_cmp(&ky)
    });
    let n_train = ((n as f64 * a) + 1e-9).floor() as usize;
    let n_val = (((n as f64 * b) + 1e-9).floor() as usize).min(n - n_train);
    let take = |r: std::ops::Range<usize>| SequenceSet::new(ordered[r].iter().map(|s| (*s).clone()).collect());
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_val),
        take(n_train + n_val..n),
    ))
}

/// Per-axis affine map `x -> scale * x + shift` from raw coordinates onto a
/// target window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl AffineMap {
    pub fn between(from: &Window, to: &Window) -> Self {
        let mut scale = [0.0; 3];
        let mut shift = [0.0; 3];
        for a in 0..3 {
            let (flo, _) = from.bounds(a);
            let (tlo, _) = to.bounds(a);
            scale[a] = to.extent(a) / from.extent(a);
            shift[a] = tlo - scale[a] * flo;
        }
        AffineMap { scale, shift }
    }

    pub fn apply(&self, p: &Point) -> Point {
        [0, 1, 2].map(|a| self.scale[a] * p[a] + self.shift[a])
    }

    pub fn invert(&self, p: &Point) -> Point {
        [0, 1, 2].map(|a| (p[a] - self.shift[a]) / self.scale[a])
    }
}

/// Raw data mapped onto the canonical window, with the map kept for inversion.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub window: Window,
    pub map: AffineMap,
    pub data: SequenceSet,
    pub grid: Option<CovariateGrid>,
}

/// Maps events (and optionally the covariate grid knots) from `raw` onto `target`.
pub fn normalize(
    data: &SequenceSet,
    grid: Option<&CovariateGrid>,
    raw: &Window,
    target: &Window,
) -> Result<Normalized> {
    let map = AffineMap::between(raw, target);
    let mut sequences = Vec::with_capacity(data.len());
    for s in &data.sequences {
        let events = s
            .events
            .iter()
            .map(|e| {
                let mut q = map.apply(e);
                for a in 0..3 {
                    let (lo, hi) = target.bounds(a);
                    q[a] = q[a].clamp(lo, hi);
                }
                q
            })
            .collect();
        sequences.push(EventSequence::new(s.seq_id.clone(), events, target)?);
    }
    let grid = match grid {
        Some(g) => {
            let knots = [0, 1, 2].map(|a| {
                g.knots(a)
                    .iter()
                    .map(|&x| map.scale[a] * x + map.shift[a])
                    .collect::<Vec<_>>()
            });
            Some(CovariateGrid::new(knots, g.dim(), g.values.clone())?)
        }
        None => None,
    };
    Ok(Normalized {
        window: *target,
        map,
        data: SequenceSet::new(sequences),
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_2x2x2() -> CovariateGrid {
        CovariateGrid::from_fn([vec![0.0, 10.0], vec![0.0, 1.0], vec![0.0, 1.0]], 1, |p| {
            vec![p[0] + 10.0 * p[1] + 100.0 * p[2]]
        })
        .unwrap()
    }

    #[test]
    fn default_window_volume() {
        assert_eq!(Window::default().volume(), 10.0);
        assert!(Window::new((1.0, 1.0), (0.0, 1.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn sequence_constructor_sorts_and_rejects_duplicates() {
        let w = Window::default();
        let s = EventSequence::new("a", vec![[1.0, 0.5, 0.5], [0.5, 0.2, 0.2]], &w).unwrap();
        assert_eq!(s.events[0][0], 0.5);
        assert!(EventSequence::new("a", vec![[1.0, 0.5, 0.5], [1.0, 0.2, 0.2]], &w).is_err());
        assert!(EventSequence::new("a", vec![[12.0, 0.5, 0.5]], &w).is_err());
    }

    #[test]
    fn representative_counts() {
        let w = Window::default();
        let g = grid_2x2x2();
        assert_eq!(build_representative_set(&w, [5, 5, 5], &g).unwrap().len(), 125);
        assert_eq!(build_representative_set(&w, [4, 4, 4], &g).unwrap().len(), 64);
        let one = build_representative_set(&w, [1, 1, 1], &g).unwrap();
        assert_eq!(one.points, vec![[5.0, 0.5, 0.5]]);
    }

    #[test]
    fn nearest_knot_ties_go_low() {
        let g = grid_2x2x2();
        assert_eq!(g.nearest_knot(0, 5.0), 0);
        assert_eq!(g.nearest_knot(0, 5.0001), 1);
        assert_eq!(g.nearest_knot(1, -3.0), 0);
        assert_eq!(g.nearest_knot(1, 7.0), 1);
        assert_eq!(g.lookup(&[10.0, 1.0, 0.0]), &[20.0]);
    }

    #[test]
    fn split_sizes() {
        let w = Window::default();
        let mk = |n: usize| {
            SequenceSet::new(
                (0..n)
                    .map(|i| EventSequence::new(format!("s{i}"), vec![[i as f64 * 10.0 / n as f64, 0.5, 0.5]], &w).unwrap())
                    .collect(),
            )
        };
        let sizes = |n| {
            let (a, b, c) = split_by_time(&mk(n), (0.5, 0.4, 0.1)).unwrap();
            (a.len(), b.len(), c.len())
        };
        assert_eq!(sizes(10), (5, 4, 1));
        assert_eq!(sizes(3), (1, 1, 1));
        assert_eq!(sizes(5000), (2500, 2000, 500));
        assert!(split_by_time(&mk(2), (0.5, 0.4, 0.1)).is_err());
        assert!(split_by_time(&mk(10), (0.5, 0.5, 0.1)).is_err());
    }

    #[test]
    fn format_uses_twelve_significant_digits() {
        assert_eq!(format_number(0.1), "0.1");
        assert_eq!(format_number(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_number(12345.678901234567), "12345.6789012");
        assert_eq!(format_number(2.0), "2");
    }

    #[test]
    fn affine_normalization_round_trips() {
        let raw = Window::new((100.0, 200.0), (-5.0, 5.0), (0.0, 2.0)).unwrap();
        let target = Window::default();
        let map = AffineMap::between(&raw, &target);
        let p = [150.0, 0.0, 1.5];
        let q = map.apply(&p);
        assert!((q[0] - 5.0).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12 && (q[2] - 0.75).abs() < 1e-12);
        let back = map.invert(&q);
        for a in 0..3 {
            assert!((back[a] - p[a]).abs() < 1e-12);
        }
        let data = SequenceSet::new(vec![EventSequence::new("a", vec![p], &raw).unwrap()]);
        let n = normalize(&data, None, &raw, &target).unwrap();
        assert_eq!(n.data.sequences[0].events[0], q);
    }
}
