//! Query-by-reference distance matrices and top-1 retrieval.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{cosine_distance, sad_distance, DescriptorSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Sad,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Cosine => cosine_distance(a, b),
            Metric::Sad => sad_distance(a, b),
        }
    }
}

/// What the entries of a matrix mean for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatrixKind {
    /// Smaller is better; the best match is the row minimum.
    Distance,
    /// One-hot majority votes; the best match is the row's 1 entry.
    Votes,
}

/// Row-major `rows x cols` matrix comparing queries against references.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    query_t_us: Vec<u64>,
    ref_t_us: Vec<u64>,
    label: String,
    kind: MatrixKind,
}

fn strictly_increasing(ts: &[u64]) -> bool {
    ts.windows(2).all(|p| p[0] < p[1])
}

impl DistanceMatrix {
    pub fn new(
        data: Vec<f64>,
        query_t_us: Vec<u64>,
        ref_t_us: Vec<u64>,
        label: impl Into<String>,
    ) -> Result<Self> {
        Self::with_kind(data, query_t_us, ref_t_us, label, MatrixKind::Distance)
    }

    pub fn with_kind(
        data: Vec<f64>,
        query_t_us: Vec<u64>,
        ref_t_us: Vec<u64>,
        label: impl Into<String>,
        kind: MatrixKind,
    ) -> Result<Self> {
        let (rows, cols) = (query_t_us.len(), ref_t_us.len());
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "matrix entries must be finite, found {v}"
            )));
        }
        if !strictly_increasing(&query_t_us) || !strictly_increasing(&ref_t_us) {
            return Err(Error::Shape(
                "matrix timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            rows,
            cols,
            data,
            query_t_us,
            ref_t_us,
            label: label.into(),
            kind,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn query_t_us(&self) -> &[u64] {
        &self.query_t_us
    }

    pub fn ref_t_us(&self) -> &[u64] {
        &self.ref_t_us
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            data.extend((0..self.rows).map(|i| self.get(i, j)));
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
            query_t_us: self.ref_t_us.clone(),
            ref_t_us: self.query_t_us.clone(),
            label: self.label.clone(),
            kind: self.kind,
        }
    }

    /// Same shape and timestamps as `other`.
    pub fn is_aligned_with(&self, other: &DistanceMatrix) -> bool {
        self.query_t_us == other.query_t_us && self.ref_t_us == other.ref_t_us
    }

    /// Applies `f` to every entry, keeping timestamps and label.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::with_kind(
            self.data.iter().map(|&v| f(v)).collect(),
            self.query_t_us.clone(),
            self.ref_t_us.clone(),
            self.label.clone(),
            self.kind,
        )
    }

    /// Keeps the query rows whose timestamp satisfies `keep`.
    pub fn select_rows(&self, keep: impl Fn(u64) -> bool) -> Self {
        let mut data = Vec::new();
        let mut query_t_us = Vec::new();
        for (i, &t) in self.query_t_us.iter().enumerate() {
            if keep(t) {
                data.extend_from_slice(self.row(i));
                query_t_us.push(t);
            }
        }
        Self {
            rows: query_t_us.len(),
            cols: self.cols,
            data,
            query_t_us,
            ref_t_us: self.ref_t_us.clone(),
            label: self.label.clone(),
            kind: self.kind,
        }
    }
}

/// Label for a member comparing sequences from `q` and `r`.
pub fn member_label(q: &DescriptorSequence, r: &DescriptorSequence) -> String {
    if q.source() == r.source() {
        q.source().to_string()
    } else {
        format!("{}~{}", q.source(), r.source())
    }
}

/// Compares every query descriptor with every reference descriptor.
pub fn build_distance_matrix(
    q: &DescriptorSequence,
    r: &DescriptorSequence,
    metric: Metric,
) -> Result<DistanceMatrix> {
    if q.is_empty() || r.is_empty() {
        return Err(Error::Shape(
            "query and reference sequences must be non-empty".into(),
        ));
    }
    let (qd, rd) = (q.dim().unwrap(), r.dim().unwrap());
    if qd != rd {
        return Err(Error::Dimension {
            expected: qd,
            found: rd,
        });
    }
    let rows = q
        .items()
        .par_iter()
        .map(|qi| {
            r.items()
                .iter()
                .map(|rj| metric.distance(&qi.values, &rj.values))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    DistanceMatrix::new(
        rows.concat(),
        q.timestamps(),
        r.timestamps(),
        member_label(q, r),
    )
}

/// Index of the smallest entry, first one on ties.
pub(crate) fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = j;
        }
    }
    best
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Top-1 reference per query as `(column, entry)`. Distance matrices use the
/// row minimum, vote matrices the row maximum; ties go to the smallest
/// column.
pub fn best_match_per_query(d: &DistanceMatrix) -> Vec<(usize, f64)> {
    (0..d.rows)
        .map(|i| {
            let row = d.row(i);
            let j = match d.kind {
                MatrixKind::Distance => argmin(row),
                MatrixKind::Votes => argmax(row),
            };
            (j, row[j])
        })
        .collect()
}

/// Writes a header of reference timestamps (µs) followed by one
/// `t_q,d1,...,dnR` row per query.
pub fn write_matrix_csv<W: Write>(d: &DistanceMatrix, mut sink: W) -> std::io::Result<()> {
    write!(sink, "t_us")?;
    for t in &d.ref_t_us {
        write!(sink, ",{t}")?;
    }
    writeln!(sink)?;
    for i in 0..d.rows {
        write!(sink, "{}", d.query_t_us[i])?;
        for v in d.row(i) {
            write!(sink, ",{v}")?;
        }
        writeln!(sink)?;
    }
    sink.flush()
}

/// Inverse of [`write_matrix_csv`].
pub fn read_matrix_csv<R: BufRead>(
    source: R,
    label: &str,
    kind: MatrixKind,
) -> Result<DistanceMatrix> {
    let mut lines = source.lines().enumerate();
    let parse_err = |line: usize, reason: String| Error::Parse {
        line: line + 1,
        reason,
    };

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(0, "missing header row".into()))?;
    let header = header?;
    let mut cells = header.trim_end_matches('\r').split(',');
    cells.next();
    let ref_t_us = cells
        .map(|c| {
            c.trim()
                .parse::<u64>()
                .map_err(|_| parse_err(0, format!("bad reference timestamp {c:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut query_t_us = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let row = line.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let mut cells = row.split(',').map(str::trim);
        let t = cells.next().unwrap_or_default();
        query_t_us.push(
            t.parse::<u64>()
                .map_err(|_| parse_err(i, format!("bad query timestamp {t:?}")))?,
        );
        let before = data.len();
        for c in cells {
            data.push(
                c.parse::<f64>()
                    .map_err(|_| parse_err(i, format!("bad entry {c:?}")))?,
            );
        }
        if data.len() - before != ref_t_us.len() {
            return Err(parse_err(
                i,
                format!(
                    "expected {} entries, found {}",
                    ref_t_us.len(),
                    data.len() - before
                ),
            ));
        }
    }
    DistanceMatrix::with_kind(data, query_t_us, ref_t_us, label, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{Descriptor, DescriptorKind, SequenceSource};

    fn seq(vectors: &[&[f64]]) -> DescriptorSequence {
        let items = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| Descriptor {
                t_us: i as u64 * 1_000_000,
                values: v.to_vec(),
                kind: DescriptorKind::External,
            })
            .collect();
        DescriptorSequence::new(SequenceSource::External("t".into()), items).unwrap()
    }

    #[test]
    fn self_matrix_has_zero_diagonal() {
        let s = seq(&[&[1.0, 2.0], &[0.3, -1.0], &[5.0, 0.1]]);
        let d = build_distance_matrix(&s, &s, Metric::Cosine).unwrap();
        assert_eq!((d.rows(), d.cols()), (3, 3));
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0.0);
        }
        assert_eq!(
            best_match_per_query(&d)
                .iter()
                .map(|m| m.0)
                .collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn single_query_row() {
        let q = seq(&[&[1.0, 0.0]]);
        let r = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = build_distance_matrix(&q, &r, Metric::Cosine).unwrap();
        assert_eq!(d.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn swapping_sequences_transposes() {
        let q = seq(&[&[1.0, 0.5], &[0.2, 0.1]]);
        let r = seq(&[&[0.0, 1.0], &[1.0, 1.0], &[3.0, -1.0]]);
        for metric in [Metric::Cosine, Metric::Sad] {
            let a = build_distance_matrix(&q, &r, metric).unwrap();
            let b = build_distance_matrix(&r, &q, metric).unwrap();
            assert_eq!(a, b.transpose());
        }
    }

    #[test]
    fn dimension_mismatch() {
        let q = seq(&[&[1.0, 0.5]]);
        let r = seq(&[&[1.0, 0.5, 0.0]]);
        assert!(matches!(
            build_distance_matrix(&q, &r, Metric::Sad),
            Err(Error::Dimension { .. })
        ));
    }

    fn one_row(row: &[f64]) -> DistanceMatrix {
        let ref_t = (0..row.len() as u64).collect();
        DistanceMatrix::new(row.to_vec(), vec![0], ref_t, "m").unwrap()
    }

    #[test]
    fn best_match_examples() {
        assert_eq!(
            best_match_per_query(&one_row(&[0.5, 0.2, 0.9])),
            vec![(1, 0.2)]
        );
        assert_eq!(best_match_per_query(&one_row(&[0.3, 0.3])), vec![(0, 0.3)]);
        let zero = DistanceMatrix::new(vec![0.0; 6], vec![0, 1, 2], vec![0, 1], "z").unwrap();
        assert!(best_match_per_query(&zero).iter().all(|m| m.0 == 0));
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(DistanceMatrix::new(vec![0.0; 3], vec![0, 1], vec![0, 1], "m").is_err());
        assert!(DistanceMatrix::new(vec![f64::NAN], vec![0], vec![0], "m").is_err());
        assert!(DistanceMatrix::new(vec![0.0; 4], vec![1, 1], vec![0, 1], "m").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = DistanceMatrix::new(
            vec![0.1, 0.25, 1.0 / 3.0, 2.0],
            vec![5, 9],
            vec![0, 1_000_000],
            "m",
        )
        .unwrap();
        let mut buf = Vec::new();
        write_matrix_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_us,0,1000000\n5,0.1,0.25\n9,"));
        let back = read_matrix_csv(buf.as_slice(), "m", MatrixKind::Distance).unwrap();
        assert_eq!(back, d);
    }
}
