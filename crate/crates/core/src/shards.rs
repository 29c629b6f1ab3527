//! Partitioned in-memory datasets.
//!
//! A [`Shards`] value is an ordered list of partitions. Tabular data lives in
//! [`RecordBatch`] partitions: named columns, each either float or string,
//! all the same length. Partitioning is contiguous and balanced, so
//! collecting the partitions in order always reproduces the original rows.

use crate::tensor::Tensor;
use std::collections::HashSet;
use std::fmt::Display;
use std::ops::Range;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShardsError {
    #[error("column {name:?} has {got} rows but the batch has {want}")]
    ColumnLength { name: String, got: usize, want: usize },
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("no column named {0:?}")]
    NoSuchColumn(String),
    #[error("column {0:?} is not numeric")]
    NotNumeric(String),
    #[error("cannot split into zero partitions")]
    ZeroPartitions,
    #[error("schemas differ between partitions: {left} vs {right}")]
    SchemaMismatch { left: String, right: String },
    #[error("transform failed on partition {partition}: {message}")]
    Transform { partition: usize, message: String },
    #[error("csv file has no header row")]
    MissingHeader,
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One column of a record batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Float(Vec<f32>),
    Str(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Float(v) => v.len(),
            Column::Str(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Column::Float(_) => "float",
            Column::Str(_) => "str",
        }
    }

    fn slice(&self, range: Range<usize>) -> Column {
        match self {
            Column::Float(v) => Column::Float(v[range].to_vec()),
            Column::Str(v) => Column::Str(v[range].to_vec()),
        }
    }

    fn append(&mut self, other: &Column) -> Result<(), ()> {
        match (self, other) {
            (Column::Float(a), Column::Float(b)) => {
                a.extend_from_slice(b);
                Ok(())
            }
            (Column::Str(a), Column::Str(b)) => {
                a.extend_from_slice(b);
                Ok(())
            }
            _ => Err(()),
        }
    }
}

/// A columnar batch of rows: named columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordBatch {
    names: Vec<String>,
    columns: Vec<Column>,
    rows: usize,
}

impl RecordBatch {
    pub fn new(
        names: Vec<String>,
        columns: Vec<Column>,
    ) -> Result<Self, ShardsError> {
        assert_eq!(names.len(), columns.len(), "one name per column");
        let rows = columns.first().map_or(0, Column::len);
        let mut seen = HashSet::new();
        for (name, col) in names.iter().zip(&columns) {
            if !seen.insert(name.clone()) {
                return Err(ShardsError::DuplicateColumn(name.clone()));
            }
            if col.len() != rows {
                return Err(ShardsError::ColumnLength {
                    name: name.clone(),
                    got: col.len(),
                    want: rows,
                });
            }
        }
        Ok(RecordBatch { names, columns, rows })
    }

    /// An empty batch with no columns and no rows.
    pub fn empty() -> Self {
        RecordBatch { names: Vec::new(), columns: Vec::new(), rows: 0 }
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &Column)> {
        self.names.iter().map(String::as_str).zip(self.columns.iter())
    }

    pub fn column(&self, name: &str) -> Result<&Column, ShardsError> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ShardsError::NoSuchColumn(name.to_string()))?;
        Ok(&self.columns[idx])
    }

    pub fn float_column(&self, name: &str) -> Result<&[f32], ShardsError> {
        match self.column(name)? {
            Column::Float(v) => Ok(v),
            Column::Str(_) => Err(ShardsError::NotNumeric(name.to_string())),
        }
    }

    /// Appends a column; the name must be fresh and the length must match.
    pub fn push_column(&mut self, name: &str, column: Column) -> Result<(), ShardsError> {
        if self.names.iter().any(|n| n == name) {
            return Err(ShardsError::DuplicateColumn(name.to_string()));
        }
        if !self.columns.is_empty() && column.len() != self.rows {
            return Err(ShardsError::ColumnLength {
                name: name.to_string(),
                got: column.len(),
                want: self.rows,
            });
        }
        if self.columns.is_empty() {
            self.rows = column.len();
        }
        self.names.push(name.to_string());
        self.columns.push(column);
        Ok(())
    }

    /// Rewrites one float column elementwise.
    pub fn map_float(&self, name: &str, f: impl Fn(f32) -> f32) -> Result<RecordBatch, ShardsError> {
        let mut out = self.clone();
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ShardsError::NoSuchColumn(name.to_string()))?;
        match &mut out.columns[idx] {
            Column::Float(v) => {
                for x in v.iter_mut() {
                    *x = f(*x);
                }
            }
            Column::Str(_) => return Err(ShardsError::NotNumeric(name.to_string())),
        }
        Ok(out)
    }

    /// Rows `range` as a new batch with the same schema.
    pub fn slice(&self, range: Range<usize>) -> RecordBatch {
        RecordBatch {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.slice(range.clone())).collect(),
            rows: range.len(),
        }
    }

    fn schema_string(&self) -> String {
        self.names
            .iter()
            .zip(&self.columns)
            .map(|(n, c)| format!("{n}:{}", c.type_name()))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Concatenates batches that share a schema, in order.
    pub fn concat(batches: &[RecordBatch]) -> Result<RecordBatch, ShardsError> {
        let Some(first) = batches.first() else {
            return Ok(RecordBatch::empty());
        };
        let mut out = first.clone();
        for b in &batches[1..] {
            if b.names != out.names
                || b.columns.len() != out.columns.len()
                || b.columns
                    .iter()
                    .zip(&out.columns)
                    .any(|(x, y)| x.type_name() != y.type_name())
            {
                return Err(ShardsError::SchemaMismatch {
                    left: out.schema_string(),
                    right: b.schema_string(),
                });
            }
            for (dst, src) in out.columns.iter_mut().zip(&b.columns) {
                dst.append(src).expect("types checked above");
            }
            out.rows += b.rows;
        }
        Ok(out)
    }

    /// Gathers the named float columns into a `rows x cols.len()` tensor.
    pub fn to_tensor(&self, cols: &[&str]) -> Result<Tensor, ShardsError> {
        let mut views = Vec::with_capacity(cols.len());
        for &name in cols {
            views.push(self.float_column(name)?);
        }
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            for v in &views {
                data.push(v[r]);
            }
        }
        Ok(Tensor::from_vec(self.rows, cols.len(), data).expect("length by construction"))
    }
}

/// An ordered list of partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Shards<T> {
    parts: Vec<T>,
}

impl<T> Shards<T> {
    pub fn from_parts(parts: Vec<T>) -> Self {
        Shards { parts }
    }

    pub fn num_partitions(&self) -> usize {
        self.parts.len()
    }

    pub fn parts(&self) -> &[T] {
        &self.parts
    }

    pub fn into_parts(self) -> Vec<T> {
        self.parts
    }

    /// Applies `f` to every partition, producing a new shard collection in
    /// the same order. The first failing partition aborts the transform and
    /// its index is reported in the error.
    pub fn transform_shard<U, E: Display>(
        &self,
        mut f: impl FnMut(&T) -> Result<U, E>,
    ) -> Result<Shards<U>, ShardsError> {
        let mut parts = Vec::with_capacity(self.parts.len());
        for (i, part) in self.parts.iter().enumerate() {
            match f(part) {
                Ok(p) => parts.push(p),
                Err(e) => {
                    return Err(ShardsError::Transform { partition: i, message: e.to_string() })
                }
            }
        }
        Ok(Shards { parts })
    }
}

impl Shards<RecordBatch> {
    /// Splits a batch into `n` contiguous partitions. Row counts differ by at
    /// most one, with the earlier partitions taking the extra rows.
    pub fn from_batch(batch: RecordBatch, n: usize) -> Result<Self, ShardsError> {
        if n == 0 {
            return Err(ShardsError::ZeroPartitions);
        }
        let sizes = crate::split_sizes(batch.len(), n);
        let mut parts = Vec::with_capacity(n);
        let mut start = 0;
        for size in sizes {
            parts.push(batch.slice(start..start + size));
            start += size;
        }
        Ok(Shards { parts })
    }

    /// Total rows across partitions.
    pub fn total_rows(&self) -> usize {
        self.parts.iter().map(RecordBatch::len).sum()
    }

    /// Concatenates all partitions back into one batch, in partition order.
    pub fn collect(&self) -> Result<RecordBatch, ShardsError> {
        RecordBatch::concat(&self.parts)
    }

    /// Re-splits the collected rows into `n` contiguous balanced partitions.
    pub fn repartition(&self, n: usize) -> Result<Self, ShardsError> {
        Shards::from_batch(self.collect()?, n)
    }
}

/// Reads a comma-separated file with a header row into one batch.
///
/// Quoting follows RFC 4180 (the first row names the columns). A column
/// becomes float when every value parses as a float, otherwise it stays a
/// string column. Rows with the wrong field count fail with the offending
/// line in the message.
pub fn read_csv(path: &Path) -> Result<RecordBatch, ShardsError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(ShardsError::MissingHeader);
    }
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for record in reader.records() {
        let record = record?;
        for (i, field) in record.iter().enumerate() {
            raw[i].push(field.to_string());
        }
    }
    let columns = raw
        .into_iter()
        .map(|values| {
            let parsed: Option<Vec<f32>> = values.iter().map(|v| v.trim().parse().ok()).collect();
            match parsed {
                Some(floats) => Column::Float(floats),
                None => Column::Str(values),
            }
        })
        .collect();
    RecordBatch::new(headers, columns)
}
