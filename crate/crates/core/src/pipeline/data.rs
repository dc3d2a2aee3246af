use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{config_err, DemaError, Result};
use crate::SeriesWindow;

/// Where the data lives and how it is split in time.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Header of a column to read as labels instead of a variate.
    pub label_column: String,
}

impl DatasetSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            label_column: "label".into(),
        }
    }

    pub fn ratios(&self) -> [f64; 3] {
        [self.train_ratio, self.val_ratio, self.test_ratio]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Raw columns read from a CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub columns: Vec<String>,
    pub series: SeriesWindow,
    pub labels: Option<Vec<f64>>,
}

/// A series with chronological, non-overlapping split boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub series: SeriesWindow,
    pub labels: Option<Vec<f64>>,
    bounds: [Range<usize>; 3],
}

/// Row counts for each split; the test split takes the remainder.
pub fn split_sizes(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let take = |r: f64| ((r * total as f64) + 1e-9).floor() as usize;
    let train = take(ratios[0]).min(total);
    let val = take(ratios[1]).min(total - train);
    [train, val, total - train - val]
}

fn cell_error(row: usize, col: usize, msg: impl Into<String>) -> DemaError {
    DemaError::Format {
        row,
        col,
        msg: msg.into(),
    }
}

/// Read a CSV with a header row. The first column (a timestamp) is
/// skipped; every other column must be numeric and finite. Rows and
/// columns in errors are 1-based data coordinates.
pub fn read_csv_table(path: &Path, label_column: &str) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(cell_error(
            0,
            header.len(),
            "need a timestamp column and at least one variate",
        ));
    }
    let label_at = header.iter().skip(1).position(|h| h == label_column);
    let n_vars = header.len() - 1 - usize::from(label_at.is_some());
    if n_vars == 0 {
        return Err(cell_error(
            0,
            header.len(),
            "no variate columns besides the label",
        ));
    }
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n_vars];
    let mut labels = label_at.map(|_| Vec::new());
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        if record.len() != header.len() {
            return Err(cell_error(
                row,
                record.len().saturating_sub(1),
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let mut var = 0;
        for (c, cell) in record.iter().enumerate().skip(1) {
            let value: f64 = cell
                .parse()
                .map_err(|_| cell_error(row, c, format!("non-numeric value `{cell}`")))?;
            if !value.is_finite() {
                return Err(cell_error(row, c, format!("non-finite value `{cell}`")));
            }
            if Some(c - 1) == label_at {
                labels.as_mut().expect("label column").push(value);
            } else {
                rows[var].push(value);
                var += 1;
            }
        }
    }
    if rows[0].is_empty() {
        return Err(DemaError::EmptyInput);
    }
    let columns = header
        .into_iter()
        .enumerate()
        .skip(1)
        .filter(|&(c, _)| Some(c - 1) != label_at)
        .map(|(_, h)| h)
        .collect();
    Ok(CsvTable {
        columns,
        series: SeriesWindow::from_rows(rows)?,
        labels,
    })
}

/// Load a CSV and cut it into train, validation and test splits.
pub fn load_csv_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let table = read_csv_table(&spec.path, &spec.label_column)?;
    Dataset::new(table.columns, table.series, table.labels, spec.ratios())
}

impl Dataset {
    pub fn new(
        columns: Vec<String>,
        series: SeriesWindow,
        labels: Option<Vec<f64>>,
        ratios: [f64; 3],
    ) -> Result<Self> {
        if columns.len() != series.n_vars() {
            return config_err(format!(
                "{} column names for {} variates",
                columns.len(),
                series.n_vars()
            ));
        }
        if labels.as_ref().is_some_and(|l| l.len() != series.len()) {
            return config_err("label count differs from the series length");
        }
        let [a, b, _] = split_sizes(series.len(), ratios);
        let t = series.len();
        Ok(Self {
            columns,
            series,
            labels,
            bounds: [0..a, a..a + b, a + b..t],
        })
    }

    pub fn n_vars(&self) -> usize {
        self.series.n_vars()
    }

    pub fn bounds(&self, split: Split) -> Range<usize> {
        self.bounds[split.index()].clone()
    }

    /// Rows of one split, preceded by up to `context` rows of history
    /// from earlier splits. Returns the segment, its labels, and the
    /// absolute index of its first row.
    pub fn segment(
        &self,
        split: Split,
        context: usize,
    ) -> Result<(SeriesWindow, Option<Vec<f64>>, usize)> {
        let range = self.bounds(split);
        let start = if range.is_empty() {
            range.start
        } else {
            range.start.saturating_sub(context)
        };
        let window = self.series.slice_time(start, range.end)?;
        let labels = self.labels.as_ref().map(|l| l[start..range.end].to_vec());
        Ok((window, labels, start))
    }

    /// Fit a z-score on the training rows and apply it to the whole series.
    pub fn standardize(&mut self) -> Standardizer {
        let train = self.bounds(Split::Train);
        let scaler = Standardizer::fit(&self.series, train);
        scaler.apply(&mut self.series);
        scaler
    }
}

/// Per-variate z-score.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over `rows`; a zero std is replaced by 1.
    pub fn fit(series: &SeriesWindow, rows: Range<usize>) -> Self {
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for row in series.rows() {
            let xs = &row[rows.clone()];
            let n = xs.len().max(1) as f64;
            let mu = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn apply(&self, series: &mut SeriesWindow) {
        for i in 0..series.n_vars() {
            let (mu, sd) = (self.mean[i], self.std[i]);
            series
                .row_mut(i)
                .iter_mut()
                .for_each(|x| *x = (*x - mu) / sd);
        }
    }

    pub fn invert(&self, series: &mut SeriesWindow) {
        for i in 0..series.n_vars() {
            let (mu, sd) = (self.mean[i], self.std[i]);
            series.row_mut(i).iter_mut().for_each(|x| *x = *x * sd + mu);
        }
    }
}
