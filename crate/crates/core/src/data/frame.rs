use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact header of OHLCV input and output files.
pub const OHLCV_HEADER: [&str; 6] = ["date", "open", "high", "low", "close", "volume"];

/// Daily OHLCV rows on strictly increasing trading dates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeSeriesFrame {
    pub dates: Vec<NaiveDate>,
    pub open: Vec<f64>,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub close: Vec<f64>,
    pub volume: Vec<f64>,
}

impl TimeSeriesFrame {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn push(&mut self, date: NaiveDate, row: [f64; 5]) {
        self.dates.push(date);
        self.open.push(row[0]);
        self.high.push(row[1]);
        self.low.push(row[2]);
        self.close.push(row[3]);
        self.volume.push(row[4]);
    }

    pub fn row(&self, i: usize) -> [f64; 5] {
        [self.open[i], self.high[i], self.low[i], self.close[i], self.volume[i]]
    }

    /// First `n` rows.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            dates: self.dates[..n].to_vec(),
            open: self.open[..n].to_vec(),
            high: self.high[..n].to_vec(),
            low: self.low[..n].to_vec(),
            close: self.close[..n].to_vec(),
            volume: self.volume[..n].to_vec(),
        }
    }

    /// Checks ordering of dates and the OHLC/volume invariants.
    pub fn validate(&self) -> Result<()> {
        for w in self.dates.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!("dates not strictly increasing at {}", w[1])));
            }
        }
        for i in 0..self.len() {
            if let Some(reason) = row_violation(&self.row(i)) {
                return Err(Error::Config(format!("row {} ({}): {reason}", i, self.dates[i])));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", OHLCV_HEADER.join(","))?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.dates[i].format("%Y-%m-%d"),
                self.open[i],
                self.high[i],
                self.low[i],
                self.close[i],
                self.volume[i]
            )?;
        }
        Ok(())
    }
}

fn row_violation(row: &[f64; 5]) -> Option<&'static str> {
    let [o, h, l, c, v] = *row;
    if row.iter().any(|x| !x.is_finite()) {
        return Some("non-finite value");
    }
    if h < l {
        return Some("high below low");
    }
    if l > o.min(c) || o.max(c) > h {
        return Some("open/close outside the high-low range");
    }
    if v < 0.0 {
        return Some("negative volume");
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based line number in the source file, header included.
    pub line: usize,
    pub date: Option<String>,
    pub reason: String,
}

/// What cleaning changed while loading a file.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CleaningReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub rejected: Vec<RejectedRow>,
    pub interpolated_cells: usize,
    pub edge_filled_cells: usize,
    pub duplicate_dates: usize,
}

fn parse_cell(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if s.is_empty() || ["nan", "na", "null", "none"].contains(&s.to_ascii_lowercase().as_str()) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Loads a `date,open,high,low,close,volume` CSV.
///
/// Rows are sorted by date and duplicate dates keep their first occurrence.
/// Interior missing cells are linearly interpolated by row position; leading
/// and trailing gaps take the nearest observed value. Rows that still break
/// the OHLC ordering are dropped and listed in the report.
pub fn load_ohlcv(path: &Path) -> Result<(TimeSeriesFrame, CleaningReport)> {
    let data_err = |message: String| Error::Data {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut columns = [0usize; 6];
    for (slot, name) in columns.iter_mut().zip(OHLCV_HEADER) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| {
            data_err(format!(
                "missing column `{name}` (expected header {})",
                OHLCV_HEADER.join(",")
            ))
        })?;
    }

    let mut report = CleaningReport::default();
    let mut by_date: BTreeMap<NaiveDate, (usize, [Option<f64>; 5])> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        report.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                report.rejected.push(RejectedRow {
                    line,
                    date: None,
                    reason: format!("unreadable record: {e}"),
                });
                continue;
            }
        };
        let raw_date = record.get(columns[0]).unwrap_or("").to_string();
        let Ok(date) = NaiveDate::parse_from_str(&raw_date, "%Y-%m-%d") else {
            report.rejected.push(RejectedRow {
                line,
                date: Some(raw_date),
                reason: "unparseable date".into(),
            });
            continue;
        };
        let mut cells = [None; 5];
        for (cell, &col) in cells.iter_mut().zip(&columns[1..]) {
            *cell = record.get(col).and_then(parse_cell);
        }
        if by_date.contains_key(&date) {
            report.duplicate_dates += 1;
            report.rejected.push(RejectedRow {
                line,
                date: Some(raw_date),
                reason: "duplicate date".into(),
            });
            continue;
        }
        by_date.insert(date, (line, cells));
    }

    let dates: Vec<NaiveDate> = by_date.keys().copied().collect();
    let lines: Vec<usize> = by_date.values().map(|(l, _)| *l).collect();
    let mut filled: Vec<[f64; 5]> = vec![[0.0; 5]; dates.len()];
    for col in 0..5 {
        let cells: Vec<Option<f64>> = by_date.values().map(|(_, c)| c[col]).collect();
        let (values, interior, edge) =
            fill_column(&cells).ok_or_else(|| data_err(format!("column `{}` has no values", OHLCV_HEADER[col + 1])))?;
        report.interpolated_cells += interior;
        report.edge_filled_cells += edge;
        for (row, v) in filled.iter_mut().zip(values) {
            row[col] = v;
        }
    }

    let mut frame = TimeSeriesFrame::default();
    for ((date, row), line) in dates.into_iter().zip(filled).zip(lines) {
        match row_violation(&row) {
            Some(reason) => report.rejected.push(RejectedRow {
                line,
                date: Some(date.format("%Y-%m-%d").to_string()),
                reason: reason.into(),
            }),
            None => frame.push(date, row),
        }
    }
    report.rejected.sort_by_key(|r| r.line);
    report.rows_kept = frame.len();
    if frame.len() < 2 {
        return Err(data_err(format!(
            "only {} valid rows; at least 2 are required",
            frame.len()
        )));
    }
    Ok((frame, report))
}

/// Fills gaps in one column. Returns the values plus counts of interpolated
/// and edge-filled cells, or `None` when nothing was observed.
fn fill_column(cells: &[Option<f64>]) -> Option<(Vec<f64>, usize, usize)> {
    let observed: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].is_some()).collect();
    let (&first, &last) = (observed.first()?, observed.last()?);
    let mut out = vec![0.0; cells.len()];
    let (mut interior, mut edge) = (0, 0);
    for i in 0..first {
        out[i] = cells[first].unwrap();
        edge += 1;
    }
    for i in last + 1..cells.len() {
        out[i] = cells[last].unwrap();
        edge += 1;
    }
    for w in observed.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (va, vb) = (cells[a].unwrap(), cells[b].unwrap());
        out[a] = va;
        for i in a + 1..b {
            let frac = (i - a) as f64 / (b - a) as f64;
            out[i] = va + (vb - va) * frac;
            interior += 1;
        }
    }
    out[last] = cells[last].unwrap();
    Some((out, interior, edge))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn well_formed_file_is_untouched() {
        let f = write(
            "date,open,high,low,close,volume\n\
             2020-01-02,10,11,9,10.5,100\n\
             2020-01-03,10.5,12,10,11,120\n\
             2020-01-06,11,11.5,10.5,11.2,90\n",
        );
        let (frame, report) = load_ohlcv(f.path()).unwrap();
        assert_eq!(frame.len(), 3);
        assert_eq!(frame.close, vec![10.5, 11.0, 11.2]);
        assert_eq!(report.interpolated_cells + report.edge_filled_cells, 0);
        assert!(report.rejected.is_empty());
        frame.validate().unwrap();
    }

    #[test]
    fn interior_gap_is_interpolated() {
        let f = write(
            "date,open,high,low,close,volume\n\
             2020-01-02,100,112,95,100,1\n\
             2020-01-03,104,112,95,,1\n\
             2020-01-06,108,112,95,110,1\n",
        );
        let (frame, report) = load_ohlcv(f.path()).unwrap();
        assert_eq!(frame.close[1], 105.0);
        assert_eq!(report.interpolated_cells, 1);
    }

    #[test]
    fn edges_are_filled_and_rows_sorted() {
        let f = write(
            "date,open,high,low,close,volume\n\
             2020-01-06,10,11,9,10,\n\
             2020-01-02,10,11,9,10,5\n\
             2020-01-03,10,11,9,10,7\n",
        );
        let (frame, report) = load_ohlcv(f.path()).unwrap();
        assert_eq!(frame.volume, vec![5.0, 7.0, 7.0]);
        assert_eq!(report.edge_filled_cells, 1);
        assert!(frame.dates.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn inverted_range_is_rejected() {
        let f = write(
            "date,open,high,low,close,volume\n\
             2020-01-02,10,11,9,10,1\n\
             2020-01-03,10,8,12,10,1\n\
             2020-01-06,10,11,9,10,1\n",
        );
        let (frame, report) = load_ohlcv(f.path()).unwrap();
        assert_eq!(frame.len(), 2);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].line, 3);
        assert_eq!(report.rejected[0].reason, "high below low");
    }

    #[test]
    fn missing_column_and_short_files_fail() {
        let f = write("date,open,high,low,volume\n2020-01-02,1,1,1,1\n");
        let err = load_ohlcv(f.path()).unwrap_err().to_string();
        assert!(err.contains("close"), "{err}");
        let f = write("date,open,high,low,close,volume\n2020-01-02,1,1,1,1,1\n");
        assert!(load_ohlcv(f.path()).is_err());
        assert!(load_ohlcv(Path::new("/nonexistent/file.csv")).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut frame = TimeSeriesFrame::default();
        let d0 = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        for i in 0..5 {
            let x = 100.0 + i as f64 * 0.1 + 1.0 / 3.0;
            frame.push(d0 + chrono::Days::new(i), [x, x + 1.0, x - 1.0, x + 0.25, 1e6 / 7.0]);
        }
        let f = tempfile::NamedTempFile::new().unwrap();
        frame.write_csv(f.path()).unwrap();
        let (back, _) = load_ohlcv(f.path()).unwrap();
        assert_eq!(back, frame);
    }
}
