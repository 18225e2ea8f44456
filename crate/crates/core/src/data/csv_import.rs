use std::io::Read;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parse headerless CSV rows of `channels * length` values followed by an
/// integer label column (`-1` = unlabeled).
pub fn import_csv<R: Read>(reader: R, channels: usize, length: usize, num_classes: usize, name: &str) -> Result<Dataset> {
    let width = channels * length;
    if width == 0 {
        return Err(Error::config("channels and length must be positive"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::data(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width + 1 {
            return Err(Error::data(format!(
                "line {line}: expected {} fields ({width} values + label), found {}",
                width + 1,
                rec.len()
            )));
        }
        for (col, cell) in rec.iter().take(width).enumerate() {
            let v: f32 = cell
                .parse()
                .map_err(|_| Error::data(format!("line {line}: column {}: not a number: {cell:?}", col + 1)))?;
            if !v.is_finite() {
                return Err(Error::data(format!("line {line}: column {}: non-finite value", col + 1)));
            }
            data.push(v);
        }
        let cell = &rec[width];
        let y: i64 = cell
            .parse()
            .map_err(|_| Error::data(format!("line {line}: label column: not an integer: {cell:?}")))?;
        if y != -1 && !(0..num_classes as i64).contains(&y) {
            return Err(Error::data(format!(
                "line {line}: label out of range: {y} (num_classes = {num_classes})"
            )));
        }
        labels.push(y);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, channels, length], data)?, labels, num_classes, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows() {
        let csv = "0,1,2,3,0\n4.5,5,6,7,-1\n";
        let d = import_csv(csv.as_bytes(), 2, 2, 2, "c").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.samples().data(), &[0.0, 1.0, 2.0, 3.0, 4.5, 5.0, 6.0, 7.0]);
        assert_eq!(d.labels(), &[0, -1]);
    }

    #[test]
    fn ragged_row_cites_line() {
        let csv = "0,1,0\n0,1,0\n0,1,0\n0,1,0\n0,0\n";
        let err = import_csv(csv.as_bytes(), 1, 2, 2, "c").unwrap_err();
        assert!(err.to_string().contains("line 5"), "{err}");
    }

    #[test]
    fn non_numeric_cell_cites_line_and_column() {
        let csv = "0,1,0\n0,abc,1\n";
        let err = import_csv(csv.as_bytes(), 1, 2, 2, "c").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("column 2"), "{err}");
    }

    #[test]
    fn label_range_checked() {
        let err = import_csv("1,2,5\n".as_bytes(), 1, 2, 2, "c").unwrap_err();
        assert!(err.to_string().contains("label out of range"));
    }
}
