//! Spectrograms as CSV: one row per frequency band, one column per frame, no
//! header.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PimError, Result};
use crate::grid::SignalGrid;

/// Parses a rectangular CSV of reals into a one-dimensional grid.
pub fn read_spectrogram(reader: impl Read) -> Result<SignalGrid> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| PimError::Table {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(PimError::Table {
                    row,
                    column: record.len().min(w),
                    message: format!("ragged row: {} cells, expected {w}", record.len()),
                })
            }
            _ => {}
        }
        for (column, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| PimError::Table {
                row,
                column,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(PimError::Table {
                    row,
                    column,
                    message: format!("`{cell}` is not finite"),
                });
            }
            values.push(v);
        }
        height += 1;
    }
    let width = width.filter(|&w| w > 0).ok_or_else(|| PimError::Table {
        row: 0,
        column: 0,
        message: "empty spectrogram".into(),
    })?;
    SignalGrid::new(height, width, 1, values)
}

pub fn load_spectrogram_csv(path: impl AsRef<Path>) -> Result<SignalGrid> {
    read_spectrogram(File::open(path)?)
}

/// Writes a one-dimensional grid; values use the shortest decimal form that
/// reads back to the same `f64`.
pub fn write_spectrogram(grid: &SignalGrid, writer: impl Write) -> Result<()> {
    if grid.dim() != 1 {
        return Err(PimError::InvalidInput(format!(
            "spectrograms carry one value per cell, got dimension {}",
            grid.dim()
        )));
    }
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    for i in 0..grid.height() {
        let row: Vec<String> = (0..grid.width())
            .map(|j| grid.get(i, j)[0].to_string())
            .collect();
        wtr.write_record(&row).map_err(|e| PimError::Io(e.into()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_spectrogram_csv(path: impl AsRef<Path>, grid: &SignalGrid) -> Result<()> {
    write_spectrogram(grid, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_bands() {
        let g = read_spectrogram("1,2,3\n4,5,6\n".as_bytes()).unwrap();
        assert_eq!((g.height(), g.width(), g.dim()), (2, 3, 1));
        assert_eq!(g.get(1, 0), &[4.0]);
    }

    #[test]
    fn errors_carry_row_and_column() {
        assert!(matches!(
            read_spectrogram("".as_bytes()),
            Err(PimError::Table { .. })
        ));
        assert!(matches!(
            read_spectrogram("1,2\n3\n".as_bytes()),
            Err(PimError::Table { row: 1, .. })
        ));
        assert!(matches!(
            read_spectrogram("1,2\n3,x\n".as_bytes()),
            Err(PimError::Table {
                row: 1,
                column: 1,
                ..
            })
        ));
    }

    #[test]
    fn round_trip_is_exact() {
        let g = SignalGrid::from_fn(3, 4, 1, |i, j, _| {
            (i as f64 + 0.1) / (j as f64 + 3.0) - 1e-7
        })
        .unwrap();
        let mut buf = Vec::new();
        write_spectrogram(&g, &mut buf).unwrap();
        assert_eq!(read_spectrogram(buf.as_slice()).unwrap(), g);
    }
}
