//! Ordered count observations with a time-index origin, plus CSV ingestion.
//!
//! The on-disk format is one record per line, either `<count>` or
//! `<t>,<count>`. Counts must parse as non-negative integers. An optional
//! header line is detected by a non-numeric first field and skipped. In the
//! two-column form the time labels must be consecutive integers; the first
//! label becomes the series origin.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-negative integer observations `Y_t` indexed by consecutive time labels
/// starting at `start_index` (default 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSeries {
    values: Vec<u64>,
    start_index: i64,
}

impl CountSeries {
    pub fn new(values: Vec<u64>, start_index: i64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::SeriesTooShort { need: 1, got: 0 });
        }
        Ok(Self {
            values,
            start_index,
        })
    }

    /// Series with the default origin `t = 1`.
    pub fn from_counts(values: Vec<u64>) -> Result<Self> {
        Self::new(values, 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length >= 1 by construction
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn start_index(&self) -> i64 {
        self.start_index
    }

    /// Time label of the last observation.
    pub fn end_index(&self) -> i64 {
        self.start_index + self.values.len() as i64 - 1
    }

    /// Observation at time label `t`, if inside the series range.
    pub fn get(&self, t: i64) -> Option<u64> {
        if t < self.start_index || t > self.end_index() {
            return None;
        }
        Some(self.values[(t - self.start_index) as usize])
    }

    /// Appends one observation at the next time label.
    pub fn push(&mut self, y: u64) {
        self.values.push(y);
    }

    /// First `k` observations as a new series with the same origin.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.values.len() {
            return Err(Error::InvalidWindow(format!(
                "prefix length {k} outside 1..={}",
                self.values.len()
            )));
        }
        Self::new(self.values[..k].to_vec(), self.start_index)
    }

    /// Reads the CSV format described in the module docs.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut values = Vec::new();
        let mut start_index = 1i64;
        let mut expected_t: Option<i64> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let mut fields = trimmed.split(',').map(str::trim);
            let first = fields.next().unwrap_or("");
            let second = fields.next();
            if fields.next().is_some() {
                return Err(Error::Csv {
                    line: lineno,
                    msg: "more than two fields".into(),
                });
            }
            if first.parse::<i64>().is_err() {
                // Header line: only allowed before any data.
                if values.is_empty() {
                    continue;
                }
                return Err(Error::Csv {
                    line: lineno,
                    msg: format!("non-numeric field '{first}' after data started"),
                });
            }
            let (t, count_str) = match second {
                Some(c) => (Some(first.parse::<i64>().unwrap()), c),
                None => (None, first),
            };
            let count: u64 = count_str.parse().map_err(|_| Error::Csv {
                line: lineno,
                msg: format!("'{count_str}' is not a non-negative integer"),
            })?;
            if let Some(t) = t {
                match expected_t {
                    None => {
                        start_index = t;
                        expected_t = Some(t + 1);
                    }
                    Some(exp) if exp == t => expected_t = Some(t + 1),
                    Some(exp) => {
                        return Err(Error::Csv {
                            line: lineno,
                            msg: format!("time index {t} is not consecutive (expected {exp})"),
                        })
                    }
                }
            } else if expected_t.is_some() {
                return Err(Error::Csv {
                    line: lineno,
                    msg: "mixed one- and two-column records".into(),
                });
            }
            values.push(count);
        }
        CountSeries::new(values, start_index)
    }

    /// Writes one `<t>,<count>` record per line.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            writeln!(writer, "{},{}", self.start_index + i as i64, v)?;
        }
        Ok(())
    }
}
