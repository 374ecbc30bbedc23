//! Continual-learning metrics over the accuracy matrix `a[t][T]`.
//!
//! `a(t, T)` is the eval accuracy on task `t` after training through task `T`
//! (both 1-based, `t <= T`). Average accuracy, backward transfer (forgetting)
//! and forward transfer (cost relative to isolated training) derive from it.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular accuracy grid plus optional isolated-training references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// `rows[T - 1][t - 1] = a(t, T)`.
    rows: Vec<Vec<Option<f64>>>,
    reference: Option<Vec<f64>>,
}

fn check_accuracy(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Validation(format!("accuracy {v} outside [0, 1]")))
    }
}

impl AccuracyMatrix {
    pub fn new(task_count: usize) -> Self {
        Self {
            rows: (1..=task_count).map(|t| vec![None; t]).collect(),
            reference: None,
        }
    }

    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, t: usize, big_t: usize, value: f64) -> Result<()> {
        check_accuracy(value)?;
        if t == 0 || t > big_t || big_t > self.rows.len() {
            return Err(Error::Validation(format!(
                "accuracy index ({t}, {big_t}) outside 1 <= t <= T <= {}",
                self.rows.len()
            )));
        }
        self.rows[big_t - 1][t - 1] = Some(value);
        Ok(())
    }

    pub fn get(&self, t: usize, big_t: usize) -> Option<f64> {
        if t == 0 || t > big_t {
            return None;
        }
        self.rows.get(big_t - 1)?.get(t - 1).copied().flatten()
    }

    pub fn set_reference(&mut self, reference: Vec<f64>) -> Result<()> {
        if reference.len() != self.rows.len() {
            return Err(Error::shape("reference accuracies", self.rows.len(), reference.len()));
        }
        for &v in &reference {
            check_accuracy(v)?;
        }
        self.reference = Some(reference);
        Ok(())
    }

    pub fn reference(&self) -> Option<&[f64]> {
        self.reference.as_deref()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }

    fn row(&self, big_t: usize) -> Result<Vec<f64>> {
        if big_t == 0 || big_t > self.rows.len() {
            return Err(Error::Validation(format!("no row T = {big_t}")));
        }
        self.rows[big_t - 1]
            .iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::Validation(format!("a({}, {big_t}) missing", i + 1))))
            .collect()
    }

    fn diag(&self, t: usize) -> Result<f64> {
        self.get(t, t)
            .ok_or_else(|| Error::Validation(format!("a({t}, {t}) missing")))
    }

    /// `AA(T) = mean_t a(t, T)`.
    pub fn average_accuracy(&self, big_t: usize) -> Result<f64> {
        let row = self.row(big_t)?;
        Ok(row.iter().sum::<f64>() / big_t as f64)
    }

    /// `BWT(T) = mean_{t < T} (a(t, T) - a(t, t))`; `None` when `T = 1`.
    pub fn backward_transfer(&self, big_t: usize) -> Result<Option<f64>> {
        let row = self.row(big_t)?;
        if big_t < 2 {
            return Ok(None);
        }
        let mut sum = 0.0;
        for t in 1..big_t {
            sum += row[t - 1] - self.diag(t)?;
        }
        Ok(Some(sum / (big_t - 1) as f64))
    }

    /// `FWT(T) = mean_{t >= 2} (a(t, t) - ref_t)`; `None` when `T = 1` or no reference.
    pub fn forward_transfer(&self, big_t: usize) -> Result<Option<f64>> {
        self.row(big_t)?;
        let Some(reference) = &self.reference else {
            return Ok(None);
        };
        if big_t < 2 {
            return Ok(None);
        }
        let mut sum = 0.0;
        for t in 2..=big_t {
            sum += self.diag(t)? - reference[t - 1];
        }
        Ok(Some(sum / (big_t - 1) as f64))
    }

    /// Long-format CSV `t,T,accuracy`, ordered by `T` then `t`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "T", "accuracy"])?;
        for (bt, row) in self.rows.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    w.write_record([(t + 1).to_string(), (bt + 1).to_string(), v.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("accuracy csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "T", "accuracy"] {
            return Err(Error::Validation(format!("unexpected accuracy csv header {headers:?}")));
        }
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse_idx = |i: usize| -> Result<usize> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad index {:?}", &rec[i])))
            };
            let v: f64 = rec[2]
                .parse()
                .map_err(|_| Error::Validation(format!("bad accuracy {:?}", &rec[2])))?;
            entries.push((parse_idx(0)?, parse_idx(1)?, v));
        }
        let n = entries.iter().map(|e| e.1).max().unwrap_or(0);
        let mut m = Self::new(n);
        for (t, bt, v) in entries {
            m.set(t, bt, v)?;
        }
        Ok(m)
    }

    /// Reference accuracies as CSV `t,accuracy`.
    pub fn write_reference_csv<W: Write>(&self, writer: W) -> Result<()> {
        let reference = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::Validation("no reference accuracies".into()))?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "accuracy"])?;
        for (t, v) in reference.iter().enumerate() {
            w.write_record([(t + 1).to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("reference csv", e))?;
        Ok(())
    }

    pub fn read_reference_csv<R: Read>(reader: R) -> Result<Vec<f64>> {
        let mut r = csv::Reader::from_reader(reader);
        let mut out = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec[0].parse::<usize>().ok() != Some(i + 1) {
                return Err(Error::Validation(format!("reference rows out of order at {}", i + 1)));
            }
            out.push(
                rec[1]
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad accuracy {:?}", &rec[1])))?,
            );
        }
        Ok(out)
    }
}

/// Final-row metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub aa: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
}

impl AccuracyMatrix {
    pub fn summary(&self) -> Result<Summary> {
        let n = self.task_count();
        Ok(Summary {
            aa: self.average_accuracy(n)?,
            bwt: self.backward_transfer(n)?,
            fwt: self.forward_transfer(n)?,
        })
    }
}
