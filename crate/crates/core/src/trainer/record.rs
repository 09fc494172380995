use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORD_CSV_HEADER: &str = "epoch,stage,active,iters,cum_iters,train_loss,test_acc,lr";

/// One row per epoch. `stage` is 0 for the initial phase, `1..=N` for the
/// curriculum stages and `N + 1` for the final full-set phase; plain runs
/// report 0 throughout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub active: usize,
    pub iters: usize,
    pub cum_iters: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub rows: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn push(&mut self, row: EpochRecord) {
        self.rows.push(row);
    }

    pub fn total_iters(&self) -> usize {
        self.rows.last().map_or(0, |r| r.cum_iters)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_acc)
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.test_acc).max_by(f64::total_cmp)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        if self.rows.is_empty() {
            w.write_record(RECORD_CSV_HEADER.split(',')).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<record>", e))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is UTF-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_csv_string().as_bytes())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
        if header.join(",") != RECORD_CSV_HEADER {
            return Err(Error::InvalidArgument(format!("unexpected record header {}", header.join(","))));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>().map_err(csv_err)?;
        Ok(TrainRecord { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f).map_err(|e| Error::Format {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("record csv: {e}"))
}
