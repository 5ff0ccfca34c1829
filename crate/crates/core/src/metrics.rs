//! CSV metric streams: `step,split,metric,value` rows, no timestamps.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::byol::LossRecord;
use crate::error::{Error, Result};
use crate::seg::LearningCurve;

#[derive(Debug, Serialize)]
struct Row<'a> {
    step: u64,
    split: &'a str,
    metric: &'a str,
    value: f64,
}

pub struct MetricsSink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), writer: csv::Writer::from_writer(file) })
    }

    pub fn row(&mut self, step: u64, split: &str, metric: &str, value: f64) -> Result<()> {
        self.writer
            .serialize(Row { step, split, metric, value })
            .map_err(|e| Error::Format(format!("{}: {e}", self.path.display())))
    }

    /// Training loss on the train split, evaluation metrics on val.
    pub fn curve(&mut self, c: &LearningCurve) -> Result<()> {
        for i in 0..c.len() {
            self.row(c.steps[i], "train", "jaccard_loss", c.train_loss[i])?;
            self.row(c.steps[i], "val", "jaccard_loss", c.eval_loss[i])?;
            self.row(c.steps[i], "val", "iou", c.eval_iou[i])?;
        }
        Ok(())
    }

    pub fn ssl_history(&mut self, h: &[LossRecord]) -> Result<()> {
        for r in h {
            self.row(r.step, "train", "byol_loss", r.loss)?;
            self.row(r.step, "train", "tau", r.tau)?;
            self.row(r.step, "train", "learning_rate", r.learning_rate)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut s = MetricsSink::create(&p).unwrap();
        let c = LearningCurve { steps: vec![20, 40], train_loss: vec![0.9, 0.5], eval_iou: vec![0.1, 0.3], eval_loss: vec![0.8, 0.6] };
        s.curve(&c).unwrap();
        s.row(40, "test", "iou", 0.1 + 0.2).unwrap();
        s.finish().unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,split,metric,value");
        assert_eq!(lines.len(), 1 + 6 + 1);
        let mut rdr = csv::Reader::from_path(&p).unwrap();
        let last: Vec<String> = rdr.records().last().unwrap().unwrap().iter().map(String::from).collect();
        assert_eq!(last[3].parse::<f64>().unwrap(), 0.1 + 0.2);
    }
}
