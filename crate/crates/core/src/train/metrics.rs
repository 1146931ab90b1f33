use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decorrelation::LossBreakdown;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Aggregate statistics of one pass over a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub softmax_loss: f64,
    pub total_loss: f64,
    pub accuracy: f64,
    pub wall_seconds: f64,
    /// `(stage, mean mfd loss over batches)`, ascending stage.
    pub mfd_per_stage: Vec<(usize, f64)>,
    /// `(stage, mean absolute off-diagonal correlation over batches)`.
    pub mean_abs_corr_per_stage: Vec<(usize, f64)>,
}

impl MetricsRecord {
    pub fn mean_abs_corr(&self, stage: usize) -> Option<f64> {
        lookup(&self.mean_abs_corr_per_stage, stage)
    }

    pub fn mfd(&self, stage: usize) -> Option<f64> {
        lookup(&self.mfd_per_stage, stage)
    }
}

fn lookup(pairs: &[(usize, f64)], stage: usize) -> Option<f64> {
    pairs.iter().find(|(s, _)| *s == stage).map(|(_, v)| *v)
}

/// Loss decomposition of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Writes records as CSV. Stage columns follow the stages of the first
/// record: all `mfd_stage_<i>` columns, then all `meanabscorr_stage_<i>`.
pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let stages: Vec<usize> = records
        .first()
        .map(|r| r.mfd_per_stage.iter().map(|(s, _)| *s).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epoch", "split", "softmax_loss", "total_loss", "accuracy", "wall_seconds"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(stages.iter().map(|s| format!("mfd_stage_{s}")));
    header.extend(stages.iter().map(|s| format!("meanabscorr_stage_{s}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.epoch.to_string(),
            r.split.to_string(),
            r.softmax_loss.to_string(),
            r.total_loss.to_string(),
            r.accuracy.to_string(),
            format!("{:.3}", r.wall_seconds),
        ];
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        row.extend(stages.iter().map(|&s| cell(r.mfd(s))));
        row.extend(stages.iter().map(|&s| cell(r.mean_abs_corr(s))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-step loss log as CSV.
pub fn write_steps_csv<W: Write>(out: W, steps: &[StepRecord]) -> Result<()> {
    let stages: Vec<usize> = steps
        .first()
        .map(|r| r.loss.mfd_per_stage.iter().map(|(s, _)| *s).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epoch", "step", "lr", "lambda", "softmax_loss", "total_loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(stages.iter().map(|s| format!("mfd_stage_{s}")));
    w.write_record(&header)?;
    for s in steps {
        let mut row = vec![
            s.epoch.to_string(),
            s.step.to_string(),
            s.lr.to_string(),
            s.loss.lambda.to_string(),
            s.loss.softmax_loss.to_string(),
            s.loss.total.to_string(),
        ];
        row.extend(s.loss.mfd_per_stage.iter().map(|(_, v)| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let rec = MetricsRecord {
            epoch: 0,
            split: Split::Test,
            softmax_loss: 0.5,
            total_loss: 0.75,
            accuracy: 0.9,
            wall_seconds: 1.23456,
            mfd_per_stage: vec![(0, 0.1), (2, 0.2)],
            mean_abs_corr_per_stage: vec![(0, 0.3), (2, 0.4)],
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,split,softmax_loss,total_loss,accuracy,wall_seconds,\
             mfd_stage_0,mfd_stage_2,meanabscorr_stage_0,meanabscorr_stage_2"
        );
        assert_eq!(lines.next().unwrap(), "0,test,0.5,0.75,0.9,1.235,0.1,0.2,0.3,0.4");
    }
}
