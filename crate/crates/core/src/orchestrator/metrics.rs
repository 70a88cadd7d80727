use std::io::Write;

use serde::Serialize;

use super::TrainError;
use crate::protocol::transport::TrafficStats;

pub const CSV_HEADER: [&str; 8] = [
    "epoch",
    "step",
    "client_id",
    "loss",
    "train_acc",
    "val_acc",
    "bytes_up",
    "bytes_down",
];

/// One client's view of one training step.
///
/// `train_acc` is the client's running accuracy over the epoch so far.
/// `val_acc` is set on the client's last step of each epoch. Byte counters
/// are cumulative totals of whole frames, as seen by the server.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub epoch: u32,
    pub step: u32,
    pub client_id: u16,
    pub loss: f32,
    pub train_acc: f32,
    pub val_acc: Option<f32>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: u32,
    pub mean_loss: f32,
    pub train_acc: f32,
    pub val_acc: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub rows: Vec<RoundMetrics>,
    pub epochs: Vec<EpochSummary>,
    /// Final per-client traffic counters, server side.
    pub traffic: Vec<TrafficStats>,
}

impl TrainingHistory {
    pub fn final_val_accuracy(&self) -> Option<f32> {
        self.epochs.last().and_then(|e| e.val_acc)
    }

    /// Fills `val_acc` into each client's last row of `epoch` and appends
    /// the epoch summary.
    pub(crate) fn close_epoch(&mut self, epoch: u32, val_acc: Option<f32>) {
        let mut seen = std::collections::HashSet::new();
        let (mut loss, mut correct, mut n) = (0.0f64, 0.0f64, 0usize);
        for row in self.rows.iter_mut().rev().take_while(|r| r.epoch == epoch) {
            if seen.insert(row.client_id) {
                row.val_acc = val_acc;
            }
        }
        for row in self.rows.iter().filter(|r| r.epoch == epoch) {
            loss += f64::from(row.loss);
            n += 1;
        }
        // The running accuracy on each client's last row covers its whole epoch.
        let mut finals = std::collections::BTreeMap::new();
        for row in self.rows.iter().filter(|r| r.epoch == epoch) {
            finals.insert(row.client_id, (row.step + 1, row.train_acc));
        }
        for (steps, acc) in finals.values() {
            correct += f64::from(*acc) * f64::from(*steps);
        }
        self.epochs.push(EpochSummary {
            epoch,
            mean_loss: if n == 0 { 0.0 } else { (loss / n as f64) as f32 },
            train_acc: if n == 0 { 0.0 } else { (correct / n as f64) as f32 },
            val_acc,
        });
    }
}

/// Running per-client counters within an epoch.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Tally {
    pub correct: u32,
    pub seen: u32,
}

impl Tally {
    pub fn record(&mut self, correct: bool) -> f32 {
        self.seen += 1;
        self.correct += u32::from(correct);
        self.correct as f32 / self.seen as f32
    }
}

/// Writes the history rows as CSV with the [`CSV_HEADER`] columns.
pub fn write_metrics_csv(out: impl Write, history: &TrainingHistory) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    for row in &history.rows {
        w.serialize(row)?;
    }
    if history.rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: u32, step: u32, client_id: u16, correct: bool) -> RoundMetrics {
        RoundMetrics {
            epoch,
            step,
            client_id,
            loss: 1.0,
            train_acc: if correct { 1.0 } else { 0.0 },
            val_acc: None,
            bytes_up: 10,
            bytes_down: 20,
        }
    }

    #[test]
    fn close_epoch_marks_last_rows() {
        let mut h = TrainingHistory {
            rows: vec![row(0, 0, 0, true), row(0, 0, 1, false), row(0, 1, 0, true)],
            ..Default::default()
        };
        h.close_epoch(0, Some(0.5));
        let vals: Vec<Option<f32>> = h.rows.iter().map(|r| r.val_acc).collect();
        assert_eq!(vals, vec![None, Some(0.5), Some(0.5)]);
        assert_eq!(h.epochs[0].train_acc, 2.0 / 3.0);
        assert_eq!(h.final_val_accuracy(), Some(0.5));
    }

    #[test]
    fn csv_layout() {
        let mut h = TrainingHistory {
            rows: vec![row(0, 0, 0, true)],
            ..Default::default()
        };
        h.rows[0].val_acc = Some(0.25);
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &h).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,step,client_id,loss,train_acc,val_acc,bytes_up,bytes_down\n0,0,0,1.0,1.0,0.25,10,20\n"
        );
    }
}
