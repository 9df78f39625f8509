//! Line-delimited metrics records plus a CSV exporter.
//!
//! Each snapshot is one self-describing JSON line with stable field names
//! (`iteration`, `mode`, `gammas`, `partition`, `overall`, `per_domain`,
//! `per_level`, `head_acc`, `loss`). Task metrics and accuracies are unit
//! fractions in `[0,1]`; loss components are nats. Wall-clock never enters
//! the stream, so identical runs produce byte-identical files.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use ndft_core::MetricsRecord;

/// Streaming JSONL sink that flushes every record.
pub struct MetricsWriter<W: Write> {
    out: W,
    count: usize,
}

impl MetricsWriter<std::io::BufWriter<std::fs::File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)
            .with_context(|| format!("creating metrics file {}", path.display()))?;
        Ok(MetricsWriter { out: std::io::BufWriter::new(file), count: 0 })
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { out, count: 0 }
    }

    pub fn log(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading metrics file {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).with_context(|| format!("metrics record {} is malformed", i + 1))
        })
        .collect()
}

/// Flattens a record stream into one CSV row per record. Per-level metrics
/// become `<factor>.<level>` columns; the column set is fixed by the first
/// record.
pub fn export_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    let mut columns: Vec<String> = vec![
        "iteration".into(),
        "mode".into(),
        "overall".into(),
        "loss_cls".into(),
        "loss_box".into(),
        "loss_total".into(),
    ];
    if let Some(first) = records.first() {
        for i in 0..first.gammas.len() {
            columns.push(format!("gamma_{i}"));
        }
        for i in 0..first.head_acc.len() {
            columns.push(format!("head_acc_{i}"));
        }
        for row in &first.per_level {
            columns.push(format!("{}.{}", row.factor, row.level));
        }
    }
    out.push_str(&columns.join(","));
    out.push('\n');
    for r in records {
        let mut row: Vec<String> = vec![
            r.iteration.to_string(),
            r.mode.clone(),
            format!("{}", r.overall),
        ];
        match &r.loss {
            Some(l) => {
                row.push(format!("{}", l.l_task_cls));
                row.push(format!("{}", l.l_task_box));
                row.push(format!("{}", l.total));
            }
            None => {
                row.push(String::new());
                row.push(String::new());
                row.push(String::new());
            }
        }
        for g in &r.gammas {
            row.push(format!("{g}"));
        }
        for a in &r.head_acc {
            row.push(format!("{a}"));
        }
        for lv in &r.per_level {
            row.push(format!("{}", lv.metric));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing CSV {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndft_core::eval::LevelMetric;
    use ndft_core::Partition;

    fn record(iteration: u64) -> MetricsRecord {
        MetricsRecord {
            iteration,
            mode: "ndft".into(),
            gammas: vec![0.01, 0.02],
            partition: Partition::ValSeen,
            overall: 0.75,
            per_domain: vec![(vec![0, 1], 0.5, 10)],
            per_level: vec![LevelMetric {
                factor: "altitude".into(),
                level: "low".into(),
                metric: 0.8,
                count: 5,
            }],
            head_acc: vec![0.9, 0.95],
            loss: None,
            wall_clock_s: 123.0,
        }
    }

    #[test]
    fn jsonl_round_trip_ignores_wall_clock() {
        let dir = std::env::temp_dir().join(format!("ndft-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        let records = vec![record(0), record(100)];
        for r in &records {
            w.log(r).unwrap();
        }
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, records, "equality ignores wall clock");
        assert_eq!(back[0].wall_clock_s, 0.0, "wall clock is not persisted");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn identical_runs_serialize_identically() {
        let a = serde_json::to_string(&record(5)).unwrap();
        let mut other = record(5);
        other.wall_clock_s = 999.0;
        let b = serde_json::to_string(&other).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_row_count_matches_record_count() {
        let dir = std::env::temp_dir().join(format!("ndft-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let records = vec![record(0), record(100), record(200)];
        export_csv(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), records.len() + 1);
        let header_cols = lines[0].split(',').count();
        for row in &lines[1..] {
            assert_eq!(row.split(',').count(), header_cols);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
