use std::io::Write;
use std::path::Path;

use crate::checkpoint::Stage;
use crate::kv::KvMap;
use crate::{Error, FormatError, Result};

/// Per-step training log of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub seed: u64,
    /// Resolved configuration the stage ran with.
    pub config: KvMap,
    /// One record per step, strictly increasing in `step`.
    pub records: Vec<(u64, KvMap)>,
    pub wall_time: f64,
}

impl StageReport {
    pub fn new(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            seed,
            config: KvMap::new(),
            records: Vec::new(),
            wall_time: 0.0,
        }
    }

    /// Record for `step`, appended if `step` is past the last one.
    ///
    /// # Panics
    /// If `step` is below the last recorded step.
    pub fn record(&mut self, step: u64) -> &mut KvMap {
        match self.records.last() {
            Some((s, _)) if *s == step => {}
            Some((s, _)) if *s > step => panic!("report steps must increase ({s} then {step})"),
            _ => self.records.push((step, KvMap::new())),
        }
        &mut self.records.last_mut().unwrap().1
    }

    pub fn get(&self, step: u64) -> Option<&KvMap> {
        self.records
            .binary_search_by_key(&step, |(s, _)| *s)
            .ok()
            .map(|i| &self.records[i].1)
    }

    /// Values of `key` as `(step, value)` pairs, skipping records without it.
    pub fn series(&self, key: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|(s, r)| r.get(key).and_then(|v| v.parse().ok()).map(|v| (*s, v)))
            .collect()
    }

    /// Line-delimited records: a `kind=config` header, one `kind=step`
    /// line per step, and a `kind=summary` trailer.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut head = self.config.clone();
        head.set("kind", "config")
            .set("stage", self.stage)
            .set("seed", self.seed)
            .set("config.digest", format!("{:016x}", self.config.digest()));
        out.push_str(&head.to_record());
        out.push('\n');
        for (step, r) in &self.records {
            let mut line = r.clone();
            line.set("kind", "step").set("stage", self.stage).set("step", step);
            out.push_str(&line.to_record());
            out.push('\n');
        }
        let mut tail = KvMap::new();
        tail.set("kind", "summary")
            .set("stage", self.stage)
            .set("steps", self.records.len())
            .set("wall_time", format!("{:.3}", self.wall_time));
        out.push_str(&tail.to_record());
        out.push('\n');
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_text().as_bytes()))
            .map_err(|source| {
                Error::Format(FormatError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_merge_same_step_and_serialize() {
        let mut r = StageReport::new(Stage::TeacherCp, 4);
        r.config.set("train.lr", 0.0005);
        r.record(1).set("pretext", 2.5);
        r.record(1).set("dev", 2.0);
        r.record(3).set("pretext", 2.0);
        assert_eq!(r.records.len(), 2);
        assert_eq!(r.series("pretext"), vec![(1, 2.5), (3, 2.0)]);
        let text = r.to_text();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        for l in &lines {
            let m = KvMap::parse_record(l).unwrap();
            assert_eq!(m.get("stage"), Some("teacher_cp"));
        }
        let first = KvMap::parse_record(lines[0]).unwrap();
        assert_eq!(first.get("train.lr"), Some("0.0005"));
    }

    #[test]
    #[should_panic]
    fn steps_cannot_go_backwards() {
        let mut r = StageReport::new(Stage::Pretrained, 0);
        r.record(5);
        r.record(4);
    }
}
