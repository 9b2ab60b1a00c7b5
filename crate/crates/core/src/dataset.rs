//! Transitions, per-task datasets and their on-disk format.
//!
//! A dataset file is one JSON header line carrying the [`DatasetManifest`],
//! followed by one comma-separated record per transition:
//! `s,a,r,s_next,done,origin_task`. Rewards are written with the shortest
//! representation that round-trips, so write -> read -> write is byte-identical.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CdsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
    pub origin_task: usize,
}

impl Transition {
    pub fn new(s: usize, a: usize, r: f64, s_next: usize, done: bool, origin_task: usize) -> Self {
        Transition {
            s,
            a,
            r,
            s_next,
            done,
            origin_task,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetQuality {
    Expert,
    Medium,
    MediumReplay,
    UndirectedSplit,
    DirectedSplit,
}

impl DatasetQuality {
    pub fn label(&self) -> &'static str {
        match self {
            DatasetQuality::Expert => "expert",
            DatasetQuality::Medium => "medium",
            DatasetQuality::MediumReplay => "medium-replay",
            DatasetQuality::UndirectedSplit => "undirected-split",
            DatasetQuality::DirectedSplit => "directed-split",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: usize,
    pub quality: DatasetQuality,
    pub seed: u64,
    pub behavior: String,
    pub size: usize,
}

/// Transitions collected for one task, `D_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: usize,
    pub transitions: Vec<Transition>,
    pub manifest: DatasetManifest,
}

impl TaskDataset {
    pub fn new(task: usize, transitions: Vec<Transition>, quality: DatasetQuality, seed: u64, behavior: impl Into<String>) -> Self {
        let manifest = DatasetManifest {
            task,
            quality,
            seed,
            behavior: behavior.into(),
            size: transitions.len(),
        };
        TaskDataset {
            task,
            transitions,
            manifest,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        if self.manifest.size != self.transitions.len() {
            return Err(CdsError::Format(format!(
                "manifest size {} does not match {} transitions",
                self.manifest.size,
                self.transitions.len()
            )));
        }
        serde_json::to_writer(&mut out, &self.manifest)?;
        out.write_all(b"\n")?;
        for t in &self.transitions {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                t.s,
                t.a,
                format_float(t.r),
                t.s_next,
                if t.done { 1 } else { 0 },
                t.origin_task
            )?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| CdsError::Format("missing dataset header".into()))??;
        let manifest: DatasetManifest = serde_json::from_str(&header)?;
        let mut transitions = Vec::with_capacity(manifest.size);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            transitions.push(parse_record(&line).map_err(|e| {
                CdsError::Format(format!("record {}: {e}", lineno + 1))
            })?);
        }
        if transitions.len() != manifest.size {
            return Err(CdsError::Format(format!(
                "manifest declares {} transitions, file holds {}",
                manifest.size,
                transitions.len()
            )));
        }
        Ok(TaskDataset {
            task: manifest.task,
            transitions,
            manifest,
        })
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn format_float(x: f64) -> String {
    let s = format!("{x}");
    if x.is_finite() && !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        format!("{s}.0")
    } else {
        s
    }
}

fn parse_record(line: &str) -> std::result::Result<Transition, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 fields, found {}", fields.len()));
    }
    let int = |i: usize| fields[i].parse::<usize>().map_err(|e| format!("field {i}: {e}"));
    let r = fields[2].parse::<f64>().map_err(|e| format!("reward: {e}"))?;
    let done = match fields[4] {
        "1" => true,
        "0" => false,
        other => return Err(format!("done flag `{other}`")),
    };
    Ok(Transition {
        s: int(0)?,
        a: int(1)?,
        r,
        s_next: int(3)?,
        done,
        origin_task: int(5)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_transition() -> impl Strategy<Value = Transition> {
        (0usize..50, 0usize..5, any::<f64>().prop_filter("finite", |x| x.is_finite()), 0usize..50, any::<bool>(), 0usize..7)
            .prop_map(|(s, a, r, sn, d, o)| Transition::new(s, a, r, sn, d, o))
    }

    proptest! {
        #[test]
        fn file_roundtrip_is_byte_identical(ts in proptest::collection::vec(arb_transition(), 0..40), seed in any::<u64>()) {
            let ds = TaskDataset::new(2, ts, DatasetQuality::MediumReplay, seed, "q-learning");
            let bytes = ds.to_bytes().unwrap();
            let back = TaskDataset::read_from(&bytes[..]).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn header_carries_manifest() {
        let ds = TaskDataset::new(0, vec![Transition::new(1, 2, 0.5, 3, true, 0)], DatasetQuality::Expert, 7, "greedy");
        let text = String::from_utf8(ds.to_bytes().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            r#"{"task":0,"quality":"expert","seed":7,"behavior":"greedy","size":1}"#
        );
        assert_eq!(lines.next().unwrap(), "1,2,0.5,3,1,0");
    }

    #[test]
    fn size_mismatch_rejected() {
        let text = "{\"task\":0,\"quality\":\"expert\",\"seed\":0,\"behavior\":\"x\",\"size\":2}\n0,0,1.0,0,0,0\n";
        assert!(TaskDataset::read_from(text.as_bytes()).is_err());
    }
}
