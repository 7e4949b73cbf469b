//! Merged, time-ordered record of everything that happened in a scenario.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::scenario::{to_datetime, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Manager,
    FakeGithub,
    FakeKube,
    FakeRunner,
    Scenario,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Position in the trace; `(t, seq)` is strictly increasing.
    pub seq: u64,
    /// Simulated seconds since the scenario epoch.
    pub t: SimTime,
    pub at: String,
    pub actor: Actor,
    pub action: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: SimTime, actor: Actor, action: &str, detail: Value) {
        let seq = self.entries.len() as u64;
        debug_assert!(self.entries.last().is_none_or(|e| e.t <= t), "trace went back in time");
        self.entries.push(TraceEntry {
            seq,
            t,
            at: runner_manager::clock::rfc3339(to_datetime(t)),
            actor,
            action: action.to_string(),
            detail,
        });
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn filter<'a>(&'a self, actor: Actor, action: &'a str) -> impl Iterator<Item = &'a TraceEntry> + 'a {
        self.entries.iter().filter(move |e| e.actor == actor && e.action == action)
    }

    /// True iff `(t, seq)` strictly increases along the trace.
    pub fn is_time_ordered(&self) -> bool {
        self.entries.windows(2).all(|w| (w[0].t, w[0].seq) < (w[1].t, w[1].seq))
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn read_ndjson<R: BufRead>(input: R) -> std::io::Result<Trace> {
        let mut entries = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(Trace { entries })
    }
}
