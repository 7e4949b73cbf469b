//! Property checkers over a finished [`ScenarioRun`]. Each returns the list
//! of violations found; empty means the property held.

use runner_manager::policy::Policy;
use runner_manager::reconciler::Reason;

use crate::oracle::OracleOutput;
use crate::scenario::{to_sim, EventKind, Scenario, SimTime, DAY};
use crate::sim::ScenarioRun;
use crate::trace::Actor;

pub const WEEK: SimTime = 7 * DAY;

/// Longest Retry-After the scenario generators use; bounds how long a
/// backoff can outlive the disturbance that caused it.
pub const MAX_SERVER_WAIT: SimTime = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Disturbance {
    Github,
    RateLimit,
    Kube,
}

/// Scripted outage windows `[start, end)`, clipped to the horizon.
pub fn disturbances(scenario: &Scenario) -> Vec<(Disturbance, SimTime, SimTime)> {
    let mut out = Vec::new();
    let mut github: Option<SimTime> = None;
    let mut kube: Option<SimTime> = None;
    for ev in &scenario.events {
        match &ev.kind {
            EventKind::GithubFault { .. } => {
                github.get_or_insert(ev.at);
            }
            EventKind::GithubRecover => {
                if let Some(s) = github.take() {
                    out.push((Disturbance::Github, s, ev.at));
                }
            }
            EventKind::KubeFault { .. } => {
                kube.get_or_insert(ev.at);
            }
            EventKind::KubeRecover => {
                if let Some(s) = kube.take() {
                    out.push((Disturbance::Kube, s, ev.at));
                }
            }
            EventKind::RateLimit { duration_secs, .. } => {
                out.push((Disturbance::RateLimit, ev.at, (ev.at + *duration_secs as SimTime).min(scenario.horizon)));
            }
            _ => {}
        }
    }
    if let Some(s) = github {
        out.push((Disturbance::Github, s, scenario.horizon));
    }
    if let Some(s) = kube {
        out.push((Disturbance::Kube, s, scenario.horizon));
    }
    out.sort_by_key(|d| d.1);
    out
}

/// Periods with `spec.replicas >= 1`, as `[start, end)`; `end` is `None`
/// if still active at the horizon. The second element of each item is
/// true when the activation was a keepalive.
pub fn active_intervals(run: &ScenarioRun) -> Vec<(SimTime, Option<SimTime>, bool)> {
    let mut out: Vec<(SimTime, Option<SimTime>, bool)> = Vec::new();
    let mut open: Option<(SimTime, bool)> = None;
    for w in &run.scale_writes {
        if w.from == 0 && w.to > 0 {
            let keepalive = run
                .records
                .iter()
                .any(|r| r.wrote_scale && to_sim(r.time) == w.at && r.reason == Some(Reason::Keepalive));
            open = Some((w.at, keepalive));
        } else if w.from > 0 && w.to == 0 {
            if let Some((s, k)) = open.take() {
                out.push((s, Some(w.at), k));
            }
        }
    }
    if let Some((s, k)) = open {
        out.push((s, None, k));
    }
    out
}

/// Criterion: never more than `cap` replicas requested or observed.
pub fn check_cap(run: &ScenarioRun, cap: u32) -> Vec<String> {
    let mut v = Vec::new();
    for w in &run.scale_writes {
        if w.to > cap {
            v.push(format!("{}: scale write to {} at t={}", run.name, w.to, w.at));
        }
    }
    for r in &run.records {
        if let Some(o) = r.observed.filter(|o| *o > cap) {
            v.push(format!("{}: observed spec {} at t={}", run.name, o, to_sim(r.time)));
        }
        if let Some(d) = r.desired.filter(|d| *d > cap) {
            v.push(format!("{}: desired {} at t={}", run.name, d, to_sim(r.time)));
        }
    }
    v
}

/// Criterion: decisions and writes equal the oracle's, tick for tick.
pub fn check_oracle(run: &ScenarioRun, expected: &OracleOutput) -> Vec<String> {
    let mut v = Vec::new();
    let got = run.decisions();
    if got != expected.ticks {
        let i =
            got.iter().zip(&expected.ticks).position(|(a, b)| a != b).unwrap_or(got.len().min(expected.ticks.len()));
        v.push(format!(
            "{}: decision {} differs: manager {:?} vs oracle {:?} ({} vs {} ticks)",
            run.name,
            i,
            got.get(i),
            expected.ticks.get(i),
            got.len(),
            expected.ticks.len()
        ));
    }
    let writes: Vec<(SimTime, u32, u32)> = run.scale_writes.iter().map(|w| (w.at, w.from, w.to)).collect();
    let oracle_writes: Vec<(SimTime, u32, u32)> = expected.writes.iter().map(|w| (w.at, w.from, w.to)).collect();
    if writes != oracle_writes {
        v.push(format!("{}: scale writes differ: {:?} vs oracle {:?}", run.name, writes, oracle_writes));
    }
    if run.restarts != expected.restarts {
        v.push(format!("{}: restarts differ: {:?} vs {:?}", run.name, run.restarts, expected.restarts));
    }
    v
}

#[derive(Clone, Debug, Default)]
pub struct LatencyReport {
    pub samples: usize,
    pub max_latency: SimTime,
    pub violations: Vec<String>,
}

/// Criterion: in a quiescent system, a newly enqueued matching job triggers
/// a scale-up within `bound` seconds. Quiescent means: nothing requested at
/// enqueue, and no outage, restart or lingering backoff near the window.
pub fn check_demand_latency(scenario: &Scenario, run: &ScenarioRun, policy: &Policy, bound: SimTime) -> LatencyReport {
    let p = policy.poll_interval.as_secs() as SimTime;
    let lookback = 2 * p + MAX_SERVER_WAIT;
    let outages = disturbances(scenario);
    let restarts = scenario.restart_times();
    let mut report = LatencyReport::default();
    for ev in &scenario.events {
        let EventKind::EnqueueJob { labels, .. } = &ev.kind else { continue };
        let s = ev.at;
        if !runner_manager::labels::LabelSet::new(labels).is_subset(&policy.runner_labels) || s + bound > run.horizon {
            continue;
        }
        let spec_before = run.scale_writes.iter().rfind(|w| w.at < s).map_or(0, |w| w.to);
        let disturbed = outages.iter().any(|(_, a, b)| *a < s + bound && *b > s - lookback);
        let restarted = restarts.iter().any(|r| *r >= s - p && *r <= s + bound);
        if spec_before != 0 || disturbed || restarted {
            continue;
        }
        report.samples += 1;
        match run.scale_writes.iter().find(|w| w.at >= s && w.to >= 1) {
            Some(w) if w.at - s <= bound => report.max_latency = report.max_latency.max(w.at - s),
            Some(w) => {
                report.max_latency = report.max_latency.max(w.at - s);
                report.violations.push(format!("{}: job enqueued at {} scaled up only at {}", run.name, s, w.at));
            }
            None => report.violations.push(format!("{}: job enqueued at {} never scaled up", run.name, s)),
        }
    }
    report
}

#[derive(Clone, Debug, Default)]
pub struct KeepaliveReport {
    pub activations: usize,
    pub min_window_count: usize,
    pub min_dwell: SimTime,
    pub max_token_age: SimTime,
    /// Largest lateness of a keepalive start beyond the idle limit.
    pub max_drift: SimTime,
    /// 7-day windows with fewer than two activations. Kept apart because
    /// jobs reset the idle clock, so only zero-load traces must satisfy it.
    pub window_violations: Vec<String>,
    pub violations: Vec<String>,
}

/// Criterion: every 7-day window sees at least two activations, keepalive
/// dwell lasts at least `min_dwell`, credentials never age a week, and each
/// keepalive starts no later than the idle limit plus one poll per restart
/// (plus any outage time) after the runner was last seen.
pub fn check_keepalive(scenario: &Scenario, run: &ScenarioRun, policy: &Policy) -> KeepaliveReport {
    let p = policy.poll_interval.as_secs() as SimTime;
    let dwell = policy.min_dwell.as_secs() as SimTime;
    let idle_limit = policy.keepalive_idle_limit().as_secs() as SimTime;
    let h = run.horizon;
    let intervals = active_intervals(run);
    let mut r = KeepaliveReport { min_window_count: usize::MAX, min_dwell: SimTime::MAX, ..Default::default() };
    r.activations = intervals.len();

    if h >= WEEK {
        let mut starts = vec![0];
        starts.extend(intervals.iter().filter_map(|i| i.1));
        for w in starts.into_iter().filter(|w| *w <= h - WEEK) {
            let n = intervals.iter().filter(|(a, b, _)| *a < w + WEEK && b.is_none_or(|b| b > w)).count();
            r.min_window_count = r.min_window_count.min(n);
            if n < 2 {
                r.window_violations.push(format!("{}: window [{}, {}) has {} activations", run.name, w, w + WEEK, n));
            }
        }
    }

    for (a, b, keepalive) in &intervals {
        if let (true, Some(b)) = (*keepalive, b) {
            r.min_dwell = r.min_dwell.min(b - a);
            if b - a < dwell {
                r.violations.push(format!("{}: keepalive at {} lasted {} s", run.name, a, b - a));
            }
        }
    }

    let mut credential_base = scenario.initial_last_active().unwrap_or(0);
    for rec in &run.records {
        let t = to_sim(rec.time);
        r.max_token_age = r.max_token_age.max(t - credential_base);
        if let Some(la) = rec.last_active.map(to_sim) {
            credential_base = la;
        }
    }
    r.max_token_age = r.max_token_age.max(h - credential_base).max(run.max_credential_age);
    if r.max_token_age >= WEEK {
        r.violations.push(format!("{}: credential aged {} s", run.name, r.max_token_age));
    }

    let outages = disturbances(scenario);
    let restarts = scenario.restart_times();
    let mut prev_end = scenario.initial_last_active().unwrap_or(-idle_limit);
    for (a, b, keepalive) in &intervals {
        if *keepalive {
            let in_gap = |t: SimTime| t > prev_end && t <= *a;
            let restarts_in_gap = restarts.iter().filter(|t| in_gap(**t)).count() as SimTime;
            let outage_time: SimTime = outages
                .iter()
                .filter(|(_, s, e)| *s <= *a && *e > prev_end)
                .map(|(_, s, e)| (*e).min(*a) - (*s).max(prev_end) + p + MAX_SERVER_WAIT)
                .sum();
            // The manager cannot act before the run starts.
            let drift = a - (prev_end + idle_limit).max(0);
            r.max_drift = r.max_drift.max(drift);
            let allowed = p * (1 + restarts_in_gap) + outage_time;
            if drift > allowed {
                r.violations.push(format!(
                    "{}: keepalive at {} is {} s late (allowed {} s, last seen {})",
                    run.name, a, drift, allowed, prev_end
                ));
            }
        }
        prev_end = b.unwrap_or(h);
    }
    if r.min_window_count == usize::MAX {
        r.min_window_count = 0;
    }
    if r.min_dwell == SimTime::MAX {
        r.min_dwell = 0;
    }
    r
}

/// Criterion: no scale-down below what outstanding jobs require, judged both
/// by the manager's own poll and by ground truth, and none during GitHub
/// outages. With the default cap of one this forbids any scale-to-0 while a
/// job is outstanding.
pub fn check_no_premature_scale_down(scenario: &Scenario, run: &ScenarioRun) -> Vec<String> {
    let cap = run.config.policy.max_runners;
    let mut v = Vec::new();
    for w in run.scale_writes.iter().filter(|w| w.to < w.from) {
        if (w.to as usize) < w.outstanding.min(cap as usize) {
            v.push(format!(
                "{}: scaled {}->{} at {} with {} jobs outstanding",
                run.name, w.from, w.to, w.at, w.outstanding
            ));
        }
    }
    for rec in run.records.iter().filter(|r| r.wrote_scale && r.desired < r.observed) {
        let seen = rec.queued.unwrap_or(0) + rec.in_progress.unwrap_or(0);
        if !rec.github_ok || (rec.desired.unwrap_or(0) as usize) < seen.min(cap as usize) {
            v.push(format!(
                "{}: scale-down at {} after poll ok={} saw {} jobs",
                run.name,
                to_sim(rec.time),
                rec.github_ok,
                seen
            ));
        }
    }
    for (kind, a, b) in disturbances(scenario) {
        if kind == Disturbance::Kube {
            continue;
        }
        for w in run.scale_writes.iter().filter(|w| w.to < w.from && w.at >= a && w.at < b) {
            v.push(format!("{}: scale-down at {} during {:?} outage [{}, {})", run.name, w.at, kind, a, b));
        }
    }
    v
}

/// Criterion: zero requests outside the namespace.
pub fn check_namespace(run: &ScenarioRun) -> Vec<String> {
    run.namespace_violations.iter().map(|m| format!("{}: {m}", run.name)).collect()
}

/// Criterion: manager requests carry the required headers and replica
/// changes only go through the scale subresource.
pub fn check_wire(run: &ScenarioRun) -> Vec<String> {
    let mut v: Vec<String> = run
        .github_wire
        .violations
        .iter()
        .chain(&run.kube_wire.violations)
        .map(|m| format!("{}: {m}", run.name))
        .collect();
    let total = run.github_wire.violation_count + run.kube_wire.violation_count;
    if total as usize > v.len() {
        v.push(format!("{}: {} further wire violations", run.name, total as usize - v.len()));
    }
    v
}

/// Trace invariants: ordered, and each scale write recorded exactly once.
pub fn check_trace(run: &ScenarioRun) -> Vec<String> {
    let mut v = Vec::new();
    if !run.trace.is_time_ordered() {
        v.push(format!("{}: trace is not time-ordered", run.name));
    }
    let traced = run.trace.filter(Actor::FakeKube, "scale_write").count();
    let recorded = run.records.iter().filter(|r| r.wrote_scale).count();
    if traced != run.scale_writes.len() || recorded != traced {
        v.push(format!(
            "{}: {} scale writes traced, {} seen by the cluster, {} reported by the manager",
            run.name,
            traced,
            run.scale_writes.len(),
            recorded
        ));
    }
    v
}
