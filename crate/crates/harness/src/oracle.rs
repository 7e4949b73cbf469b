//! Brute-force reference for the manager's decisions. Replays a scenario in
//! one straight pass with full knowledge of the scripted world: jobs, pods,
//! runner polls, failures, retries and restarts are modeled directly,
//! without the HTTP fakes or any manager code.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use runner_manager::policy::Policy;
use runner_manager::reconciler::{Decision, Reason};
use serde::Serialize;

use crate::scenario::{EventKind, Scenario, ScenarioError, ScenarioEvent, SimTime};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OracleWrite {
    pub at: SimTime,
    pub from: u32,
    pub to: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OracleEnd {
    Horizon,
    CredentialFailure,
    Fatal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OracleOutput {
    /// `(tick, decision)` for every poll that ran to completion. `None`
    /// means the cluster could not be observed.
    pub ticks: Vec<(SimTime, Option<Decision>)>,
    pub writes: Vec<OracleWrite>,
    pub restarts: Vec<SimTime>,
    pub end: OracleEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum St {
    Queued,
    Running,
    Done,
}

impl St {
    fn name(self) -> &'static str {
        match self {
            St::Queued => "queued",
            St::Running => "in_progress",
            St::Done => "completed",
        }
    }
}

struct Job {
    labels: BTreeSet<String>,
    duration: Option<SimTime>,
    created: SimTime,
    status: St,
    claimed: Option<SimTime>,
}

struct Pod {
    start: SimTime,
    up: bool,
    job: Option<u64>,
}

fn norm(labels: impl IntoIterator<Item = impl AsRef<str>>) -> BTreeSet<String> {
    labels.into_iter().map(|l| l.as_ref().trim().to_lowercase()).filter(|l| !l.is_empty()).collect()
}

/// The scripted world outside the manager.
struct Env {
    script: VecDeque<ScenarioEvent>,
    clock: SimTime,
    jobs: BTreeMap<u64, Job>,
    pods: Vec<Pod>,
    spec: u32,
    gh_fault: Option<u16>,
    /// `(start, end, retry_after)`.
    limits: Vec<(SimTime, SimTime, u64)>,
    kube_fault: Option<u16>,
    startup: SimTime,
    period: SimTime,
    runner_labels: BTreeSet<String>,
}

enum Attempt {
    Ok,
    Retry(Option<u64>),
    Credential,
    Failed,
}

impl Env {
    fn next_time(&self) -> Option<SimTime> {
        let mut best: Option<SimTime> = self.script.front().map(|e| e.at);
        let mut consider = |t: SimTime| best = Some(best.map_or(t, |b| b.min(t)));
        for j in self.jobs.values() {
            if let (St::Running, Some(c), Some(d)) = (j.status, j.claimed, j.duration) {
                consider(c + d);
            }
        }
        let from = self.clock + 1;
        for p in &self.pods {
            if !p.up {
                consider(p.start);
            } else {
                let k = (from - p.start + self.period - 1).div_euclid(self.period).max(0);
                consider(p.start + k * self.period);
            }
        }
        best.map(|t| t.max(from))
    }

    fn run_until(&mut self, t: SimTime) {
        while let Some(s) = self.next_time() {
            if s > t {
                break;
            }
            self.second(s);
            self.clock = s;
        }
        if t > self.clock {
            self.clock = t;
        }
    }

    fn second(&mut self, s: SimTime) {
        while self.script.front().is_some_and(|e| e.at <= s) {
            let ev = self.script.pop_front().unwrap();
            match ev.kind {
                EventKind::EnqueueJob { id, labels, duration_secs, .. } => {
                    self.jobs.insert(
                        id.expect("normalized"),
                        Job {
                            labels: norm(&labels),
                            duration: duration_secs.map(|d| d as SimTime),
                            created: s,
                            status: St::Queued,
                            claimed: None,
                        },
                    );
                }
                EventKind::CompleteJob { job } => {
                    if let Some(j) = self.jobs.get_mut(&job) {
                        j.status = St::Done;
                    }
                }
                EventKind::GithubFault { status } => self.gh_fault = Some(status),
                EventKind::GithubRecover => self.gh_fault = None,
                EventKind::KubeFault { status } => self.kube_fault = Some(status),
                EventKind::KubeRecover => self.kube_fault = None,
                EventKind::RateLimit { retry_after_secs, duration_secs, .. } => {
                    self.limits.retain(|w| w.1 > s);
                    self.limits.push((s, s + duration_secs as SimTime, retry_after_secs));
                }
                EventKind::RestartManager => {}
            }
        }
        for j in self.jobs.values_mut() {
            if let (St::Running, Some(c), Some(d)) = (j.status, j.claimed, j.duration) {
                if c + d <= s {
                    j.status = St::Done;
                }
            }
        }
        for p in &mut self.pods {
            if !p.up && p.start <= s {
                p.up = true;
            }
        }
        for i in 0..self.pods.len() {
            let p = &self.pods[i];
            if !p.up || (s - p.start) % self.period != 0 {
                continue;
            }
            if let Some(j) = p.job {
                if self.jobs[&j].status == St::Running {
                    continue;
                }
                self.pods[i].job = None;
            }
            let pick = self
                .jobs
                .iter()
                .filter(|(_, j)| j.status == St::Queued && j.labels.is_subset(&self.runner_labels))
                .min_by_key(|(id, j)| (j.created, **id))
                .map(|(id, _)| *id);
            if let Some(id) = pick {
                let j = self.jobs.get_mut(&id).unwrap();
                j.status = St::Running;
                j.claimed = Some(s);
                self.pods[i].job = Some(id);
            }
        }
    }

    fn github_attempt(&self, now: SimTime) -> Attempt {
        let mut window: Option<(SimTime, u64)> = None;
        for &(start, end, retry) in &self.limits {
            if start <= now && now < end && window.is_none_or(|(s, _)| start >= s) {
                window = Some((start, retry));
            }
        }
        if let Some((_, retry)) = window {
            return Attempt::Retry(Some(retry.max(1)));
        }
        match self.gh_fault {
            None => Attempt::Ok,
            Some(401) | Some(403) => Attempt::Credential,
            Some(429) => Attempt::Retry(None),
            Some(s) if (500..600).contains(&s) => Attempt::Retry(None),
            Some(_) => Attempt::Failed,
        }
    }

    fn outstanding(&self, statuses: &BTreeSet<String>, labels: &BTreeSet<String>) -> usize {
        self.jobs.values().filter(|j| statuses.contains(j.status.name()) && j.labels.is_subset(labels)).count()
    }

    fn scale(&mut self, to: u32, now: SimTime) {
        self.spec = to;
        while (self.pods.len() as u32) < to {
            self.pods.push(Pod { start: now + self.startup, up: false, job: None });
        }
        while self.pods.len() as u32 > to {
            let i = self.pods.iter().rposition(|p| !p.up).unwrap_or(self.pods.len() - 1);
            let pod = self.pods.remove(i);
            if let Some(j) = pod.job.and_then(|id| self.jobs.get_mut(&id)) {
                if j.status == St::Running {
                    j.status = St::Queued;
                    j.claimed = None;
                }
            }
        }
    }
}

enum Wake {
    At,
    Restart(SimTime),
    Horizon,
}

fn backoff_secs(failures: u32) -> SimTime {
    1i64.checked_shl(failures.saturating_sub(1).min(30)).unwrap_or(60).min(60)
}

/// Expected decisions of the manager on `scenario` under `policy`.
pub fn oracle_decisions(scenario: &Scenario, policy: &Policy) -> Result<OracleOutput, ScenarioError> {
    let scenario = scenario.normalized()?;
    let p = policy.poll_interval.as_secs() as SimTime;
    let force = policy.force_interval.as_secs() as SimTime;
    let dwell = policy.min_dwell.as_secs() as SimTime;
    let idle_limit = (force - dwell).max(0);
    let cap = policy.max_runners;
    let statuses: BTreeSet<String> = policy.outstanding_statuses.iter().cloned().collect();
    let manager_labels = norm(policy.runner_labels.iter());
    let horizon = scenario.horizon;

    let mut env = Env {
        script: scenario.events.iter().cloned().collect(),
        clock: -1,
        jobs: BTreeMap::new(),
        pods: Vec::new(),
        spec: 0,
        gh_fault: None,
        limits: Vec::new(),
        kube_fault: None,
        startup: scenario.pod_startup_secs as SimTime,
        period: scenario.runner_tick_secs as SimTime,
        runner_labels: match &scenario.runner_labels {
            Some(l) => norm(l),
            None => manager_labels.clone(),
        },
    };
    let mut pending_restarts: VecDeque<SimTime> = scenario.restart_times().into();
    let mut out = OracleOutput { ticks: Vec::new(), writes: Vec::new(), restarts: Vec::new(), end: OracleEnd::Horizon };

    // Durable bookkeeping survives restarts through the annotations.
    let mut last_active: Option<SimTime> = scenario.initial_last_active();
    let mut keepalive_since: Option<SimTime> = None;

    env.run_until(0);
    let mut start = 0;
    'instance: loop {
        let mut failures = 0u32;
        let mut retry_at: Option<SimTime> = None;
        let mut credential_strikes = 0u32;
        let mut tick = start;

        let wake = |t: SimTime, pending: &VecDeque<SimTime>| match pending.front() {
            Some(&r) if r <= t => Wake::Restart(r),
            _ if t > horizon => Wake::Horizon,
            _ => Wake::At,
        };
        macro_rules! sleep {
            ($t:expr) => {
                match wake($t, &pending_restarts) {
                    Wake::At => env.run_until($t),
                    Wake::Restart(r) => {
                        env.run_until(r);
                        while pending_restarts.front().is_some_and(|x| *x <= r) {
                            pending_restarts.pop_front();
                            out.restarts.push(r);
                        }
                        start = r;
                        continue 'instance;
                    }
                    Wake::Horizon => {
                        env.run_until(horizon);
                        break 'instance;
                    }
                }
            };
        }

        loop {
            sleep!(tick);
            let mut now = tick;
            let deadline = tick + p;

            // GitHub poll with persistent backoff.
            let github = loop {
                if let Some(n) = retry_at.filter(|n| *n > now) {
                    if n >= deadline {
                        break Attempt::Failed;
                    }
                    sleep!(n);
                    now = n;
                }
                match env.github_attempt(now) {
                    Attempt::Ok => {
                        failures = 0;
                        retry_at = None;
                        break Attempt::Ok;
                    }
                    Attempt::Retry(wait) => {
                        failures += 1;
                        retry_at = Some(now + wait.map_or_else(|| backoff_secs(failures), |w| w as SimTime));
                    }
                    other => break other,
                }
            };

            let mut strike = matches!(github, Attempt::Credential);
            if !strike {
                match env.kube_fault {
                    Some(401) | Some(403) => strike = true,
                    Some(404) => {
                        out.end = OracleEnd::Fatal;
                        break 'instance;
                    }
                    Some(_) => {
                        out.ticks.push((tick, None));
                        credential_strikes = 0;
                    }
                    None => {
                        let running = env.pods.iter().any(|p| p.up);
                        // Rules 3 and 4 stay separate branches to mirror the rule list.
                        #[allow(clippy::if_same_then_else)]
                        let decision = if !matches!(github, Attempt::Ok) {
                            Decision::new(env.spec.min(cap), Reason::Hold)
                        } else {
                            let demand = env.outstanding(&statuses, &manager_labels);
                            if demand > 0 {
                                Decision::new((demand as u32).min(cap), Reason::Demand)
                            } else if keepalive_since.is_some_and(|k| now - k < dwell) {
                                Decision::new(1, Reason::Keepalive)
                            } else if last_active.is_none_or(|la| now - la >= idle_limit) {
                                Decision::new(1, Reason::Keepalive)
                            } else {
                                Decision::new(0, Reason::Idle)
                            }
                        };
                        if decision.target_replicas != env.spec {
                            out.writes.push(OracleWrite { at: now, from: env.spec, to: decision.target_replicas });
                            env.scale(decision.target_replicas, now);
                        }
                        if running {
                            last_active = Some(last_active.map_or(now, |la| la.max(now)));
                        }
                        match decision.reason {
                            Reason::Keepalive => {
                                keepalive_since.get_or_insert(now);
                            }
                            Reason::Demand | Reason::Idle => keepalive_since = None,
                            Reason::Hold => {}
                        }
                        out.ticks.push((tick, Some(decision)));
                        credential_strikes = 0;
                    }
                }
            }
            if strike {
                credential_strikes += 1;
                if credential_strikes >= 3 {
                    out.end = OracleEnd::CredentialFailure;
                    break 'instance;
                }
            }

            tick += p;
            while tick < now {
                tick += p;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{zero_load_scenario, DAY, HOUR};

    fn job(at: SimTime, duration: u64) -> ScenarioEvent {
        ScenarioEvent::new(
            at,
            EventKind::EnqueueJob {
                id: None,
                labels: vec!["self-hosted".into(), "linux-gpu-cuda".into()],
                duration_secs: Some(duration),
                run_with: None,
            },
        )
    }

    fn writes(o: &OracleOutput) -> Vec<(SimTime, u32)> {
        o.writes.iter().map(|w| (w.at, w.to)).collect()
    }

    #[test]
    fn single_job_by_hand() {
        // Enqueued at 10, seen by the poll at 60; pod up at 80 and claims at
        // once; done at 380; the 420 poll sees nothing outstanding.
        let s = Scenario::new(HOUR, vec![job(10, 300)]).with_initial_idle(0);
        let o = oracle_decisions(&s, &Policy::default()).unwrap();
        assert_eq!(writes(&o), vec![(60, 1), (420, 0)]);
        let reasons: Vec<Reason> = o.ticks.iter().map(|(_, d)| d.unwrap().reason).collect();
        assert_eq!(reasons[0], Reason::Idle);
        assert!(reasons[1..7].iter().all(|r| *r == Reason::Demand));
        assert!(reasons[7..].iter().all(|r| *r == Reason::Idle));
    }

    #[test]
    fn zero_load_first_two_activations_by_hand() {
        // No annotation: keepalive at once, 15 minutes of dwell. The pod is
        // last seen running by the 900 s poll, so the next activation is due
        // 83 h 45 min later: 900 + 301500 = 302400 s = 84 h.
        let o = oracle_decisions(&zero_load_scenario(30), &Policy::default()).unwrap();
        let w = writes(&o);
        assert_eq!(&w[..4], &[(0, 1), (900, 0), (84 * HOUR, 1), (84 * HOUR + 900, 0)]);
        assert_eq!(w.len(), 2 * 9);
    }

    #[test]
    fn fault_span_holds() {
        let mut events = vec![job(0, 3600)];
        events.push(ScenarioEvent::new(600, EventKind::GithubFault { status: 503 }));
        events.push(ScenarioEvent::new(1800, EventKind::GithubRecover));
        let s = Scenario::new(2 * HOUR, events).with_initial_idle(0);
        let o = oracle_decisions(&s, &Policy::default()).unwrap();
        let during: Vec<_> = o.ticks.iter().filter(|(t, _)| (660..1800).contains(t)).collect();
        assert!(!during.is_empty());
        assert!(during.iter().all(|(_, d)| d.unwrap() == Decision::new(1, Reason::Hold)));
        assert_eq!(writes(&o), vec![(0, 1), (3660, 0)]);
    }

    #[test]
    fn restart_mid_retry_abandons_tick() {
        let events = vec![
            ScenarioEvent::new(50, EventKind::GithubFault { status: 500 }),
            ScenarioEvent::new(61, EventKind::RestartManager),
            ScenarioEvent::new(62, EventKind::GithubRecover),
        ];
        let s = Scenario::new(300, events).with_initial_idle(0);
        let o = oracle_decisions(&s, &Policy::default()).unwrap();
        let ticks: Vec<SimTime> = o.ticks.iter().map(|(t, _)| *t).collect();
        assert_eq!(ticks, vec![0, 61, 121, 181, 241]);
        assert_eq!(o.restarts, vec![61]);
    }

    #[test]
    fn credential_fault_ends_run() {
        let events = vec![ScenarioEvent::new(0, EventKind::GithubFault { status: 401 })];
        let o = oracle_decisions(&Scenario::new(DAY, events), &Policy::default()).unwrap();
        assert_eq!(o.end, OracleEnd::CredentialFailure);
        assert!(o.ticks.is_empty());
    }
}
