//! Deterministic testbed for the runner manager: fake GitHub and Kubernetes
//! APIs, fake runners, a discrete-time world that drives the real manager
//! code, and an independent oracle for its decisions.

pub mod checks;
pub mod fake_github;
pub mod fake_kube;
pub mod fake_runner;
pub mod oracle;
pub mod scenario;
pub mod serve;
pub mod sim;
pub mod trace;
pub mod wire;
