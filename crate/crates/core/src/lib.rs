//! Scales a pre-declared Kubernetes Deployment of self-hosted GitHub Actions
//! runners to match outstanding jobs, using only namespaced API calls.

pub mod bootstrap;
pub mod clock;
pub mod config;
pub mod github;
pub mod http;
pub mod kube;
pub mod labels;
pub mod policy;
pub mod reconciler;
pub mod repo;
pub mod secret;
pub mod service;
pub mod status;
