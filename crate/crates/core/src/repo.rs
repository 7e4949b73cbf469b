use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RepoError {
    #[error("repository {0} must not be empty")]
    Empty(&'static str),
    #[error("repository {field} {value:?} must not contain '/'")]
    Slash { field: &'static str, value: String },
    #[error("expected owner/repo, got {0:?}")]
    Format(String),
}

/// The `owner/repo` pair a manager instance serves. One process serves one
/// repository.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RepoCoordinates {
    owner: String,
    repo: String,
}

impl RepoCoordinates {
    pub fn new(owner: impl Into<String>, repo: impl Into<String>) -> Result<Self, RepoError> {
        let owner = owner.into();
        let repo = repo.into();
        for (field, value) in [("owner", &owner), ("name", &repo)] {
            if value.trim().is_empty() {
                return Err(RepoError::Empty(field));
            }
            if value.contains('/') {
                return Err(RepoError::Slash { field, value: value.clone() });
            }
        }
        Ok(Self { owner, repo })
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn repo(&self) -> &str {
        &self.repo
    }

    /// Web URL used when registering a runner against the repository.
    pub fn html_url(&self) -> String {
        format!("https://github.com/{}/{}", self.owner, self.repo)
    }
}

impl fmt::Display for RepoCoordinates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.owner, self.repo)
    }
}

impl FromStr for RepoCoordinates {
    type Err = RepoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (owner, repo) = s.split_once('/').ok_or_else(|| RepoError::Format(s.to_string()))?;
        Self::new(owner, repo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_displays() {
        let repo: RepoCoordinates = "biocore/unifrac-binaries".parse().unwrap();
        assert_eq!(repo.owner(), "biocore");
        assert_eq!(repo.repo(), "unifrac-binaries");
        assert_eq!(repo.to_string(), "biocore/unifrac-binaries");
        assert_eq!(repo.html_url(), "https://github.com/biocore/unifrac-binaries");
    }

    #[test]
    fn rejects_bad_parts() {
        assert_eq!(RepoCoordinates::new("", "x"), Err(RepoError::Empty("owner")));
        assert!(matches!(RepoCoordinates::new("a", "b/c"), Err(RepoError::Slash { field: "name", .. })));
        assert!("a/b/c".parse::<RepoCoordinates>().is_err());
        assert!("nodelimiter".parse::<RepoCoordinates>().is_err());
    }
}
