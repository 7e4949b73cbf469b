//! A deliberately small HTTP abstraction. Both API clients speak through
//! [`Transport`], which lets the harness swap the network for in-process
//! fake servers while keeping byte-level request/response shapes.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Get,
    Post,
    Patch,
    Put,
    Delete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Patch => "PATCH",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_uppercase().as_str() {
            "GET" => Method::Get,
            "POST" => Method::Post,
            "PATCH" => Method::Patch,
            "PUT" => Method::Put,
            "DELETE" => Method::Delete,
            _ => return None,
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: Method,
    /// Absolute URL, e.g. `https://api.github.com/repos/o/r/actions/runs?page=1`.
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpRequest {
    pub fn new(method: Method, url: impl Into<String>) -> Self {
        Self { method, url: url.into(), headers: Vec::new(), body: Vec::new() }
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn with_body(mut self, content_type: &str, body: Vec<u8>) -> Self {
        self.headers.push(("Content-Type".to_string(), content_type.to_string()));
        self.body = body;
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    /// Path component of the URL, without query.
    pub fn path(&self) -> &str {
        let rest = match self.url.find("://") {
            Some(i) => {
                let after = &self.url[i + 3..];
                after.find('/').map(|j| &after[j..]).unwrap_or("/")
            }
            None => self.url.as_str(),
        };
        rest.split(['?', '#']).next().unwrap_or("/")
    }

    /// Decoded query pairs in request order.
    pub fn query_pairs(&self) -> Vec<(String, String)> {
        match self.url.split_once('?') {
            Some((_, q)) => url::form_urlencoded::parse(q.split('#').next().unwrap_or("").as_bytes())
                .map(|(k, v)| (k.into_owned(), v.into_owned()))
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn query(&self, name: &str) -> Option<String> {
        self.query_pairs().into_iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn new(status: u16) -> Self {
        Self { status, headers: Vec::new(), body: Vec::new() }
    }

    pub fn json(status: u16, value: &serde_json::Value) -> Self {
        Self {
            status,
            headers: vec![("Content-Type".into(), "application/json".into())],
            body: serde_json::to_vec(value).expect("json values always serialize"),
        }
    }

    pub fn text(status: u16, body: &str) -> Self {
        Self { status, headers: vec![("Content-Type".into(), "text/plain".into())], body: body.as_bytes().to_vec() }
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// Short, lossy rendering of the body for diagnostics.
    pub fn body_snippet(&self) -> String {
        let text = String::from_utf8_lossy(&self.body);
        text.chars().take(200).collect()
    }
}

fn find_header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("transport error: {0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        (**self).send(request)
    }
}

/// Trust anchors for TLS connections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TlsRoots {
    /// Bundled public roots.
    WebPki,
    /// PEM-encoded CA bundle, e.g. the service-account `ca.crt`.
    Pem(Vec<u8>),
}

/// Blocking transport over real sockets.
pub struct UreqTransport {
    agent: ureq::Agent,
}

const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

impl UreqTransport {
    pub fn new(roots: &TlsRoots) -> Result<Self, TransportError> {
        let root_certs = match roots {
            TlsRoots::WebPki => ureq::tls::RootCerts::WebPki,
            TlsRoots::Pem(pem) => {
                let certs = ureq::tls::parse_pem(pem)
                    .filter_map(|item| match item {
                        Ok(ureq::tls::PemItem::Certificate(c)) => Some(Ok(c)),
                        Ok(_) => None,
                        Err(e) => Some(Err(e)),
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| TransportError(format!("invalid CA bundle: {e}")))?;
                if certs.is_empty() {
                    return Err(TransportError("CA bundle contains no certificates".into()));
                }
                ureq::tls::RootCerts::new_with_certs(&certs)
            }
        };
        let tls = ureq::tls::TlsConfig::builder().root_certs(root_certs).build();
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(REQUEST_TIMEOUT))
            .max_redirects(0)
            .tls_config(tls)
            .build();
        Ok(Self { agent: ureq::Agent::new_with_config(config) })
    }
}

impl Transport for UreqTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = ureq::http::Request::builder().method(request.method.as_str()).uri(&request.url);
        for (k, v) in &request.headers {
            builder = builder.header(k.as_str(), v.as_str());
        }
        let err = |e: &dyn fmt::Display| TransportError(e.to_string());
        let response = if request.body.is_empty() {
            let req = builder.body(()).map_err(|e| err(&e))?;
            self.agent.run(req)
        } else {
            let req = builder.body(request.body.clone()).map_err(|e| err(&e))?;
            self.agent.run(req)
        }
        .map_err(|e| err(&e))?;

        let status = response.status().as_u16();
        let headers = response
            .headers()
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), v.to_str().unwrap_or("").to_string()))
            .collect();
        let body = response.into_body().read_to_vec().map_err(|e| err(&e))?;
        Ok(HttpResponse { status, headers, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_and_query() {
        let req =
            HttpRequest::new(Method::Get, "http://fake:80/api/v1/namespaces/ci/pods?labelSelector=app%3Drunner&x=1");
        assert_eq!(req.path(), "/api/v1/namespaces/ci/pods");
        assert_eq!(req.query("labelSelector").as_deref(), Some("app=runner"));
        assert_eq!(req.query("x").as_deref(), Some("1"));
        assert_eq!(req.query("y"), None);
        assert_eq!(HttpRequest::new(Method::Get, "https://h").path(), "/");
    }

    #[test]
    fn headers_are_case_insensitive() {
        let req = HttpRequest::new(Method::Get, "http://x/").with_header("Accept", "a");
        assert_eq!(req.header("accept"), Some("a"));
    }

    #[test]
    fn rejects_garbage_ca_bundle() {
        assert!(UreqTransport::new(&TlsRoots::Pem(b"not a cert".to_vec())).is_err());
    }
}
