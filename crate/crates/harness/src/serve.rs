//! Exposes a fake server either as an in-process [`Transport`] or over real
//! HTTP on a loopback port. Both read "now" from a [`Clock`].

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use runner_manager::clock::Clock;
use runner_manager::http::{HttpRequest, HttpResponse, Method, Transport, TransportError};

use crate::fake_github::FakeGithub;
use crate::fake_kube::FakeKube;
use crate::scenario::{to_sim, SimTime};

pub trait Handler: Send + 'static {
    fn handle(&mut self, req: &HttpRequest, now: SimTime) -> HttpResponse;
}

impl Handler for FakeGithub {
    fn handle(&mut self, req: &HttpRequest, now: SimTime) -> HttpResponse {
        FakeGithub::handle(self, req, now)
    }
}

impl Handler for FakeKube {
    fn handle(&mut self, req: &HttpRequest, now: SimTime) -> HttpResponse {
        FakeKube::handle(self, req, now)
    }
}

pub type Shared<H> = Arc<Mutex<H>>;

pub fn shared<H>(h: H) -> Shared<H> {
    Arc::new(Mutex::new(h))
}

fn dispatch<H: Handler>(target: &Shared<H>, clock: &dyn Clock, req: &HttpRequest) -> HttpResponse {
    let now = to_sim(clock.now());
    target.lock().unwrap_or_else(|p| p.into_inner()).handle(req, now)
}

/// Calls the fake directly, without sockets.
pub struct InProcess<H> {
    target: Shared<H>,
    clock: Arc<dyn Clock>,
}

impl<H: Handler> InProcess<H> {
    pub fn new(target: Shared<H>, clock: Arc<dyn Clock>) -> Self {
        Self { target, clock }
    }
}

impl<H: Handler> Transport for InProcess<H> {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        Ok(dispatch(&self.target, self.clock.as_ref(), request))
    }
}

/// A fake served on `127.0.0.1`; stops when dropped.
pub struct HttpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl HttpServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn to_request(req: &mut tiny_http::Request, host: SocketAddr) -> Result<HttpRequest, String> {
    let method = Method::parse(req.method().as_str()).ok_or_else(|| format!("unsupported method {}", req.method()))?;
    let mut out = HttpRequest::new(method, format!("http://{host}{}", req.url()));
    for h in req.headers() {
        out.headers.push((h.field.as_str().as_str().to_string(), h.value.as_str().to_string()));
    }
    let mut body = Vec::new();
    req.as_reader().read_to_end(&mut body).map_err(|e| e.to_string())?;
    out.body = body;
    Ok(out)
}

fn to_response(resp: HttpResponse) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let mut out = tiny_http::Response::from_data(resp.body).with_status_code(resp.status);
    for (k, v) in resp.headers {
        if let Ok(h) = tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()) {
            out.add_header(h);
        }
    }
    out
}

/// Serves `target` on an ephemeral loopback port.
pub fn serve_http<H: Handler>(target: Shared<H>, clock: Arc<dyn Clock>) -> std::io::Result<HttpServer> {
    let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
    let addr =
        server.server_addr().to_ip().ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let thread = std::thread::spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            let mut req = match server.recv_timeout(Duration::from_millis(50)) {
                Ok(Some(r)) => r,
                Ok(None) => continue,
                Err(_) => break,
            };
            let resp = match to_request(&mut req, addr) {
                Ok(r) => dispatch(&target, clock.as_ref(), &r),
                Err(e) => HttpResponse::text(400, &e),
            };
            let _ = req.respond(to_response(resp));
        }
    });
    Ok(HttpServer { addr, stop, thread: Some(thread) })
}
