//! HTTP prediction service: `POST /predict` with a packet body.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tiny_http::{Header, Method, Response, Server};

use super::{predict, train, Model, ModelSpec, PredictError, PredictionQuery};
use crate::packet::{parse_fields, Packet};
use crate::repository::Repository;

/// Minimum time between repository change checks.
pub const RETRAIN_INTERVAL: Duration = Duration::from_secs(10);
const POLL: Duration = Duration::from_millis(50);

pub enum ModelSource {
    /// Train on demand from this repository, retraining when it changes.
    Repository(PathBuf),
    /// Serve these models only.
    Fixed(Vec<Model>),
}

pub struct ServiceConfig {
    pub source: ModelSource,
    pub bind: String,
    pub workers: usize,
    pub retrain_interval: Duration,
}

impl ServiceConfig {
    pub fn new(source: ModelSource, bind: impl Into<String>) -> Self {
        Self {
            source,
            bind: bind.into(),
            workers: 4,
            retrain_interval: RETRAIN_INTERVAL,
        }
    }
}

struct Snapshot {
    repo: Option<Arc<Repository>>,
    digest: String,
    checked: Instant,
    models: HashMap<ModelSpec, Arc<Model>>,
}

/// Shared state behind the request handlers.
pub struct ServiceState {
    source: ModelSource,
    interval: Duration,
    snapshot: RwLock<Snapshot>,
}

impl ServiceState {
    pub fn new(source: ModelSource, interval: Duration) -> Result<Self, PredictError> {
        let (repo, digest) = match &source {
            ModelSource::Repository(path) => {
                let repo = Repository::open_read_only(path)
                    .map_err(|e| PredictError::Service(e.to_string()))?;
                let digest = repo.content_digest();
                (Some(Arc::new(repo)), digest)
            }
            ModelSource::Fixed(_) => (None, String::new()),
        };
        Ok(Self {
            source,
            interval,
            snapshot: RwLock::new(Snapshot {
                repo,
                digest,
                checked: Instant::now(),
                models: HashMap::new(),
            }),
        })
    }

    /// Reloads the repository if the check interval elapsed and its
    /// content changed; cached models are then dropped.
    fn refresh(&self) {
        let ModelSource::Repository(path) = &self.source else {
            return;
        };
        if self.snapshot.read().unwrap().checked.elapsed() < self.interval {
            return;
        }
        let mut snap = self.snapshot.write().unwrap();
        if snap.checked.elapsed() < self.interval {
            return;
        }
        snap.checked = Instant::now();
        match Repository::open_read_only(path) {
            Ok(repo) => {
                let digest = repo.content_digest();
                if digest != snap.digest {
                    log::info!("repository changed; retraining on demand");
                    snap.digest = digest;
                    snap.repo = Some(Arc::new(repo));
                    snap.models.clear();
                }
            }
            Err(e) => log::warn!("keeping previous snapshot: {e}"),
        }
    }

    fn model_for(&self, query: &PredictionQuery) -> Result<Arc<Model>, PredictError> {
        let spec = ModelSpec {
            compiler_id: query.compiler_id,
            platform_id: query.platform_id,
            objective: query.objective,
            kind: query.model,
            feature_kind: query.features.kind(),
        };
        if let ModelSource::Fixed(models) = &self.source {
            return models
                .iter()
                .find(|m| m.spec == spec)
                .or_else(|| {
                    models
                        .iter()
                        .find(|m| m.spec.kind == spec.kind && m.spec.objective == spec.objective)
                })
                .or(models.first())
                .map(|m| Arc::new(m.clone()))
                .ok_or_else(|| PredictError::InsufficientData("no model loaded".into()));
        }
        self.refresh();
        if let Some(m) = self.snapshot.read().unwrap().models.get(&spec) {
            return Ok(m.clone());
        }
        let mut snap = self.snapshot.write().unwrap();
        if let Some(m) = snap.models.get(&spec) {
            return Ok(m.clone());
        }
        let repo = snap.repo.clone().expect("repository source has a snapshot");
        let model = Arc::new(train(&repo, &spec)?);
        snap.models.insert(spec, model.clone());
        Ok(model)
    }
}

fn error_response(e: &PredictError) -> Packet {
    Packet::new()
        .with("STATUS", e.status())
        .with("MESSAGE", e.to_string().replace('\n', " "))
}

/// Answers one request body: HTTP status and response packet text.
pub fn handle_query(state: &ServiceState, body: &str) -> (u16, String) {
    let outcome = parse_fields(body)
        .map_err(|e| PredictError::MalformedQuery(e.to_string()))
        .and_then(|p| {
            if p.is_empty() {
                Err(PredictError::MalformedQuery("empty body".into()))
            } else {
                PredictionQuery::from_packet(&p)
            }
        })
        .and_then(|q| {
            let model = state.model_for(&q)?;
            predict(&model, &q)
        });
    match outcome {
        Ok(p) => (200, p.to_response().to_text()),
        Err(e) => {
            let code = match e {
                PredictError::MalformedQuery(_) | PredictError::EmptyFeatureVector => 400,
                PredictError::InsufficientData(_) | PredictError::ModelMismatch(_) => 422,
                _ => 500,
            };
            (code, error_response(&e).to_text())
        }
    }
}

/// A running service; stops when shut down or dropped.
pub struct PredictionService {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

fn serve_one(state: &ServiceState, mut request: tiny_http::Request) {
    let (code, body) = if request.url() != "/predict" {
        (
            404,
            error_response(&PredictError::Service("unknown path".into())).to_text(),
        )
    } else if *request.method() != Method::Post {
        (
            405,
            error_response(&PredictError::Service("use POST".into())).to_text(),
        )
    } else {
        let mut body = String::new();
        match request.as_reader().read_to_string(&mut body) {
            Ok(_) => handle_query(state, &body),
            Err(e) => (
                400,
                error_response(&PredictError::MalformedQuery(e.to_string())).to_text(),
            ),
        }
    };
    let header = Header::from_bytes("Content-Type", "text/plain; charset=utf-8")
        .expect("static header is valid");
    let response = Response::from_string(body)
        .with_status_code(code)
        .with_header(header);
    if let Err(e) = request.respond(response) {
        log::warn!("failed to send response: {e}");
    }
}

impl PredictionService {
    pub fn start(config: ServiceConfig) -> Result<Self, PredictError> {
        let state = Arc::new(ServiceState::new(config.source, config.retrain_interval)?);
        let server =
            Arc::new(Server::http(&config.bind).map_err(|e| PredictError::Service(e.to_string()))?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| PredictError::Service("not an IP listener".into()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..config.workers.max(1))
            .map(|_| {
                let (server, state, stop) = (server.clone(), state.clone(), stop.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match server.recv_timeout(POLL) {
                            Ok(Some(rq)) => serve_one(&state, rq),
                            Ok(None) => {}
                            Err(e) => log::warn!("accept failed: {e}"),
                        }
                    }
                })
            })
            .collect();
        log::info!("prediction service listening on {addr}");
        Ok(Self {
            addr,
            stop,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/predict", self.addr)
    }

    /// Blocks until the workers exit.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for PredictionService {
    fn drop(&mut self) {
        self.stop_workers();
    }
}
