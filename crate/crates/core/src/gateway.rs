//! API gateway for the dashboard: one origin that serves the frontend
//! bundle and forwards `/api` calls to the backend services.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::any;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::services::{ServeDir, ServeFile};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("route {prefix} points to service {service}, which has no upstream")]
    MissingUpstream { prefix: String, service: String },
    #[error("route prefix {0} must start with /api")]
    InvalidPrefix(String),
    #[error("invalid upstream spec {0:?}, expected service=addr[,addr...]")]
    InvalidUpstreamSpec(String),
    #[error("gateway config: {0}")]
    Config(String),
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8000))
}

fn default_routes() -> BTreeMap<String, String> {
    [("/api/hierarchy", "registry"), ("/api/power", "history")]
        .into_iter()
        .map(|(p, s)| (p.to_string(), s.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default)]
    pub static_root: Option<PathBuf>,
    /// Base addresses per service, e.g. `history` → `["http://h1:8080"]`.
    #[serde(default)]
    pub upstreams: BTreeMap<String, Vec<String>>,
    /// Path prefix → service.
    #[serde(default = "default_routes")]
    pub routes: BTreeMap<String, String>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            static_root: None,
            upstreams: BTreeMap::new(),
            routes: default_routes(),
        }
    }
}

impl GatewayConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, GatewayError> {
        serde_json::from_slice(bytes).map_err(|e| GatewayError::Config(e.to_string()))
    }

    /// Adds upstreams from a `service=addr[,addr...]` argument.
    pub fn add_upstream_spec(&mut self, spec: &str) -> Result<(), GatewayError> {
        let (service, addrs) = spec
            .split_once('=')
            .ok_or_else(|| GatewayError::InvalidUpstreamSpec(spec.to_string()))?;
        let addrs: Vec<String> = addrs
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(normalize_addr)
            .collect();
        if service.is_empty() || addrs.is_empty() {
            return Err(GatewayError::InvalidUpstreamSpec(spec.to_string()));
        }
        self.upstreams
            .entry(service.trim().to_string())
            .or_default()
            .extend(addrs);
        Ok(())
    }
}

fn normalize_addr(addr: &str) -> String {
    let addr = addr.trim_end_matches('/');
    if addr.contains("://") {
        addr.to_string()
    } else {
        format!("http://{addr}")
    }
}

struct Upstream {
    addrs: Vec<String>,
    next: AtomicUsize,
}

impl Upstream {
    fn pick(&self) -> &str {
        let i = self.next.fetch_add(1, Ordering::Relaxed);
        &self.addrs[i % self.addrs.len()]
    }
}

/// Maps request paths to services and picks an address per request.
pub struct RouteTable {
    /// Longest prefix first.
    routes: Vec<(String, String)>,
    upstreams: BTreeMap<String, Upstream>,
}

impl RouteTable {
    pub fn new(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let mut routes = Vec::new();
        for (prefix, service) in &config.routes {
            let prefix = prefix.trim_end_matches('/').to_string();
            if !(prefix == "/api" || prefix.starts_with("/api/")) {
                return Err(GatewayError::InvalidPrefix(prefix));
            }
            if config.upstreams.get(service).is_none_or(Vec::is_empty) {
                return Err(GatewayError::MissingUpstream {
                    prefix,
                    service: service.clone(),
                });
            }
            routes.push((prefix, service.clone()));
        }
        routes.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        let upstreams = config
            .upstreams
            .iter()
            .map(|(s, addrs)| {
                (
                    s.clone(),
                    Upstream {
                        addrs: addrs.iter().map(|a| normalize_addr(a)).collect(),
                        next: AtomicUsize::new(0),
                    },
                )
            })
            .collect();
        Ok(Self { routes, upstreams })
    }

    /// Service responsible for `path`.
    pub fn service_for(&self, path: &str) -> Option<&str> {
        self.routes
            .iter()
            .find(|(prefix, _)| {
                path.strip_prefix(prefix.as_str())
                    .is_some_and(|rest| rest.is_empty() || rest.starts_with('/'))
            })
            .map(|(_, s)| s.as_str())
    }

    /// Next base address of `service`, round-robin.
    pub fn next_upstream(&self, service: &str) -> Option<&str> {
        self.upstreams.get(service).map(Upstream::pick)
    }
}

struct Gateway {
    table: RouteTable,
    client: reqwest::Client,
}

/// Builds the gateway's router.
pub fn router(config: &GatewayConfig) -> Result<Router, GatewayError> {
    let gateway = Arc::new(Gateway {
        table: RouteTable::new(config)?,
        client: reqwest::Client::new(),
    });
    let api = Router::new()
        .route("/api", any(forward))
        .route("/api/*rest", any(forward))
        .with_state(gateway);
    Ok(match &config.static_root {
        Some(root) => {
            let spa = ServeDir::new(root).fallback(ServeFile::new(root.join("index.html")));
            api.fallback_service(spa)
        }
        None => api.fallback(|| async { StatusCode::NOT_FOUND }),
    })
}

fn error_response(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({ "error": message }))).into_response()
}

const FORWARDED_HEADERS: [header::HeaderName; 2] = [header::CONTENT_TYPE, header::ACCEPT];

async fn forward(State(gw): State<Arc<Gateway>>, method: Method, uri: Uri, headers: HeaderMap, request: Request) -> Response {
    let path = uri.path();
    let Some(service) = gw.table.service_for(path) else {
        return error_response(StatusCode::NOT_FOUND, "no such route");
    };
    let Some(base) = gw.table.next_upstream(service) else {
        return error_response(StatusCode::BAD_GATEWAY, "no upstream configured");
    };
    let path_and_query = uri.path_and_query().map_or(path, |pq| pq.as_str());
    let url = format!("{base}{path_and_query}");
    let body: Bytes = match axum::body::to_bytes(request.into_body(), 16 * 1024 * 1024).await {
        Ok(b) => b,
        Err(_) => return error_response(StatusCode::PAYLOAD_TOO_LARGE, "request body too large"),
    };
    let mut upstream = gw.client.request(method, &url);
    for name in FORWARDED_HEADERS {
        if let Some(v) = headers.get(&name) {
            upstream = upstream.header(name, v);
        }
    }
    let response = match upstream.body(body).send().await {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(service, error = %e, "upstream unavailable");
            return error_response(StatusCode::BAD_GATEWAY, &format!("service {service} is unavailable"));
        }
    };
    let status = response.status();
    let content_type = response.headers().get(header::CONTENT_TYPE).cloned();
    match response.bytes().await {
        Ok(bytes) => {
            let mut out = Response::new(Body::from(bytes));
            *out.status_mut() = status;
            if let Some(ct) = content_type {
                out.headers_mut().insert(header::CONTENT_TYPE, ct);
            }
            out
        }
        Err(e) => {
            tracing::warn!(service, error = %e, "upstream response interrupted");
            error_response(StatusCode::BAD_GATEWAY, &format!("service {service} is unavailable"))
        }
    }
}
