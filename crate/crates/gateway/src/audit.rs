//! Exhaustive route audit over the live HTTP router: every route is probed
//! unsigned, replayed and as every role, and the trace is checked for
//! mutations that happened without an allow decision.

use std::sync::{Arc, Mutex};

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use serde::Serialize;
use serde_json::{json, Value};
use tower::ServiceExt;

use ownlink_core::crypto::Keypair;
use ownlink_core::protocol::{derive_keypair, SystemConfig};
use ownlink_core::trace::TraceEvent;

use crate::gateway::Gateway;
use crate::http::{router, SharedGateway};
use crate::principal::{Client, RequestEnvelope, Role};
use crate::routes::{authorize, ROUTES};

#[derive(Debug, Clone, Default, Serialize)]
pub struct RouteAuditReport {
    pub routes: usize,
    pub probes: usize,
    pub violations: Vec<String>,
}

impl RouteAuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.routes == ROUTES.len() && self.probes > 0
    }
}

/// Paths that must not exist on the service.
const UNLISTED: &[&str] =
    &["/", "/health", "/ledger/deploy", "/ledger/directory_put", "/protocol/resolve_identity/x", "/admin", "/sim/converge"];

async fn call(app: &axum::Router, method: Method, path: &str, body: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(path)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .expect("request builds");
    let resp = app.clone().oneshot(req).await.expect("router is infallible");
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap_or_default();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn post(app: &axum::Router, env: &RequestEnvelope) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/{}", env.operation), serde_json::to_vec(env).expect("serializes")).await
}

pub async fn route_audit() -> RouteAuditReport {
    let seed = 1;
    let mut admin = Client::new(derive_keypair(seed, "admin"));
    let gw = Gateway::new(SystemConfig::new(&["c0"], seed), admin.public_key()).expect("config is valid");
    let shared: SharedGateway = Arc::new(Mutex::new(gw));
    let app = router(shared.clone());
    let mut report = RouteAuditReport { routes: ROUTES.len(), ..Default::default() };

    let mut clients = vec![(Role::Custodian, Client::new(derive_keypair(seed, "c0")))];
    for (role, name) in [(Role::DataOwner, "owner"), (Role::ThirdParty, "tp")] {
        let c = Client::new(derive_keypair(seed, name));
        let env = admin.envelope(
            "admin/register_principal",
            json!({"public_key": c.public_key(), "role": role, "name": name}),
        );
        let (status, body) = post(&app, &env).await;
        if status != StatusCode::OK {
            report.violations.push(format!("registering {name} failed: {status} {body}"));
        }
        clients.push((role, c));
    }
    clients.push((Role::Admin, admin));

    let forger = Keypair::from_seed(b"route-audit-forger");
    for route in ROUTES {
        let path = format!("/{}", route.operation);
        for (role, client) in clients.iter_mut() {
            let env = client.envelope(route.operation, json!({}));
            let (status, body) = post(&app, &env).await;
            report.probes += 1;
            let allowed = authorize(*role, route.operation);
            if allowed {
                let msg = body["message"].as_str().unwrap_or_default();
                if status == StatusCode::FORBIDDEN && msg.contains("may not call") {
                    report.violations.push(format!("{path}: {} denied despite matrix", role.as_str()));
                }
                if msg.contains("has no handler") {
                    report.violations.push(format!("{path}: listed but not handled"));
                }
            } else if status != StatusCode::FORBIDDEN {
                report.violations.push(format!("{path}: {} got {status}, expected 403", role.as_str()));
            }
            // a replay of the same envelope never gets past authentication
            let (status, _) = post(&app, &env).await;
            report.probes += 1;
            if status != StatusCode::CONFLICT {
                report.violations.push(format!("{path}: replay by {} got {status}", role.as_str()));
            }
        }

        // signed by a key that does not match the named principal
        let mut forged = RequestEnvelope::sign(&forger, 1_000_000, route.operation, json!({}));
        forged.principal = clients[0].1.address();
        let (status, _) = post(&app, &forged).await;
        report.probes += 1;
        if status != StatusCode::UNAUTHORIZED {
            report.violations.push(format!("{path}: forged signature got {status}"));
        }
        // unregistered principal
        let stranger = RequestEnvelope::sign(&forger, 1, route.operation, json!({}));
        let (status, _) = post(&app, &stranger).await;
        report.probes += 1;
        if status != StatusCode::UNAUTHORIZED {
            report.violations.push(format!("{path}: unknown principal got {status}"));
        }
        // no envelope at all
        let (status, _) = call(&app, Method::POST, &path, b"{}".to_vec()).await;
        report.probes += 1;
        if status != StatusCode::BAD_REQUEST {
            report.violations.push(format!("{path}: missing envelope got {status}"));
        }
        // envelope for another route
        let other = clients[0].1.envelope("ledger/export", json!({}));
        let (status, _) = call(&app, Method::POST, &path, serde_json::to_vec(&other).unwrap()).await;
        report.probes += 1;
        if route.operation != "ledger/export" && status != StatusCode::BAD_REQUEST {
            report.violations.push(format!("{path}: mismatched envelope got {status}"));
        }
        let (status, _) = call(&app, Method::GET, &path, vec![]).await;
        report.probes += 1;
        if status != StatusCode::METHOD_NOT_ALLOWED {
            report.violations.push(format!("{path}: GET got {status}"));
        }
    }

    for path in UNLISTED {
        for method in [Method::GET, Method::POST] {
            let env = clients[0].1.envelope(path.trim_start_matches('/'), json!({}));
            let (status, _) = call(&app, method.clone(), path, serde_json::to_vec(&env).unwrap()).await;
            report.probes += 1;
            if status != StatusCode::NOT_FOUND {
                report.violations.push(format!("{method} {path}: got {status}, expected 404"));
            }
        }
    }

    let gw = shared.lock().expect("gateway lock");
    report.violations.extend(mediation_violations(gw.trace().events()));
    report
}

fn is_mutation(e: &TraceEvent) -> bool {
    matches!(
        e,
        TraceEvent::LedgerTx { .. }
            | TraceEvent::StoreFeed { .. }
            | TraceEvent::RecordOp { .. }
            | TraceEvent::Transition { .. }
            | TraceEvent::Resolution { .. }
            | TraceEvent::Consent { .. }
            | TraceEvent::Query { .. }
            | TraceEvent::Whitelist { .. }
            | TraceEvent::Grant { .. }
            | TraceEvent::Message { .. }
            | TraceEvent::PrincipalRegistered { .. }
    )
}

/// Inside every request/response pair, plane events may only follow an
/// allow decision.
pub fn mediation_violations<'a>(events: impl Iterator<Item = &'a TraceEvent>) -> Vec<String> {
    let mut out = Vec::new();
    let mut open: Option<(usize, bool)> = None;
    for (i, e) in events.enumerate() {
        match e {
            TraceEvent::Request { .. } => open = Some((i, false)),
            TraceEvent::Decision { allowed, .. } => {
                if let Some((start, _)) = open {
                    open = Some((start, *allowed));
                }
            }
            TraceEvent::Response { .. } => open = None,
            e if is_mutation(e) => {
                if let Some((start, false)) = open {
                    out.push(format!("event {i} mutated state inside request {start} without an allow decision"));
                }
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unmediated_mutation_is_flagged() {
        let env = json!({});
        let events = [
            TraceEvent::Request { envelope: env.clone() },
            TraceEvent::Message { message_id: 1, to: Default::default(), sender_role: "x".into() },
            TraceEvent::Response { route: "x".into(), ok: true, code: None, body: Value::Null },
        ];
        assert_eq!(mediation_violations(events.iter()).len(), 1);
    }
}
