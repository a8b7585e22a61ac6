//! HTTP+JSON transport. One POST route per entry in [`ROUTES`], all bound
//! to the same handler, which forwards to [`Gateway::handle`].

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{StatusCode, Uri};
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};

use crate::gateway::{ErrorCode, Gateway, GatewayError, Response};
use crate::principal::RequestEnvelope;
use crate::routes::ROUTES;

pub type SharedGateway = Arc<Mutex<Gateway>>;

pub fn router(gateway: SharedGateway) -> Router {
    let mut r = Router::new();
    for route in ROUTES {
        r = r.route(&format!("/{}", route.operation), post(handle));
    }
    r.with_state(gateway)
}

fn reply(response: Response) -> (StatusCode, Json<Response>) {
    let status = match response.code {
        None => StatusCode::OK,
        Some(c) => StatusCode::from_u16(c.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
    };
    (status, Json(response))
}

async fn handle(State(gateway): State<SharedGateway>, uri: Uri, body: Bytes) -> impl IntoResponse {
    let operation = uri.path().trim_start_matches('/');
    let envelope: RequestEnvelope = match serde_json::from_slice(&body) {
        Ok(e) => e,
        Err(e) => return reply(Response::error(&GatewayError::BadRequest(format!("envelope: {e}")))),
    };
    if envelope.operation != operation {
        let e = GatewayError::BadRequest(format!("envelope names {} but was posted to {operation}", envelope.operation));
        return reply(Response { ok: false, code: Some(ErrorCode::BadRequest), body: serde_json::json!({"message": e.to_string()}) });
    }
    let response = gateway.lock().expect("gateway lock").handle(&envelope);
    reply(response)
}
