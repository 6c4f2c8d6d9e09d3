use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use sessionseg::corpus::{AnnotatedSession, Catalog, Session};
use sessionseg_annot::http::{router, AppState, NextResponse, SubmitAck};
use sessionseg_annot::store::{AnnotationStore, ManualClock, ProgressReport};
use tower::ServiceExt;

fn app(dir: &tempfile::TempDir, ui: Option<std::path::PathBuf>) -> Router {
    let sessions = vec![
        Session::new("s1", vec!["a".into(), "b".into(), "c".into()]),
        Session::new("s2", vec!["d".into(), "e".into()]),
    ];
    let store =
        AnnotationStore::open(sessions, Catalog::default(), &dir.path().join("log.jsonl"), 1, 60_000, Box::new(ManualClock::new(0)))
            .unwrap();
    let tokens = HashMap::from([("tok-ann".to_string(), "ann".to_string()), ("tok-bob".to_string(), "bob".to_string())]);
    router(Arc::new(AppState { store: Mutex::new(store), tokens }), ui)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn get(uri: &str, token: Option<&str>) -> Request<Body> {
    let mut b = Request::get(uri);
    if let Some(t) = token {
        b = b.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    b.body(Body::empty()).unwrap()
}

fn post_labels(id: &str, token: &str, body: &str) -> Request<Body> {
    Request::post(format!("/api/session/{id}/labels"))
        .header(header::AUTHORIZATION, format!("Bearer {token}"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn authentication() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir, None);
    assert_eq!(call(&app, get("/api/session/next?annotator=ann", None)).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&app, get("/api/session/next?annotator=ann", Some("nope"))).await.0, StatusCode::UNAUTHORIZED);
    // token of another annotator
    assert_eq!(call(&app, get("/api/session/next?annotator=ann", Some("tok-bob"))).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&app, get("/api/session/next?annotator=ann&token=tok-ann", None)).await.0, StatusCode::OK);
    assert_eq!(call(&app, get("/api/progress", None)).await.0, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn label_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir, None);
    let (status, body) = call(&app, get("/api/session/next?annotator=ann", Some("tok-ann"))).await;
    assert_eq!(status, StatusCode::OK);
    let next: NextResponse = serde_json::from_slice(&body).unwrap();
    let p = next.session.unwrap();
    let labels: Vec<u8> = (0..p.gap_count).map(|g| (g == 0) as u8).collect();

    let bad = call(&app, post_labels(&p.session_id, "tok-ann", r#"{"gap_labels":[1,0,0,0,0,0]}"#)).await;
    assert_eq!(bad.0, StatusCode::BAD_REQUEST);
    let bad = call(&app, post_labels(&p.session_id, "tok-ann", "{garbage")).await;
    assert_eq!(bad.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, post_labels("missing", "tok-ann", r#"{"gap_labels":[1]}"#)).await.0, StatusCode::NOT_FOUND);

    let body = serde_json::json!({ "gap_labels": labels }).to_string();
    let (status, ack) = call(&app, post_labels(&p.session_id, "tok-ann", &body)).await;
    assert_eq!(status, StatusCode::OK);
    let ack: SubmitAck = serde_json::from_slice(&ack).unwrap();
    assert_eq!(ack.record_id, 1);
    assert_eq!(call(&app, post_labels(&p.session_id, "tok-ann", &body)).await.0, StatusCode::CONFLICT);

    let (status, export) = call(&app, get("/api/export?policy=first", Some("tok-bob"))).await;
    assert_eq!(status, StatusCode::OK);
    let rows: Vec<AnnotatedSession> =
        String::from_utf8(export).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].session.session_id, p.session_id);
    assert_eq!(rows[0].gap_labels, labels);
    assert_eq!(rows[0].annotator_id, "ann");

    let (status, body) = call(&app, get("/api/progress", Some("tok-ann"))).await;
    assert_eq!(status, StatusCode::OK);
    let progress: ProgressReport = serde_json::from_slice(&body).unwrap();
    assert_eq!(progress.records, 1);
    assert_eq!(progress.annotators[0].fractions.iter().sum::<f64>(), 1.0);

    assert_eq!(call(&app, get("/api/export?policy=weird", Some("tok-ann"))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn empty_export_and_exhausted_queue() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir, None);
    assert_eq!(call(&app, get("/api/export", Some("tok-ann"))).await.0, StatusCode::NOT_FOUND);
    for _ in 0..2 {
        let (_, body) = call(&app, get("/api/session/next?annotator=ann", Some("tok-ann"))).await;
        let p = serde_json::from_slice::<NextResponse>(&body).unwrap().session.unwrap();
        let body = serde_json::json!({ "gap_labels": vec![0; p.gap_count] }).to_string();
        assert_eq!(call(&app, post_labels(&p.session_id, "tok-ann", &body)).await.0, StatusCode::OK);
    }
    let (status, body) = call(&app, get("/api/session/next?annotator=ann", Some("tok-ann"))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(serde_json::from_slice::<NextResponse>(&body).unwrap().session.is_none());
}

#[tokio::test]
async fn serves_ui_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>form</html>").unwrap();
    let app = app(&dir, Some(ui));
    let (status, body) = call(&app, get("/index.html", None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>form</html>");
}
