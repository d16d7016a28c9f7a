use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use mitodiff::data::{aggregate_votes, VoteRecord, VoteValue};
use mitodiff_annotate::{router, Catalog, SeriesFrames, Store, ANNOTATOR_HEADER};
use serde_json::{json, Value};
use tower::ServiceExt;

fn catalog(n: usize) -> Catalog {
    let mut c = Catalog::new();
    for i in 0..n {
        c.insert_patch(format!("patch-{i:03}"), vec![0x89, b'P', i as u8]).unwrap();
    }
    let frames = SeriesFrames { stops: vec![0, 25, 50, 75, 100, 125, 150, 200], frames: vec![vec![1, 2, 3]; 8] };
    c.insert_series("neg-0", frames).unwrap();
    c
}

async fn call(app: &Router, method: &str, uri: &str, who: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(w) = who {
        req = req.header(ANNOTATOR_HEADER, w);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn open_session(app: &Router, who: &str, patches: Option<Vec<String>>, repeats: u32, seed: u64) -> String {
    let (st, v) = call(app, "POST", "/sessions", Some(who), Some(json!({"patch_ids": patches, "repeats": repeats, "seed": seed}))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_responds() {
    let app = router(Arc::new(Store::in_memory(catalog(3))));
    let (st, v) = call(&app, "GET", "/health", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["patches"], 3);
}

#[tokio::test]
async fn five_patches_three_repeats() {
    let store = Arc::new(Store::in_memory(catalog(5)));
    let app = router(store.clone());
    let sid = open_session(&app, "ann", None, 3, 11).await;
    let mut seen = 0;
    loop {
        let (st, item) = call(&app, "GET", &format!("/sessions/{sid}/next"), Some("ann"), None).await;
        assert_eq!(st, StatusCode::OK);
        if item["status"] == "complete" {
            assert_eq!(item["progress"], json!({"done": 15, "total": 15}));
            break;
        }
        let keys: BTreeSet<_> = item.as_object().unwrap().keys().cloned().collect();
        let expected: BTreeSet<String> = ["status", "session_id", "cursor", "round", "patch_id", "image_png_base64", "progress"]
            .into_iter()
            .map(String::from)
            .collect();
        assert_eq!(keys, expected, "payload must not leak votes or labels");
        let vote = json!({"patch_id": item["patch_id"], "value": 1.0, "cursor": item["cursor"]});
        let uri = format!("/sessions/{sid}/votes");
        let (st, first) = call(&app, "POST", &uri, Some("ann"), Some(vote.clone())).await;
        assert_eq!(st, StatusCode::OK, "{first}");
        // a double click replays the same request
        let (st, second) = call(&app, "POST", &uri, Some("ann"), Some(vote)).await;
        assert_eq!(st, StatusCode::OK);
        assert_eq!(first, second);
        seen += 1;
    }
    assert_eq!(seen, 15);
    assert_eq!(store.votes().len(), 15);

    let (st, label) = call(&app, "GET", "/patches/patch-002/label", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(label["label"], 1.0);
    assert_eq!(label["histogram"], json!({"0": 0, "0.5": 0, "1": 3}));
}

#[tokio::test]
async fn vote_validation_and_conflicts() {
    let app = router(Arc::new(Store::in_memory(catalog(4))));
    let sid = open_session(&app, "ann", None, 1, 0).await;
    let (_, item) = call(&app, "GET", &format!("/sessions/{sid}/next"), None, None).await;
    let uri = format!("/sessions/{sid}/votes");
    let current = item["patch_id"].as_str().unwrap().to_string();
    let wrong = (0..4).map(|i| format!("patch-{i:03}")).find(|p| *p != current).unwrap();

    let (st, _) = call(&app, "POST", &uri, Some("ann"), Some(json!({"patch_id": current, "value": 0.3}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "POST", &uri, Some("ann"), Some(json!({"patch_id": wrong, "value": 1}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = call(&app, "POST", &uri, Some("ann"), Some(json!({"value": 1}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "POST", &uri, Some("other"), Some(json!({"patch_id": current, "value": 1}))).await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    let (st, ack) = call(&app, "POST", &uri, Some("ann"), Some(json!({"patch_id": current, "value": 0.5}))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(ack["next_cursor"], 1);

    let (st, _) = call(&app, "GET", "/sessions/s999999/next", None, None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, "POST", "/sessions", None, Some(json!({"seed": 1}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "POST", "/sessions", Some("ann"), Some(json!({"patch_ids": ["ghost"]}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "GET", &format!("/patches/{wrong}/label"), None, None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn label_histogram_example() {
    let store = Arc::new(Store::in_memory(catalog(1)));
    let app = router(store.clone());
    for (who, value) in [("a", 1.0), ("b", 0.0), ("c", 1.0)] {
        let sid = open_session(&app, who, None, 1, 0).await;
        let (st, _) = call(&app, "POST", &format!("/sessions/{sid}/votes"), Some(who), Some(json!({"patch_id": "patch-000", "value": value}))).await;
        assert_eq!(st, StatusCode::OK);
    }
    let (_, label) = call(&app, "GET", "/patches/patch-000/label", None, None).await;
    assert!((label["label"].as_f64().unwrap() - 0.667).abs() < 5e-4);
    assert_eq!(label["histogram"], json!({"0": 1, "0.5": 0, "1": 2}));
    assert_eq!(label["votes"], 3);
}

#[tokio::test]
async fn mark_flow() {
    let app = router(Arc::new(Store::in_memory(catalog(1))));
    let uri = "/series/neg-0/marks";
    let (st, _) = call(&app, "POST", uri, Some("ann"), Some(json!({"earliest": 5, "convincing": 2}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "POST", uri, Some("ann"), Some(json!({"earliest": 2, "convincing": 5}))).await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = call(&app, "POST", uri, Some("bob"), Some(json!({"convincing": 6}))).await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = call(&app, "POST", uri, None, Some(json!({"convincing": 6}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "POST", "/series/missing/marks", Some("ann"), Some(json!({"convincing": 1}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (st, view) = call(&app, "GET", "/series/neg-0", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(view["frames_png_base64"].as_array().unwrap().len(), 8);
    assert_eq!(view["stops"][7], 200);
    let marks = view["marks"].as_array().unwrap();
    assert_eq!(marks.len(), 2);
    assert_eq!((marks[0]["earliest"].clone(), marks[0]["convincing"].clone()), (json!(2), json!(5)));
    assert_eq!(marks[1]["earliest"], Value::Null);
}

#[tokio::test]
async fn export_matches_log() {
    let store = Arc::new(Store::in_memory(catalog(3)));
    let app = router(store.clone());
    let sid = open_session(&app, "ann", None, 2, 5).await;
    for _ in 0..6 {
        let (_, item) = call(&app, "GET", &format!("/sessions/{sid}/next"), None, None).await;
        call(&app, "POST", &format!("/sessions/{sid}/votes"), None, Some(json!({"patch_id": item["patch_id"], "value": 0.5}))).await;
    }
    let req = Request::builder().uri("/export/votes.csv").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/csv; charset=utf-8");
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap(), vec!["patch_id", "annotator_id", "round", "value", "timestamp"]);
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    let rounds: Vec<_> = rows.iter().map(|r| r[2].to_string()).collect();
    assert_eq!(rounds, ["1", "1", "1", "2", "2", "2"]);
}

/// Eight annotators vote concurrently over overlapping patches; every label
/// must equal the value recomputed from the exported log.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_writers_are_linearizable() {
    let store = Arc::new(Store::in_memory(catalog(50)));
    let app = router(store.clone());
    let mut handles = Vec::new();
    for w in 0..8u64 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let who = format!("writer-{w}");
            let sid = open_session(&app, &who, None, 2, w).await;
            let mut n = 0;
            loop {
                let (_, item) = call(&app, "GET", &format!("/sessions/{sid}/next"), Some(&who), None).await;
                if item["status"] == "complete" {
                    break;
                }
                let value = [0.0, 0.5, 1.0][((item["cursor"].as_u64().unwrap() + w) % 3) as usize];
                let vote = json!({"patch_id": item["patch_id"], "value": value, "cursor": item["cursor"]});
                let uri = format!("/sessions/{sid}/votes");
                let (st, _) = call(&app, "POST", &uri, Some(&who), Some(vote.clone())).await;
                assert_eq!(st, StatusCode::OK);
                if n % 10 == 0 {
                    let (st, _) = call(&app, "POST", &uri, Some(&who), Some(vote)).await;
                    assert_eq!(st, StatusCode::OK);
                }
                n += 1;
            }
            n
        }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), 100);
    }

    let log = store.votes();
    assert_eq!(log.len(), 800);
    let keys: BTreeSet<_> = log.iter().map(|v| (v.session_id.clone(), v.cursor)).collect();
    assert_eq!(keys.len(), 800);
    let mut by_patch: BTreeMap<String, Vec<VoteRecord>> = BTreeMap::new();
    for v in &log {
        by_patch.entry(v.patch_id.clone()).or_default().push(v.record());
    }
    assert_eq!(by_patch.len(), 50);
    for (patch, records) in by_patch {
        assert_eq!(records.len(), 16);
        let (_, label) = call(&app, "GET", &format!("/patches/{patch}/label"), None, None).await;
        assert_eq!(label["label"].as_f64().unwrap().to_bits(), aggregate_votes(&records).unwrap().to_bits());
        let h = &label["histogram"];
        let count = |v: VoteValue| records.iter().filter(|r| r.value == v).count() as u64;
        assert_eq!(h["0"].as_u64().unwrap(), count(VoteValue::No));
        assert_eq!(h["0.5"].as_u64().unwrap(), count(VoteValue::Unsure));
        assert_eq!(h["1"].as_u64().unwrap(), count(VoteValue::Yes));
    }
}
