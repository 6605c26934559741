mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use cirrus_core::ctl::router;
use cirrus_core::execution::{ApplicationView, SubmitAck};
use cirrus_core::JobState;
use common::{Cloud, CloudOptions};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn send(cloud: &Cloud, method: &str, uri: &str, bearer: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(b) = bearer {
        req = req.header("authorization", format!("Bearer {b}"));
    }
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(cloud.master.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), 1 << 20).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test(flavor = "multi_thread")]
async fn create_submit_and_read_back() {
    let cloud = Cloud::start(CloudOptions { workers: 1, storage: false, ..Default::default() }).await;
    let (status, app) =
        send(&cloud, "POST", "/applications", Some("alice:x"), Some(json!({"model": "task", "display_name": "web"}))).await;
    assert_eq!(status, StatusCode::OK);
    let id = app["app_id"].as_str().unwrap().to_string();
    assert_eq!(app["credentials"]["token"], "");

    let job = json!({"payload": {"operation": "fib", "params": "MTA="}});
    let (status, ack) = send(&cloud, "POST", &format!("/applications/{id}/jobs"), Some("alice:x"), Some(json!({"jobs": [job]}))).await;
    assert_eq!(status, StatusCode::OK);
    let ack: SubmitAck = serde_json::from_value(ack).unwrap();

    let mut done = false;
    for _ in 0..200 {
        let (_, view) = send(&cloud, "GET", &format!("/applications/{id}"), Some("alice:x"), None).await;
        let view: ApplicationView = serde_json::from_value(view).unwrap();
        let job = view.jobs.iter().find(|j| j.job_id == ack.job_ids[0]).unwrap();
        if job.state == JobState::Completed {
            assert_eq!(job.result.as_deref(), Some(&b"55"[..]));
            done = true;
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(25)).await;
    }
    assert!(done);

    let (status, stats) = send(&cloud, "GET", "/stats", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stats["nodes_alive"], 2);
    let (status, nodes) = send(&cloud, "GET", "/nodes", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(nodes.as_array().unwrap().len(), 2);
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn error_statuses() {
    let cloud = Cloud::start(CloudOptions { workers: 1, storage: false, ..Default::default() }).await;
    let (status, _) = send(&cloud, "POST", "/applications", None, Some(json!({"model": "task"}))).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = send(&cloud, "POST", "/applications", Some("a:b"), Some(json!({"model": "grid"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let missing = cirrus_core::AppId::new();
    let (status, body) = send(&cloud, "GET", &format!("/applications/{missing}"), None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "UnknownApplication");
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn reservation_statuses() {
    let cloud = Cloud::start(CloudOptions { workers: 1, storage: false, ..Default::default() }).await;
    let t = cirrus_core::ids::now_secs() + 3600;
    let req = |n: u32, d: i64| json!({"node_count": n, "earliest": t, "latest": t + 100, "duration_s": d});
    let (status, body) = send(&cloud, "POST", "/reservations", Some("a:b"), Some(req(1, 100))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["outcome"], "confirmed");
    let (status, body) = send(&cloud, "POST", "/reservations", Some("a:b"), Some(req(1, 100))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["offer"]["proposed_window"]["start"], t + 100);
    let (status, _) = send(&cloud, "POST", "/reservations", Some("a:b"), Some(req(5, 10))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    cloud.stop().await;
}
