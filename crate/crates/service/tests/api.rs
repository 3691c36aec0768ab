use std::sync::OnceLock;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use textstyle::corpus::decode_image;
use textstyle::pipeline::Model;
use textstyle::synthetic::gradient_image;
use textstyle::StyleConfig;
use textstyle_service::jobs::{Job, JobKind};
use textstyle_service::{router, AppState, ServiceConfig};
use textstyle_testkit::fixtures::RetrievalFixture;
use tower::ServiceExt;

struct Fixture {
    _data: RetrievalFixture,
    model: Model,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let data = RetrievalFixture::build(32).unwrap();
        Fixture { model: data.model(), _data: data }
    })
}

fn app_with(model: Option<Model>, workers: usize) -> (Router, AppState, tempfile::TempDir) {
    let jobs = tempfile::tempdir().unwrap();
    let config = ServiceConfig { workers, ..ServiceConfig::new(jobs.path()) };
    let state = AppState::new(model, &config).unwrap();
    (router(state.clone(), &config), state, jobs)
}

fn app() -> (Router, AppState, tempfile::TempDir) {
    app_with(Some(fixture().model.clone()), 1)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, header::HeaderMap) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, headers)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, body, _) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, body, _) = send(app, req).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

const BOUNDARY: &str = "textstyle-test-boundary";

fn multipart(fields: &[(&str, &[u8])]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, value) in fields {
        body.extend(format!("--{BOUNDARY}\r\n").bytes());
        if *name == "content" {
            body.extend(
                "Content-Disposition: form-data; name=\"content\"; filename=\"c.png\"\r\nContent-Type: application/octet-stream\r\n\r\n"
                    .bytes(),
            );
        } else {
            body.extend(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").bytes());
        }
        body.extend_from_slice(value);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").bytes());
    Request::post("/api/pipeline")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn content_png() -> Vec<u8> {
    gradient_image(16, 16, [0.9, 0.2, 0.1], [0.1, 0.3, 0.8]).to_png_bytes()
}

async fn wait_done(app: &Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, job) = get_json(app, &format!("/api/jobs/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        match job["status"].as_str().unwrap() {
            "done" | "failed" => return job,
            _ => {}
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job {id} did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn health_reports_index_size() {
    let (app, _, _dir) = app();
    assert_eq!(get_json(&app, "/api/health").await.1, json!({ "status": "ok", "index_size": 64 }));
    let (app, _, _dir) = app_with(None, 1);
    assert_eq!(get_json(&app, "/api/health").await.1["index_size"], 0);
}

#[tokio::test]
async fn retrieve_validates_input() {
    let (app, _, _dir) = app();
    let req = Request::post("/api/retrieve").body(Body::empty()).unwrap();
    let (status, body, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let body: Value = serde_json::from_slice(&body).unwrap();
    assert!(body["fields"]["title"].is_string() && body["fields"]["description"].is_string());

    let (status, _) = post_json(&app, "/api/retrieve", r#"{"title": " ", "description": ""}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post_json(&app, "/api/retrieve", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post_json(&app, "/api/retrieve", r#"{"title": "waves", "k": 0}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn retrieve_without_index_is_unavailable() {
    let (app, _, _dir) = app_with(None, 1);
    let (status, _) = post_json(&app, "/api/retrieve", r#"{"title": "waves"}"#).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn retrieve_returns_ranked_results() {
    let (app, _, _dir) = app();
    let sample = &fixture().model.corpus.samples[0];
    let body = json!({ "title": sample.title, "description": sample.comment, "k": 5 }).to_string();
    let (status, res) = post_json(&app, "/api/retrieve", &body).await;
    assert_eq!(status, StatusCode::OK);
    let results = res["results"].as_array().unwrap();
    assert_eq!(results.len(), 5);
    let direct = fixture().model.retriever.rank(&sample.title, &sample.comment, 5).unwrap();
    for (got, want) in results.iter().zip(&direct) {
        assert_eq!(got["id"], want.id.as_str());
        assert_eq!(got["score"].as_f64().unwrap(), want.score);
        assert_eq!(got["image_url"], format!("/images/{}", want.id));
    }
    assert!(results.iter().any(|r| r["id"] == sample.id.as_str()));
}

#[tokio::test]
async fn one_image_index_returns_that_image() {
    let mut model = fixture().model.clone();
    let keep = model.corpus.samples[3].id.clone();
    model.retriever.index = model.retriever.index.filtered(|id| id == keep);
    let (app, _, _dir) = app_with(Some(model), 1);
    let (status, res) = post_json(&app, "/api/retrieve", r#"{"title": "anything", "k": 1}"#).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(res["results"][0]["id"], keep.as_str());
    let score = res["results"][0]["score"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&score));
}

#[tokio::test]
async fn pipeline_job_matches_direct_run() {
    let (app, _, _dir) = app();
    let config = r#"{"iterations": 12, "decay_at_iteration": 10}"#;
    let req = multipart(&[
        ("content", &content_png()),
        ("title", b"Blazing Amber Waves"),
        ("description", b"waves in amber tones"),
        ("config", config.as_bytes()),
    ]);
    let (status, body, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = serde_json::from_slice::<Value>(&body).unwrap()["job_id"].as_str().unwrap().to_string();

    let (_, job) = get_json(&app, &format!("/api/jobs/{id}")).await;
    assert!(["queued", "running", "done"].contains(&job["status"].as_str().unwrap()));
    assert_eq!(job["kind"], "pipeline");
    assert_eq!(job["progress"]["total"], 12);

    let job = wait_done(&app, &id).await;
    assert_eq!(job["status"], "done", "{job}");
    assert_eq!(job["progress"]["iteration"], 12);
    assert_eq!(job["result"]["history"].as_array().unwrap().len(), 12);

    let (status, png, headers) =
        send(&app, Request::get(format!("/api/jobs/{id}/result")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");

    let style_config: StyleConfig = serde_json::from_str(config).unwrap();
    let content = decode_image(&content_png(), 32).unwrap();
    let direct = fixture()
        .model
        .pipeline(&content, "Blazing Amber Waves", "waves in amber tones", None, &style_config, |_| {})
        .unwrap();
    assert_eq!(png, direct.synthesis.image.to_png_bytes());
    assert_eq!(job["result"]["style_id"], direct.style_id.as_str());
    assert_eq!(job["result"]["final_losses"]["total"].as_f64().unwrap(), direct.synthesis.final_losses.total);
}

#[tokio::test]
async fn explicit_style_id_runs_a_transfer_job() {
    let (app, _, _dir) = app();
    let req = multipart(&[
        ("content", &content_png()),
        ("style_id", b"s005"),
        ("config", br#"{"iterations": 0, "decay_at_iteration": 0}"#),
    ]);
    let (status, body, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = serde_json::from_slice::<Value>(&body).unwrap()["job_id"].as_str().unwrap().to_string();
    let job = wait_done(&app, &id).await;
    assert_eq!(job["kind"], "transfer");
    assert_eq!(job["result"]["style_id"], "s005");
    let (_, png, _) = send(&app, Request::get(format!("/api/jobs/{id}/result")).body(Body::empty()).unwrap()).await;
    let out = decode_image::<f64>(&png, 32).unwrap();
    assert_eq!(out.to_rgb8(), decode_image::<f64>(&content_png(), 32).unwrap().to_rgb8());
}

#[tokio::test]
async fn pipeline_rejects_bad_submissions() {
    let (app, _, _dir) = app();
    let png = content_png();
    type Case<'a> = (Vec<(&'a str, &'a [u8])>, StatusCode);
    let cases: Vec<Case> = vec![
        (vec![("content", b"not an image"), ("title", b"waves")], StatusCode::UNSUPPORTED_MEDIA_TYPE),
        (vec![("title", b"waves")], StatusCode::BAD_REQUEST),
        (vec![("content", &png)], StatusCode::BAD_REQUEST),
        (vec![("content", &png), ("style_id", b"nope")], StatusCode::BAD_REQUEST),
        (vec![("content", &png), ("title", b"w"), ("config", b"{\"lr_initial\": -1}")], StatusCode::BAD_REQUEST),
        (vec![("content", &png), ("title", b"w"), ("colour", b"red")], StatusCode::BAD_REQUEST),
    ];
    for (fields, want) in cases {
        let names: Vec<&str> = fields.iter().map(|f| f.0).collect();
        let (status, _, _) = send(&app, multipart(&fields)).await;
        assert_eq!(status, want, "fields {names:?}");
    }
    let big = vec![0u8; textstyle_service::MAX_UPLOAD_BYTES + 1];
    let (status, _, _) = send(&app, multipart(&[("content", &big), ("title", b"w")])).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn unknown_and_unfinished_jobs() {
    let (app, state, _dir) = app();
    assert_eq!(get_json(&app, "/api/jobs/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get_json(&app, "/api/jobs/nope/result").await.0, StatusCode::NOT_FOUND);
    let job = Job::new(JobKind::Pipeline, 5);
    state.jobs().insert(job.clone()).unwrap();
    let (status, body) = get_json(&app, &format!("/api/jobs/{}/result", job.id)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["status"], "queued");
}

#[tokio::test]
async fn parallel_jobs_match_sequential_runs() {
    let (app, _, _dir) = app_with(Some(fixture().model.clone()), 3);
    let titles = ["Shadowy Crimson Waves", "Muted Emerald Pillars", "Luminous Azure Lattice"];
    let config = br#"{"iterations": 6, "decay_at_iteration": 4}"#;
    let mut ids = Vec::new();
    for t in titles {
        let (status, body, _) =
            send(&app, multipart(&[("content", &content_png()), ("title", t.as_bytes()), ("config", config)])).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        ids.push(serde_json::from_slice::<Value>(&body).unwrap()["job_id"].as_str().unwrap().to_string());
    }
    let style_config: StyleConfig = serde_json::from_slice(config).unwrap();
    let content = decode_image(&content_png(), 32).unwrap();
    for (id, t) in ids.iter().zip(titles) {
        assert_eq!(wait_done(&app, id).await["status"], "done");
        let (_, png, _) = send(&app, Request::get(format!("/api/jobs/{id}/result")).body(Body::empty()).unwrap()).await;
        let direct = fixture().model.pipeline(&content, t, "", None, &style_config, |_| {}).unwrap();
        assert_eq!(png, direct.synthesis.image.to_png_bytes());
    }
}

#[tokio::test]
async fn jobs_survive_restart() {
    let jobs = tempfile::tempdir().unwrap();
    let config = ServiceConfig::new(jobs.path());
    let state = AppState::new(Some(fixture().model.clone()), &config).unwrap();
    let app = router(state.clone(), &config);
    let (_, body, _) = send(
        &app,
        multipart(&[("content", &content_png()), ("title", b"waves"), ("config", br#"{"iterations": 2, "decay_at_iteration": 1}"#)]),
    )
    .await;
    let id = serde_json::from_slice::<Value>(&body).unwrap()["job_id"].as_str().unwrap().to_string();
    let before = wait_done(&app, &id).await;
    drop((app, state));

    let state = AppState::new(None, &config).unwrap();
    let app = router(state, &config);
    let (status, after) = get_json(&app, &format!("/api/jobs/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after, before);
    let (status, _, _) = send(&app, Request::get(format!("/api/jobs/{id}/result")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn images_preview_and_cors() {
    let (app, _, _dir) = app();
    let (status, png, headers) = send(&app, Request::get("/images/s001").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");
    assert_eq!(decode_image::<f64>(&png, 64).unwrap().width(), 32);
    assert_eq!(get_json(&app, "/images/zzz").await.0, StatusCode::NOT_FOUND);

    let ppm = gradient_image(16, 24, [0.0; 3], [1.0; 3]).to_ppm_bytes();
    let (status, png, _) = send(&app, Request::post("/api/preview").body(Body::from(ppm)).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(decode_image::<f64>(&png, 64).unwrap().height(), 16);
    let (status, _, _) = send(&app, Request::post("/api/preview").body(Body::from("junk")).unwrap()).await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);

    let req = Request::get("/api/health").header(header::ORIGIN, "http://localhost:5173").body(Body::empty()).unwrap();
    let (_, _, headers) = send(&app, req).await;
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[tokio::test]
async fn static_bundle_is_served_under_app() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<h1>ui</h1>").unwrap();
    let jobs = tempfile::tempdir().unwrap();
    let config = ServiceConfig { static_dir: Some(ui.path().to_path_buf()), ..ServiceConfig::new(jobs.path()) };
    let app = router(AppState::new(None, &config).unwrap(), &config);
    let (status, body, _) = send(&app, Request::get("/app/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<h1>ui</h1>");
}
