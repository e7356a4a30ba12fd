use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use curvereg::keycurve::{fit_all, prediction_band, AnnotationSet, KeyPoint, SelectionUncertainty};
use curvereg::synth::{PhantomSpec, SynthSpec};
use curvereg_cli::service::{router, AppState};

fn data_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        phantom: PhantomSpec {
            dims: [36, 32, 64],
            seed: 5,
            ..PhantomSpec::default()
        },
        deformation: None,
    };
    spec.build().unwrap().save(dir.path()).unwrap();
    dir
}

fn app(root: &Path) -> Router {
    router(Arc::new(AppState::new(root, 1)), "")
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => builder
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn send_raw(app: &Router, method: Method, uri: &str, body: &str) -> StatusCode {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    app.clone().oneshot(req).await.unwrap().status()
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

fn five_points(visit: &str) -> AnnotationSet {
    let points = (0..5)
        .map(|i| {
            let z = 10.0 + 7.0 * i as f64;
            KeyPoint::new("c1", 0.01 * z * z + 3.0 + (i % 2) as f64 * 0.4, 20.0 - 0.2 * z, z)
        })
        .collect();
    AnnotationSet {
        visit_id: visit.into(),
        points,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn lists_volumes() {
    let dir = data_dir();
    let app = app(dir.path());
    let (status, body) = send(&app, Method::GET, "/volumes", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    let ids: Vec<&str> = v.as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["src", "tgt"]);
    assert_eq!(v[0]["dims"], json!([36, 32, 64]));
    assert_eq!(v[0]["channels"], json!(["CT", "PET"]));
    assert_eq!(v[0]["spacing_mm"], json!([3.5, 3.5, 3.5]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn slice_png_and_errors() {
    let dir = data_dir();
    let app = app(dir.path());
    let (status, body) = send(&app, Method::GET, "/volumes/src/slice?channel=CT&z=20&window=-200,300", None).await;
    assert_eq!(status, StatusCode::OK);
    let img = image::load_from_memory(&body).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (36, 32));

    // Pixel levels equal the library's window mapping of the same slice.
    let grid = curvereg::volume::load_volume(dir.path().join("src.vmeta")).unwrap();
    let slice = grid
        .extract_slice(curvereg::volume::ChannelLabel::Ct, 20, (-200.0, 300.0))
        .unwrap();
    assert_eq!(img.into_raw(), slice.to_gray8());

    let (status, _) = send(&app, Method::GET, "/volumes/src/slice?z=64", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::GET, "/volumes/src/slice?z=63", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = send(&app, Method::GET, "/volumes/nope/slice?z=1", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::GET, "/volumes/src/slice?z=1&channel=PET_PREPROCESSED", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::GET, "/volumes/src/slice?z=1&window=5", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Method::GET, "/volumes/src/slice?z=1&channel=MRI", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn overlay_png() {
    let dir = data_dir();
    let app = app(dir.path());
    let (status, body) = send(&app, Method::GET, "/volumes/tgt/overlay?z=12&alpha=0.4", None).await;
    assert_eq!(status, StatusCode::OK);
    let img = image::load_from_memory(&body).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (36, 32));
    let (status, _) = send(&app, Method::GET, "/volumes/tgt/overlay?z=12&alpha=1.5", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Method::GET, "/volumes/tgt/overlay?z=400", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn put_then_fit_matches_cli_fit() {
    let dir = data_dir();
    let app = app(dir.path());
    let set = five_points("visit1");
    let (status, _) = send(&app, Method::PUT, "/annotations/visit1", Some(serde_json::to_value(&set).unwrap())).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = send(&app, Method::GET, "/annotations/visit1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<AnnotationSet>(&body).unwrap(), set);

    let (status, body) = send(&app, Method::POST, "/fit", Some(json!({"visit": "visit1"}))).await;
    assert_eq!(status, StatusCode::OK);
    let fitted = json_of(&body);

    let persisted = dir.path().join("annotations/visit1.json");
    let out_path = dir.path().join("cli_curves.json");
    let mut out = Vec::new();
    let code = curvereg_cli::run(
        ["curvereg", "fit", "--points", persisted.to_str().unwrap(), "--out", out_path.to_str().unwrap()],
        &mut out,
        &mut std::io::sink(),
    );
    assert_eq!(code, 0);
    let cli = json_of(&out);
    assert_eq!(fitted["curves"], cli["curves"]);
    assert_eq!(
        serde_json::to_string(&fitted["curves"]).unwrap(),
        serde_json::to_string(&cli["curves"]).unwrap()
    );

    // Bands at the annotated z values, straight from the library.
    let curve = &fit_all(&set).unwrap().curves["c1"];
    let bands = fitted["bands"]["c1"].as_array().unwrap();
    assert_eq!(bands.len(), 5);
    for (b, p) in bands.iter().zip(&set.points) {
        let expect = prediction_band(curve, p.z, SelectionUncertainty::default());
        assert_eq!(b, &serde_json::to_value(expect).unwrap());
    }

    let (_, body) = send(&app, Method::POST, "/fit", Some(json!({"visit": "visit1", "z_mm": [0.0, 100.0]}))).await;
    let v = json_of(&body);
    assert_eq!(v["bands"]["c1"].as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn annotation_errors() {
    let dir = data_dir();
    let app = app(dir.path());
    let (status, _) = send(&app, Method::GET, "/annotations/unknown", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(send_raw(&app, Method::PUT, "/annotations/v", "{not json").await, StatusCode::BAD_REQUEST);
    let other = serde_json::to_value(five_points("other")).unwrap();
    let (status, _) = send(&app, Method::PUT, "/annotations/v", Some(other)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Method::POST, "/fit", Some(json!({"visit": "unknown"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(send_raw(&app, Method::POST, "/fit", "[1, 2]").await, StatusCode::BAD_REQUEST);

    let mut short = five_points("short");
    short.points.truncate(2);
    let (status, _) = send(&app, Method::PUT, "/annotations/short", Some(serde_json::to_value(&short).unwrap())).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = send(&app, Method::POST, "/fit", Some(json!({"visit": "short"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&body)["error"], "InsufficientPoints");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn score_endpoint() {
    let dir = data_dir();
    let app = app(dir.path());
    let (status, body) = send(&app, Method::POST, "/score", Some(json!({"src": "src", "tgt": "src"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["rmse_mm"].as_f64(), Some(0.0));

    let (status, body) = send(&app, Method::POST, "/score", Some(json!({"src": "src", "tgt": "tgt"}))).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    let src = AnnotationSet::load(dir.path().join("src_points.json")).unwrap();
    let tgt = AnnotationSet::load(dir.path().join("tgt_points.json")).unwrap();
    let expect = curvereg::keycurve::rmse(&fit_all(&src).unwrap(), &fit_all(&tgt).unwrap(), 64).unwrap();
    assert_eq!(v["rmse_mm"].as_f64(), Some(expect.rmse_mm));
    assert_eq!(v["per_curve"].as_array().unwrap().len(), 3);

    let gt: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("gt_transform.json")).unwrap()).unwrap();
    let (_, body) = send(&app, Method::POST, "/score", Some(json!({"src": "src", "tgt": "tgt", "transform": gt}))).await;
    assert!(json_of(&body)["rmse_mm"].as_f64().unwrap() < 1e-9);

    let (status, _) = send(&app, Method::POST, "/score", Some(json!({"src": "src", "tgt": "missing"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::POST, "/score", Some(json!({"src": "src", "tgt": "tgt", "transform": "job-99"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::POST, "/score", Some(json!({"src": "src"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let disjoint = AnnotationSet {
        visit_id: "disjoint".into(),
        points: (0..3).map(|i| KeyPoint::new("zz", 1.0, 2.0, i as f64 * 5.0)).collect(),
    };
    send(&app, Method::PUT, "/annotations/disjoint", Some(serde_json::to_value(&disjoint).unwrap())).await;
    let (status, body) = send(&app, Method::POST, "/score", Some(json!({"src": "src", "tgt": "disjoint"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&body)["error"], "NoSharedCurves");
}

async fn wait_for(app: &Router, job: &str) -> Value {
    let mut seen = Vec::new();
    for _ in 0..600 {
        let (status, body) = send(app, Method::GET, &format!("/jobs/{job}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let v = json_of(&body);
        seen.push(v["state"].as_str().unwrap().to_string());
        if v["state"] == "done" || v["state"] == "failed" {
            // States only move forward.
            let rank = |s: &str| ["queued", "running", "done", "failed"].iter().position(|x| *x == s).unwrap().min(2);
            assert!(seen.windows(2).all(|w| rank(&w[0]) <= rank(&w[1])), "{seen:?}");
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {job} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn registration_jobs() {
    let dir = data_dir();
    let app = app(dir.path());
    let config = json!({"affine": {"restarts": 1, "max_evals": 400}, "tps": {"enabled": false}});
    let (status, body) = send(&app, Method::POST, "/register", Some(json!({"src": "src", "tgt": "tgt", "config": config}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job = json_of(&body)["job_id"].as_str().unwrap().to_string();

    // Same session while the first job is queued or running.
    let (status, body) = send(&app, Method::POST, "/register", Some(json!({"src": "src", "tgt": "tgt", "config": config}))).await;
    assert_eq!(status, StatusCode::CONFLICT, "{}", String::from_utf8_lossy(&body));

    let done = wait_for(&app, &job).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["progress"].as_f64(), Some(1.0));
    let result_file = dir.path().join(done["result"].as_str().unwrap());
    let result = curvereg::register::RegistrationResult::load(&result_file).unwrap();
    assert!(result.final_objective() <= result.initial_objective());

    // Scoring through the finished job equals scoring with its transform.
    let (_, by_id) = send(&app, Method::POST, "/score", Some(json!({"src": "src", "tgt": "tgt", "transform": job}))).await;
    let inline = serde_json::to_value(&result.transform).unwrap();
    let (_, by_value) = send(&app, Method::POST, "/score", Some(json!({"src": "src", "tgt": "tgt", "transform": inline}))).await;
    assert_eq!(by_id, by_value);
    let before = send(&app, Method::POST, "/score", Some(json!({"src": "src", "tgt": "tgt"}))).await.1;
    assert!(json_of(&by_id)["rmse_mm"].as_f64() < json_of(&before)["rmse_mm"].as_f64());

    // The session is free again.
    let (status, body) = send(&app, Method::POST, "/register", Some(json!({"src": "src", "tgt": "tgt", "config": {"affine": {"max_evals": 0}}}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let failed = wait_for(&app, json_of(&body)["job_id"].as_str().unwrap()).await;
    assert_eq!(failed["state"], "failed");
    assert!(failed["error"].as_str().unwrap().contains("OptimizerBudgetExceeded"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn register_request_errors() {
    let dir = data_dir();
    let app = app(dir.path());
    let (status, _) = send(&app, Method::GET, "/jobs/job-404", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::POST, "/register", Some(json!({"src": "src", "tgt": "nope"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::POST, "/register", Some(json!({"src": "src", "tgt": "tgt", "config": {"bogus": 1}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(send_raw(&app, Method::POST, "/register", "").await, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn routes_under_prefix() {
    let dir = data_dir();
    let app = router(Arc::new(AppState::new(dir.path(), 1)), "/api/v1");
    let (status, _) = send(&app, Method::GET, "/api/v1/volumes", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = send(&app, Method::GET, "/volumes", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_put_and_get_see_whole_documents() {
    let dir = data_dir();
    let app = app(dir.path());
    let small = five_points("race");
    let mut large = five_points("race");
    for i in 0..2000 {
        large.points.push(KeyPoint::new(format!("k{}", i % 7), i as f64, 1.0, (i % 11) as f64));
    }
    send(&app, Method::PUT, "/annotations/race", Some(serde_json::to_value(&small).unwrap())).await;

    let mut tasks = Vec::new();
    for i in 0..40 {
        let app = app.clone();
        let doc = if i % 2 == 0 { large.clone() } else { small.clone() };
        tasks.push(tokio::spawn(async move {
            if i % 4 < 2 {
                let (status, _) = send(&app, Method::PUT, "/annotations/race", Some(serde_json::to_value(&doc).unwrap())).await;
                assert_eq!(status, StatusCode::OK);
                None
            } else {
                let (status, body) = send(&app, Method::GET, "/annotations/race", None).await;
                assert_eq!(status, StatusCode::OK);
                Some(serde_json::from_slice::<AnnotationSet>(&body).expect("complete document"))
            }
        }));
    }
    for t in tasks {
        if let Some(doc) = t.await.unwrap() {
            assert!(doc == small || doc == large);
        }
    }
}
