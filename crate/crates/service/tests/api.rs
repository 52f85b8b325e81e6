use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dleng::continual::{merged_class_ids, merged_posterior};
use dleng::pipeline::{detect_frames, LoopConfig, LoopState};
use dleng::synth::{generate_scenario, ScenarioBundle, ScenarioSpec};
use dleng_service::App;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_spec() -> ScenarioSpec {
    ScenarioSpec {
        name: "api".into(),
        seed: 11,
        dim: 4,
        seed_classes: 3,
        heldout_classes: 1,
        height: 16,
        width: 16,
        train_frames: 6,
        val_frames: 12,
        test_frames: 4,
        unknown_frames: 8,
        object_size: (3, 5),
        embed_dim: 16,
        ..ScenarioSpec::default()
    }
}

fn small_config() -> LoopConfig {
    let mut c = LoopConfig::default();
    c.ood.epochs = 60;
    c.ood.hidden = 16;
    c.index.k = 4;
    c.index.warmup_per_cluster = 4;
    c.continual.epochs = 40;
    c.max_inlier_cells = 1500;
    c.max_negative_cells = 3000;
    c.query_n = 16;
    c
}

async fn send(router: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn send_raw(router: &Router, uri: &str, body: &str) -> StatusCode {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    router.clone().oneshot(req).await.unwrap().status()
}

fn heldout_pool_objects(bundle: &ScenarioBundle) -> (String, Vec<u64>) {
    let class = bundle.spec.seed_classes as u32;
    let ids = bundle
        .objects
        .iter()
        .filter(|o| o.class == class && o.frame_id.starts_with("val-"))
        .map(|o| o.object_id)
        .collect();
    (bundle.class_names[class as usize].clone(), ids)
}

/// Candidate ids recomputed from core calls on a given state.
fn expected_candidates(state: &LoopState, bundle: &ScenarioBundle, config: &LoopConfig) -> Vec<String> {
    let detections = detect_frames(state, &bundle.val, &config.detect).unwrap();
    let ids = merged_class_ids(&state.model, &state.heads);
    let mut out = Vec::new();
    for (frame, comps) in bundle.val.iter().zip(&detections) {
        for (i, c) in comps.iter().enumerate() {
            let post = merged_posterior(&c.representative, &state.model, &state.heads).unwrap();
            let claimed = state
                .heads
                .iter()
                .any(|h| post[ids.iter().position(|&x| x == h.class_id).unwrap()] > 0.5);
            if !claimed {
                out.push(format!("{}#{i}", frame.features.frame_id));
            }
        }
    }
    out.sort();
    out
}

fn candidate_ids(v: &Value) -> Vec<String> {
    let mut ids: Vec<String> = v["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["candidate_id"].as_str().unwrap().to_string())
        .collect();
    ids.sort();
    ids
}

async fn wait_for(router: &Router, job_id: &str) -> Value {
    for _ in 0..6000 {
        let (status, job) = send(router, "GET", &format!("/api/jobs/{job_id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        // snapshot reads in between must be internally consistent
        let (_, state) = send(router, "GET", "/api/state", None).await;
        assert_eq!(state["heads"].as_array().unwrap().len() as u64, state["generation"].as_u64().unwrap());
        match job["state"].as_str().unwrap() {
            "succeeded" | "failed" => return job,
            _ => tokio::time::sleep(Duration::from_millis(20)).await,
        }
    }
    panic!("job {job_id} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn learn_flow_updates_snapshot_and_survives_restart() {
    let bundle = generate_scenario(&small_spec()).unwrap();
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let app = App::with_bundle(bundle.clone(), config.clone(), dir.path()).unwrap();
    let router = app.router();

    let (status, state0) = send(&router, "GET", "/api/state", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state0["schema_version"], 1);
    assert_eq!(state0["generation"], 0);

    let (_, before) = send(&router, "GET", "/api/candidates", None).await;
    assert_eq!(candidate_ids(&before), expected_candidates(&app.snapshot().state, &bundle, &config));
    assert!(!candidate_ids(&before).is_empty());
    let (_, clusters) = send(&router, "GET", "/api/clusters", None).await;
    let members: usize = clusters["clusters"].as_array().unwrap().iter().map(|c| c["size"].as_u64().unwrap() as usize).sum();
    assert_eq!(members, app.snapshot().state.image_index.len());

    let (name, ids) = heldout_pool_objects(&bundle);
    assert!(!ids.is_empty());
    let body = json!({ "class_name": name, "sample_ids": ids });
    let (status, job) = send(&router, "POST", "/api/learn", Some(body.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job_id = job["job_id"].as_str().unwrap().to_string();
    let (status, _) = send(&router, "POST", "/api/learn", Some(body.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let done = wait_for(&router, &job_id).await;
    assert_eq!(done["state"], "succeeded", "{done}");
    assert_eq!(done["progress"], 1.0);
    let result = &done["result"];
    assert_eq!(result["generation"], 1);
    assert!(result["mean_score_after"].as_f64().unwrap() < result["mean_score_before"].as_f64().unwrap());

    let (status, _) = send(&router, "POST", "/api/learn", Some(body)).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, state1) = send(&router, "GET", "/api/state", None).await;
    assert_eq!(state1["generation"], 1);
    assert_eq!(state1["classes"].as_array().unwrap().len(), 4);
    assert_eq!(state0["model_digest"], state1["model_digest"]);

    // candidates the new head claims disappear; what remains matches a recomputation
    let (_, after) = send(&router, "GET", "/api/candidates", None).await;
    let after_ids = candidate_ids(&after);
    assert_eq!(after_ids, expected_candidates(&app.snapshot().state, &bundle, &config));
    let snap = app.snapshot();
    let head = snap.state.heads.last().unwrap();
    let claimed_before = before["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["object_ids"].as_array().unwrap().iter().any(|o| ids.contains(&o.as_u64().unwrap())))
        .count();
    assert!(claimed_before > 0);
    assert!(after_ids.len() < candidate_ids(&before).len());
    assert_eq!(head.name, name);

    let (status, metrics) = send(&router, "GET", "/api/metrics", None).await;
    assert_eq!(status, StatusCode::OK);
    let per_class = metrics["per_class"].as_array().unwrap();
    let learned = per_class.iter().find(|c| c["name"] == name.as_str()).unwrap();
    assert!(learned["iou"].as_f64().unwrap() > 0.5, "{learned}");
    assert_eq!(metrics["timeline"].as_array().unwrap().last().unwrap()["generation"], 1);

    // a restarted service serves the same state
    let raw = |router: Router| async move {
        let req = Request::builder().uri("/api/state").body(Body::empty()).unwrap();
        router.oneshot(req).await.unwrap().into_body().collect().await.unwrap().to_bytes()
    };
    let live = raw(router.clone()).await;
    drop(app);
    let restarted = App::with_bundle(bundle, config, dir.path()).unwrap();
    assert_eq!(raw(restarted.router()).await, live);
    assert_eq!(restarted.persisted_manifest().unwrap().generation, 1);
}

#[tokio::test]
async fn request_validation() {
    let bundle = generate_scenario(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let app = App::with_bundle(bundle.clone(), small_config(), dir.path()).unwrap();
    let router = app.router();

    assert_eq!(send_raw(&router, "/api/learn", "{not json").await, StatusCode::BAD_REQUEST);
    assert_eq!(
        send_raw(&router, "/api/learn", r#"{"class_name":"x","sample_ids":[1],"extra":true}"#).await,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(send_raw(&router, "/api/learn", r#"{"class_name":"x"}"#).await, StatusCode::BAD_REQUEST);
    assert_eq!(send_raw(&router, "/api/learn", r#"{"class_name":"","sample_ids":[1]}"#).await, StatusCode::BAD_REQUEST);
    let (status, err) = send(&router, "POST", "/api/learn", Some(json!({"class_name": "x", "sample_ids": [999999]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["schema_version"], 1);
    assert_eq!(err["error"]["code"], "not_found");
    let seed_name = bundle.class_names[0].clone();
    let (status, _) = send(&router, "POST", "/api/learn", Some(json!({"class_name": seed_name, "sample_ids": [bundle.objects[0].object_id]}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, _) = send(&router, "GET", "/api/jobs/job-42", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let dim = app.snapshot().state.image_index.dim;
    let v = vec![0.5; dim];
    for bad in [
        json!({"modality": "audio", "vector": v, "n": 3}),
        json!({"modality": "image", "n": 3}),
        json!({"modality": "image", "vector": v, "reference_ids": [1], "n": 3}),
        json!({"modality": "image", "vector": [1.0, 2.0], "n": 3}),
        json!({"modality": "image", "vector": v, "n": 0}),
        json!({"modality": "image", "vector": v, "n": 3, "nprobe": 99}),
        json!({"modality": "image", "vector": v, "n": 3, "k": 1}),
    ] {
        let (status, _) = send(&router, "POST", "/api/query", Some(bad.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
    let (status, _) = send(&router, "POST", "/api/query", Some(json!({"modality": "image", "reference_ids": [999999], "n": 3}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn query_matches_index_and_flags_band() {
    let bundle = generate_scenario(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let app = App::with_bundle(bundle.clone(), config.clone(), dir.path()).unwrap();
    let router = app.router();
    let snap = app.snapshot();
    let index = &snap.state.image_index;
    let reference = index.records()[0].object_id;

    let k = index.config.k;
    let (status, resp) = send(
        &router,
        "POST",
        "/api/query",
        Some(json!({"modality": "image", "reference_ids": [reference], "n": 5, "nprobe": k})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let hits = resp["hits"].as_array().unwrap();
    let exact = index.exact_topn(&dleng::retrieval::to_f64(&index.records()[0].vector), 5).unwrap();
    let got: Vec<u64> = hits.iter().map(|h| h["object_id"].as_u64().unwrap()).collect();
    assert_eq!(got, exact.iter().map(|h| h.object_id).collect::<Vec<_>>());
    assert_eq!(got[0], reference);
    let (lo, hi) = config.bands.image;
    for h in hits {
        let c = h["cosine"].as_f64().unwrap();
        assert_eq!(h["in_band"].as_bool().unwrap(), c >= lo && c <= hi);
    }

    // text queries from the served vocabulary
    let (_, state) = send(&router, "GET", "/api/state", None).await;
    let vocab = state["query_vocabulary"].as_array().unwrap();
    assert_eq!(vocab.len(), bundle.text_queries.len());
    let (status, resp) = send(
        &router,
        "POST",
        "/api/query",
        Some(json!({"modality": "text", "vector": vocab[0]["vector"], "n": 4})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert!(resp["hits"].as_array().unwrap().len() <= 4);
    assert_eq!(resp["band"][0].as_f64().unwrap(), config.bands.text.0);
}
