use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use creepformer::checkpoint::Checkpoint;
use creepformer::data::NormStats;
use creepformer::{AblationSpec, TataConfig, TataModel};
use creepformer_cli::service::{router, AppState, ExplainResponse, Loaded, PredictResponse};
use serde_json::{json, Value};
use tower::ServiceExt;

fn toy_checkpoint() -> Checkpoint {
    let cfg = TataConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        hidden_dim: 8,
        d_intermediate: 4,
        ..TataConfig::default()
    };
    let model = TataModel::new(cfg, AblationSpec::full(), 11).unwrap();
    let stats = NormStats::fit([&[2300.0, 350.0, 2.8e5], &[2400.0, 450.0, 3.3e5], &[2350.0, 500.0, 3.1e5]]).unwrap();
    Checkpoint { model, stats }
}

fn ready_app() -> Router {
    let state = AppState::default();
    state.install(Loaded::new(toy_checkpoint(), None));
    router(state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(v.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn predict_body(days: usize) -> Value {
    json!({
        "density_kg_m3": 2350.0,
        "fc_ksc": 420.0,
        "e_ksc": 310000.0,
        "initial_creep_microstrain": 120.0,
        "days": days,
    })
}

#[tokio::test]
async fn predict_returns_consistent_arrays() {
    let app = ready_app();
    let (status, body) = call(&app, "POST", "/predict", Some(predict_body(10))).await;
    assert_eq!(status, StatusCode::OK);
    let r: PredictResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.days, (1..=10).collect::<Vec<_>>());
    assert_eq!(r.creep.len(), 10);
    assert_eq!(r.creep[0], 120.0);
    assert_eq!(r.summary.final_value, r.creep[9]);
    assert_eq!(r.summary.max, r.creep.iter().copied().fold(f64::MIN, f64::max));
    assert!((r.summary.mean - r.creep.iter().sum::<f64>() / 10.0).abs() < 1e-9);

    let (_, again) = call(&app, "POST", "/predict", Some(predict_body(10))).await;
    assert_eq!(body, again);
}

#[tokio::test]
async fn horizon_cap_is_enforced() {
    let app = ready_app();
    let (status, body) = call(&app, "POST", "/predict", Some(predict_body(161))).await;
    assert_eq!(status, StatusCode::OK);
    let r: PredictResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.creep.len(), 161);

    for days in [0, 162] {
        let (status, body) = call(&app, "POST", "/predict", Some(predict_body(days))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        let err: Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(err["field"], "days");
    }
}

#[tokio::test]
async fn schema_violations_are_bad_requests() {
    let app = ready_app();
    let mut negative = predict_body(5);
    negative["fc_ksc"] = json!(-3.0);
    let (status, body) = call(&app, "POST", "/predict", Some(negative)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["field"], "fc_ksc");

    let mut missing = predict_body(5);
    missing.as_object_mut().unwrap().remove("e_ksc");
    let (status, body) = call(&app, "POST", "/predict", Some(missing)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8(body).unwrap().contains("e_ksc"));

    let mut extra = predict_body(5);
    extra["humidity"] = json!(60);
    assert_eq!(call(&app, "POST", "/predict", Some(extra)).await.0, StatusCode::BAD_REQUEST);

    let mut wrong_type = predict_body(5);
    wrong_type["days"] = json!("ten");
    assert_eq!(call(&app, "POST", "/predict", Some(wrong_type)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unloaded_service_is_unavailable() {
    let app = router(AppState::default());
    assert_eq!(call(&app, "POST", "/predict", Some(predict_body(5))).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&app, "GET", "/model", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["model_loaded"], false);
}

#[tokio::test]
async fn model_endpoint_reports_config_and_stats() {
    let app = ready_app();
    let (status, body) = call(&app, "GET", "/model", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["config"]["d_model"], 8);
    assert_eq!(v["params"], toy_checkpoint().model.num_params());
    assert_eq!(v["norm_stats"]["alpha"], 1000.0);
}

#[tokio::test]
async fn explain_is_efficient() {
    let app = ready_app();
    let body = json!({
        "density_kg_m3": 2380.0,
        "fc_ksc": 470.0,
        "e_ksc": 320000.0,
        "prefix_microstrain": [120.0, 180.0, 230.0],
    });
    let (status, bytes) = call(&app, "POST", "/explain", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let r: ExplainResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(r.phi.len(), 3);
    assert!((r.phi0 + r.phi.iter().sum::<f64>() - r.prediction).abs() < 1e-10);
    assert_eq!(r.context_policy, "own_prefix");

    let (status, _) = call(&app, "POST", "/explain", Some(json!({"density_kg_m3": 1.0, "fc_ksc": 1.0, "e_ksc": 1.0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn trajectory_csv_matches_predict() {
    let app = ready_app();
    let (_, body) = call(&app, "POST", "/predict", Some(predict_body(4))).await;
    let r: PredictResponse = serde_json::from_slice(&body).unwrap();
    let uri = "/trajectory.csv?density_kg_m3=2350&fc_ksc=420&e_ksc=310000&initial_creep_microstrain=120&days=4";
    let (status, csv) = call(&app, "GET", uri, None).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "day,creep_microstrain");
    for (i, line) in lines[1..].iter().enumerate() {
        let (day, creep) = line.split_once(',').unwrap();
        assert_eq!(day.parse::<usize>().unwrap(), r.days[i]);
        assert_eq!(creep.parse::<f64>().unwrap(), r.creep[i]);
    }
    let (status, _) = call(&app, "GET", "/trajectory.csv?days=4", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
