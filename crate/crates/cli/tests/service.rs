mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use ssae_cli::config::ServiceSection;
use ssae_cli::server::{router, AppState};
use ssae_core::pipeline::Pipeline;
use tower::ServiceExt;

async fn call(state: &AppState, req: Request<Body>) -> (StatusCode, Value) {
    let res = router(state.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).body(body.into()).unwrap()
}

fn post_json(uri: &str, v: &Value) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(v.to_string())).unwrap()
}

fn error_code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

#[tokio::test]
async fn api_contract() {
    let f = common::build_bundle("micro", true);
    let png = std::fs::read(f.image()).unwrap();
    let service = ServiceSection { max_upload_bytes: 64 * 1024, session_cap: 2, ..ServiceSection::default() };
    let state = AppState::new(Pipeline::load(&f.bundle).unwrap(), &service);
    let checksum = state.pipeline().checksum();

    let (st, v) = call(&state, get("/api/health")).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["image_size"], 32);

    let (st, v) = call(&state, get("/api/rois")).await;
    assert_eq!(st, StatusCode::OK);
    let names: Vec<_> = v.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, common::ROIS);

    // Uploads.
    let (st, v) = call(&state, post("/api/images", png.clone())).await;
    assert_eq!(st, StatusCode::OK);
    let id = v["image_id"].as_str().unwrap().to_string();
    let (st, v) = call(&state, post("/api/images", "GIF89a not a png")).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "unsupported_image");
    let mut wrong = Vec::new();
    image::RgbImage::new(16, 16).write_to(&mut std::io::Cursor::new(&mut wrong), image::ImageFormat::Png).unwrap();
    let (st, v) = call(&state, post("/api/images", wrong)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "bad_image_size");
    let (st, _) = call(&state, post("/api/images", vec![0u8; 128 * 1024])).await;
    assert_eq!(st, StatusCode::PAYLOAD_TOO_LARGE);

    // Masks.
    let (st, v) = call(&state, get(&format!("/api/images/{id}/masks"))).await;
    assert_eq!(st, StatusCode::OK);
    let masks = v["masks"].as_object().unwrap();
    assert_eq!(masks.keys().cloned().collect::<Vec<_>>(), ["0", "1", "2", "3", "4"]);
    for m in masks.values() {
        let bytes = B64.decode(m["hard_png"].as_str().unwrap()).unwrap();
        assert!(ssae_core::imageio::is_png(&bytes));
    }
    let (st, v) = call(&state, get("/api/images/ffff/masks")).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&v), "unknown_image");

    // Edits with a fixed seed repeat byte for byte.
    let req = json!({ "image_id": id, "roi": "hair", "seed": 1, "refine": true });
    let (st, e1) = call(&state, post_json("/api/edit", &req)).await;
    assert_eq!(st, StatusCode::OK, "{e1}");
    let (_, e2) = call(&state, post_json("/api/edit", &req)).await;
    assert_eq!(e1["image_png"], e2["image_png"]);
    assert_eq!(e1["seed"], 1);
    assert_eq!(e1["refined"], true);
    assert!(e1["timing_s"].as_f64().unwrap() > 0.0);

    // Inline image with an empty mask reproduces the reconstruction.
    let mut zero = Vec::new();
    image::GrayImage::new(32, 32).write_to(&mut std::io::Cursor::new(&mut zero), image::ImageFormat::Png).unwrap();
    let req = json!({ "image_png": B64.encode(&png), "roi": "nose", "seed": 4, "mask_source": "user_supplied", "mask_png": B64.encode(&zero) });
    let (st, v) = call(&state, post_json("/api/edit", &req)).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let image = ssae_cli::commands::read_image(&f.image(), 32).unwrap();
    let rec = state.pipeline().sae.reconstruct(&image).unwrap();
    let expected = ssae_core::imageio::encode_png_rgb(&ssae_core::imageio::tensor_to_rgb(&rec).unwrap()).unwrap();
    assert_eq!(B64.decode(v["image_png"].as_str().unwrap()).unwrap(), expected);

    // Edit errors.
    let (st, v) = call(&state, post("/api/edit", "{not json")).await;
    assert_eq!((st, error_code(&v)), (StatusCode::BAD_REQUEST, "malformed_request"));
    let (st, v) = call(&state, post_json("/api/edit", &json!({ "roi": "hair" }))).await;
    assert_eq!((st, error_code(&v)), (StatusCode::BAD_REQUEST, "malformed_request"));
    let (st, v) = call(&state, post_json("/api/edit", &json!({ "image_id": id, "roi": "hair", "injection_layer": 99 }))).await;
    assert_eq!((st, error_code(&v)), (StatusCode::BAD_REQUEST, "invalid_edit"));
    let (st, v) = call(&state, post_json("/api/edit", &json!({ "image_id": "gone", "roi": "hair" }))).await;
    assert_eq!((st, error_code(&v)), (StatusCode::NOT_FOUND, "unknown_image"));

    // The session store keeps only the most recent uploads.
    for _ in 0..2 {
        call(&state, post("/api/images", png.clone())).await;
    }
    let (st, _) = call(&state, get(&format!("/api/images/{id}/masks"))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    assert_eq!(state.pipeline().checksum(), checksum);
}

#[tokio::test]
async fn missing_mask_models_is_a_conflict() {
    let f = common::build_bundle("micro", false);
    let mut manifest = ssae_core::pipeline::BundleManifest::read(&f.bundle).unwrap();
    manifest.smpn.clear();
    let bare = f.path("models/bare.json");
    manifest.write(&bare).unwrap();
    let state = AppState::new(Pipeline::load(&bare).unwrap(), &ServiceSection::default());
    let png = std::fs::read(f.image()).unwrap();
    let req = json!({ "image_png": B64.encode(&png), "roi": "eyes", "seed": 1 });
    let (st, v) = call(&state, post_json("/api/edit", &req)).await;
    assert_eq!((st, error_code(&v)), (StatusCode::CONFLICT, "missing_roi_models"));
}
