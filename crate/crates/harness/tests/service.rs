mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use sesame::data::io::{decode_mask_png, decode_rgb_png};
use sesame::data::to_byte;
use sesame_harness::edit::Editor;
use sesame_harness::service::{router, AppState, ClassesResponse, EditResponse, ErrorBody, BODY_LIMIT};
use tower::ServiceExt;

fn app(cap: usize) -> Router {
    let editor = Editor::load(common::checkpoint(), None, None).unwrap();
    router(AppState::with_queue_cap(editor, cap))
}

async fn call(app: Router, method: &str, uri: &str, body: Body) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(body).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post_edit(app: Router, body: &Value) -> (StatusCode, Vec<u8>) {
    call(app, "POST", "/edit", Body::from(body.to_string())).await
}

fn edit_body(paint: &[u8]) -> Value {
    json!({
        "image": B64.encode(common::image_png(&common::scene(3))),
        "painted_labels": B64.encode(common::paint_png(paint)),
        "mode": "freeform",
    })
}

fn bytes(img: &sesame::data::RgbImage) -> Vec<u8> {
    img.data().iter().map(|&v| to_byte(v)).collect()
}

fn error_field(body: &[u8]) -> Option<String> {
    serde_json::from_slice::<ErrorBody>(body).unwrap().field
}

#[tokio::test]
async fn health_reports_the_checkpoint_version() {
    let (status, body) = call(app(4), "GET", "/health", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(
        v["model_version"].as_str(),
        Some(sesame::checkpoint::file_digest(common::checkpoint()).unwrap().as_str())
    );
}

#[tokio::test]
async fn classes_have_distinct_colors() {
    let (status, body) = call(app(4), "GET", "/classes", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    let classes = serde_json::from_slice::<ClassesResponse>(&body).unwrap().classes;
    assert_eq!(classes.len(), 8);
    let colors: std::collections::BTreeSet<_> = classes.iter().map(|c| c.color).collect();
    assert_eq!(colors.len(), 8);
    assert!(classes.iter().enumerate().all(|(i, c)| c.id as usize == i));
}

#[tokio::test]
async fn edit_keeps_untouched_pixels_byte_equal() {
    let paint = common::paint(4, 20, 24, 44, 40);
    let (status, body) = post_edit(app(4), &edit_body(&paint)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: EditResponse = serde_json::from_slice(&body).unwrap();
    assert!(resp.latency_ms >= 0.0);
    let out = decode_rgb_png(&B64.decode(resp.image).unwrap()).unwrap();
    let mask = decode_mask_png(&B64.decode(resp.mask).unwrap()).unwrap();
    let input = decode_rgb_png(&common::image_png(&common::scene(3))).unwrap();
    let (a, b) = (bytes(&out), bytes(&input));
    let mut changed_inside = 0;
    for i in 0..64 * 64 {
        let painted = paint[i] != 255;
        assert_eq!(mask.pixels()[i] != 0, painted);
        let same = (0..3).all(|c| a[c * 4096 + i] == b[c * 4096 + i]);
        if !painted {
            assert!(same, "untouched pixel {i} changed");
        } else if !same {
            changed_inside += 1;
        }
    }
    assert!(changed_inside > 0);
}

#[tokio::test]
async fn single_pixel_paint_changes_at_most_that_pixel() {
    let paint = common::paint(5, 31, 17, 32, 18);
    let (status, body) = post_edit(app(4), &edit_body(&paint)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: EditResponse = serde_json::from_slice(&body).unwrap();
    let out = bytes(&decode_rgb_png(&B64.decode(resp.image).unwrap()).unwrap());
    let input = bytes(&decode_rgb_png(&common::image_png(&common::scene(3))).unwrap());
    let diff: Vec<usize> = (0..4096).filter(|&i| (0..3).any(|c| out[c * 4096 + i] != input[c * 4096 + i])).collect();
    assert!(diff.iter().all(|&i| i == 17 * 64 + 31), "{diff:?}");
    assert_eq!(decode_mask_png(&B64.decode(resp.mask).unwrap()).unwrap().count(), 1);
}

#[tokio::test]
async fn malformed_inputs_name_the_field() {
    let good = edit_body(&common::paint(4, 8, 8, 16, 16));
    let cases = [
        ("image", json!({"image": "%%%", "painted_labels": good["painted_labels"]})),
        ("painted_labels", json!({"image": good["image"], "painted_labels": "not base64!"})),
        ("image", json!({"image": B64.encode(b"not a png"), "painted_labels": good["painted_labels"]})),
        ("painted_labels", json!({"image": good["image"], "painted_labels": B64.encode([1, 2, 3])})),
        ("painted_labels", edit_body(&[255; 4096])),
        ("painted_labels", edit_body(&common::paint(9, 0, 0, 4, 4))),
        ("semantics_scope", {
            let mut v = good.clone();
            v["semantics_scope"] = json!("full");
            v
        }),
    ];
    let app = app(4);
    for (field, body) in cases {
        let (status, resp) = post_edit(app.clone(), &body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{field}: {}", String::from_utf8_lossy(&resp));
        assert_eq!(error_field(&resp).as_deref(), Some(field));
    }
}

#[tokio::test]
async fn malformed_json_is_rejected() {
    let app = app(4);
    let (status, _) = call(app.clone(), "POST", "/edit", Body::from("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post_edit(app.clone(), &json!({"image": "abc"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post_edit(app.clone(), &json!({"image": "a", "painted_labels": "b", "mode": "sideways"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let huge = json!({"image": "A".repeat(BODY_LIMIT + 16), "painted_labels": ""});
    let (status, _) = post_edit(app, &huge).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn overload_returns_429() {
    let app = app(2);
    let body = edit_body(&common::paint(6, 8, 8, 40, 40));
    let tasks: Vec<_> = (0..64)
        .map(|_| {
            let (app, body) = (app.clone(), body.clone());
            tokio::spawn(async move { post_edit(app, &body).await.0 })
        })
        .collect();
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.unwrap());
    }
    let ok = codes.iter().filter(|&&c| c == StatusCode::OK).count();
    let busy = codes.iter().filter(|&&c| c == StatusCode::TOO_MANY_REQUESTS).count();
    assert_eq!(ok + busy, 64, "{codes:?}");
    assert!(ok >= 1 && busy >= 1, "ok {ok}, busy {busy}");
}
