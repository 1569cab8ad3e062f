use newvision_core::device::GridWorld;
use newvision_core::model::{Med, MedConfig};
use newvision_core::scenegen::{generate_scene, render_scene, Vocabulary};
use newvision_core::trainer::Checkpoint;
use newvision_service::{route_request, ApiImage, AppState, STATUSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn app() -> AppState {
    let model = Med::new(MedConfig::default()).unwrap();
    AppState::new(Checkpoint::new(model, Vocabulary::standard()), GridWorld::demo())
}

fn call(app: &AppState, method: &str, path: &str, body: Value) -> (u16, Value) {
    let r = route_request(app, method, path, body.to_string().as_bytes());
    (r.status, r.body)
}

fn scene_image(seed: u64) -> Value {
    serde_json::to_value(ApiImage::from_image(&render_scene(&generate_scene(seed)))).unwrap()
}

#[test]
fn status_and_unknown_route() {
    let app = app();
    let (s, b) = call(&app, "GET", "/api/status", Value::Null);
    assert_eq!(s, 200);
    assert_eq!(b["mode"], "Operational");
    assert_eq!(b["modules"]["ranging"], "healthy");
    assert_eq!(b["checkpoint_step"], 0);
    assert_eq!(call(&app, "GET", "/api/unknown", Value::Null).0, 404);
    assert_eq!(call(&app, "GET", "/api/caption", Value::Null).0, 404);
}

#[test]
fn random_scene_is_deterministic_and_round_trips() {
    let app = app();
    let (s, a) = call(&app, "GET", "/api/scene/random?seed=7", Value::Null);
    assert_eq!(s, 200);
    assert_eq!(a, call(&app, "GET", "/api/scene/random?seed=7", Value::Null).1);
    assert_eq!(a["scene_id"], "seed-7");
    let img: ApiImage = serde_json::from_value(a["image"].clone()).unwrap();
    assert_eq!(img.rgb.len(), img.width * img.height * 3);
    assert_eq!(call(&app, "GET", "/api/scene/random?seed=-1", Value::Null).0, 400);
}

#[test]
fn perception_endpoints() {
    let app = app();
    let image = scene_image(3);
    let (s, b) = call(&app, "POST", "/api/caption", json!({ "image": image }));
    assert_eq!(s, 200);
    assert!(b["caption"].is_string());
    let (s, b) = call(
        &app,
        "POST",
        "/api/vqa",
        json!({ "image": image, "question": "What is the cat doing?" }),
    );
    assert_eq!(s, 200);
    assert!(!b["answer"].as_str().unwrap().is_empty());
    // statement head is untrained in a fresh checkpoint
    let (s, b) = call(&app, "POST", "/api/reason", json!({ "image": image, "statement": "a red circle" }));
    assert_eq!(s, 409);
    assert_eq!(b["code"], "missing_head");
    let bad = json!({ "image": { "width": 2, "height": 2, "rgb": [0, 0, 0] } });
    assert_eq!(call(&app, "POST", "/api/caption", bad).0, 400);
    let wrong_size = json!({ "image": { "width": 1, "height": 1, "rgb": [0, 0, 0] } });
    assert_eq!(call(&app, "POST", "/api/caption", wrong_size).0, 400);
    assert_eq!(call(&app, "POST", "/api/vqa", json!({ "image": image, "question": " " })).0, 400);
}

#[test]
fn range_examples() {
    let app = app();
    let (s, b) = call(&app, "POST", "/api/range", json!({ "echo_time_us": 5831 }));
    assert_eq!(s, 200);
    assert!((b["distance_m"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert_eq!(b["alert"], false);
    let (_, b) = call(&app, "POST", "/api/range", json!({ "echo_time_us": 1000, "threshold_m": 2.0 }));
    assert_eq!(b["alert"], true);
    let (s, b) = call(&app, "POST", "/api/range", json!({ "echo_time_us": -5 }));
    assert_eq!((s, b["code"].as_str()), (400, Some("negative_echo")));
}

#[test]
fn health_changes_drive_mode_and_failsafe() {
    let app = app();
    let (s, b) = call(&app, "POST", "/api/module/ranging/health", json!({ "healthy": false }));
    assert_eq!((s, b["mode"].as_str()), (200, Some("Degraded")));
    assert_eq!(call(&app, "POST", "/api/module/camera/health", json!({ "healthy": false })).0, 404);
    call(&app, "POST", "/api/module/perception/health", json!({ "healthy": false }));
    let (_, b) = call(&app, "POST", "/api/module/navigation/health", json!({ "healthy": false }));
    assert_eq!(b["mode"], "Failsafe");
    assert_eq!(call(&app, "POST", "/api/caption", json!({ "image": scene_image(0) })).0, 503);
    let (s, b) = call(&app, "POST", "/api/command", json!({ "text": "What is that?" }));
    assert_eq!(s, 200);
    assert!(b["response"].as_str().unwrap().starts_with("Warning"));
    assert!(b["route"].as_array().is_some_and(|r| !r.is_empty()));
    for m in ["perception", "navigation", "ranging"] {
        call(&app, "POST", &format!("/api/module/{m}/health"), json!({ "healthy": true }));
    }
    assert_eq!(call(&app, "GET", "/api/status", Value::Null).1["mode"], "Operational");
}

#[test]
fn commands_are_tagged_with_their_intent() {
    let app = app();
    let (s, b) = call(
        &app,
        "POST",
        "/api/command",
        json!({ "text": "Navigate to the front door", "image": scene_image(1) }),
    );
    assert_eq!(s, 200);
    assert_eq!(b["intent"]["kind"], "Navigate");
    assert_eq!(b["intent"]["dest"], "the front door");
    assert!(b["response"].as_str().unwrap().contains("you have arrived"));
    let (_, b) = call(&app, "POST", "/api/command", json!({ "text": "what is that" }));
    assert_eq!(b["intent"]["kind"], "IdentifyObject");
    assert!(b["response"].as_str().unwrap().starts_with("I see"));
    let (_, b) = call(&app, "POST", "/api/command", json!({ "text": "blorp" }));
    assert_eq!(b["intent"]["kind"], "Unknown");
}

#[test]
fn command_failures_are_visible_in_status() {
    // An unavailable statement head is not a module failure.
    let app = app();
    let (_, b) = call(&app, "POST", "/api/command", json!({ "text": "is there a red circle" }));
    assert!(b["response"].as_str().unwrap().starts_with("Sorry"));
    assert_eq!(call(&app, "GET", "/api/status", Value::Null).1["modules"]["perception"], "healthy");
    // Failing a module through the API is reflected by the next command.
    call(&app, "POST", "/api/module/perception/health", json!({ "healthy": false }));
    let (_, b) = call(&app, "POST", "/api/command", json!({ "text": "describe the scene" }));
    assert!(b["response"].as_str().unwrap().contains("perception"));
    assert_eq!(b["mode"], "Degraded");
}

const ENDPOINTS: [(&str, &str); 9] = [
    ("GET", "/api/status"),
    ("GET", "/api/scene/random?seed=3"),
    ("POST", "/api/caption"),
    ("POST", "/api/vqa"),
    ("POST", "/api/reason"),
    ("POST", "/api/command"),
    ("POST", "/api/range"),
    ("POST", "/api/module/ranging/health"),
    ("POST", "/api/nope"),
];

/// Random bodies drawn from raw bytes, broken JSON and near-miss payloads.
fn fuzz_body(rng: &mut ChaCha8Rng, image: &Value) -> Vec<u8> {
    match rng.random_range(0..6) {
        0 => (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
        1 => b"{\"image\": {\"width\": 32".to_vec(),
        2 => {
            let w: i64 = rng.random_range(-2..40);
            let n: usize = rng.random_range(0..20);
            json!({ "image": { "width": w, "height": w, "rgb": vec![rng.random_range(-5i64..300); n] },
                    "question": "what color", "statement": "a red circle", "text": "what is that" })
            .to_string()
            .into_bytes()
        }
        3 => {
            let keys = ["image", "question", "statement", "text", "echo_time_us", "healthy", "threshold_m"];
            let vals = [
                json!(null),
                json!(-1.5e300),
                json!("x".repeat(200)),
                json!([1, 2]),
                json!(true),
                json!({}),
                image.clone(),
            ];
            let mut obj = serde_json::Map::new();
            for _ in 0..rng.random_range(0..4) {
                obj.insert(
                    keys[rng.random_range(0..keys.len())].into(),
                    vals[rng.random_range(0..vals.len())].clone(),
                );
            }
            Value::Object(obj).to_string().into_bytes()
        }
        4 => json!({ "image": image, "question": "how many shapes are there", "statement": "a blue square",
                     "text": "how far", "echo_time_us": rng.random_range(-100.0..1e5), "healthy": rng.random::<bool>() })
        .to_string()
        .into_bytes(),
        _ => Vec::new(),
    }
}

#[test]
fn fuzzed_bodies_always_get_json_with_allowed_status() {
    let app = app();
    let image = scene_image(5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let (method, path) = ENDPOINTS[i % ENDPOINTS.len()];
        let body = fuzz_body(&mut rng, &image);
        let r = route_request(&app, method, path, &body);
        assert!(STATUSES.contains(&r.status), "{method} {path}: {}", r.status);
        assert!(r.body.is_object());
        if r.status != 200 {
            assert!(r.body["code"].is_string() && r.body["message"].is_string());
        }
    }
}
