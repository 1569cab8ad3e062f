//! Transport-independent request routing. `route_request` is total: every
//! input produces a JSON body and one of the statuses in [`STATUSES`].

use std::sync::{Mutex, MutexGuard};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use newvision_core::device::{
    self, BackendError, DeviceState, GridWorld, Health, Mode, Module, Perception, SimulatedSonar,
};
use newvision_core::inference::{self, DecodeOptions, InferenceError};
use newvision_core::model::{Image, ModelError};
use newvision_core::scenegen::{generate_scene, render_scene};
use newvision_core::trainer::Checkpoint;

/// Every status `route_request` can return.
pub const STATUSES: [u16; 5] = [200, 400, 404, 409, 503];

/// Raw RGB bytes on the wire, row-major, three per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl ApiImage {
    pub fn from_image(image: &Image) -> Self {
        Self {
            width: image.width,
            height: image.height,
            rgb: image.to_bytes(),
        }
    }

    pub fn to_image(&self) -> Result<Image, ApiError> {
        let expected = self.width.checked_mul(self.height).and_then(|n| n.checked_mul(3));
        if expected != Some(self.rgb.len()) {
            return Err(ApiError::bad_request(
                "invalid_image",
                format!(
                    "rgb has {} values but a {}x{} image needs width*height*3",
                    self.rgb.len(),
                    self.width,
                    self.height
                ),
            ));
        }
        Ok(Image::from_bytes(self.width, self.height, &self.rgb).expect("length checked"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(400, code, message)
    }

    fn not_found(method: &str, path: &str) -> Self {
        Self::new(404, "not_found", format!("no route for {method} {path}"))
    }

    fn to_json(&self) -> Value {
        json!({ "status": self.status, "code": self.code, "message": self.message })
    }
}

impl From<InferenceError> for ApiError {
    fn from(e: InferenceError) -> Self {
        let message = e.to_string();
        match e {
            InferenceError::MissingHead => Self::new(409, "missing_head", message),
            InferenceError::EmptyQuestion => Self::bad_request("empty_question", message),
            InferenceError::Text(_) => Self::bad_request("invalid_text", message),
            InferenceError::EmptyCandidates | InferenceError::InvalidOptions(_) => {
                Self::bad_request("invalid_request", message)
            }
            InferenceError::Model(ModelError::BadImageShape { .. }) => Self::bad_request("invalid_image", message),
            InferenceError::Model(ModelError::Tensor(_) | ModelError::MissingParam(_) | ModelError::Config(_)) => {
                Self::new(503, "inference_failed", message)
            }
            InferenceError::Model(_) => Self::bad_request("invalid_text", message),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(body: Value) -> Self {
        Self { status: 200, body }
    }
}

impl From<ApiError> for ApiResponse {
    fn from(e: ApiError) -> Self {
        Self {
            status: e.status,
            body: e.to_json(),
        }
    }
}

/// Server state: an immutable checkpoint and world plus the device state,
/// which every mutating request locks for its whole duration.
pub struct AppState {
    pub ckpt: Checkpoint,
    pub world: GridWorld,
    pub opts: DecodeOptions,
    device: Mutex<DeviceState>,
}

impl AppState {
    pub fn new(ckpt: Checkpoint, world: GridWorld) -> Self {
        Self {
            ckpt,
            world,
            opts: DecodeOptions::default(),
            device: Mutex::new(DeviceState::default()),
        }
    }

    pub fn device(&self) -> MutexGuard<'_, DeviceState> {
        self.device.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// What the camera sees when a command arrives without an image.
    pub fn default_view(&self) -> Image {
        render_scene(&generate_scene(0))
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let code = if e.is_syntax() || e.is_eof() {
            "malformed_json"
        } else {
            "invalid_request"
        };
        ApiError::bad_request(code, e.to_string())
    })
}

#[derive(Deserialize)]
struct ImageBody {
    image: ApiImage,
}

#[derive(Deserialize)]
struct VqaBody {
    image: ApiImage,
    question: String,
}

#[derive(Deserialize)]
struct ReasonBody {
    image: ApiImage,
    statement: String,
}

#[derive(Deserialize)]
struct CommandBody {
    text: String,
    #[serde(default)]
    image: Option<ApiImage>,
}

#[derive(Deserialize)]
struct RangeBody {
    echo_time_us: f64,
    #[serde(default = "default_threshold")]
    threshold_m: f64,
}

fn default_threshold() -> f64 {
    device::DEFAULT_ALERT_THRESHOLD_M
}

#[derive(Deserialize)]
struct HealthBody {
    healthy: bool,
}

fn modules_json(state: &DeviceState) -> Value {
    Module::ALL
        .iter()
        .map(|&m| {
            let h = if state.is_healthy(m) { "healthy" } else { "failed" };
            (m.name().to_string(), Value::from(h))
        })
        .collect::<serde_json::Map<_, _>>()
        .into()
}

fn mode_json(mode: Mode) -> Value {
    serde_json::to_value(mode).expect("mode serializes")
}

/// Dispatches one request. `path` may carry a query string.
pub fn route_request(app: &AppState, method: &str, path: &str, body: &[u8]) -> ApiResponse {
    match route(app, method, path, body) {
        Ok(v) => ApiResponse::ok(v),
        Err(e) => e.into(),
    }
}

fn route(app: &AppState, method: &str, path: &str, body: &[u8]) -> Result<Value, ApiError> {
    let (path, query) = path.split_once('?').unwrap_or((path, ""));
    let segments: Vec<&str> = path.trim_end_matches('/').split('/').collect();
    match (method, segments.as_slice()) {
        ("GET", ["", "api", "status"]) => {
            let dev = app.device();
            Ok(json!({
                "mode": mode_json(dev.mode),
                "modules": modules_json(&dev),
                "checkpoint_step": app.ckpt.step,
            }))
        }
        ("GET", ["", "api", "scene", "random"]) => random_scene(query),
        ("POST", ["", "api", "caption"]) => {
            perception_available(app)?;
            let req: ImageBody = parse(body)?;
            let caption = inference::caption_image(&req.image.to_image()?, &app.ckpt, &app.opts)?;
            Ok(json!({ "caption": caption }))
        }
        ("POST", ["", "api", "vqa"]) => {
            perception_available(app)?;
            let req: VqaBody = parse(body)?;
            let answer = inference::answer_question(&req.image.to_image()?, &req.question, &app.ckpt, &app.opts)?;
            Ok(json!({ "answer": answer }))
        }
        ("POST", ["", "api", "reason"]) => {
            perception_available(app)?;
            let req: ReasonBody = parse(body)?;
            let (truth, confidence) = inference::verify_statement(&req.image.to_image()?, &req.statement, &app.ckpt)?;
            Ok(json!({ "truth": truth, "confidence": confidence }))
        }
        ("POST", ["", "api", "command"]) => {
            let req: CommandBody = parse(body)?;
            let image = match &req.image {
                Some(img) => img.to_image()?,
                None => app.default_view(),
            };
            let perception = ModelPerception {
                ckpt: &app.ckpt,
                image,
                opts: app.opts,
            };
            let intent = device::parse_command(&req.text);
            let mut dev = app.device();
            let r = device::dispatch(&intent, &mut dev, &app.world, &perception, &SimulatedSonar);
            let mut out = json!({
                "intent": r.intent,
                "response": r.text,
                "mode": mode_json(r.mode),
            });
            if let Some(route) = r.route {
                out["route"] = json!(route);
            }
            Ok(out)
        }
        ("POST", ["", "api", "range"]) => {
            let req: RangeBody = parse(body)?;
            if !(req.threshold_m >= 0.0) || req.threshold_m.is_infinite() {
                return Err(ApiError::bad_request(
                    "invalid_request",
                    "threshold_m must be a non-negative finite number",
                ));
            }
            let d = device::estimate_distance(req.echo_time_us)
                .map_err(|e| ApiError::bad_request("negative_echo", e.to_string()))?;
            let alert = device::obstacle_alert(d, req.threshold_m);
            Ok(json!({ "distance_m": d, "alert": alert.alert, "message": alert.message }))
        }
        ("POST", ["", "api", "module", name, "health"]) => {
            let module: Module = name
                .parse()
                .map_err(|e: device::DeviceError| ApiError::new(404, "unknown_module", e.to_string()))?;
            let req: HealthBody = parse(body)?;
            let health = if req.healthy { Health::Healthy } else { Health::Failed };
            let mut dev = app.device();
            let mode = dev.set_module_health(module, health);
            Ok(json!({ "mode": mode_json(mode), "modules": modules_json(&dev) }))
        }
        _ => Err(ApiError::not_found(method, path)),
    }
}

/// Perception endpoints refuse service while the perception module is down
/// (which includes every failsafe state).
fn perception_available(app: &AppState) -> Result<(), ApiError> {
    let dev = app.device();
    if dev.mode == Mode::Failsafe || !dev.is_healthy(Module::Perception) {
        return Err(ApiError::new(
            503,
            "perception_unavailable",
            format!("perception is unavailable (device mode {:?})", dev.mode),
        ));
    }
    Ok(())
}

fn random_scene(query: &str) -> Result<Value, ApiError> {
    let mut seed = 0u64;
    for (k, v) in form_urlencoded::parse(query.as_bytes()) {
        if k == "seed" {
            seed = v
                .parse()
                .map_err(|_| ApiError::bad_request("invalid_request", format!("seed must be a u64, got {v:?}")))?;
        }
    }
    let spec = generate_scene(seed);
    let image = render_scene(&spec);
    Ok(json!({
        "scene_id": format!("seed-{seed}"),
        "image": ApiImage::from_image(&image),
        "spec": spec,
    }))
}

/// Perception backed by the loaded checkpoint, looking at one image.
pub struct ModelPerception<'a> {
    pub ckpt: &'a Checkpoint,
    pub image: Image,
    pub opts: DecodeOptions,
}

fn backend_error(e: InferenceError) -> BackendError {
    match e {
        InferenceError::Model(ModelError::Tensor(_) | ModelError::MissingParam(_) | ModelError::Config(_)) => {
            BackendError::Failure(e.to_string())
        }
        other => BackendError::Unavailable(other.to_string()),
    }
}

impl Perception for ModelPerception<'_> {
    fn describe(&self) -> Result<String, BackendError> {
        inference::caption_image(&self.image, self.ckpt, &self.opts).map_err(backend_error)
    }

    fn identify(&self) -> Result<String, BackendError> {
        self.describe()
    }

    fn verify(&self, statement: &str) -> Result<(bool, f64), BackendError> {
        inference::verify_statement(&self.image, statement, self.ckpt).map_err(backend_error)
    }
}
