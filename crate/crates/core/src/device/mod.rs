//! Control layer of the assistive headgear: command parsing, ultrasonic
//! ranging, grid navigation, module health and the failsafe.
//!
//! Speech is simulated: commands come in and responses go out as text.

mod nav;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nav::{plan_route, replay, Agent, GridWorld, Heading, ARRIVED, SAFE_PLACE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("echo time must be a non-negative number of microseconds, got {0}")]
    NegativeEcho(f64),
    #[error("unknown waypoint {0:?}")]
    UnknownWaypoint(String),
    #[error("no path to {0:?}")]
    NoPath(String),
    #[error("unknown module {0:?} (expected perception, navigation or ranging)")]
    UnknownModule(String),
    #[error("unknown health {0:?} (expected healthy or failed)")]
    UnknownHealth(String),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
}

/// Speed of sound used for ranging, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;
pub const DEFAULT_ALERT_THRESHOLD_M: f64 = 1.0;
/// Edge length of one grid cell, metres.
pub const CELL_SIZE_M: f64 = 0.5;

/// Round-trip echo time (µs) to one-way distance (m).
pub fn estimate_distance(echo_time_us: f64) -> Result<f64, DeviceError> {
    if !(echo_time_us >= 0.0) || echo_time_us.is_infinite() {
        return Err(DeviceError::NegativeEcho(echo_time_us));
    }
    Ok(SPEED_OF_SOUND * (echo_time_us * 1e-6) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert: bool,
    pub message: String,
}

pub fn obstacle_alert(distance_m: f64, threshold_m: f64) -> Alert {
    let alert = distance_m < threshold_m;
    let message = if alert {
        format!("Careful, obstacle ahead at {distance_m:.1} meters.")
    } else {
        format!("The way ahead is clear for {distance_m:.1} meters.")
    };
    Alert { alert, message }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dest")]
pub enum IntentKind {
    DescribeScene,
    IdentifyObject,
    Navigate(String),
    RangeCheck,
    VerifyStatement,
    Help,
    Unknown,
}

impl IntentKind {
    pub fn name(&self) -> &'static str {
        match self {
            IntentKind::DescribeScene => "DescribeScene",
            IntentKind::IdentifyObject => "IdentifyObject",
            IntentKind::Navigate(_) => "Navigate",
            IntentKind::RangeCheck => "RangeCheck",
            IntentKind::VerifyStatement => "VerifyStatement",
            IntentKind::Help => "Help",
            IntentKind::Unknown => "Unknown",
        }
    }

    /// The module an intent depends on, if any.
    pub fn module(&self) -> Option<Module> {
        match self {
            IntentKind::DescribeScene | IntentKind::IdentifyObject | IntentKind::VerifyStatement => {
                Some(Module::Perception)
            }
            IntentKind::Navigate(_) => Some(Module::Navigation),
            IntentKind::RangeCheck => Some(Module::Ranging),
            IntentKind::Help | IntentKind::Unknown => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    #[serde(flatten)]
    pub kind: IntentKind,
    pub raw: String,
}

impl Intent {
    /// Text of a VerifyStatement command with the leading "is" (and
    /// "there") removed, e.g. "is there a red circle" → "a red circle".
    pub fn statement(&self) -> String {
        let text = normalize_command(&self.raw);
        let rest = text.strip_prefix("is ").unwrap_or(&text);
        rest.strip_prefix("there ").unwrap_or(rest).to_string()
    }
}

/// Lowercases, turns punctuation (other than apostrophes) into spaces and
/// collapses whitespace.
pub fn normalize_command(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn starts_with_word(text: &str, prefix: &str) -> bool {
    text == prefix || text.starts_with(&format!("{prefix} "))
}

/// Rule table, first match wins.
pub fn parse_command(text: &str) -> Intent {
    let norm = normalize_command(text);
    let kind = if starts_with_word(&norm, "what is that") || starts_with_word(&norm, "what's that") {
        IntentKind::IdentifyObject
    } else if let Some(dest) = norm.strip_prefix("navigate to ").filter(|d| !d.is_empty()) {
        IntentKind::Navigate(dest.to_string())
    } else if starts_with_word(&norm, "describe") {
        IntentKind::DescribeScene
    } else if starts_with_word(&norm, "how far") {
        IntentKind::RangeCheck
    } else if norm.starts_with("is ") {
        IntentKind::VerifyStatement
    } else if starts_with_word(&norm, "help") {
        IntentKind::Help
    } else {
        IntentKind::Unknown
    };
    Intent {
        kind,
        raw: text.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Perception,
    Navigation,
    Ranging,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Perception, Module::Navigation, Module::Ranging];

    pub fn name(self) -> &'static str {
        match self {
            Module::Perception => "perception",
            Module::Navigation => "navigation",
            Module::Ranging => "ranging",
        }
    }

    fn capability(self) -> &'static str {
        match self {
            Module::Perception => "scene description and object recognition",
            Module::Navigation => "navigation",
            Module::Ranging => "distance sensing",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Module {
    type Err = DeviceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DeviceError::UnknownModule(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Healthy,
    Failed,
}

impl FromStr for Health {
    type Err = DeviceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "healthy" => Ok(Health::Healthy),
            "failed" => Ok(Health::Failed),
            _ => Err(DeviceError::UnknownHealth(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Operational,
    Degraded,
    Failsafe,
}

/// Operational iff everything is healthy; Failsafe once perception and
/// navigation are both down; Degraded otherwise.
pub fn mode_for(health: &BTreeMap<Module, Health>) -> Mode {
    let failed = |m: Module| health.get(&m) == Some(&Health::Failed);
    if Module::ALL.iter().all(|&m| !failed(m)) {
        Mode::Operational
    } else if failed(Module::Perception) && failed(Module::Navigation) {
        Mode::Failsafe
    } else {
        Mode::Degraded
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub health: BTreeMap<Module, Health>,
    pub mode: Mode,
    pub events: Vec<String>,
}

impl Default for DeviceState {
    fn default() -> Self {
        Self {
            health: Module::ALL.iter().map(|&m| (m, Health::Healthy)).collect(),
            mode: Mode::Operational,
            events: Vec::new(),
        }
    }
}

impl DeviceState {
    pub fn is_healthy(&self, module: Module) -> bool {
        self.health.get(&module) == Some(&Health::Healthy)
    }

    pub fn set_module_health(&mut self, module: Module, health: Health) -> Mode {
        self.health.insert(module, health);
        let mode = mode_for(&self.health);
        if mode != self.mode {
            self.events.push(format!("{module} -> {health:?}; mode {:?} -> {mode:?}", self.mode));
        } else {
            self.events.push(format!("{module} -> {health:?}"));
        }
        self.mode = mode;
        mode
    }

    /// String-keyed variant for external callers.
    pub fn set_health_by_name(&mut self, module: &str, health: Health) -> Result<Mode, DeviceError> {
        Ok(self.set_module_health(module.parse()?, health))
    }
}

/// Why the perception backend could not answer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// The backend works but cannot serve this request (e.g. missing head).
    #[error("{0}")]
    Unavailable(String),
    /// The backend itself is broken; the module is marked failed.
    #[error("{0}")]
    Failure(String),
}

/// What the camera-side model can do for the device.
pub trait Perception {
    /// A caption of the current view.
    fn describe(&self) -> Result<String, BackendError>;
    /// A short description of the object in front of the wearer.
    fn identify(&self) -> Result<String, BackendError>;
    /// Truth value and confidence of a statement about the view.
    fn verify(&self, statement: &str) -> Result<(bool, f64), BackendError>;
}

/// Source of ultrasonic echo times.
pub trait RangeSensor {
    fn echo_time_us(&self, world: &GridWorld) -> Result<f64, BackendError>;
}

/// Echo from the first wall or grid edge straight ahead of the agent,
/// measured from the agent's cell centre.
#[derive(Clone, Copy, Debug, Default)]
pub struct SimulatedSonar;

impl RangeSensor for SimulatedSonar {
    fn echo_time_us(&self, world: &GridWorld) -> Result<f64, BackendError> {
        let metres = (world.clearance_ahead() as f64 + 0.5) * CELL_SIZE_M;
        Ok(2.0 * metres / SPEED_OF_SOUND * 1e6)
    }
}

/// Fixed answers, for tests and running without a checkpoint.
#[derive(Clone, Debug)]
pub struct StubPerception {
    pub caption: Result<String, BackendError>,
    pub verdict: Result<(bool, f64), BackendError>,
}

impl StubPerception {
    pub fn new(caption: &str) -> Self {
        Self {
            caption: Ok(caption.to_string()),
            verdict: Ok((true, 1.0)),
        }
    }

    pub fn failing(message: &str) -> Self {
        Self {
            caption: Err(BackendError::Failure(message.to_string())),
            verdict: Err(BackendError::Failure(message.to_string())),
        }
    }
}

impl Perception for StubPerception {
    fn describe(&self) -> Result<String, BackendError> {
        self.caption.clone()
    }

    fn identify(&self) -> Result<String, BackendError> {
        self.caption.clone()
    }

    fn verify(&self, _statement: &str) -> Result<(bool, f64), BackendError> {
        self.verdict.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub intent: Intent,
    pub text: String,
    pub mode: Mode,
    /// Route instructions when the response includes one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub route: Option<Vec<String>>,
}

pub const HELP_TEXT: &str = "You can say: what is that, describe the scene, \
is there a red circle above a blue square, how far is it, or navigate to a place.";

fn sentence(route: &[String]) -> String {
    let mut s = route.join(", ");
    if let Some(first) = s.get(0..1) {
        s.replace_range(0..1, &first.to_uppercase());
    }
    s.push('.');
    s
}

fn unavailable(module: Module) -> String {
    format!(
        "Sorry, {} is unavailable because the {module} module has failed.",
        module.capability()
    )
}

/// Answers one intent. Backend failures mark the responsible module failed
/// and become apologies; nothing is surfaced as an error.
pub fn dispatch(
    intent: &Intent,
    state: &mut DeviceState,
    world: &GridWorld,
    perception: &dyn Perception,
    sonar: &dyn RangeSensor,
) -> Response {
    let (text, route) = respond(intent, state, world, perception, sonar);
    state.events.push(format!("{} -> {text}", intent.kind.name()));
    Response {
        intent: intent.clone(),
        text,
        mode: state.mode,
        route,
    }
}

fn respond(
    intent: &Intent,
    state: &mut DeviceState,
    world: &GridWorld,
    perception: &dyn Perception,
    sonar: &dyn RangeSensor,
) -> (String, Option<Vec<String>>) {
    if state.mode == Mode::Failsafe {
        return failsafe(world);
    }
    if let Some(module) = intent.kind.module() {
        if !state.is_healthy(module) {
            return (unavailable(module), None);
        }
    }
    let fail = |state: &mut DeviceState, module: Module, err: BackendError| match err {
        BackendError::Unavailable(why) => format!("Sorry, I can't answer that right now: {why}."),
        BackendError::Failure(_) => {
            state.set_module_health(module, Health::Failed);
            unavailable(module)
        }
    };
    let text = match &intent.kind {
        IntentKind::IdentifyObject => match perception.identify() {
            Ok(what) => format!("I see {what}"),
            Err(e) => fail(state, Module::Perception, e),
        },
        IntentKind::DescribeScene => match perception.describe() {
            Ok(caption) => format!("The scene shows {caption}"),
            Err(e) => fail(state, Module::Perception, e),
        },
        IntentKind::VerifyStatement => {
            let statement = intent.statement();
            match perception.verify(&statement) {
                Ok((truth, confidence)) => format!(
                    "{}, {} ({:.0}% confident)",
                    if truth { "Yes" } else { "No" },
                    if truth { "that is right" } else { "that is not right" },
                    confidence * 100.0
                ),
                Err(e) => fail(state, Module::Perception, e),
            }
        }
        IntentKind::Navigate(dest) => match plan_route(world, dest) {
            Ok(route) => return (format!("Route to {dest}: {}", sentence(&route)), Some(route)),
            Err(DeviceError::UnknownWaypoint(_)) => format!("I don't know a place called {dest}."),
            Err(_) => format!("I can't find a way to {dest} from here."),
        },
        IntentKind::RangeCheck => match sonar.echo_time_us(world) {
            Ok(us) => match estimate_distance(us) {
                Ok(d) => obstacle_alert(d, DEFAULT_ALERT_THRESHOLD_M).message,
                Err(e) => fail(state, Module::Ranging, BackendError::Failure(e.to_string())),
            },
            Err(e) => fail(state, Module::Ranging, e),
        },
        IntentKind::Help => HELP_TEXT.to_string(),
        IntentKind::Unknown => "Sorry, I didn't understand that. Say help to hear what I can do.".to_string(),
    };
    if state.mode == Mode::Failsafe {
        // This request's failure tipped the device into failsafe.
        let (warning, route) = failsafe(world);
        return (format!("{warning} {text}"), route);
    }
    (text, None)
}

fn failsafe(world: &GridWorld) -> (String, Option<Vec<String>>) {
    let warning = "Warning: perception and navigation have failed.";
    match world.nearest_safe_place() {
        Some(name) => {
            let route = plan_route(world, name).expect("nearest safe place is reachable");
            (
                format!("{warning} Go to the {name}: {}", sentence(&route)),
                Some(route),
            )
        }
        None => (
            format!("{warning} No safe place is reachable; stay where you are and call for help."),
            None,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_table() {
        let cases = [
            ("What is that?", IntentKind::IdentifyObject),
            ("Navigate to the front door", IntentKind::Navigate("the front door".into())),
            ("blorp", IntentKind::Unknown),
            ("Describe the scene.", IntentKind::DescribeScene),
            ("How far is the wall?", IntentKind::RangeCheck),
            ("Is there a red circle?", IntentKind::VerifyStatement),
            ("help", IntentKind::Help),
            ("navigate to", IntentKind::Unknown),
            ("island", IntentKind::Unknown),
            ("describer", IntentKind::Unknown),
        ];
        for (text, kind) in cases {
            let intent = parse_command(text);
            assert_eq!(intent.kind, kind, "{text}");
            assert_eq!(intent.raw, text);
        }
    }

    #[test]
    fn statement_strips_question_words() {
        let i = parse_command("Is there a red circle above a blue square?");
        assert_eq!(i.statement(), "a red circle above a blue square");
        assert_eq!(parse_command("is the circle red").statement(), "the circle red");
    }

    #[test]
    fn intent_json_shape() {
        let v = serde_json::to_value(parse_command("navigate to the kitchen")).unwrap();
        assert_eq!(v["kind"], "Navigate");
        assert_eq!(v["dest"], "the kitchen");
        let v = serde_json::to_value(parse_command("what is that")).unwrap();
        assert_eq!(v["kind"], "IdentifyObject");
    }

    #[test]
    fn distance_examples() {
        assert_eq!(estimate_distance(0.0).unwrap(), 0.0);
        assert!((estimate_distance(5831.0).unwrap() - 1.0).abs() < 1e-3);
        assert!((estimate_distance(58310.0).unwrap() - 10.0).abs() < 1e-2);
        assert!(matches!(estimate_distance(-1.0), Err(DeviceError::NegativeEcho(_))));
        assert!(estimate_distance(f64::NAN).is_err());
    }

    #[test]
    fn alert_examples() {
        assert!(obstacle_alert(0.5, 1.0).alert);
        assert!(!obstacle_alert(1.0, 1.0).alert);
        assert!(obstacle_alert(1.5, 2.0).alert);
        assert!(obstacle_alert(0.44, 1.0).message.contains("0.4 meters"));
    }

    #[test]
    fn health_transitions() {
        let mut s = DeviceState::default();
        assert_eq!(s.set_module_health(Module::Ranging, Health::Failed), Mode::Degraded);
        s.set_module_health(Module::Perception, Health::Failed);
        assert_eq!(s.set_module_health(Module::Navigation, Health::Failed), Mode::Failsafe);
        for m in Module::ALL {
            s.set_module_health(m, Health::Healthy);
        }
        assert_eq!(s.mode, Mode::Operational);
        assert_eq!(s.events.len(), 6);
        assert!(matches!(
            s.set_health_by_name("camera", Health::Failed),
            Err(DeviceError::UnknownModule(_))
        ));
    }

    #[test]
    fn identify_round_trips_stub() {
        let mut s = DeviceState::default();
        let r = dispatch(
            &parse_command("What is that?"),
            &mut s,
            &GridWorld::demo(),
            &StubPerception::new("a large red circle"),
            &SimulatedSonar,
        );
        assert_eq!(r.text, "I see a large red circle");
    }

    #[test]
    fn backend_failure_only_marks_perception() {
        let mut s = DeviceState::default();
        let r = dispatch(
            &parse_command("describe"),
            &mut s,
            &GridWorld::demo(),
            &StubPerception::failing("camera unplugged"),
            &SimulatedSonar,
        );
        assert!(r.text.starts_with("Sorry"), "{}", r.text);
        assert!(r.text.contains("perception"));
        assert!(!s.is_healthy(Module::Perception));
        assert!(s.is_healthy(Module::Navigation) && s.is_healthy(Module::Ranging));
        assert_eq!(s.mode, Mode::Degraded);
    }

    #[test]
    fn unavailable_backend_keeps_module_healthy() {
        let mut s = DeviceState::default();
        let stub = StubPerception {
            caption: Ok("x".into()),
            verdict: Err(BackendError::Unavailable("no statement head".into())),
        };
        let r = dispatch(&parse_command("is it red"), &mut s, &GridWorld::demo(), &stub, &SimulatedSonar);
        assert!(r.text.contains("no statement head"));
        assert_eq!(s.mode, Mode::Operational);
    }

    #[test]
    fn failsafe_warns_and_routes_to_safe_place() {
        let world = GridWorld::demo();
        let mut s = DeviceState::default();
        s.set_module_health(Module::Perception, Health::Failed);
        s.set_module_health(Module::Navigation, Health::Failed);
        for cmd in ["what is that", "help", "blorp", "how far", "navigate to the kitchen"] {
            let r = dispatch(&parse_command(cmd), &mut s, &world, &StubPerception::new("x"), &SimulatedSonar);
            assert!(r.text.starts_with("Warning"), "{}", r.text);
            let route = r.route.expect("failsafe includes a route");
            let end = replay(&world, &route).unwrap();
            assert_eq!([end.r, end.c], world.waypoints["safe place"]);
            assert_eq!(r.mode, Mode::Failsafe);
        }
    }

    #[test]
    fn range_check_uses_sonar() {
        let world = GridWorld::demo();
        let mut s = DeviceState::default();
        let r = dispatch(&parse_command("how far"), &mut s, &world, &StubPerception::new("x"), &SimulatedSonar);
        // agent at row 8 facing north with no wall in column 2: 8.5 cells
        assert_eq!(r.text, obstacle_alert(4.25, 1.0).message);
    }
}
