//! Synthetic 2D tabletop world.
//!
//! A side-view kinematic scene: cubes rest on a table, a two-finger gripper
//! moves in the plane, a sliding door sits on the back wall and a push button
//! toggles a lamp in the top-right corner. Expert scripts cover six task
//! categories; scripted control failures perturb those scripts while still
//! targeting the right object.

mod catalog;
mod expert;
pub mod io;
mod render;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use catalog::{Catalog, Category, Direction, TaskParams, TaskSpec, MAX_PARAPHRASES};
pub use expert::success_predicate;
pub use render::Frame;

use crate::error::{Error, Result};

/// Object colors. Each maps to a distinct RGB value in the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Blue,
    Pink,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Blue, Color::Pink];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Pink => "pink",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Blue => [40, 70, 220],
            Color::Pink => [240, 130, 200],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dist(self, other: Vec2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub pos: Vec2,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub color: Color,
    pub shape: Shape,
    /// Center of the cube.
    pub pos: Vec2,
    /// Degrees in `[0, 360)`, counter-clockwise.
    pub angle: f64,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: Gripper,
    pub objects: Vec<SceneObject>,
    pub light_on: bool,
    pub slider_open: bool,
    /// Seed-derived counter identifying the draw that produced this state.
    pub rng_cursor: u64,
}

impl WorldState {
    pub fn object_by_color(&self, color: Color) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.color == color)
    }

    pub fn held_object(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.held)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperCommand {
    Open,
    Close,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertAction {
    pub delta: Vec2,
    /// Degrees, applied to the held object.
    pub delta_rotation: f64,
    pub command: GripperCommand,
}

impl ExpertAction {
    pub const HOLD: ExpertAction = ExpertAction {
        delta: Vec2::new(0.0, 0.0),
        delta_rotation: 0.0,
        command: GripperCommand::Hold,
    };

    pub fn command(command: GripperCommand) -> Self {
        ExpertAction {
            command,
            ..Self::HOLD
        }
    }
}

/// Camera viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pov {
    /// Fixed camera covering the whole canvas.
    Exocentric,
    /// Half-canvas window centered on the gripper, resampled to the frame size.
    Egocentric,
}

impl Pov {
    /// Row order used for tiling: exocentric first, egocentric second.
    pub fn for_count(n: usize) -> Vec<Pov> {
        [Pov::Exocentric, Pov::Egocentric]
            .into_iter()
            .take(n)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlFailure {
    MissGrasp,
    Drop,
    WrongRotationDirection,
    IncompleteMotion,
}

impl ControlFailure {
    pub const ALL: [ControlFailure; 4] = [
        ControlFailure::MissGrasp,
        ControlFailure::Drop,
        ControlFailure::WrongRotationDirection,
        ControlFailure::IncompleteMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControlFailure::MissGrasp => "miss_grasp",
            ControlFailure::Drop => "drop",
            ControlFailure::WrongRotationDirection => "wrong_rotation_direction",
            ControlFailure::IncompleteMotion => "incomplete_motion",
        }
    }

    /// Whether the failure can be scripted for a task of this category.
    pub fn compatible_with(self, category: Category) -> bool {
        use Category::*;
        match self {
            ControlFailure::MissGrasp => matches!(category, Lifting | Rotating | Placing),
            ControlFailure::Drop => matches!(category, Lifting | Placing),
            ControlFailure::WrongRotationDirection => category == Rotating,
            ControlFailure::IncompleteMotion => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureMode {
    None,
    Control(ControlFailure),
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureMode::None => f.write_str("none"),
            FailureMode::Control(c) => write!(f, "control:{}", c.name()),
        }
    }
}

impl FromStr for FailureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(FailureMode::None);
        }
        let mode = s
            .strip_prefix("control:")
            .and_then(|m| ControlFailure::ALL.into_iter().find(|c| c.name() == m))
            .ok_or_else(|| Error::Config(format!("unknown failure mode `{s}`")))?;
        Ok(FailureMode::Control(mode))
    }
}

impl Serialize for FailureMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FailureMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A rendered trajectory plus the state trace that produced it.
#[derive(Debug, Clone)]
pub struct Episode {
    /// `frames[pov][t]`.
    pub frames: Vec<Vec<Frame>>,
    pub povs: Vec<Pov>,
    pub task_id: String,
    pub succeeded: bool,
    pub failure_mode: FailureMode,
    pub seed: u64,
    /// World state at every timestep, `trace.len() == frames[p].len()`.
    pub trace: Vec<WorldState>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.trace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.is_empty()
    }
}

/// Geometry and dynamics of the tabletop, in world units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub canvas_w: f64,
    pub canvas_h: f64,
    /// Height of the table surface above the canvas bottom.
    pub table_top: f64,
    /// Cube edge length.
    pub object_size: f64,
    pub grasp_radius: f64,
    /// Maximum gripper displacement per step.
    pub move_cap: f64,
    /// Maximum rotation per step, degrees.
    pub rotation_cap: f64,
    pub travel_height: f64,
    pub lift_height: f64,
    /// Minimum elevation of a cube's bottom face for a lift to count.
    pub lift_threshold: f64,
    pub push_distance: f64,
    pub push_threshold: f64,
    pub placement_retries: usize,
    pub horizon: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            canvas_w: 64.0,
            canvas_h: 64.0,
            table_top: 16.0,
            object_size: 8.0,
            grasp_radius: 3.0,
            move_cap: 4.0,
            rotation_cap: 15.0,
            travel_height: 38.0,
            lift_height: 20.0,
            lift_threshold: 12.0,
            push_distance: 12.0,
            push_threshold: 9.0,
            placement_retries: 200,
            horizon: 96,
        }
    }
}

/// Objects to place in a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<Color>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            objects: Color::ALL.to_vec(),
        }
    }
}

/// Axis-aligned rectangle in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    fn around(c: Vec2, half: f64) -> Rect {
        Rect {
            x0: c.x - half,
            y0: c.y - half,
            x1: c.x + half,
            y1: c.y + half,
        }
    }
}

/// Fixed fixtures derived from the canvas size.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub lamp: Rect,
    pub button: Vec2,
    pub button_zone: Rect,
    pub slider_track: Rect,
    /// Handle position while the door is closed.
    pub slider_closed_handle: Vec2,
    /// Handle position while the door is open.
    pub slider_open_handle: Vec2,
    pub place_zone: Rect,
}

const ZONE_HALF: f64 = 3.0;

impl Layout {
    pub fn new(cfg: &WorldConfig) -> Self {
        let (w, h) = (cfg.canvas_w, cfg.canvas_h);
        let track = Rect {
            x0: 0.0625 * w,
            y0: 0.6875 * h,
            x1: 0.4375 * w,
            y1: 0.8125 * h,
        };
        let handle_y = 0.5 * (track.y0 + track.y1);
        let quarter = 0.25 * (track.x1 - track.x0);
        let button = Vec2::new(0.625 * w, 0.75 * h);
        Layout {
            lamp: Rect {
                x0: 0.84375 * w,
                y0: 0.84375 * h,
                x1: 0.96875 * w,
                y1: 0.96875 * h,
            },
            button,
            button_zone: Rect::around(button, ZONE_HALF),
            slider_track: track,
            slider_closed_handle: Vec2::new(track.x0 + quarter, handle_y),
            slider_open_handle: Vec2::new(track.x1 - quarter, handle_y),
            place_zone: Rect {
                x0: 0.78125 * w,
                y0: cfg.table_top,
                x1: 0.96875 * w,
                y1: cfg.table_top + cfg.object_size,
            },
        }
    }

    pub fn slider_open_zone(&self) -> Rect {
        Rect::around(self.slider_open_handle, ZONE_HALF)
    }

    pub fn slider_closed_zone(&self) -> Rect {
        Rect::around(self.slider_closed_handle, ZONE_HALF)
    }
}

/// The simulator: configuration plus derived layout.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub layout: Layout,
}

impl Default for World {
    fn default() -> Self {
        World::new(WorldConfig::default())
    }
}

impl World {
    pub fn new(config: WorldConfig) -> Self {
        let layout = Layout::new(&config);
        World { config, layout }
    }

    /// Height of a resting cube's center.
    pub fn rest_y(&self) -> f64 {
        self.config.table_top + 0.5 * self.config.object_size
    }

    /// Minimum center distance between two placed objects.
    pub fn object_diameter(&self) -> f64 {
        self.config.object_size * std::f64::consts::SQRT_2
    }
}

/// Maps an angle in degrees onto `[0, 360)`.
pub fn wrap_degrees(a: f64) -> f64 {
    let r = a.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}
