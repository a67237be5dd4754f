//! Scripted experts, success predicates and control-failure injection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sim::gripper_half_width;
use super::{
    wrap_degrees, ControlFailure, Episode, ExpertAction, FailureMode, GripperCommand, Pov,
    SceneSpec, TaskParams, TaskSpec, Vec2, World, WorldState,
};
use crate::error::{Error, Result};

const ANGLE_TOL: f64 = 1e-6;

/// Smallest absolute difference between two angles, degrees.
fn angle_gap(a: f64, b: f64) -> f64 {
    let d = wrap_degrees(a - b);
    d.min(360.0 - d)
}

/// Whether `last` achieves `task` starting from `first`.
pub fn success_predicate(world: &World, task: &TaskSpec, first: &WorldState, last: &WorldState) -> bool {
    let cfg = &world.config;
    let rest_y = world.rest_y();
    let half = 0.5 * cfg.object_size;
    let pair = |color| Some((first.object_by_color(color)?, last.object_by_color(color)?));
    match task.params {
        TaskParams::Lift { color } => pair(color).is_some_and(|(_, o)| {
            o.held && o.pos.y - half >= cfg.table_top + cfg.lift_threshold
        }),
        TaskParams::Rotate { color, direction } => pair(color).is_some_and(|(a, b)| {
            let want = a.angle + 90.0 * direction.rotation_sign();
            !b.held && b.pos.y == rest_y && angle_gap(b.angle, want) < ANGLE_TOL
        }),
        TaskParams::Push { color, direction } => pair(color).is_some_and(|(a, b)| {
            !b.held && (b.pos.x - a.pos.x) * direction.x_sign() >= cfg.push_threshold
        }),
        TaskParams::Place { color } => pair(color).is_some_and(|(_, b)| {
            let zone = &world.layout.place_zone;
            !b.held && b.pos.y == rest_y && b.pos.x >= zone.x0 && b.pos.x <= zone.x1
        }),
        TaskParams::Slider { open } => first.slider_open != open && last.slider_open == open,
        TaskParams::Light { on } => first.light_on != on && last.light_on == on,
    }
}

/// Builds capped action sequences from waypoints.
struct Script<'w> {
    world: &'w World,
    pos: Vec2,
    closed: bool,
    actions: Vec<ExpertAction>,
}

impl<'w> Script<'w> {
    fn new(world: &'w World, state: &WorldState) -> Self {
        Script {
            world,
            pos: state.gripper.pos,
            closed: state.gripper.closed,
            actions: Vec::new(),
        }
    }

    fn move_to(&mut self, x: f64, y: f64) {
        let dx = x - self.pos.x;
        let dy = y - self.pos.y;
        let dist = (dx * dx + dy * dy).sqrt();
        if dist == 0.0 {
            return;
        }
        let n = (dist / self.world.config.move_cap).ceil().max(1.0) as usize;
        for k in 1..=n {
            let fx = self.pos.x + dx * k as f64 / n as f64;
            let fy = self.pos.y + dy * k as f64 / n as f64;
            let px = self.pos.x + dx * (k - 1) as f64 / n as f64;
            let py = self.pos.y + dy * (k - 1) as f64 / n as f64;
            self.actions.push(ExpertAction {
                delta: Vec2::new(fx - px, fy - py),
                ..ExpertAction::HOLD
            });
        }
        self.pos = Vec2::new(x, y);
    }

    /// Vertical, then horizontal, then vertical: keeps sideways travel above
    /// the cubes so nothing is pushed by accident.
    fn travel_to(&mut self, x: f64, y: f64, height: f64) {
        self.move_to(self.pos.x, height);
        self.move_to(x, height);
        self.move_to(x, y);
    }

    fn close(&mut self) {
        self.closed = true;
        self.actions.push(ExpertAction::command(GripperCommand::Close));
    }

    fn open(&mut self) {
        self.closed = false;
        self.actions.push(ExpertAction::command(GripperCommand::Open));
    }

    fn rotate(&mut self, degrees: f64) {
        let cap = self.world.config.rotation_cap;
        let n = (degrees.abs() / cap).ceil() as usize;
        for _ in 0..n {
            self.actions.push(ExpertAction {
                delta_rotation: degrees / n as f64,
                ..ExpertAction::HOLD
            });
        }
    }
}

impl World {
    /// Horizontal span swept by the gripper and the cube during a push.
    fn push_corridor(&self, x: f64, direction: super::Direction) -> (f64, f64) {
        let half = 0.5 * self.config.object_size;
        let ext = gripper_half_width(true);
        let sign = direction.x_sign();
        let side = x - sign * (half + ext + 1.0);
        let end = x + sign * self.config.push_distance;
        if sign > 0.0 {
            (side - ext, end + half)
        } else {
            (end - half, side + ext)
        }
    }

    fn blocks_corridor(&self, x: f64, (lo, hi): (f64, f64)) -> bool {
        let half = 0.5 * self.config.object_size;
        x + half > lo - 1.0 && x - half < hi + 1.0
    }

    /// Re-draws the positions of bystander cubes that sit in the push
    /// corridor, keeping the scene collision-free. Leaves the state untouched
    /// when no valid slot exists.
    fn clear_push_corridor(&self, state: &mut WorldState, color: super::Color, direction: super::Direction, seed: u64) {
        let Some(target) = state.object_by_color(color).map(|o| o.pos.x) else {
            return;
        };
        let corridor = self.push_corridor(target, direction);
        // Bystanders may use the whole table, including the place zone.
        let half = 0.5 * self.config.object_size;
        let x_min = (half + 1.0).ceil() as i64;
        let x_max = (self.config.canvas_w - half - 1.0).floor() as i64;
        let diameter = self.object_diameter();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C0FF_EE00_0001);
        for k in 0..state.objects.len() {
            let o = &state.objects[k];
            if o.color == color || !self.blocks_corridor(o.pos.x, corridor) {
                continue;
            }
            let slots: Vec<f64> = (x_min..=x_max)
                .map(|x| x as f64)
                .filter(|&x| !self.blocks_corridor(x, corridor))
                .filter(|&x| {
                    state
                        .objects
                        .iter()
                        .enumerate()
                        .all(|(j, p)| j == k || (p.pos.x - x).abs() > diameter)
                })
                .collect();
            if slots.is_empty() {
                return;
            }
            state.objects[k].pos.x = slots[rng.random_range(0..slots.len())];
        }
    }

    fn target_of(&self, task: &TaskSpec, state: &WorldState) -> Result<Option<Vec2>> {
        let Some(color) = task.params.target_color() else {
            return Ok(None);
        };
        let matching = state.objects.iter().filter(|o| o.color == color).count();
        if matching != 1 {
            return Err(Error::NotAchievable {
                task: task.task_id.clone(),
                reason: format!("expected exactly one {} cube, found {matching}", color.name()),
            });
        }
        Ok(state.object_by_color(color).map(|o| o.pos))
    }

    /// Checks the preconditions the expert script relies on.
    pub fn check_achievable(&self, task: &TaskSpec, state: &WorldState) -> Result<()> {
        let cfg = &self.config;
        let half = 0.5 * cfg.object_size;
        let fail = |reason: &str| {
            Err(Error::NotAchievable {
                task: task.task_id.clone(),
                reason: reason.to_string(),
            })
        };
        if state.gripper.closed || state.held_object().is_some() {
            return fail("gripper must start open and empty");
        }
        let target = self.target_of(task, state)?;
        if let Some(t) = target {
            if t.y != self.rest_y() {
                return fail("target cube is not resting on the table");
            }
        }
        let others = |color| {
            state
                .objects
                .iter()
                .filter(move |o| Some(o.color) != color)
                .map(|o| o.pos.x)
        };
        match task.params {
            TaskParams::Light { on } if state.light_on == on => fail("light already in goal state"),
            TaskParams::Slider { open } if state.slider_open == open => {
                fail("slider already in goal state")
            }
            TaskParams::Place { color } => {
                let t = target.expect("placing has a target");
                let zone = &self.layout.place_zone;
                if t.x >= zone.x0 - half {
                    return fail("target already at the zone");
                }
                let cx = 0.5 * (zone.x0 + zone.x1);
                if others(Some(color)).any(|x| (x - cx).abs() <= cfg.object_size) {
                    return fail("zone occupied");
                }
                Ok(())
            }
            TaskParams::Push { color, direction } => {
                let t = target.expect("pushing has a target");
                let end = t.x + direction.x_sign() * cfg.push_distance;
                if end < half + 1.0 || end > cfg.canvas_w - half - 1.0 {
                    return fail("push would leave the canvas");
                }
                let (lo, hi) = self.push_corridor(t.x, direction);
                if lo < 0.0 || hi > cfg.canvas_w {
                    return fail("no room for the gripper behind the cube");
                }
                if others(Some(color)).any(|x| self.blocks_corridor(x, (lo, hi))) {
                    return fail("push path blocked");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn script(
        &self,
        task: &TaskSpec,
        state: &WorldState,
        failure: Option<ControlFailure>,
    ) -> Result<Vec<ExpertAction>> {
        let cfg = &self.config;
        let layout = &self.layout;
        let half = 0.5 * cfg.object_size;
        let rest_y = self.rest_y();
        let travel = cfg.travel_height;
        let carry_y = rest_y + cfg.lift_height;
        let miss = if failure == Some(ControlFailure::MissGrasp) {
            cfg.grasp_radius + 2.0
        } else {
            0.0
        };
        let incomplete = failure == Some(ControlFailure::IncompleteMotion);
        let target = self.target_of(task, state)?;
        let mut s = Script::new(self, state);

        match task.params {
            TaskParams::Lift { .. } => {
                let t = target.expect("lifting has a target");
                s.travel_to(t.x + miss, rest_y, travel);
                s.close();
                if failure == Some(ControlFailure::Drop) {
                    s.move_to(t.x, carry_y);
                    s.open();
                    s.move_to(t.x, carry_y + 2.0 * cfg.move_cap);
                } else {
                    let frac = if incomplete { 0.4 } else { 1.0 };
                    s.move_to(t.x + miss, rest_y + frac * cfg.lift_height);
                }
            }
            TaskParams::Rotate { direction, .. } => {
                let t = target.expect("rotating has a target");
                s.travel_to(t.x + miss, rest_y, travel);
                s.close();
                let sign = if failure == Some(ControlFailure::WrongRotationDirection) {
                    -direction.rotation_sign()
                } else {
                    direction.rotation_sign()
                };
                let frac = if incomplete { 0.5 } else { 1.0 };
                s.rotate(sign * frac * 90.0);
                s.open();
                s.move_to(t.x + miss, travel);
            }
            TaskParams::Push { direction, .. } => {
                let t = target.expect("pushing has a target");
                let sign = direction.x_sign();
                let ext = gripper_half_width(true);
                let side = t.x - sign * (half + ext + 1.0);
                s.move_to(s.pos.x, travel);
                s.move_to(side, travel);
                s.close();
                s.move_to(side, rest_y);
                let frac = if incomplete { 0.5 } else { 1.0 };
                s.move_to(side + sign * (1.0 + frac * cfg.push_distance), rest_y);
                s.move_to(s.pos.x, travel);
                s.open();
            }
            TaskParams::Place { .. } => {
                let t = target.expect("placing has a target");
                let zone_x = 0.5 * (layout.place_zone.x0 + layout.place_zone.x1);
                s.travel_to(t.x + miss, rest_y, travel);
                s.close();
                s.move_to(t.x + miss, carry_y);
                match failure {
                    Some(ControlFailure::Drop) => {
                        s.move_to(t.x + 0.5 * (zone_x - t.x), carry_y);
                        s.open();
                    }
                    Some(ControlFailure::IncompleteMotion) => {
                        s.move_to(t.x + 0.5 * (zone_x - t.x), carry_y);
                    }
                    _ => {
                        s.move_to(zone_x, carry_y);
                        s.move_to(zone_x, rest_y);
                        s.open();
                        s.move_to(zone_x, travel);
                    }
                }
            }
            TaskParams::Slider { open } => {
                let (from, to) = if open {
                    (layout.slider_closed_handle, layout.slider_open_handle)
                } else {
                    (layout.slider_open_handle, layout.slider_closed_handle)
                };
                s.move_to(s.pos.x, from.y);
                s.move_to(from.x, from.y);
                s.close();
                let frac = if incomplete { 0.5 } else { 1.0 };
                s.move_to(from.x + frac * (to.x - from.x), to.y);
                s.open();
                s.move_to(s.pos.x, travel);
            }
            TaskParams::Light { .. } => {
                let b = layout.button;
                let stop = if incomplete { b.y - 5.0 } else { b.y };
                s.move_to(s.pos.x, travel);
                s.move_to(b.x, travel);
                s.move_to(b.x, stop);
                s.close();
                s.open();
                s.move_to(b.x, travel);
            }
        }
        Ok(s.actions)
    }

    fn roll_out(
        &self,
        task: &TaskSpec,
        state: &WorldState,
        actions: &[ExpertAction],
        povs: &[Pov],
        height: usize,
        width: usize,
    ) -> Result<(Vec<WorldState>, Vec<Vec<super::Frame>>)> {
        let mut trace = Vec::with_capacity(actions.len() + 1);
        trace.push(state.clone());
        for a in actions {
            let next = self.step(trace.last().expect("non-empty"), a);
            trace.push(next);
        }
        if trace.len() < 2 {
            return Err(Error::Config(format!(
                "script for `{}` produced no steps",
                task.task_id
            )));
        }
        let frames = povs
            .iter()
            .map(|&pov| {
                trace
                    .iter()
                    .map(|s| self.render(s, pov, height, width))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((trace, frames))
    }

    /// Runs the scripted expert from `state` and renders every timestep.
    pub fn run_expert(
        &self,
        task: &TaskSpec,
        state: &WorldState,
        horizon: usize,
        povs: &[Pov],
        height: usize,
        width: usize,
    ) -> Result<Episode> {
        self.check_achievable(task, state)?;
        let actions = self.script(task, state, None)?;
        if actions.len() > horizon {
            return Err(Error::Horizon {
                task: task.task_id.clone(),
                needed: actions.len(),
                horizon,
            });
        }
        let (trace, frames) = self.roll_out(task, state, &actions, povs, height, width)?;
        let last = trace.last().expect("non-empty");
        if !success_predicate(self, task, state, last) {
            return Err(Error::NotAchievable {
                task: task.task_id.clone(),
                reason: "expert script did not reach the goal".into(),
            });
        }
        Ok(Episode {
            frames,
            povs: povs.to_vec(),
            task_id: task.task_id.clone(),
            succeeded: true,
            failure_mode: FailureMode::None,
            seed: state.rng_cursor,
            trace,
        })
    }

    /// Samples a state in which `task` is achievable. Tries seed-derived
    /// substreams until one passes the task preconditions.
    pub fn sample_task_state(&self, task: &TaskSpec, seed: u64, scene: &SceneSpec) -> Result<WorldState> {
        let mut last_err = None;
        for attempt in 0..64u64 {
            let sub = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt);
            let mut state = self.sample_initial_state(sub, scene)?;
            match task.params {
                TaskParams::Light { on } => state.light_on = !on,
                TaskParams::Slider { open } => state.slider_open = !open,
                TaskParams::Push { color, direction } => {
                    self.clear_push_corridor(&mut state, color, direction, sub);
                }
                _ => {}
            }
            state.rng_cursor = seed;
            match self.check_achievable(task, &state) {
                Ok(()) => return Ok(state),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    /// Expert episode for `task` from a seed-derived achievable state.
    pub fn generate_expert(
        &self,
        task: &TaskSpec,
        seed: u64,
        scene: &SceneSpec,
        povs: &[Pov],
        height: usize,
        width: usize,
    ) -> Result<Episode> {
        let state = self.sample_task_state(task, seed, scene)?;
        self.run_expert(task, &state, self.config.horizon, povs, height, width)
    }

    /// Episode in which the robot targets the right object but the low-level
    /// execution goes wrong in the given way.
    #[allow(clippy::too_many_arguments)]
    pub fn inject_control_failure(
        &self,
        task: &TaskSpec,
        mode: ControlFailure,
        seed: u64,
        scene: &SceneSpec,
        povs: &[Pov],
        height: usize,
        width: usize,
    ) -> Result<Episode> {
        if !mode.compatible_with(task.category) {
            return Err(Error::Config(format!(
                "failure mode {} is incompatible with category {}",
                mode.name(),
                task.category
            )));
        }
        let state = self.sample_task_state(task, seed, scene)?;
        let actions = self.script(task, &state, Some(mode))?;
        if actions.len() > self.config.horizon {
            return Err(Error::Horizon {
                task: task.task_id.clone(),
                needed: actions.len(),
                horizon: self.config.horizon,
            });
        }
        let (trace, frames) = self.roll_out(task, &state, &actions, povs, height, width)?;
        let last = trace.last().expect("non-empty");
        if success_predicate(self, task, &state, last) {
            return Err(Error::Config(format!(
                "failure {} on `{}` still satisfied the goal",
                mode.name(),
                task.task_id
            )));
        }
        Ok(Episode {
            frames,
            povs: povs.to_vec(),
            task_id: task.task_id.clone(),
            succeeded: false,
            failure_mode: FailureMode::Control(mode),
            seed,
            trace,
        })
    }
}
