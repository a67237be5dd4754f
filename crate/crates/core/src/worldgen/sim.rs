//! Initial-state sampling and the transition function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    wrap_degrees, ExpertAction, Gripper, GripperCommand, SceneObject, SceneSpec, Shape, Vec2,
    World, WorldState,
};
use crate::error::{Error, Result};

/// Half-extent of the gripper body below and above its center.
pub(crate) const GRIPPER_BELOW: f64 = 4.0;
pub(crate) const GRIPPER_ABOVE: f64 = 6.0;

/// Horizontal offset of each finger from the gripper center.
pub(crate) fn finger_offset(closed: bool) -> f64 {
    if closed {
        4.0
    } else {
        6.0
    }
}

/// Horizontal half-extent of the gripper body including finger thickness.
pub(crate) fn gripper_half_width(closed: bool) -> f64 {
    finger_offset(closed) + 1.0
}

impl World {
    /// Integer range of cube-center x positions used when sampling scenes.
    pub(crate) fn placement_range(&self) -> (i64, i64) {
        let cfg = &self.config;
        let x_min = cfg.object_size.ceil() as i64;
        let x_max = (self.layout.place_zone.x0 - cfg.object_size).floor() as i64;
        (x_min, x_max)
    }

    /// Draws a collision-free scene from `seed`.
    ///
    /// Cubes rest on the table at integer x positions left of the place zone,
    /// pairwise farther apart than the cube diagonal.
    pub fn sample_initial_state(&self, seed: u64, scene: &SceneSpec) -> Result<WorldState> {
        let cfg = &self.config;
        if scene.objects.is_empty() {
            return Err(Error::Config("scene lists no objects".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = 0.5 * cfg.object_size;
        let (x_min, x_max) = self.placement_range();
        let diameter = self.object_diameter();
        let fail = Error::Placement {
            objects: scene.objects.len(),
            attempts: cfg.placement_retries,
        };
        if x_max < x_min || self.rest_y() + half > cfg.canvas_h {
            return Err(fail);
        }

        // Greedy placement with a bounded number of tries per object; a dead
        // end restarts the whole scene.
        const TRIES_PER_OBJECT: usize = 32;
        let mut objects: Vec<SceneObject> = Vec::with_capacity(scene.objects.len());
        let mut placed = false;
        for _ in 0..cfg.placement_retries {
            objects.clear();
            for (id, &color) in scene.objects.iter().enumerate() {
                let x = (0..TRIES_PER_OBJECT)
                    .map(|_| rng.random_range(x_min..=x_max) as f64)
                    .find(|&x| objects.iter().all(|o| (o.pos.x - x).abs() > diameter));
                let Some(x) = x else { break };
                let angle = rng.random_range(0..360) as f64;
                objects.push(SceneObject {
                    id: id as u32,
                    color,
                    shape: Shape::Cube,
                    pos: Vec2::new(x, self.rest_y()),
                    angle,
                    held: false,
                });
            }
            if objects.len() == scene.objects.len() {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(fail);
        }
        let gx = rng.random_range((0.25 * cfg.canvas_w) as i64..=(0.75 * cfg.canvas_w) as i64);
        let light_on = rng.random_bool(0.5);
        let slider_open = rng.random_bool(0.5);
        Ok(WorldState {
            gripper: Gripper {
                pos: Vec2::new(gx as f64, cfg.travel_height),
                closed: false,
            },
            objects,
            light_on,
            slider_open,
            rng_cursor: seed,
        })
    }

    /// Clamps an action to the per-step displacement and rotation caps.
    pub fn clamp_action(&self, action: &ExpertAction) -> ExpertAction {
        let cfg = &self.config;
        let mut a = *action;
        let norm = (a.delta.x * a.delta.x + a.delta.y * a.delta.y).sqrt();
        if norm > cfg.move_cap {
            let s = cfg.move_cap / norm;
            a.delta = Vec2::new(a.delta.x * s, a.delta.y * s);
        }
        a.delta_rotation = a.delta_rotation.clamp(-cfg.rotation_cap, cfg.rotation_cap);
        a
    }

    /// Pure transition function.
    ///
    /// Actions beyond the per-step caps are clamped; gripper motion is clamped
    /// to the canvas (and never below grasp height). A held cube moves and
    /// rotates rigidly with the gripper. An empty gripper moving sideways
    /// pushes any cube it runs into. Closing inside the button zone toggles the
    /// lamp; a closed empty gripper arriving in a slider handle zone sets the
    /// door state. Opening releases the held cube, which drops to the table.
    pub fn step(&self, state: &WorldState, action: &ExpertAction) -> WorldState {
        let cfg = &self.config;
        let layout = &self.layout;
        let action = self.clamp_action(action);
        let mut next = state.clone();
        let half = 0.5 * cfg.object_size;
        let rest_y = self.rest_y();

        let old = state.gripper.pos;
        let target = Vec2::new(
            (old.x + action.delta.x).clamp(0.0, cfg.canvas_w),
            (old.y + action.delta.y).clamp(rest_y, cfg.canvas_h - GRIPPER_ABOVE),
        );
        let moved = Vec2::new(target.x - old.x, target.y - old.y);
        next.gripper.pos = target;
        let holding = next.objects.iter().any(|o| o.held);

        for o in next.objects.iter_mut().filter(|o| o.held) {
            o.pos.x += moved.x;
            o.pos.y += moved.y;
            o.angle = wrap_degrees(o.angle + action.delta_rotation);
        }

        if !holding && moved.x != 0.0 {
            let ext = gripper_half_width(state.gripper.closed);
            let g_lo = target.y - GRIPPER_BELOW;
            let g_hi = target.y + GRIPPER_ABOVE;
            for o in next.objects.iter_mut() {
                let overlaps = g_lo < o.pos.y + half && g_hi > o.pos.y - half;
                if !overlaps {
                    continue;
                }
                if moved.x > 0.0
                    && o.pos.x - half >= old.x + ext - 1e-9
                    && target.x + ext > o.pos.x - half
                {
                    o.pos.x = (target.x + ext + half).min(cfg.canvas_w - half);
                } else if moved.x < 0.0
                    && o.pos.x + half <= old.x - ext + 1e-9
                    && target.x - ext < o.pos.x + half
                {
                    o.pos.x = (target.x - ext - half).max(half);
                }
            }
        }

        let mut just_closed = false;
        match action.command {
            GripperCommand::Close if !state.gripper.closed => {
                next.gripper.closed = true;
                just_closed = true;
                if !holding {
                    let pos = next.gripper.pos;
                    let nearest = next
                        .objects
                        .iter_mut()
                        .map(|o| (o.pos.dist(pos), o))
                        .filter(|(d, _)| *d <= cfg.grasp_radius)
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    if let Some((_, o)) = nearest {
                        o.held = true;
                    }
                }
                if layout.button_zone.contains(next.gripper.pos) {
                    next.light_on = !next.light_on;
                }
            }
            GripperCommand::Open if state.gripper.closed => {
                next.gripper.closed = false;
                for o in next.objects.iter_mut().filter(|o| o.held) {
                    o.held = false;
                    o.pos.y = rest_y;
                }
            }
            _ => {}
        }

        let empty_closed = next.gripper.closed && !next.objects.iter().any(|o| o.held);
        if empty_closed && (just_closed || moved.x != 0.0 || moved.y != 0.0) {
            let p = next.gripper.pos;
            if layout.slider_open_zone().contains(p) {
                next.slider_open = true;
            } else if layout.slider_closed_zone().contains(p) {
                next.slider_open = false;
            }
        }
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{Color, WorldConfig};

    fn world() -> World {
        World::default()
    }

    #[test]
    fn sampling_is_deterministic() {
        let w = world();
        let a = w.sample_initial_state(7, &SceneSpec::default()).unwrap();
        let b = w.sample_initial_state(7, &SceneSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_move_objects() {
        let w = world();
        let a = w.sample_initial_state(7, &SceneSpec::default()).unwrap();
        let b = w.sample_initial_state(8, &SceneSpec::default()).unwrap();
        assert!(a
            .objects
            .iter()
            .zip(&b.objects)
            .any(|(x, y)| x.pos != y.pos));
    }

    #[test]
    fn crowded_scene_fails_placement() {
        let w = World::new(WorldConfig {
            canvas_w: 32.0,
            canvas_h: 32.0,
            table_top: 8.0,
            ..WorldConfig::default()
        });
        let scene = SceneSpec {
            objects: (0..50).map(|i| Color::ALL[i % 3]).collect(),
        };
        let err = w.sample_initial_state(1, &scene).unwrap_err();
        assert!(matches!(err, Error::Placement { objects: 50, .. }));
    }

    #[test]
    fn placements_are_collision_free_and_in_bounds() {
        let w = world();
        for seed in 0..200 {
            let s = w.sample_initial_state(seed, &SceneSpec::default()).unwrap();
            for (i, a) in s.objects.iter().enumerate() {
                assert!(a.pos.x >= 0.0 && a.pos.x <= w.config.canvas_w);
                assert!((0.0..360.0).contains(&a.angle));
                for b in &s.objects[i + 1..] {
                    assert!(a.pos.dist(b.pos) > w.object_diameter());
                }
            }
        }
    }

    #[test]
    fn zero_hold_is_identity() {
        let w = world();
        let s = w.sample_initial_state(3, &SceneSpec::default()).unwrap();
        assert_eq!(w.step(&s, &ExpertAction::HOLD), s);
    }

    #[test]
    fn close_out_of_reach_does_not_grasp() {
        let w = world();
        let mut s = w.sample_initial_state(3, &SceneSpec::default()).unwrap();
        let o = s.objects[0].pos;
        s.gripper.pos = Vec2::new(o.x + w.config.grasp_radius + 0.5, o.y);
        let next = w.step(&s, &ExpertAction::command(GripperCommand::Close));
        assert!(next.gripper.closed);
        assert!(next.objects.iter().all(|o| !o.held));
    }

    #[test]
    fn close_in_reach_grasps_and_carries() {
        let w = world();
        let mut s = w.sample_initial_state(3, &SceneSpec::default()).unwrap();
        let o = s.objects[1].pos;
        s.gripper.pos = Vec2::new(o.x + 1.0, o.y);
        let s = w.step(&s, &ExpertAction::command(GripperCommand::Close));
        assert!(s.objects[1].held);
        let up = ExpertAction {
            delta: Vec2::new(0.0, 4.0),
            ..ExpertAction::HOLD
        };
        let s = w.step(&s, &up);
        assert_eq!(s.objects[1].pos, Vec2::new(o.x, o.y + 4.0));
        let s = w.step(&s, &ExpertAction::command(GripperCommand::Open));
        assert!(!s.objects[1].held);
        assert_eq!(s.objects[1].pos.y, w.rest_y());
    }

    #[test]
    fn oversize_action_is_clamped() {
        let w = world();
        let s = w.sample_initial_state(3, &SceneSpec::default()).unwrap();
        let big = ExpertAction {
            delta: Vec2::new(30.0, 40.0),
            ..ExpertAction::HOLD
        };
        let next = w.step(&s, &big);
        let d = next.gripper.pos.dist(s.gripper.pos);
        assert!(d <= w.config.move_cap + 1e-9);
    }

    #[test]
    fn light_toggles_only_in_button_zone() {
        let w = world();
        let mut s = w.sample_initial_state(5, &SceneSpec::default()).unwrap();
        let before = s.light_on;
        s.gripper.pos = Vec2::new(w.layout.button.x, w.layout.button.y - 5.0);
        let away = w.step(&s, &ExpertAction::command(GripperCommand::Close));
        assert_eq!(away.light_on, before);
        s.gripper.pos = w.layout.button;
        let pressed = w.step(&s, &ExpertAction::command(GripperCommand::Close));
        assert_eq!(pressed.light_on, !before);
    }
}
