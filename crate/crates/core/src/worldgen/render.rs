//! Point-sampled rasterizer.

use serde::{Deserialize, Serialize};

use super::sim::{finger_offset, GRIPPER_ABOVE, GRIPPER_BELOW};
use super::{Pov, Rect, Vec2, World, WorldState};
use crate::error::{Error, Result};

/// An RGB image stored channel-major: `data[c * h * w + i * w + j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn zeros(height: usize, width: usize) -> Self {
        Frame {
            height,
            width,
            data: vec![0; 3 * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> u8 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set_rgb(&mut self, i: usize, j: usize, rgb: [u8; 3]) {
        let plane = self.height * self.width;
        let at = i * self.width + j;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + at] = v;
        }
    }

    pub fn rgb(&self, i: usize, j: usize) -> [u8; 3] {
        [self.get(0, i, j), self.get(1, i, j), self.get(2, i, j)]
    }
}

const OUTSIDE: [u8; 3] = [0, 0, 0];
const WALL: [u8; 3] = [215, 215, 215];
const TABLE: [u8; 3] = [140, 100, 60];
const ZONE: [u8; 3] = [60, 170, 80];
const TRACK: [u8; 3] = [170, 170, 170];
const PANEL: [u8; 3] = [110, 110, 150];
const BUTTON: [u8; 3] = [90, 90, 90];
const LAMP_OFF: [u8; 3] = [50, 50, 50];
const LAMP_ON: [u8; 3] = [255, 220, 40];
const GRIPPER: [u8; 3] = [40, 40, 40];

fn darken(rgb: [u8; 3]) -> [u8; 3] {
    rgb.map(|v| (v as u16 * 45 / 100) as u8)
}

impl World {
    /// World-space window seen by a viewpoint.
    pub fn viewport(&self, state: &WorldState, pov: Pov) -> Rect {
        let (w, h) = (self.config.canvas_w, self.config.canvas_h);
        match pov {
            Pov::Exocentric => Rect {
                x0: 0.0,
                y0: 0.0,
                x1: w,
                y1: h,
            },
            Pov::Egocentric => {
                let c = state.gripper.pos;
                Rect {
                    x0: c.x - 0.25 * w,
                    y0: c.y - 0.25 * h,
                    x1: c.x + 0.25 * w,
                    y1: c.y + 0.25 * h,
                }
            }
        }
    }

    /// Pixel bounding box `(i0, j0, i1, j1)` (inclusive) whose centers fall in
    /// `rect` for the exocentric view.
    pub fn pixel_bbox(&self, rect: Rect, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let (cw, ch) = (self.config.canvas_w, self.config.canvas_h);
        let to_j = |x: f64| x / cw * width as f64 - 0.5;
        let to_i = |y: f64| (ch - y) / ch * height as f64 - 0.5;
        let j0 = to_j(rect.x0).ceil().max(0.0) as usize;
        let j1 = (to_j(rect.x1).floor() as usize).min(width - 1);
        let i0 = to_i(rect.y1).ceil().max(0.0) as usize;
        let i1 = (to_i(rect.y0).floor() as usize).min(height - 1);
        (i0, j0, i1, j1)
    }

    /// Rasterizes `state` from `pov` at `height x width` pixels by sampling
    /// the scene at each pixel center.
    pub fn render(&self, state: &WorldState, pov: Pov, height: usize, width: usize) -> Result<Frame> {
        if height < 16 || width < 16 {
            return Err(Error::Shape(format!(
                "frames must be at least 16x16, got {height}x{width}"
            )));
        }
        let view = self.viewport(state, pov);
        let mut frame = Frame::zeros(height, width);
        let sx = (view.x1 - view.x0) / width as f64;
        let sy = (view.y1 - view.y0) / height as f64;
        for i in 0..height {
            let y = view.y1 - (i as f64 + 0.5) * sy;
            for j in 0..width {
                let x = view.x0 + (j as f64 + 0.5) * sx;
                frame.set_rgb(i, j, self.shade(state, Vec2::new(x, y)));
            }
        }
        Ok(frame)
    }

    fn shade(&self, state: &WorldState, p: Vec2) -> [u8; 3] {
        let cfg = &self.config;
        let layout = &self.layout;
        if p.x < 0.0 || p.x > cfg.canvas_w || p.y < 0.0 || p.y > cfg.canvas_h {
            return OUTSIDE;
        }
        let mut color = WALL;
        if layout.slider_track.contains(p) {
            color = TRACK;
            let track = layout.slider_track;
            let mid = 0.5 * (track.x0 + track.x1);
            let panel = if state.slider_open {
                Rect { x0: mid, ..track }
            } else {
                Rect { x1: mid, ..track }
            };
            if panel.contains(p) {
                color = PANEL;
            }
        }
        let b = layout.button;
        if (p.x - b.x).abs() <= 2.0 && (p.y - b.y).abs() <= 2.0 {
            color = BUTTON;
        }
        if layout.lamp.contains(p) {
            color = if state.light_on { LAMP_ON } else { LAMP_OFF };
        }
        if p.y < cfg.table_top {
            color = TABLE;
            let zone = layout.place_zone;
            if p.x >= zone.x0 && p.x <= zone.x1 && p.y >= cfg.table_top - 2.0 {
                color = ZONE;
            }
        }

        let half = 0.5 * cfg.object_size;
        for o in state.objects.iter().filter(|o| !o.held).chain(state.objects.iter().filter(|o| o.held)) {
            let (dx, dy) = (p.x - o.pos.x, p.y - o.pos.y);
            if dx.abs() > half * 1.5 || dy.abs() > half * 1.5 {
                continue;
            }
            let (s, c) = (-o.angle).to_radians().sin_cos();
            let u = c * dx - s * dy;
            let v = s * dx + c * dy;
            if u.abs() <= half && v.abs() <= half {
                color = if u > 0.0 && v > 0.0 {
                    darken(o.color.rgb())
                } else {
                    o.color.rgb()
                };
            }
        }

        let g = state.gripper.pos;
        let fo = finger_offset(state.gripper.closed);
        let palm = p.y >= g.y + GRIPPER_BELOW
            && p.y <= g.y + GRIPPER_ABOVE
            && (p.x - g.x).abs() <= fo + 1.0;
        let finger = p.y >= g.y - GRIPPER_BELOW
            && p.y <= g.y + GRIPPER_BELOW
            && ((p.x - g.x - fo).abs() <= 1.0 || (p.x - g.x + fo).abs() <= 1.0);
        if palm || finger {
            color = GRIPPER;
        }
        color
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{Color, SceneSpec};

    #[test]
    fn rendering_is_deterministic() {
        let w = World::default();
        let s = w.sample_initial_state(1, &SceneSpec::default()).unwrap();
        for pov in [Pov::Exocentric, Pov::Egocentric] {
            assert_eq!(w.render(&s, pov, 32, 32).unwrap(), w.render(&s, pov, 32, 32).unwrap());
        }
    }

    #[test]
    fn too_small_is_rejected() {
        let w = World::default();
        let s = w.sample_initial_state(1, &SceneSpec::default()).unwrap();
        assert!(w.render(&s, Pov::Exocentric, 15, 32).is_err());
    }

    #[test]
    fn light_changes_only_indicator_pixels() {
        let w = World::default();
        for seed in 0..20 {
            let mut s = w.sample_initial_state(seed, &SceneSpec::default()).unwrap();
            for size in [16usize, 32, 48] {
                s.light_on = false;
                let off = w.render(&s, Pov::Exocentric, size, size).unwrap();
                s.light_on = true;
                let on = w.render(&s, Pov::Exocentric, size, size).unwrap();
                let (i0, j0, i1, j1) = w.pixel_bbox(w.layout.lamp, size, size);
                let mut changed = 0;
                for i in 0..size {
                    for j in 0..size {
                        if off.rgb(i, j) != on.rgb(i, j) {
                            changed += 1;
                            assert!((i0..=i1).contains(&i) && (j0..=j1).contains(&j));
                        }
                    }
                }
                assert!(changed > 0);
            }
        }
    }

    #[test]
    fn every_object_covers_a_pixel_at_minimum_size() {
        let w = World::default();
        for seed in 0..100 {
            let s = w.sample_initial_state(seed, &SceneSpec::default()).unwrap();
            let f = w.render(&s, Pov::Exocentric, 16, 16).unwrap();
            for o in &s.objects {
                let rgb = o.color.rgb();
                let dark = darken(rgb);
                let covered = (0..16)
                    .flat_map(|i| (0..16).map(move |j| (i, j)))
                    .any(|(i, j)| f.rgb(i, j) == rgb || f.rgb(i, j) == dark);
                assert!(covered, "seed {seed}: {:?} not visible", o.color);
            }
        }
    }

    #[test]
    fn object_colors_are_distinct() {
        let mut all: Vec<[u8; 3]> = Color::ALL.iter().map(|c| c.rgb()).collect();
        all.extend(Color::ALL.iter().map(|c| darken(c.rgb())));
        all.extend([WALL, TABLE, ZONE, TRACK, PANEL, BUTTON, LAMP_OFF, LAMP_ON, GRIPPER]);
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn egocentric_view_follows_gripper() {
        let w = World::default();
        let mut s = w.sample_initial_state(2, &SceneSpec::default()).unwrap();
        let a = w.render(&s, Pov::Egocentric, 32, 32).unwrap();
        s.gripper.pos.x += 8.0;
        let b = w.render(&s, Pov::Egocentric, 32, 32).unwrap();
        // The gripper stays at the center of its own view.
        assert_eq!(a.rgb(16, 16 + 5), b.rgb(16, 16 + 5));
        assert_ne!(a, b);
    }
}
