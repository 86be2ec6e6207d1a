//! Ray-cast rendering of horizontal surfaces. Every scene element is a flat
//! horizontal face (disc tops, goal patches, the table square); each pixel
//! keeps the nearest hit along its ray, which is the painter's order for
//! flat layers. Disc side walls are not drawn. Pixels average a
//! `SUPERSAMPLE`² grid of rays, so edge pixels encode sub-pixel positions.
//!
//! The gripper hangs from a rigid arm that runs from its center past the
//! table's +y edge. The arm is purely visual and moves with the gripper, so
//! its pixels carry the gripper's flow.

use nalgebra::Vector3;

use super::sim::{WorldState, GRIPPER_HEIGHT, GRIPPER_RADIUS};
use crate::camera::{CameraPose, Intrinsics, MIN_DEPTH};
use crate::error::Result;

pub const FAR_DEPTH: f64 = 3.0;
pub const BACKGROUND_RGB: [f64; 3] = [0.1, 0.1, 0.1];
pub const TABLE_RGB: [f64; 3] = [0.8, 0.7, 0.55];
pub const GOAL_RGB: [f64; 3] = [0.2, 0.8, 0.2];
pub const GRIPPER_OPEN_RGB: [f64; 3] = [0.55, 0.55, 0.55];
pub const GRIPPER_CLOSED_RGB: [f64; 3] = [0.25, 0.25, 0.25];
pub const ARM_RGB: [f64; 3] = [0.4, 0.4, 0.5];
/// Wider than the 4-pixel keypoint spacing of the desk grid.
pub const ARM_HALF_WIDTH: f64 = 0.08;
pub const ARM_LENGTH: f64 = 1.5;
pub const SUPERSAMPLE: usize = 4;
/// Goal patches sit just above the table so they win the depth test.
const GOAL_LIFT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entity {
    Table,
    Goal(usize),
    Object(usize),
    Gripper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disc { radius: f64 },
    /// Axis-aligned square `[x0, x1] × [y0, y1]`.
    Rect { min: [f64; 2], max: [f64; 2] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub entity: Entity,
    /// Center of the face; the face lies in the plane `z = center.z`.
    pub center: [f64; 3],
    pub shape: Shape,
    pub rgb: [f64; 3],
}

impl Surface {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self.shape {
            Shape::Disc { radius } => (x - self.center[0]).powi(2) + (y - self.center[1]).powi(2) <= radius * radius,
            Shape::Rect { min, max } => x >= min[0] && x <= max[0] && y >= min[1] && y <= max[1],
        }
    }
}

pub fn surfaces(state: &WorldState) -> Vec<Surface> {
    let mut out = vec![Surface {
        entity: Entity::Table,
        center: [0.5, 0.5, 0.0],
        shape: Shape::Rect {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        },
        rgb: TABLE_RGB,
    }];
    for (i, g) in state.goals.iter().enumerate() {
        out.push(Surface {
            entity: Entity::Goal(i),
            center: [g.pos[0], g.pos[1], g.pos[2] + GOAL_LIFT],
            shape: Shape::Disc { radius: g.radius },
            rgb: GOAL_RGB,
        });
    }
    for (i, o) in state.objects.iter().enumerate() {
        out.push(Surface {
            entity: Entity::Object(i),
            center: [o.pos[0], o.pos[1], o.top()],
            shape: Shape::Disc { radius: o.radius },
            rgb: o.color.rgb(),
        });
    }
    let g = &state.gripper;
    out.push(Surface {
        entity: Entity::Gripper,
        center: [g.pos[0], g.pos[1], g.pos[2] + GRIPPER_HEIGHT],
        shape: Shape::Disc { radius: GRIPPER_RADIUS },
        rgb: if g.closed { GRIPPER_CLOSED_RGB } else { GRIPPER_OPEN_RGB },
    });
    out.push(Surface {
        entity: Entity::Gripper,
        center: [g.pos[0], g.pos[1] + ARM_LENGTH / 2.0, g.pos[2] + GRIPPER_HEIGHT - GOAL_LIFT],
        shape: Shape::Rect {
            min: [g.pos[0] - ARM_HALF_WIDTH, g.pos[1]],
            max: [g.pos[0] + ARM_HALF_WIDTH, g.pos[1] + ARM_LENGTH],
        },
        rgb: ARM_RGB,
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub surface: usize,
    pub depth: f64,
    pub point: Vector3<f64>,
}

/// Nearest surface along the ray through pixel position `(u, v)`.
/// Ties go to the later surface in the list.
pub fn cast(surfaces: &[Surface], camera: &CameraPose, u: f64, v: f64) -> Option<Hit> {
    let (o, d) = camera.ray(u, v);
    let mut best: Option<Hit> = None;
    for (i, s) in surfaces.iter().enumerate() {
        if d.z.abs() < 1e-15 {
            continue;
        }
        let t = (s.center[2] - o.z) / d.z;
        if t <= MIN_DEPTH {
            continue;
        }
        let p = o + d * t;
        if !s.contains(p.x, p.y) {
            continue;
        }
        if best.map_or(true, |b| t <= b.depth) {
            best = Some(Hit {
                surface: i,
                depth: t,
                point: p,
            });
        }
    }
    best
}

/// RGB `[3][H][W]` in `[0, 1]` and depth `[H][W]` in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
}

impl Frame {
    /// Four-channel observation: RGB then depth divided by the far plane.
    pub fn to_observation(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(4 * self.width * self.height);
        out.extend(self.rgb.iter().map(|&x| x as f32));
        out.extend(self.depth.iter().map(|&d| (d / FAR_DEPTH) as f32));
        out
    }

    pub fn pixel_rgb(&self, row: usize, col: usize) -> [f64; 3] {
        let n = self.width * self.height;
        let i = row * self.width + col;
        [self.rgb[i], self.rgb[n + i], self.rgb[2 * n + i]]
    }
}

pub fn render_surfaces(surfaces: &[Surface], camera: &CameraPose, width: usize, height: usize) -> Frame {
    let n = width * height;
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let s = SUPERSAMPLE as f64;
    let share = 1.0 / (s * s);
    // hit counts per surface, background last; uniform pixels stay exact
    let mut counts = vec![0usize; surfaces.len() + 1];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            counts.iter_mut().for_each(|k| *k = 0);
            let mut dsum = 0.0;
            for sr in 0..SUPERSAMPLE {
                for sc in 0..SUPERSAMPLE {
                    let (u, v) = (c as f64 + (sc as f64 + 0.5) / s, r as f64 + (sr as f64 + 0.5) / s);
                    match cast(surfaces, camera, u, v) {
                        Some(h) => {
                            counts[h.surface] += 1;
                            dsum += h.depth.min(FAR_DEPTH);
                        }
                        None => {
                            counts[surfaces.len()] += 1;
                            dsum += FAR_DEPTH;
                        }
                    }
                }
            }
            depth[i] = dsum * share;
            for (k, &count) in counts.iter().enumerate().filter(|(_, &n)| n > 0) {
                let color = surfaces.get(k).map_or(BACKGROUND_RGB, |s| s.rgb);
                for ch in 0..3 {
                    rgb[ch * n + i] += count as f64 * color[ch] * share;
                }
            }
        }
    }
    Frame {
        width,
        height,
        rgb,
        depth,
    }
}

pub fn render(state: &WorldState, camera: &CameraPose, width: usize, height: usize) -> Frame {
    render_surfaces(&surfaces(state), camera, width, height)
}

/// Top-down camera 1.5 above the table center. Image u follows world +x
/// and v follows world −y; the table spans roughly pixels 1..31.
pub fn default_camera(width: usize, height: usize) -> Result<CameraPose> {
    let f = 45.0 * width as f64 / 32.0;
    CameraPose::look_at(
        Vector3::new(0.5, 0.5, 1.5),
        Vector3::new(0.5, 0.5, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Intrinsics {
            fx: f,
            fy: f * height as f64 / width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::sim::{Color, Gripper, Object, WorldState};

    fn cam() -> CameraPose {
        default_camera(32, 32).unwrap()
    }

    fn disc(color: Color, pos: [f64; 3], radius: f64) -> Surface {
        Surface {
            entity: Entity::Object(0),
            center: pos,
            shape: Shape::Disc { radius },
            rgb: color.rgb(),
        }
    }

    #[test]
    fn empty_scene_is_uniform() {
        let f = render_surfaces(&[], &cam(), 32, 32);
        assert!(f.depth.iter().all(|&d| d == FAR_DEPTH));
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(f.pixel_rgb(r, c), BACKGROUND_RGB);
            }
        }
    }

    #[test]
    fn centered_disc_depth_at_principal_point() {
        // principal point (16, 16) is a pixel corner; sample the exact ray
        let s = [disc(Color::Red, [0.5, 0.5, 0.04], 0.07)];
        let h = cast(&s, &cam(), 16.0, 16.0).unwrap();
        assert!((h.depth - 1.46).abs() < 1e-12);
        let f = render_surfaces(&s, &cam(), 32, 32);
        assert!((f.depth[15 * 32 + 15] - 1.46).abs() < 1e-12);
        // a straddling edge pixel blends disc and table
        let edge = f.pixel_rgb(15, 13);
        assert!(edge != Color::Red.rgb() && edge != TABLE_RGB);
        assert_eq!(f.pixel_rgb(15, 15), Color::Red.rgb());
    }

    #[test]
    fn nearer_disc_wins() {
        let low = disc(Color::Blue, [0.5, 0.5, 0.04], 0.1);
        let high = disc(Color::Yellow, [0.52, 0.5, 0.08], 0.1);
        for order in [[low, high], [high, low]] {
            let f = render_surfaces(&order, &cam(), 32, 32);
            assert_eq!(f.pixel_rgb(15, 16), Color::Yellow.rgb());
            assert!((f.depth[15 * 32 + 16] - 1.42).abs() < 1e-12);
        }
    }

    #[test]
    fn world_state_renders_gripper_on_top() {
        let s = WorldState {
            gripper: Gripper {
                pos: [0.5, 0.5, 0.04],
                closed: false,
            },
            objects: vec![Object {
                id: 0,
                color: Color::Red,
                radius: 0.07,
                height: 0.04,
                pos: [0.5, 0.5, 0.02],
            }],
            goals: vec![],
            held: None,
            step: 0,
        };
        let surf = surfaces(&s);
        let h = cast(&surf, &cam(), 16.0, 16.0).unwrap();
        assert_eq!(surf[h.surface].entity, Entity::Gripper);
        assert_eq!(surf[h.surface].rgb, GRIPPER_OPEN_RGB);
        // the corner pixel mixes gripper and arm, never the red disc below
        let f = render(&s, &cam(), 32, 32);
        let [r, g, _] = f.pixel_rgb(15, 15);
        assert!((r - g).abs() < 1e-12);
        let obs = f.to_observation();
        assert_eq!(obs.len(), 4 * 32 * 32);
    }
}
