//! Column-per-ray first-person renderer for the navigation task.
//!
//! 64 rays over a 90 degree field of view, DDA grid traversal, wall column
//! height proportional to 1/perpendicular-distance, per-maze wall shading,
//! and the goal drawn as a distinct bright column when a ray crosses its
//! cell before hitting a wall.

use super::gridnav::{GridMap, Heading, NavWorld, PIXELS};
use crate::tensor::Tensor;

const CEILING: f32 = 0.05;
const FLOOR: f32 = 0.12;
const GOAL_INTENSITY: f32 = 1.0;
const MAX_DIST: f32 = 64.0;

fn heading_vec(h: Heading) -> (f32, f32) {
    match h {
        Heading::North => (0.0, -1.0),
        Heading::East => (1.0, 0.0),
        Heading::South => (0.0, 1.0),
        Heading::West => (-1.0, 0.0),
    }
}

/// Small deterministic per-cell shade variation so walls are not flat.
fn cell_jitter(x: i32, y: i32) -> f32 {
    let mut h = (x as u32).wrapping_mul(0x9E37_79B9) ^ (y as u32).wrapping_mul(0x85EB_CA6B);
    h ^= h >> 13;
    h = h.wrapping_mul(0xC2B2_AE35);
    h ^= h >> 16;
    ((h & 0xFFFF) as f32 / 65535.0 - 0.5) * 0.2
}

struct RayHit {
    /// Perpendicular distance to the wall (fisheye-corrected).
    dist: f32,
    wall: (i32, i32),
    /// True when the wall face runs north-south (x-side hit).
    x_side: bool,
    /// Distance at which the ray crossed the goal cell, if it did.
    goal_dist: Option<f32>,
}

fn cast(map: &GridMap, goal: (i32, i32), px: f32, py: f32, dx: f32, dy: f32) -> RayHit {
    let mut ix = px.floor() as i32;
    let mut iy = py.floor() as i32;
    let delta_x = if dx.abs() < 1e-9 { f32::MAX } else { 1.0 / dx.abs() };
    let delta_y = if dy.abs() < 1e-9 { f32::MAX } else { 1.0 / dy.abs() };
    let step_x = if dx < 0.0 { -1 } else { 1 };
    let step_y = if dy < 0.0 { -1 } else { 1 };
    let mut side_x = if dx < 0.0 {
        (px - ix as f32) * delta_x
    } else {
        (ix as f32 + 1.0 - px) * delta_x
    };
    let mut side_y = if dy < 0.0 {
        (py - iy as f32) * delta_y
    } else {
        (iy as f32 + 1.0 - py) * delta_y
    };
    let mut goal_dist = None;
    loop {
        let x_side;
        let travelled;
        if side_x < side_y {
            travelled = side_x;
            side_x += delta_x;
            ix += step_x;
            x_side = true;
        } else {
            travelled = side_y;
            side_y += delta_y;
            iy += step_y;
            x_side = false;
        }
        if map.is_wall(ix, iy) {
            return RayHit {
                dist: travelled.max(1e-4),
                wall: (ix, iy),
                x_side,
                goal_dist,
            };
        }
        if (ix, iy) == goal && goal_dist.is_none() {
            goal_dist = Some(travelled.max(1e-4));
        }
        if travelled > MAX_DIST {
            return RayHit {
                dist: MAX_DIST,
                wall: (ix, iy),
                x_side,
                goal_dist,
            };
        }
    }
}

/// Render the 1x64x64 grayscale first-person view.
pub fn render_first_person(world: &NavWorld) -> Tensor<f32> {
    let mut img = vec![0.0f32; PIXELS * PIXELS];
    for (i, v) in img.iter_mut().enumerate() {
        *v = if i / PIXELS < PIXELS / 2 { CEILING } else { FLOOR };
    }
    let (dirx, diry) = heading_vec(world.heading);
    // Camera plane perpendicular to the view direction; |plane| = tan(45 deg)
    // gives the 90 degree field of view.
    let (planex, planey) = (-diry, dirx);
    let px = world.agent.0 as f32 + 0.5;
    let py = world.agent.1 as f32 + 0.5;

    for col in 0..PIXELS {
        let cam = 2.0 * (col as f32 + 0.5) / PIXELS as f32 - 1.0;
        let rx = dirx + planex * cam;
        let ry = diry + planey * cam;
        let hit = cast(&world.map, world.goal, px, py, rx, ry);
        // Perpendicular distance (fisheye correction): the DDA measures in
        // units of |ray| = sqrt(1 + cam^2) while height wants the projection
        // onto the view axis.
        let perp = (hit.dist / (1.0 + cam * cam).sqrt()).max(1e-3);

        let wall_h = (PIXELS as f32 / perp).min(PIXELS as f32);
        let top = ((PIXELS as f32 - wall_h) / 2.0) as usize;
        let bottom = (PIXELS as f32 - top as f32) as usize;
        let mut shade = (world.wall_shade + cell_jitter(hit.wall.0, hit.wall.1))
            / (1.0 + 0.22 * perp);
        if hit.x_side {
            shade *= 0.8;
        }
        let shade = shade.clamp(0.0, 1.0);
        for row in top..bottom.min(PIXELS) {
            img[row * PIXELS + col] = shade;
        }

        if let Some(gd) = hit.goal_dist {
            let gperp = gd.max(1e-3);
            // The goal marker is a half-height bright pillar standing on the
            // floor, occluded by any nearer wall (DDA guarantees gd < dist).
            let gh = (PIXELS as f32 / gperp * 0.5).min(PIXELS as f32 * 0.5);
            let gmid = PIXELS / 2;
            let gbot = ((gmid as f32) + gh) as usize;
            for row in gmid..gbot.min(PIXELS) {
                img[row * PIXELS + col] = GOAL_INTENSITY;
            }
        }
    }
    Tensor::new(&[1, PIXELS, PIXELS], img).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::gridnav::NavWorld;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(seed: u64) -> NavWorld {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            if let Some(w) = NavWorld::generate(13, &mut rng) {
                return w;
            }
        }
    }

    #[test]
    fn values_in_unit_interval() {
        for seed in 0..10 {
            let img = render_first_person(&world(seed));
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn render_is_deterministic() {
        let w = world(4);
        let a = render_first_person(&w);
        let b = render_first_person(&w);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn facing_wall_one_cell_ahead_fills_center_columns() {
        let mut w = world(6);
        // Spin until a wall sits directly ahead.
        for _ in 0..4 {
            let (dx, dy) = w.heading.delta();
            if w.map.is_wall(w.agent.0 + dx, w.agent.1 + dy) {
                break;
            }
            w.heading = w.heading.left();
        }
        let (dx, dy) = w.heading.delta();
        assert!(w.map.is_wall(w.agent.0 + dx, w.agent.1 + dy), "no wall found around agent");
        let img = render_first_person(&w);
        // Wall at distance ~0.5: column height is capped, so the middle
        // column spans (nearly) the full image height.
        let mid_col = PIXELS / 2;
        let lit: usize = (0..PIXELS)
            .filter(|row| img.data()[row * PIXELS + mid_col] > FLOOR)
            .count();
        assert!(lit >= PIXELS - 2, "only {lit} rows covered");
    }
}
