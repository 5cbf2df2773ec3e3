//! Particle predator-prey in a bounded arena.
//!
//! A team of predators (learned) chases faster scripted prey. Episodes run
//! the full horizon; tagging (contact) earns reward but does not terminate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const ACTIONS: usize = 5;
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const NOOP: usize = 4;

pub const PIXELS: usize = 48;

pub const PREDATOR_RADIUS: f32 = 0.075;
pub const PREY_RADIUS: f32 = 0.05;
pub const LANDMARK_RADIUS: f32 = 0.15;
pub const PREDATOR_ACCEL: f32 = 3.0;
pub const PREY_ACCEL: f32 = 4.0;
pub const PREDATOR_MAX_SPEED: f32 = 1.0;
/// Prey outrun predators by 30%.
pub const PREY_MAX_SPEED: f32 = 1.3;
pub const DT: f32 = 0.1;
pub const DAMPING: f32 = 0.25;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Body {
    pub x: f32,
    pub y: f32,
    pub vx: f32,
    pub vy: f32,
}

impl Body {
    fn dist(&self, other: &Body) -> f32 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpWorld {
    pub predators: Vec<Body>,
    pub prey: Vec<Body>,
    pub landmarks: Vec<(f32, f32)>,
    pub background: f32,
    /// Any tag so far this episode.
    pub tagged: bool,
}

impl PpWorld {
    pub fn generate(n_predators: usize, rng: &mut ChaCha8Rng) -> PpWorld {
        let n_prey = (n_predators / 3).max(1);
        let spawn = |rng: &mut ChaCha8Rng| Body {
            x: rng.gen_range(-0.9..0.9),
            y: rng.gen_range(-0.9..0.9),
            vx: 0.0,
            vy: 0.0,
        };
        let predators: Vec<Body> = (0..n_predators).map(|_| spawn(rng)).collect();
        let prey: Vec<Body> = (0..n_prey).map(|_| spawn(rng)).collect();
        let landmarks: Vec<(f32, f32)> = (0..2)
            .map(|_| (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)))
            .collect();
        PpWorld {
            predators,
            prey,
            landmarks,
            background: 0.08 + 0.07 * rng.gen::<f32>(),
            tagged: false,
        }
    }
}

fn integrate(b: &mut Body, ax: f32, ay: f32, max_speed: f32) {
    b.vx = b.vx * (1.0 - DAMPING) + ax * DT;
    b.vy = b.vy * (1.0 - DAMPING) + ay * DT;
    let speed = (b.vx * b.vx + b.vy * b.vy).sqrt();
    if speed > max_speed {
        b.vx *= max_speed / speed;
        b.vy *= max_speed / speed;
    }
    b.x += b.vx * DT;
    b.y += b.vy * DT;
    // Arena walls: clamp position, reflect velocity.
    if b.x < -1.0 {
        b.x = -1.0;
        b.vx = -b.vx;
    }
    if b.x > 1.0 {
        b.x = 1.0;
        b.vx = -b.vx;
    }
    if b.y < -1.0 {
        b.y = -1.0;
        b.vy = -b.vy;
    }
    if b.y > 1.0 {
        b.y = 1.0;
        b.vy = -b.vy;
    }
}

/// Scripted prey acceleration: potential-field repulsion from every
/// predator (inverse-square weighting, so the nearest dominates) plus a
/// perpendicular steer-away term near landmarks.
pub fn prey_policy(world: &PpWorld, prey_index: usize) -> (f32, f32) {
    let prey = &world.prey[prey_index];
    let mut fx = 0.0f32;
    let mut fy = 0.0f32;
    for p in &world.predators {
        let dx = prey.x - p.x;
        let dy = prey.y - p.y;
        let d2 = (dx * dx + dy * dy).max(1e-6);
        let d = d2.sqrt();
        fx += dx / (d * d2);
        fy += dy / (d * d2);
    }
    let norm = (fx * fx + fy * fy).sqrt();
    let (mut ax, mut ay) = if norm > 1e-9 {
        (fx / norm, fy / norm)
    } else {
        (1.0, 0.0)
    };
    for &(lx, ly) in &world.landmarks {
        let tx = lx - prey.x;
        let ty = ly - prey.y;
        let d = (tx * tx + ty * ty).sqrt();
        let reach = LANDMARK_RADIUS * 1.5;
        if d < reach {
            // Perpendicular of the flee direction, signed away from the landmark.
            let (px, py) = (-ay, ax);
            let side = if px * tx + py * ty > 0.0 { -1.0 } else { 1.0 };
            let w = (reach - d) / reach;
            ax += px * side * w;
            ay += py * side * w;
        }
    }
    let n = (ax * ax + ay * ay).sqrt().max(1e-9);
    (ax / n * PREY_ACCEL, ay / n * PREY_ACCEL)
}

pub struct PpStepOutcome {
    /// Per-predator contact events this step.
    pub tag_events: Vec<bool>,
    /// Mean over predators of distance to their nearest prey.
    pub mean_prey_distance: f32,
}

pub fn pp_step(world: &mut PpWorld, actions: &[usize]) -> PpStepOutcome {
    debug_assert_eq!(actions.len(), world.predators.len());
    // Prey commands are computed against the pre-step state.
    let prey_cmds: Vec<(f32, f32)> = (0..world.prey.len())
        .map(|i| prey_policy(world, i))
        .collect();
    for (p, &a) in world.predators.iter_mut().zip(actions) {
        let (ax, ay) = match a {
            UP => (0.0, 1.0),
            DOWN => (0.0, -1.0),
            LEFT => (-1.0, 0.0),
            RIGHT => (1.0, 0.0),
            _ => (0.0, 0.0),
        };
        integrate(p, ax * PREDATOR_ACCEL, ay * PREDATOR_ACCEL, PREDATOR_MAX_SPEED);
    }
    for (prey, (ax, ay)) in world.prey.iter_mut().zip(prey_cmds) {
        integrate(prey, ax, ay, PREY_MAX_SPEED);
    }
    let contact = PREDATOR_RADIUS + PREY_RADIUS;
    let mut tag_events = vec![false; world.predators.len()];
    let mut dist_sum = 0.0f32;
    for (i, p) in world.predators.iter().enumerate() {
        let nearest = world
            .prey
            .iter()
            .map(|q| p.dist(q))
            .fold(f32::MAX, f32::min);
        dist_sum += nearest;
        if nearest < contact {
            tag_events[i] = true;
            world.tagged = true;
        }
    }
    PpStepOutcome {
        tag_events,
        mean_prey_distance: dist_sum / world.predators.len() as f32,
    }
}

/// Per-predator 1D observations, concatenated in predator order: own
/// position and velocity, relative landmark positions, relative fellow
/// predators, relative prey positions and velocities.
pub fn render_vector(world: &PpWorld) -> Tensor<f32> {
    let mut data = Vec::new();
    for (i, p) in world.predators.iter().enumerate() {
        data.extend_from_slice(&[p.x, p.y, p.vx, p.vy]);
        for &(lx, ly) in &world.landmarks {
            data.extend_from_slice(&[lx - p.x, ly - p.y]);
        }
        for (j, q) in world.predators.iter().enumerate() {
            if j != i {
                data.extend_from_slice(&[q.x - p.x, q.y - p.y]);
            }
        }
        for q in &world.prey {
            data.extend_from_slice(&[q.x - p.x, q.y - p.y, q.vx, q.vy]);
        }
    }
    Tensor::from_vec(data)
}

pub fn vector_obs_len(n_predators: usize) -> usize {
    let n_prey = (n_predators / 3).max(1);
    n_predators * (4 + 2 * 2 + 2 * (n_predators - 1) + 4 * n_prey)
}

fn paint_disk(img: &mut [f32], cx: f32, cy: f32, radius: f32, color: [f32; 3]) {
    let to_px = |v: f32| (v + 1.0) * 0.5 * PIXELS as f32;
    let px = to_px(cx);
    // +y points up in the arena, down in image rows.
    let py = PIXELS as f32 - to_px(cy);
    let r = (radius * 0.5 * PIXELS as f32).max(1.4);
    let x0 = (px - r).floor().max(0.0) as usize;
    let x1 = ((px + r).ceil() as usize).min(PIXELS);
    let y0 = (py - r).floor().max(0.0) as usize;
    let y1 = ((py + r).ceil() as usize).min(PIXELS);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f32 + 0.5 - px;
            let dy = y as f32 + 0.5 - py;
            if dx * dx + dy * dy <= r * r {
                for (ch, &v) in color.iter().enumerate() {
                    img[ch * PIXELS * PIXELS + y * PIXELS + x] = v;
                }
            }
        }
    }
}

/// 3x48x48 top-down color render. Predators carry distinct colors so agent
/// identity is recoverable from pixels.
pub fn render_pixels(world: &PpWorld) -> Tensor<f32> {
    let mut img = vec![world.background; 3 * PIXELS * PIXELS];
    for &(lx, ly) in &world.landmarks {
        paint_disk(&mut img, lx, ly, LANDMARK_RADIUS * 2.0, [0.35, 0.35, 0.38]);
    }
    let colors = [
        [0.95, 0.15, 0.15],
        [0.95, 0.55, 0.10],
        [0.85, 0.10, 0.60],
        [0.60, 0.25, 0.95],
        [0.95, 0.85, 0.15],
        [0.55, 0.55, 0.95],
    ];
    for (i, p) in world.predators.iter().enumerate() {
        paint_disk(&mut img, p.x, p.y, PREDATOR_RADIUS * 2.0, colors[i % colors.len()]);
    }
    for q in &world.prey {
        paint_disk(&mut img, q.x, q.y, PREY_RADIUS * 2.0, [0.10, 0.90, 0.20]);
    }
    Tensor::new(&[3, PIXELS, PIXELS], img).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn prey_flees_due_north_from_southern_predator() {
        let world = PpWorld {
            predators: vec![Body { x: 0.0, y: -0.5, vx: 0.0, vy: 0.0 }],
            prey: vec![Body { x: 0.0, y: 0.0, vx: 0.0, vy: 0.0 }],
            landmarks: vec![],
            background: 0.1,
            tagged: false,
        };
        let (ax, ay) = prey_policy(&world, 0);
        assert!(ax.abs() < 1e-6);
        assert!(ay > 0.0);
    }

    #[test]
    fn symmetric_predators_cancel_lateral_component() {
        let world = PpWorld {
            predators: vec![
                Body { x: -0.4, y: 0.3, vx: 0.0, vy: 0.0 },
                Body { x: -0.4, y: -0.3, vx: 0.0, vy: 0.0 },
            ],
            prey: vec![Body { x: 0.0, y: 0.0, vx: 0.0, vy: 0.0 }],
            landmarks: vec![],
            background: 0.1,
            tagged: false,
        };
        let (ax, ay) = prey_policy(&world, 0);
        assert!(ay.abs() < 1e-5, "y component {ay}");
        assert!(ax > 0.0);
    }

    #[test]
    fn soak_test_bodies_stay_in_arena() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut world = PpWorld::generate(3, &mut rng);
        for _ in 0..10_000 {
            let actions: Vec<usize> = (0..3).map(|_| rng.gen_range(0..ACTIONS)).collect();
            pp_step(&mut world, &actions);
            for b in world.predators.iter().chain(&world.prey) {
                assert!(b.x >= -1.0 && b.x <= 1.0 && b.y >= -1.0 && b.y <= 1.0);
            }
        }
    }

    #[test]
    fn observation_length_matches_helper() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let world = PpWorld::generate(3, &mut rng);
        assert_eq!(render_vector(&world).numel(), vector_obs_len(3));
        let world6 = PpWorld::generate(6, &mut rng);
        assert_eq!(render_vector(&world6).numel(), vector_obs_len(6));
    }

    #[test]
    fn pixel_render_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let world = PpWorld::generate(3, &mut rng);
        let img = render_pixels(&world);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
