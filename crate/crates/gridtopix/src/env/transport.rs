//! Two-agent coupled item transport.
//!
//! Both agents vote on a direction each step; the item moves one cell only
//! when both pick the same MoveItem direction and the target cell is free.
//! Mismatched votes involving at least one MoveItem count as a coordination
//! failure for both agents. Success is the item reaching the goal cell
//! (auto-detected, no Stop action).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gridnav::GridMap;
use crate::tensor::Tensor;

pub const ACTIONS: usize = 5;
pub const MOVE_N: usize = 0;
pub const MOVE_S: usize = 1;
pub const MOVE_E: usize = 2;
pub const MOVE_W: usize = 3;
pub const PASS: usize = 4;

pub const CHANNELS: usize = 5;
pub const PIXELS: usize = 48;

pub fn direction_delta(action: usize) -> Option<(i32, i32)> {
    match action {
        MOVE_N => Some((0, -1)),
        MOVE_S => Some((0, 1)),
        MOVE_E => Some((1, 0)),
        MOVE_W => Some((-1, 0)),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportWorld {
    pub map: GridMap,
    pub item: (i32, i32),
    pub goal: (i32, i32),
    pub agents: [(i32, i32); 2],
    pub start_item: (i32, i32),
    /// Cells the item has occupied.
    pub visited: Vec<bool>,
    /// Minimum Manhattan distance from item to goal seen so far.
    pub min_manhattan: u32,
    pub floor_shade: f32,
}

pub fn manhattan(a: (i32, i32), b: (i32, i32)) -> u32 {
    ((a.0 - b.0).abs() + (a.1 - b.1).abs()) as u32
}

impl TransportWorld {
    pub fn distance(&self) -> u32 {
        manhattan(self.item, self.goal)
    }

    pub fn generate(size: usize, rng: &mut ChaCha8Rng) -> Option<TransportWorld> {
        let mut map = GridMap {
            w: size,
            h: size,
            walls: vec![false; size * size],
        };
        for i in 0..size {
            map.walls[i] = true;
            map.walls[(size - 1) * size + i] = true;
            map.walls[i * size] = true;
            map.walls[i * size + size - 1] = true;
        }
        for y in 1..size - 1 {
            for x in 1..size - 1 {
                if rng.gen_bool(0.10) {
                    map.walls[y * size + x] = true;
                }
            }
        }
        let free: Vec<(i32, i32)> = (0..(size * size) as i32)
            .map(|i| (i % size as i32, i / size as i32))
            .filter(|&(x, y)| !map.is_wall(x, y))
            .collect();
        if free.len() < 6 {
            return None;
        }
        let item = free[rng.gen_range(0..free.len())];
        let goal = free[rng.gen_range(0..free.len())];
        if item == goal || manhattan(item, goal) < 3 {
            return None;
        }
        // The item must be able to reach the goal through free cells.
        let dist = map.distance_field(goal);
        if dist[map.idx(item.0, item.1)] == super::gridnav::UNREACHABLE {
            return None;
        }
        let mut agents = [(0, 0); 2];
        for slot in agents.iter_mut() {
            *slot = loop {
                let c = free[rng.gen_range(0..free.len())];
                if c != item && c != goal {
                    break c;
                }
            };
        }
        if agents[0] == agents[1] {
            return None;
        }
        let mut visited = vec![false; size * size];
        visited[map.idx(item.0, item.1)] = true;
        let d0 = manhattan(item, goal);
        Some(TransportWorld {
            map,
            item,
            goal,
            agents,
            start_item: item,
            visited,
            min_manhattan: d0,
            floor_shade: 0.75 + 0.2 * rng.gen::<f32>(),
        })
    }
}

pub struct TransportStepOutcome {
    pub action_failed: bool,
    pub coordination_failed: bool,
    pub manhattan_min_before: u32,
    pub manhattan_after: u32,
    pub success: bool,
}

pub fn transport_step(world: &mut TransportWorld, a1: usize, a2: usize) -> TransportStepOutcome {
    let min_before = world.min_manhattan;
    let mut failed = false;
    let mut coord_failed = false;
    if a1 == a2 {
        if let Some((dx, dy)) = direction_delta(a1) {
            let target = (world.item.0 + dx, world.item.1 + dy);
            if world.map.is_wall(target.0, target.1) {
                failed = true;
            } else {
                world.item = target;
                let idx = world.map.idx(target.0, target.1);
                world.visited[idx] = true;
            }
        }
        // Pass/Pass is an ordinary no-op turn.
    } else if direction_delta(a1).is_some() || direction_delta(a2).is_some() {
        coord_failed = true;
    }
    let d = world.distance();
    world.min_manhattan = world.min_manhattan.min(d);
    TransportStepOutcome {
        action_failed: failed,
        coordination_failed: coord_failed,
        manhattan_min_before: min_before,
        manhattan_after: d,
        success: world.item == world.goal,
    }
}

/// 5xGxG allocentric tensor: walls, item, goal, visited trail, agents.
pub fn render_grid(world: &TransportWorld) -> Tensor<f32> {
    let g = world.map.w;
    let mut data = vec![0.0f32; CHANNELS * g * g];
    let plane = g * g;
    for i in 0..plane {
        if world.map.walls[i] {
            data[i] = 1.0;
        }
        if world.visited[i] {
            data[3 * plane + i] = 1.0;
        }
    }
    data[plane + world.map.idx(world.item.0, world.item.1)] = 1.0;
    data[2 * plane + world.map.idx(world.goal.0, world.goal.1)] = 1.0;
    for a in &world.agents {
        data[4 * plane + world.map.idx(a.0, a.1)] = 1.0;
    }
    Tensor::new(&[CHANNELS, g, g], data).unwrap()
}

fn paint_cell(img: &mut [f32], g: usize, cell: (i32, i32), color: [f32; 3], shrink: f32) {
    let scale = PIXELS as f32 / g as f32;
    let cx = (cell.0 as f32 + 0.5) * scale;
    let cy = (cell.1 as f32 + 0.5) * scale;
    let half = scale * 0.5 * shrink;
    let x0 = ((cx - half).floor().max(0.0)) as usize;
    let x1 = ((cx + half).ceil().min(PIXELS as f32)) as usize;
    let y0 = ((cy - half).floor().max(0.0)) as usize;
    let y1 = ((cy + half).ceil().min(PIXELS as f32)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            for (ch, &v) in color.iter().enumerate() {
                img[ch * PIXELS * PIXELS + y * PIXELS + x] = v;
            }
        }
    }
}

/// 3x48x48 top-down color render.
pub fn render_pixels(world: &TransportWorld) -> Tensor<f32> {
    let g = world.map.w;
    let f = world.floor_shade;
    let mut img = vec![0.0f32; 3 * PIXELS * PIXELS];
    for y in 0..PIXELS {
        for x in 0..PIXELS {
            let cell_x = (x as f32 / PIXELS as f32 * g as f32) as i32;
            let cell_y = (y as f32 / PIXELS as f32 * g as f32) as i32;
            let (r, gr, b) = if world.map.is_wall(cell_x, cell_y) {
                (0.20, 0.20, 0.25)
            } else if world.visited[world.map.idx(cell_x, cell_y)] {
                (f * 0.80, f * 0.80, f * 0.72)
            } else {
                (f * 0.92, f * 0.92, f * 0.85)
            };
            img[y * PIXELS + x] = r;
            img[PIXELS * PIXELS + y * PIXELS + x] = gr;
            img[2 * PIXELS * PIXELS + y * PIXELS + x] = b;
        }
    }
    paint_cell(&mut img, g, world.goal, [0.10, 0.80, 0.10], 0.95);
    paint_cell(&mut img, g, world.agents[0], [0.10, 0.20, 0.90], 0.55);
    paint_cell(&mut img, g, world.agents[1], [0.10, 0.60, 0.90], 0.55);
    paint_cell(&mut img, g, world.item, [0.90, 0.10, 0.10], 0.75);
    Tensor::new(&[3, PIXELS, PIXELS], img).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn world(seed: u64) -> TransportWorld {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            if let Some(w) = TransportWorld::generate(10, &mut rng) {
                return w;
            }
        }
    }

    #[test]
    fn generation_constraints_hold() {
        for seed in 0..50 {
            let w = world(seed);
            assert_ne!(w.item, w.goal);
            assert!(manhattan(w.item, w.goal) >= 3);
            assert!(!w.map.is_wall(w.item.0, w.item.1));
            assert!(!w.map.is_wall(w.agents[0].0, w.agents[0].1));
        }
    }

    #[test]
    fn mismatched_moves_are_coordination_failures() {
        let mut w = world(1);
        let item_before = w.item;
        let out = transport_step(&mut w, MOVE_N, MOVE_E);
        assert!(out.coordination_failed);
        assert_eq!(w.item, item_before);
    }

    #[test]
    fn pass_pass_is_not_a_coordination_failure() {
        let mut w = world(2);
        let out = transport_step(&mut w, PASS, PASS);
        assert!(!out.coordination_failed && !out.action_failed);
    }

    #[test]
    fn matched_move_shifts_item_one_cell() {
        for seed in 0..20 {
            let mut w = world(seed);
            for dir in [MOVE_N, MOVE_S, MOVE_E, MOVE_W] {
                let before = w.item;
                let d_before = w.distance();
                let out = transport_step(&mut w, dir, dir);
                if !out.action_failed {
                    assert_eq!(manhattan(before, w.item), 1);
                    let delta = w.distance() as i64 - d_before as i64;
                    assert!(delta.abs() == 1, "distance delta {delta}");
                    return;
                }
            }
        }
        panic!("no free move found in 20 worlds");
    }

    #[test]
    fn pixel_render_values_bounded() {
        let w = world(3);
        let img = render_pixels(&w);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
