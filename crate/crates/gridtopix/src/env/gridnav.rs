//! Single-agent goal navigation in procedurally generated mazes.
//!
//! Actions: Forward, RotateLeft, RotateRight, Stop. Success requires the
//! explicit Stop action within one cell (geodesic) of the goal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const ACTIONS: usize = 4;
pub const FORWARD: usize = 0;
pub const ROTATE_LEFT: usize = 1;
pub const ROTATE_RIGHT: usize = 2;
pub const STOP: usize = 3;

/// Egocentric crop side length.
pub const CROP: usize = 15;
/// Pixel render side length.
pub const PIXELS: usize = 64;

pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub fn delta(self) -> (i32, i32) {
        // y grows southward (row index), x grows eastward (column index).
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    pub fn left(self) -> Heading {
        match self {
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
            Heading::East => Heading::North,
        }
    }

    pub fn right(self) -> Heading {
        self.left().left().left()
    }

    pub fn from_index(i: usize) -> Heading {
        match i % 4 {
            0 => Heading::North,
            1 => Heading::East,
            2 => Heading::South,
            _ => Heading::West,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMap {
    pub w: usize,
    pub h: usize,
    /// Row-major; true = wall.
    pub walls: Vec<bool>,
}

impl GridMap {
    pub fn is_wall(&self, x: i32, y: i32) -> bool {
        if x < 0 || y < 0 || x >= self.w as i32 || y >= self.h as i32 {
            return true;
        }
        self.walls[y as usize * self.w + x as usize]
    }

    pub fn idx(&self, x: i32, y: i32) -> usize {
        y as usize * self.w + x as usize
    }

    /// Breadth-first distance (in cells, 4-connected) from `to` to every
    /// free cell; walls and unreachable cells get `UNREACHABLE`.
    pub fn distance_field(&self, to: (i32, i32)) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.w * self.h];
        if self.is_wall(to.0, to.1) {
            return dist;
        }
        let mut queue = std::collections::VecDeque::new();
        dist[self.idx(to.0, to.1)] = 0;
        queue.push_back(to);
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[self.idx(x, y)];
            for (dx, dy) in [(0, -1), (1, 0), (0, 1), (-1, 0)] {
                let (nx, ny) = (x + dx, y + dy);
                if !self.is_wall(nx, ny) && dist[self.idx(nx, ny)] == UNREACHABLE {
                    dist[self.idx(nx, ny)] = d + 1;
                    queue.push_back((nx, ny));
                }
            }
        }
        dist
    }
}

/// Carve a maze with recursive backtracking over the odd-coordinate cell
/// lattice, then knock out a fraction of interior walls to open loops.
pub fn carve_maze(size: usize, rng: &mut ChaCha8Rng, loop_fraction: f64) -> GridMap {
    assert!(size >= 5 && size % 2 == 1, "maze size must be odd and >= 5");
    let mut map = GridMap {
        w: size,
        h: size,
        walls: vec![true; size * size],
    };
    let cells_per_side = (size - 1) / 2;
    let cell_xy = |c: usize| (2 * (c % cells_per_side) + 1, 2 * (c / cells_per_side) + 1);
    let mut visited = vec![false; cells_per_side * cells_per_side];
    let mut stack = vec![0usize];
    visited[0] = true;
    let (sx, sy) = cell_xy(0);
    map.walls[sy * size + sx] = false;
    while let Some(&cur) = stack.last() {
        let (cx, cy) = (cur % cells_per_side, cur / cells_per_side);
        let mut neighbors = Vec::with_capacity(4);
        for (dx, dy) in [(0i32, -1i32), (1, 0), (0, 1), (-1, 0)] {
            let (nx, ny) = (cx as i32 + dx, cy as i32 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < cells_per_side && (ny as usize) < cells_per_side {
                let n = ny as usize * cells_per_side + nx as usize;
                if !visited[n] {
                    neighbors.push(n);
                }
            }
        }
        if neighbors.is_empty() {
            stack.pop();
            continue;
        }
        let next = neighbors[rng.gen_range(0..neighbors.len())];
        visited[next] = true;
        let (ax, ay) = cell_xy(cur);
        let (bx, by) = cell_xy(next);
        map.walls[by * size + bx] = false;
        map.walls[((ay + by) / 2) * size + (ax + bx) / 2] = false;
        stack.push(next);
    }
    // Open loops: interior walls flanked by two free cells on opposite sides.
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            if !map.walls[y * size + x] {
                continue;
            }
            let horizontal_gap = !map.is_wall(x as i32 - 1, y as i32) && !map.is_wall(x as i32 + 1, y as i32);
            let vertical_gap = !map.is_wall(x as i32, y as i32 - 1) && !map.is_wall(x as i32, y as i32 + 1);
            if (horizontal_gap || vertical_gap) && rng.gen_bool(loop_fraction) {
                map.walls[y * size + x] = false;
            }
        }
    }
    map
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavWorld {
    pub map: GridMap,
    pub agent: (i32, i32),
    pub heading: Heading,
    pub start: (i32, i32),
    pub goal: (i32, i32),
    /// BFS distance-to-goal for every cell.
    pub dist_field: Vec<u32>,
    /// Per-maze wall shade base for the pixel render.
    pub wall_shade: f32,
    /// Cells traversed so far (successful Forward moves).
    pub cells_traversed: u32,
}

impl NavWorld {
    pub fn geodesic(&self) -> u32 {
        self.dist_field[self.map.idx(self.agent.0, self.agent.1)]
    }

    pub fn generate(size: usize, rng: &mut ChaCha8Rng) -> Option<NavWorld> {
        let map = carve_maze(size, rng, 0.4);
        let free: Vec<(i32, i32)> = (0..size as i32 * size as i32)
            .map(|i| (i % size as i32, i / size as i32))
            .filter(|&(x, y)| !map.is_wall(x, y))
            .collect();
        let start = free[rng.gen_range(0..free.len())];
        // Goals sit a bounded geodesic distance away: far enough that the
        // episode is never trivial, close enough that episodes stay solvable
        // inside the step horizon at every supported maze size.
        let from_start = map.distance_field(start);
        let d_max = ((2 * size) as u32 / 3).max(3);
        let candidates: Vec<(i32, i32)> = free
            .iter()
            .copied()
            .filter(|&(x, y)| {
                let d = from_start[map.idx(x, y)];
                d != UNREACHABLE && d >= 3 && d <= d_max
            })
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let goal = candidates[rng.gen_range(0..candidates.len())];
        let dist_field = map.distance_field(goal);
        let d0 = dist_field[map.idx(start.0, start.1)];
        if d0 == UNREACHABLE || d0 < 3 {
            return None;
        }
        let heading = Heading::from_index(rng.gen_range(0..4));
        let wall_shade = 0.55 + 0.35 * rng.gen::<f32>();
        Some(NavWorld {
            map,
            agent: start,
            heading,
            start,
            goal,
            dist_field,
            wall_shade,
            cells_traversed: 0,
        })
    }
}

pub struct NavStepOutcome {
    pub action_failed: bool,
    pub geodesic_before: u32,
    pub geodesic_after: u32,
    pub stopped: bool,
    pub success: bool,
}

pub fn nav_step(world: &mut NavWorld, action: usize) -> NavStepOutcome {
    let before = world.geodesic();
    let mut failed = false;
    let mut stopped = false;
    let mut success = false;
    match action {
        FORWARD => {
            let (dx, dy) = world.heading.delta();
            let (nx, ny) = (world.agent.0 + dx, world.agent.1 + dy);
            if world.map.is_wall(nx, ny) {
                failed = true;
            } else {
                world.agent = (nx, ny);
                world.cells_traversed += 1;
            }
        }
        ROTATE_LEFT => world.heading = world.heading.left(),
        ROTATE_RIGHT => world.heading = world.heading.right(),
        STOP => {
            stopped = true;
            success = world.geodesic() <= 1;
        }
        _ => unreachable!("gridnav action out of range"),
    }
    NavStepOutcome {
        action_failed: failed,
        geodesic_before: before,
        geodesic_after: world.geodesic(),
        stopped,
        success,
    }
}

/// World-frame offset of egocentric crop coordinates (forward, lateral).
fn ego_to_world(agent: (i32, i32), heading: Heading, fwd: i32, lat: i32) -> (i32, i32) {
    let (x, y) = agent;
    match heading {
        Heading::North => (x + lat, y - fwd),
        Heading::East => (x + fwd, y + lat),
        Heading::South => (x - lat, y + fwd),
        Heading::West => (x - fwd, y - lat),
    }
}

/// 2x15x15 egocentric crop (occupancy, goal mask); the agent sits at row 14,
/// column 7 facing toward row 0. Out-of-map cells read as walls.
pub fn render_crop(world: &NavWorld) -> Tensor<f32> {
    let mut data = vec![0.0f32; 2 * CROP * CROP];
    for r in 0..CROP {
        for c in 0..CROP {
            let fwd = (CROP - 1 - r) as i32;
            let lat = c as i32 - (CROP as i32 / 2);
            let (wx, wy) = ego_to_world(world.agent, world.heading, fwd, lat);
            if world.map.is_wall(wx, wy) {
                data[r * CROP + c] = 1.0;
            }
            if (wx, wy) == world.goal {
                data[CROP * CROP + r * CROP + c] = 1.0;
            }
        }
    }
    Tensor::new(&[2, CROP, CROP], data).unwrap()
}

/// Relative goal vector rotated into the agent frame, normalized by map side.
pub fn goal_compass(world: &NavWorld) -> [f32; 2] {
    let dx = (world.goal.0 - world.agent.0) as f32;
    let dy = (world.goal.1 - world.agent.1) as f32;
    let (fwd, lat) = match world.heading {
        Heading::North => (-dy, dx),
        Heading::East => (dx, dy),
        Heading::South => (dy, -dx),
        Heading::West => (-dx, -dy),
    };
    let scale = world.map.w.max(world.map.h) as f32;
    [fwd / scale, lat / scale]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn world(seed: u64) -> NavWorld {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            if let Some(w) = NavWorld::generate(13, &mut rng) {
                return w;
            }
        }
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let a = world(7);
        let b = world(7);
        assert_eq!(a.map.walls, b.map.walls);
        assert_eq!(a.agent, b.agent);
        assert_eq!(a.goal, b.goal);
    }

    #[test]
    fn goal_reachable_and_nontrivial() {
        for seed in 0..50 {
            let w = world(seed);
            assert!(w.geodesic() >= 3, "seed {seed}");
            assert_ne!(w.geodesic(), UNREACHABLE);
        }
    }

    #[test]
    fn forward_changes_geodesic_by_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..20 {
            let mut w = world(seed);
            for _ in 0..60 {
                let a = rng.gen_range(0..3); // skip Stop
                let out = nav_step(&mut w, a);
                let delta = out.geodesic_after as i64 - out.geodesic_before as i64;
                assert!(delta.abs() <= 1, "delta {delta}");
            }
        }
    }

    #[test]
    fn stop_adjacent_to_goal_succeeds() {
        let mut w = world(3);
        // Walk the agent along the BFS gradient to a distance-1 cell.
        while w.geodesic() > 1 {
            let (x, y) = w.agent;
            let d = w.geodesic();
            let next = [(0, -1), (1, 0), (0, 1), (-1, 0)]
                .into_iter()
                .map(|(dx, dy)| (x + dx, y + dy))
                .find(|&(nx, ny)| {
                    !w.map.is_wall(nx, ny) && w.dist_field[w.map.idx(nx, ny)] == d - 1
                })
                .unwrap();
            w.agent = next;
        }
        let out = nav_step(&mut w, STOP);
        assert!(out.stopped && out.success);
    }

    #[test]
    fn crop_has_agent_cell_at_bottom_center() {
        let w = world(11);
        let crop = render_crop(&w);
        // Agent stands on a free cell: occupancy at (14, 7) must be 0.
        assert_eq!(crop.data()[14 * CROP + 7], 0.0);
    }

    #[test]
    fn crop_is_binary() {
        let w = world(12);
        let crop = render_crop(&w);
        assert!(crop.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn compass_rotates_with_agent() {
        let mut w = world(5);
        w.heading = Heading::North;
        let [f_n, l_n] = goal_compass(&w);
        w.heading = Heading::East;
        let [f_e, l_e] = goal_compass(&w);
        // Rotating the agent left->right swaps components: facing east, the
        // northward offset becomes lateral.
        assert!((f_e - l_n).abs() < 1e-6);
        assert!((l_e + f_n).abs() < 1e-6);
    }
}
