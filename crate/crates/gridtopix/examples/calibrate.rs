// Throwaway calibration probe (removed before release).
use gridtopix::env::{self, gridnav, TaskKind, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for size in [9usize, 11, 13] {
        let cfg = WorldConfig { gridnav_size: size, ..Default::default() };
        let n = 20000;
        let mut succ_uniform = 0;
        let mut reach = 0; // random walk without Stop: touches goal vicinity?
        let mut d0_sum = 0u32;
        for i in 0..n {
            let mut st = env::generate_world(TaskKind::GridNav, i as u64, &cfg).unwrap();
            if let env::WorldState::GridNav(w) = &st.world { d0_sum += w.geodesic(); }
            // uniform policy incl Stop
            while !st.done {
                let a = rng.gen_range(0..4);
                env::step(&mut st, &[a]).unwrap();
            }
            if st.success { succ_uniform += 1; }
            // reach probe: random walk of moves/rotations only
            let mut st2 = env::generate_world(TaskKind::GridNav, i as u64, &cfg).unwrap();
            let mut touched = false;
            while !st2.done {
                if let env::WorldState::GridNav(w) = &st2.world {
                    if w.geodesic() <= 1 { touched = true; break; }
                }
                let a = rng.gen_range(0..3);
                env::step(&mut st2, &[a]).unwrap();
            }
            if touched { reach += 1; }
        }
        println!(
            "size {size:2}: mean_d0 {:.1} uniform_success {:.4} reach_no_stop {:.3}",
            d0_sum as f32 / n as f32,
            succ_uniform as f32 / n as f32,
            reach as f32 / n as f32
        );
    }
}
