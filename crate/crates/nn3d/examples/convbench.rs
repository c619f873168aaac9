use nn3d::*;
use rand::SeedableRng;
use std::time::Instant;
fn main() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    for &(ci, co, s) in &[(4usize, 4usize, 48usize), (12, 4, 48), (8, 8, 24), (16, 16, 12)] {
        let mut conv = Conv3d::new(ci, co, 3, false, &mut rng);
        let x = Tensor::full([2, ci, s, s, s], 0.5);
        for _ in 0..2 { let y = conv.forward(&x); conv.backward(&y); }
        let t = Instant::now();
        let y = conv.forward(&x);
        let tf = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let _g = conv.backward(&y);
        let tb = t.elapsed().as_secs_f64();
        let macs = (2 * ci * co * 27 * s * s * s) as f64;
        println!("{ci}->{co} @{s}: fwd {:.1} ms ({:.1} GMAC/s), bwd {:.1} ms ({:.1} GMAC/s)", tf * 1e3, macs / tf / 1e9, tb * 1e3, 2.0 * macs / tb / 1e9);
    }
}
