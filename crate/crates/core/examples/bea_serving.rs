//! Bridge embedding approximation: the user phase produces `n` vectors, the
//! item phase produces bridge weights, and serving is a single small product
//! whose cost does not depend on the user sequence length.

use aif::bea::{bea_item_phase, bea_serve, bea_user_phase, full_cross_oracle, BridgeSet};
use aif::math::{count_macs, Activation, DenseMatrix, Layer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> aif::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, d_out, b) = (32, 16, 512);
    let f = vec![Layer::new(random(&mut rng, d_out, d), vec![0.0; d_out], Activation::Relu)?];
    let items = random(&mut rng, b, d);

    for n in [1, 2, 4, 8, 16] {
        let bridges = BridgeSet::new(random(&mut rng, n, d), 1)?;
        let weights = bea_item_phase(&bridges, &items)?;
        for m in [16, 64] {
            let u = random(&mut rng, m, d);
            let v = bea_user_phase(&bridges, &u, &f)?;
            let (approx, serve_macs) = count_macs(|| bea_serve(&weights, &v));
            let (exact, full_macs) = count_macs(|| full_cross_oracle(&u, &items, &f));
            let (approx, exact) = (approx?, exact?);
            let err = approx
                .data()
                .iter()
                .zip(exact.data())
                .map(|(a, e)| (a - e).abs())
                .fold(0.0f32, f32::max);
            println!("n={n:>2} m={m:>2}: serving {serve_macs:>7} MACs vs full cross {full_macs:>9}, max |diff| {err:.4}");
        }
    }
    Ok(())
}
