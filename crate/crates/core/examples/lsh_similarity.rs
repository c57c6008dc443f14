//! Hash multi-modal embeddings into packed signatures, compare them with the
//! popcount table, and print the cost table and a short calibration curve.

use aif::lsh::{calibrate, complexity_report, lsh_hash, pack, similarity, HashPlane, PopcountLut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> aif::error::Result<()> {
    let plane = HashPlane::new(128, 64, 7)?;
    let lut = PopcountLut::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let near: Vec<f32> = base.iter().map(|x| x + rng.random_range(-0.2..0.2)).collect();
    let far: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();

    let sig = |v: &[f32]| pack(&lsh_hash(v, &plane)?);
    let (a, b, c) = (sig(&base)?, sig(&near)?, sig(&far)?);
    println!("signature bytes: {:?}", &a.bytes()[..4]);
    println!("similarity(base, near) = {:.3}", similarity(&a, &b, &lut)?);
    println!("similarity(base, far)  = {:.3}", similarity(&a, &c, &lut)?);

    println!("\nmultiply-adds for b=1024, L=4096, d_id=d_mm=256, d_lsh=32:");
    for row in complexity_report(1024, 4096, 256, 256, 32) {
        println!("  {:<30} {:>14}  -{:.2}%", row.method, row.multiply_adds, row.reduction_pct);
    }

    let r = calibrate(128, 64, 4000, 8, 3)?;
    println!("\ncalibration, 128 bits:");
    print!("{}", r.to_csv());
    println!("bucket error {:.4}, per-pair |dev| {:.4}", r.bucket_error, r.pair_mean_abs_dev);
    Ok(())
}
