//! Band energies, adaptive channel and band weights, and the rescaled weight
//! norms of a freshly initialized band-energy module.

use lel::data::DEFAULT_BANDS;
use lel::lgcbe::{adaptive_weights, lgcbe_forward, rescaled_weight_norms, Lgcbe};
use lel::params::ParamStore;
use ndarray::Array3;
use rand::SeedableRng;

fn main() -> lel::Result<()> {
    let (c, t, fs) = (3, 512, 200.0);
    // channel k carries a cosine at 10 Hz, 20 Hz and 40 Hz respectively
    let x = Array3::from_shape_fn((1, c, t), |(_, ch, i)| {
        let f = [10.0, 20.0, 40.0][ch];
        (std::f64::consts::TAU * f * i as f64 / fs).cos()
    });
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let module = Lgcbe::new(&mut store, "lgcbe", &DEFAULT_BANDS, c, t, fs, 1.0, 1.0, &mut rng)?;
    let out = lgcbe_forward(&x, &module, &store)?;
    for ch in 0..c {
        let row: Vec<String> = (0..DEFAULT_BANDS.len())
            .map(|b| format!("{:9.2}", out.energy[[0, ch, b]]))
            .collect();
        println!("channel {ch} energy {}", row.join(" "));
    }
    let (wc, ss) = adaptive_weights(&out.energy, &module, &store)?;
    println!("channel weights {:.4}", wc.row(0));
    println!("band weights    {:.4}", ss.row(0));
    for (a, b) in rescaled_weight_norms(&wc, &ss, module.l_lip, module.eps) {
        println!("rescaled norms  {a:.6} {b:.6} (bound {})", module.l_lip);
    }
    println!("output shape {:?}", out.out.shape());
    Ok(())
}
