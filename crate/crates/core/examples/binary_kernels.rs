//! Packs a random ±1 activation and filter bank, runs the XNOR/popcount
//! convolution and compares it with the float convolution.

use pokebnn::graphir::Padding;
use pokebnn::kernels::{binary_conv2d, float_conv2d, pack_signs, BinaryFilters, ConvGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut signs = |n: usize| -> Vec<f64> { (0..n).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect() };
    let (h, w, c, f, k) = (8, 8, 96, 16, 3);
    let x = signs(h * w * c);
    let wt = signs(k * k * c * f);
    let geom = ConvGeometry::new(1, Padding::Same);

    let act = pack_signs(&x, &[h, w, c]).unwrap();
    let filters = BinaryFilters::pack(&wt, [k, k, c, f]).unwrap();
    let packed = binary_conv2d(&act, &filters, geom).unwrap();
    let oracle = float_conv2d(&x, [h, w, c], &wt, [k, k, c, f], geom).unwrap();

    let equal = packed.values.iter().zip(&oracle.values).all(|(&a, &b)| a as f64 == b);
    println!("output shape {:?}", packed.shape);
    println!("{} words per pixel for {c} channels", act.words_per_row());
    println!("first outputs: {:?}", &packed.values[..8]);
    println!("bit-exact with float oracle: {equal}");
    println!("oracle loop trips (MACs incl. padding): {}", oracle.loop_trips);
}
