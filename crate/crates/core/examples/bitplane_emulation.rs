//! Builds an int4 x int2 matmul from AND-popcount products of bit planes and
//! reports how many binary MACs it took.

use pokebnn::graphir::DType;
use pokebnn::kernels::{bitplane_matmul, direct_matmul, IntTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, k, n) = (4, 100, 3);
    let a: Vec<i32> = (0..m * k).map(|_| rng.gen_range(0..16)).collect();
    let b: Vec<i32> = (0..k * n).map(|_| rng.gen_range(0..4)).collect();
    let a = IntTensor::unsigned(vec![m, k], a, DType::Int4).unwrap();
    let b = IntTensor::unsigned(vec![k, n], b, DType::Int2).unwrap();

    let emu = bitplane_matmul(&a, &b).unwrap();
    let direct = direct_matmul(&a, &b).unwrap();
    println!("emulated == direct: {}", emu.values == direct);
    println!(
        "{} binary MACs for {} integer MACs ({}x)",
        emu.binary_macs,
        emu.direct_macs,
        emu.binary_macs / emu.direct_macs
    );
}
