//! Elementwise adds and multiplies of PokeBNN-1.0x and their ACE under each fusion policy.

use pokebnn::cost::{count_elementwise, elementwise_ace, render_elementwise, FusionPolicy};
use pokebnn::graphir::builtin;

fn main() {
    let g = builtin("pokebnn-1.0x").expect("builtin");
    let count = count_elementwise(&g).expect("supported graph");
    print!("{}", render_elementwise(&count));
    println!();
    for policy in [FusionPolicy::FixedPointFused, FusionPolicy::FixedPointUnfused, FusionPolicy::Bf16Unfused] {
        let ace = elementwise_ace(&count, policy);
        println!("{policy:?}: elementwise ACE {:.2}e9", ace as f64 / 1e9);
    }
}
