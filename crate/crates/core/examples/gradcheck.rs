//! Central finite differences against the tape's gradients for every op suite.

use pokebnn::nn::gradcheck::{run_suite, SUITES};

fn main() {
    for op in SUITES {
        let r = run_suite(op, 20, 0).expect("suite runs");
        println!("{:<20} {} instances  max rel err {:.2e}", r.op, r.instances, r.max_rel_err);
    }
}
