//! Two-phase training of a small PokeBNN on a synthetic memorization set.
//!
//! `cargo run --release --example train_toy -- [steps]`

use pokebnn::train::ToyConfig;

fn main() {
    let mut cfg = ToyConfig::default();
    if let Some(steps) = std::env::args().nth(1) {
        cfg.train.total_steps = steps.parse().expect("steps must be an integer");
    }
    println!(
        "model {}x, {} groups; {} samples, {} classes; {} steps, phase switch at {}",
        cfg.model.multiplier,
        cfg.model.groups,
        cfg.data.samples,
        cfg.data.classes,
        cfg.train.total_steps,
        cfg.train.switch_step()
    );
    let (_, _, summary) = cfg.run(None).expect("training runs");
    let every = (cfg.train.total_steps / 10).max(1);
    for r in summary.records.iter().filter(|r| r.step % every == 0) {
        println!("step {:>5} phase {} loss {:.4} batch top1 {:.3}", r.step, r.phase, r.loss, r.top1);
    }
    println!("bounds frozen at {:?}", summary.freeze_steps);
    println!("final top1 {:.4}", summary.final_top1);
}
