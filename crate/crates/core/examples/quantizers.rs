//! Fake quantization and binarization with their straight-through gradients.

use pokebnn::quant::{binarize, binarize_grad, FakeQuant};

fn main() {
    let xs = [-1.5, -0.6, -0.1, 0.0, 0.2, 0.7, 0.99, 1.2];
    for bits in [8, 4, 2] {
        let q = FakeQuant::new(bits, 1.0).unwrap();
        let fwd: Vec<String> = xs.iter().map(|&x| format!("{:.4}", q.forward(x))).collect();
        let grad: Vec<f64> = xs.iter().map(|&x| q.grad(x)).collect();
        println!("int{bits} B=1  step {:.5}", q.step());
        println!("  Q(x)  {}", fwd.join(" "));
        println!("  dQ/dx {grad:?}");
    }
    println!("sign(x)          {:?}", binarize(&xs));
    for bound in [1.0, 3.0] {
        let g: Vec<f64> = xs.iter().map(|&x| binarize_grad(x, bound)).collect();
        println!("sign grad, B={bound} {g:?}");
    }
}
