//! Reverse-mode gradients of a small softmax classifier checked against
//! central finite differences.

use mergeforge::autodiff::{Tape, Tensor};
use rand::Rng;

fn loss(w: &[f64], x: &[f64], labels: &[usize], with_grad: bool) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::matrix(3, 4, x.to_vec()).unwrap()).unwrap();
    let wv = tape.leaf(Tensor::matrix(4, 5, w.to_vec()).unwrap()).unwrap();
    let h = tape.matmul(xv, wv).unwrap();
    let h = tape.relu(h).unwrap();
    let lp = tape.log_softmax_rows(h).unwrap();
    let picked = tape.gather_rows(lp, &[0, 1, 2], labels).unwrap();
    let total = tape.sum(picked).unwrap();
    let nll = tape.multiply_scalar(total, -1.0).unwrap();
    let value = tape.value(nll).item().unwrap();
    if !with_grad {
        return (value, Vec::new());
    }
    let grads = tape.backward(nll).unwrap();
    (value, grads.get(wv).unwrap().data().to_vec())
}

fn main() {
    let mut rng = mergeforge::rng::substream(0, "example/gradcheck");
    let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = [0, 3, 4];
    let (value, grad) = loss(&w, &x, &labels, true);
    println!("loss {value:.6}");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus[i] += h;
        let mut minus = w.clone();
        minus[i] -= h;
        let fd = (loss(&plus, &x, &labels, false).0 - loss(&minus, &x, &labels, false).0) / (2.0 * h);
        let rel = (grad[i] - fd).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max(rel);
        println!("w[{i:2}] analytic {:+.8} numeric {:+.8}", grad[i], fd);
    }
    println!("max relative error {worst:.2e}");
}
