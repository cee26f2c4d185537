use std::time::Instant;

use mobinc::arch::mob_inc;
use mobinc::graph::FreezePolicy;
use mobinc::ops::{softmax_cross_entropy, softmax_cross_entropy_grad};
use mobinc::Tensor;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let mut g = mob_inc(1).unwrap();
    let x = Tensor::from_fn([n, 224, 224, 3], |i| ((i * 7919) % 255) as f32 / 127.5 - 1.0);
    let labels = Tensor::from_fn([n, 4], |i| if i % 4 == (i / 4) % 4 { 1.0 } else { 0.0 });
    let t = Instant::now();
    let _ = g.predict(&x).unwrap();
    println!("predict n={n}: {:?}", t.elapsed());
    for policy in [FreezePolicy::FreezeTrunkExceptLast(6), FreezePolicy::TrainAll] {
        g.apply_freeze(policy).unwrap();
        let t = Instant::now();
        let acts = g.forward_train(&x).unwrap();
        let f = t.elapsed();
        let (_, probs) = softmax_cross_entropy(acts.output(), &labels).unwrap();
        let grads = g.backward(&acts, &softmax_cross_entropy_grad(&probs, &labels).unwrap()).unwrap();
        println!("{policy}: forward {f:?} total {:?} ({} grads)", t.elapsed(), grads.len());
    }
}
