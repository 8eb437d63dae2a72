//! Checks tape gradients against central differences and fits a small
//! regression with AdamW.
//!
//! cargo run --example autodiff

use dualbranch::tensor::{grad_check, AdamW, Branch, Graph, OptimizerState, ParamTree, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualbranch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let err = grad_check(
        |g, x| {
            let w = g.constant(w.clone());
            let h = g.matmul(x, w)?;
            let h = g.gelu(h);
            let p = g.softmax(h, 1)?;
            let sq = g.square(p);
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    )?;
    println!("matmul-gelu-softmax relative gradient error {err:.2e}");

    // y = x·w_true + 0.5, learned from 64 points.
    let w_true = Tensor::randn(&[4, 1], 1.0, &mut rng);
    let xs = Tensor::randn(&[64, 4], 1.0, &mut rng);
    let ys: Vec<f64> = (0..64)
        .map(|i| xs.row(i).iter().zip(&w_true.data).map(|(a, b)| a * b).sum::<f64>() + 0.5)
        .collect();
    let mut params = ParamTree::new();
    params.insert("w", Branch::Generation, Tensor::zeros(&[4, 1]).with_grad())?;
    params.insert("b", Branch::Generation, Tensor::zeros(&[1]).with_grad())?;
    let opt = AdamW::default();
    let mut state = OptimizerState::new();
    for step in 0..=400 {
        params.zero_grad();
        let mut g = Graph::new();
        let x = g.constant(xs.clone());
        let w = g.param(&params, "w")?;
        let b = g.param(&params, "b")?;
        let pred = g.linear(x, w, Some(b))?;
        let y = g.constant(Tensor::new(vec![64, 1], ys.clone())?);
        let diff = g.sub(pred, y)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let grads = g.backward(loss)?;
        params.accumulate(&g, &grads)?;
        opt.step(&mut params, &mut state, 0.05)?;
        if step % 100 == 0 {
            println!("step {step:3} mse {:.6}", g.value(loss).item());
        }
    }
    println!("bias learned {:.4} (true 0.5)", params.get("b")?.data[0]);
    Ok(())
}
