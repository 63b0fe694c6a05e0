//! Builds a small graph, runs the backward pass and reads gradients.
//!
//! `cargo run --example autodiff -p pivot-align`

use pivot_align::tensor::{Graph, Tensor};

fn main() -> pivot_align::Result<()> {
    let mut g = Graph::new();
    let w = g.param(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]])?);
    let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![3.0]])?);

    // loss = sum(log_softmax(W x)) over the two outputs.
    let h = g.matmul(w, x)?;
    let h = g.reshape(h, [1, 2])?;
    let lp = g.log_softmax(h, 1)?;
    let loss = g.sum(lp);
    g.backward(loss)?;

    println!("W x         = {:?}", g.value(h).data());
    println!("log-softmax = {:?}", g.value(lp).data());
    println!("loss        = {:.6}", g.value(loss).item());
    println!("dloss/dW    = {:?}", g.grad(w).expect("W is a parameter"));
    Ok(())
}
