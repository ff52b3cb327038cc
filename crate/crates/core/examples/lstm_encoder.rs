//! Runs the LSTM cell over a short row sequence, compares the first step
//! against a hand-written scalar version, then checks the unrolled gradient
//! against finite differences.

use amde::diffcore::{grad_check, Tape, Tensor};
use amde::encoder::ops::{lstm_encode, lstm_step};
use amde::seeding::derive_rng;
use rand::Rng;

const C: usize = 3;
const E: usize = 2;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn main() -> amde::Result<()> {
    let mut rng = derive_rng(7, &[]);
    let mut draw = |n: usize| {
        (0..n)
            .map(|_| rng.random_range(-0.8..0.8))
            .collect::<Vec<f64>>()
    };
    let weight = Tensor::new(vec![4 * E, C + E], draw(4 * E * (C + E)))?;
    let bias = Tensor::from_vec(draw(4 * E));
    let seq: Vec<Tensor> = (0..4)
        .map(|_| Tensor::new(vec![1, C], draw(C)))
        .collect::<Result<_, _>>()?;

    let mut tape = Tape::new();
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let s0 = tape.constant(seq[0].clone());
    let zero = tape.constant(Tensor::zeros(vec![1, E]));
    let (h, d) = lstm_step(&mut tape, s0, zero, zero, w, Some(b))?;

    // From a zero state only the input columns of W contribute.
    let pre = |row: usize| -> f64 {
        bias.data()[row]
            + (0..C)
                .map(|j| weight.data()[row * (C + E) + j] * seq[0].data()[j])
                .sum::<f64>()
    };
    for u in 0..E {
        let (i, o, g) = (
            sigmoid(pre(u)),
            sigmoid(pre(2 * E + u)),
            pre(3 * E + u).tanh(),
        );
        let d_ref = i * g;
        let h_ref = o * d_ref.tanh();
        println!(
            "unit {u}: h {:+.6} (scalar {:+.6})  d {:+.6} (scalar {:+.6})",
            tape.value(h).data()[u],
            h_ref,
            tape.value(d).data()[u],
            d_ref
        );
    }

    let steps = seq.clone();
    let err = grad_check(
        |t, flat| {
            let w = t.narrow(flat, 0, 0, weight.len())?;
            let w = t.reshape(w, &[4 * E, C + E])?;
            let b = t.narrow(flat, 0, weight.len(), bias.len())?;
            let xs = steps
                .iter()
                .map(|s| t.constant(s.clone()))
                .collect::<Vec<_>>();
            let h = lstm_encode(t, &xs, w, Some(b))?;
            let sq = t.hadamard(h, h)?;
            t.sum_all(sq)
        },
        &Tensor::from_vec(weight.data().iter().chain(bias.data()).copied().collect()),
        1e-5,
    )?;
    println!("4-step unrolled gradient, worst relative error {err:.2e}");
    Ok(())
}
