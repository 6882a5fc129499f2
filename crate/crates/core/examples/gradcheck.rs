//! Reverse-mode gradients of a small network checked against central
//! differences, plus a custom op registered with its own backward rule.

use disploc::autodiff::{Tape, Tensor, Var};
use disploc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// `sum(softplus(tanh(x W1) W2))`.
fn network(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.tanh(h)?;
    let o = tape.matmul(h, w2)?;
    let o = tape.softplus(o)?;
    tape.sum(o)
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [
        random(&[4, 3], &mut rng),
        random(&[3, 5], &mut rng),
        random(&[5, 2], &mut rng),
    ];

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = network(&mut tape, vars[0], vars[1], vars[2])?;
    let grads = tape.backward(out)?;
    println!("loss {:.6}", tape.value(out).item()?);

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = network(&mut t, v[0], v[1], v[2])?;
        t.value(o).item()
    };
    let h = 1e-6;
    for (i, name) in ["x", "w1", "w2"].iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[i]);
        let mut worst: f64 = 0.0;
        for j in 0..inputs[i].len() {
            let mut up = inputs.to_vec();
            up[i].data_mut()[j] += h;
            let mut down = inputs.to_vec();
            down[i].data_mut()[j] -= h;
            let numeric = (eval(&up)? - eval(&down)?) / (2.0 * h);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        println!(
            "d loss / d {name}: {} entries, max rel err {worst:.2e}",
            inputs[i].len()
        );
    }

    // a custom elementwise cube with its hand-written derivative
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0])?);
    let xv = tape.value(x).clone();
    let cubed = xv.map(|v| v * v * v);
    let y = tape.custom(
        &[x],
        cubed,
        Box::new(move |g: &Tensor| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(g, v)| 3.0 * v * v * g)
                .collect();
            vec![Tensor::vector(d)]
        }),
    )?;
    let s = tape.sum(y)?;
    let g = tape.backward(s)?;
    println!(
        "d sum(x^3) / dx at (-1, 0.5, 2) = {:?}",
        g.wrt(&tape, x).data()
    );
    Ok(())
}
