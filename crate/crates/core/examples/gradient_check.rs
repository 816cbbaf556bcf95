//! Reverse-mode gradients of a small attention expression against central
//! differences at 64-bit precision.

use avatar_core::numcore::{attend, SeededRng, Tape, Tensor};

fn main() -> anyhow::Result<()> {
    let mut rng = SeededRng::new(7);
    let x: Tensor<f64> = rng.normal_tensor(&[5, 8], 1.0);
    let w: Tensor<f64> = rng.normal_tensor(&[8, 8], 0.4);
    let f = |x: &Tensor<f64>| -> anyhow::Result<(f64, Tensor<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let wv = tape.input(w.clone())?;
        let h = tape.matmul(xv, wv)?;
        let h = tape.layer_norm(h)?;
        let a = attend(&mut tape, h, h, xv, 2)?;
        let s = tape.silu(a)?;
        let loss = tape.mean(s)?;
        let g = tape.backward(loss)?;
        Ok((tape.value(loss).data()[0], g.wrt(xv, &[5, 8])))
    };
    let (_, grad) = f(&x)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let numeric = (f(&up)?.0 - f(&down)?.0) / (2.0 * h);
        let a = grad.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
    }
    println!("{} inputs, worst relative error {worst:.2e}", x.numel());
    Ok(())
}
