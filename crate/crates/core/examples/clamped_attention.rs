//! Logit-clamped attention rows next to an unclamped softmax.

use lel::lgca::{attention_scores, clamp_softmax};
use ndarray::{array, Array3};

fn main() -> lel::Result<()> {
    let s = array![[[5.0, -5.0], [0.3, 0.1]]];
    for c in [f64::INFINITY, 2.0, 0.5] {
        let a = clamp_softmax(&s, c);
        println!("c = {c:>4}: {:.4}", a.index_axis(ndarray::Axis(0), 0));
    }
    let eye = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| f64::from(u8::from(i == j)));
    let scores = attention_scores(&eye, &eye)?;
    println!(
        "identity queries and keys: scores {:.4}",
        scores.index_axis(ndarray::Axis(0), 0)
    );
    println!(
        "attention {:.4}",
        clamp_softmax(&scores, 1.0).index_axis(ndarray::Axis(0), 0)
    );
    Ok(())
}
