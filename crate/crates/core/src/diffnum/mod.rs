//! Dense f64 tensors with a recorded graph for reverse-mode gradients.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    /// Builds a small random expression over `x` chosen by `ops`.
    fn random_loss(g: &mut Graph, x: Var, ops: &[u8], w: &Tensor) -> Var {
        let mut h = x;
        for &op in ops {
            h = match op % 5 {
                0 => g.tanh(h).unwrap(),
                1 => {
                    let wc = g.constant(w.clone());
                    g.matmul(h, wc).unwrap()
                }
                2 => g.softmax(h).unwrap(),
                3 => g.softplus(h).unwrap(),
                _ => g.layer_norm(h, 1e-5).unwrap(),
            };
        }
        let sq = g.square(h).unwrap();
        g.sum(sq).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gradient_of_sum_is_sum_of_gradients(
            seed in 0u64..1000,
            ops_a in proptest::collection::vec(0u8..5, 1..5),
            ops_b in proptest::collection::vec(0u8..5, 1..5),
        ) {
            let mut rng = stream(seed, "linearity", 0);
            let x0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 4], 0.5, &mut rng);

            let grad_of = |ops: &[u8]| {
                let mut g = Graph::new();
                let x = g.param(x0.clone());
                let l = random_loss(&mut g, x, ops, &w);
                g.backward(l).unwrap().get_or_zeros(x, &x0)
            };
            let ga = grad_of(&ops_a);
            let gb = grad_of(&ops_b);

            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let la = random_loss(&mut g, x, &ops_a, &w);
            let lb = random_loss(&mut g, x, &ops_b, &w);
            let l = g.add(la, lb).unwrap();
            let gsum = g.backward(l).unwrap().get_or_zeros(x, &x0);
            for i in 0..x0.numel() {
                let want = ga.data()[i] + gb.data()[i];
                prop_assert!((gsum.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }
}
