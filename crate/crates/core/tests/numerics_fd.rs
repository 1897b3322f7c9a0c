//! Reverse-mode gradients of a random three-layer MLP against central
//! finite differences.

use mega_core::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

struct Net {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl Net {
    fn random(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        let shapes = vec![
            vec![input],
            vec![hidden, input],
            vec![hidden],
            vec![hidden, hidden],
            vec![hidden],
            vec![1, hidden],
            vec![1],
        ];
        let values = shapes
            .iter()
            .map(|s| {
                (0..s.iter().product::<usize>())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        Self { shapes, values }
    }

    /// Loss and, when asked, the gradient of every input tensor.
    fn eval(&self, label: f64, want_grad: bool) -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let v: Vec<_> = self
            .shapes
            .iter()
            .zip(&self.values)
            .map(|(s, d)| t.leaf(Tensor::new(s.clone(), d.clone()).unwrap()))
            .collect();
        let mut h = v[0];
        for layer in 0..3 {
            let (w, b) = (v[1 + 2 * layer], v[2 + 2 * layer]);
            let z = t.matvec(w, h).unwrap();
            h = t.add(z, b).unwrap();
            if layer < 2 {
                h = t.relu(h).unwrap();
            }
        }
        let loss = t.bce_with_logits(h, label).unwrap();
        let value = t.value(loss).data()[0];
        if !want_grad {
            return (value, Vec::new());
        }
        let g = t.backward(loss).unwrap();
        let grads = v
            .iter()
            .zip(&self.values)
            .map(|(&x, d)| g.get(x).map_or_else(|| vec![0.0; d.len()], <[f64]>::to_vec))
            .collect();
        (value, grads)
    }
}

#[test]
fn random_mlp_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::random(&mut rng, 5, 6);
        let label = (seed % 2) as f64;
        let (_, analytic) = net.eval(label, true);
        let mut worst: f64 = 0.0;
        for p in 0..net.values.len() {
            for i in 0..net.values[p].len() {
                let orig = net.values[p][i];
                net.values[p][i] = orig + STEP;
                let up = net.eval(label, false).0;
                net.values[p][i] = orig - STEP;
                let down = net.eval(label, false).0;
                net.values[p][i] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let a = analytic[p][i];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
        }
        assert!(worst <= 1e-4, "seed {seed}: max relative error {worst}");
    }
}
