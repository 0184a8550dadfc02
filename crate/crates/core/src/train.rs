//! Optimizer and the small shared pieces of every training loop: gradient
//! collection with freezing, fixed-order batch accumulation, curve logging.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Anything Adam can update: the base parameter set or a tuning state.
pub trait TensorBag<F: Scalar> {
    fn tensor_mut(&mut self, key: &str) -> &mut Mat<F>;
}

impl<F: Scalar> TensorBag<F> for crate::model::Parameters<F> {
    fn tensor_mut(&mut self, key: &str) -> &mut Mat<F> {
        self.get_mut(key)
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<F: Scalar> {
    pub cfg: AdamConfig,
    t: u64,
    m: IndexMap<String, Mat<F>>,
    v: IndexMap<String, Mat<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Adam<F> {
        Adam { cfg, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One update over exactly the tensors present in `grads`, in their
    /// insertion order. Keys missing from the bag are a caller bug.
    pub fn step(&mut self, bag: &mut impl TensorBag<F>, grads: &IndexMap<String, Mat<F>>) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = F::from_f64(self.cfg.lr);
        let eps = F::from_f64(self.cfg.eps);
        let fb1 = F::from_f64(b1);
        let fb2 = F::from_f64(b2);
        let one = F::one();
        let ibc1 = F::from_f64(1.0 / bc1);
        let ibc2 = F::from_f64(1.0 / bc2);

        for (key, g) in grads {
            let m = self
                .m
                .entry(key.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            let v = self
                .v
                .entry(key.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            let w = bag.tensor_mut(key);
            assert_eq!(w.dim(), g.dim(), "gradient shape mismatch for {}", key);
            for ((wv, gv), (mv, vv)) in
                w.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = fb1 * *mv + (one - fb1) * *gv;
                *vv = fb2 * *vv + (one - fb2) * *gv * *gv;
                let mhat = *mv * ibc1;
                let vhat = *vv * ibc2;
                *wv = *wv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Pull gradients for the named nodes out of a tape after backward().
/// Tensors failing the `trainable` filter are absent from the result
/// (frozen == no entry), as are tensors the loss never touched.
pub fn collect_grads<F: Scalar>(
    tape: &Tape<F>,
    nodes: &IndexMap<String, NodeId>,
    trainable: impl Fn(&str) -> bool,
) -> IndexMap<String, Mat<F>> {
    let mut out = IndexMap::new();
    for (key, &id) in nodes {
        if !trainable(key) {
            continue;
        }
        if let Some(g) = tape.grad(id) {
            out.insert(key.clone(), g.clone());
        }
    }
    out
}

/// Sums per-example gradients in arrival order, then divides by the count.
/// The fixed order keeps float accumulation deterministic.
pub struct GradAccum<F: Scalar> {
    sums: IndexMap<String, Mat<F>>,
    count: usize,
}

impl<F: Scalar> Default for GradAccum<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> GradAccum<F> {
    pub fn new() -> GradAccum<F> {
        GradAccum { sums: IndexMap::new(), count: 0 }
    }

    pub fn add(&mut self, grads: IndexMap<String, Mat<F>>) {
        self.count += 1;
        for (k, g) in grads {
            match self.sums.get_mut(&k) {
                Some(s) => *s += &g,
                None => {
                    self.sums.insert(k, g);
                }
            }
        }
    }

    pub fn mean(mut self) -> IndexMap<String, Mat<F>> {
        if self.count > 1 {
            let inv = F::from_f64(1.0 / self.count as f64);
            for (_, s) in self.sums.iter_mut() {
                s.mapv_inplace(|x| x * inv);
            }
        }
        self.sums
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Uniform batch indices (with replacement), consuming the rng in a fixed order.
pub fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    assert!(n > 0, "cannot sample from an empty set");
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Guard against divergence: a non-finite loss aborts the run with context.
pub fn check_finite(loss: f64, step: usize, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "{} loss became {} at step {}; lower the learning rate or check the data",
            what, loss, step
        )));
    }
    Ok(())
}

/// Step/loss curve as emitted next to every training manifest.
pub fn write_curve_csv(path: &std::path::Path, curve: &[(usize, f64)]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (s, l) in curve {
        writeln!(f, "{},{}", s, l)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    struct Bag<F: Scalar>(IndexMap<String, Mat<F>>);
    impl<F: Scalar> TensorBag<F> for Bag<F> {
        fn tensor_mut(&mut self, key: &str) -> &mut Mat<F> {
            self.0.get_mut(key).unwrap()
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // minimize (w - 3)^2 elementwise
        let mut bag = Bag::<f64>(IndexMap::new());
        bag.0.insert("w".into(), Mat::zeros((2, 2)));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let grads: IndexMap<String, Mat<f64>> = [(
                "w".to_string(),
                bag.0["w"].mapv(|w| 2.0 * (w - 3.0)),
            )]
            .into_iter()
            .collect();
            opt.step(&mut bag, &grads);
        }
        for &w in bag.0["w"].iter() {
            assert!((w - 3.0).abs() < 1e-3, "w = {}", w);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the very first update is lr * sign(g)
        let mut bag = Bag::<f64>(IndexMap::new());
        bag.0.insert("w".into(), Mat::zeros((1, 1)));
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        let grads: IndexMap<String, Mat<f64>> =
            [("w".to_string(), Mat::from_elem((1, 1), 5.0))].into_iter().collect();
        opt.step(&mut bag, &grads);
        let w = bag.0["w"][(0, 0)];
        assert!((w + 0.01).abs() < 1e-6, "w = {}", w);
    }

    #[test]
    fn grad_accum_means_in_fixed_order() {
        let mut acc = GradAccum::<f32>::new();
        for v in [1.0f32, 2.0, 6.0] {
            let g: IndexMap<String, Mat<f32>> =
                [("a".to_string(), Mat::from_elem((1, 1), v))].into_iter().collect();
            acc.add(g);
        }
        let m = acc.mean();
        assert_eq!(m["a"][(0, 0)], 3.0);
    }

    #[test]
    fn frozen_tensors_are_absent_from_collected_grads() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Mat::from_elem((1, 1), 2.0));
        let b = tape.leaf(Mat::from_elem((1, 1), 4.0));
        let s = tape.weighted_sum(&[(a, 1.0), (b, 1.0)]);
        tape.backward(s);
        let nodes: IndexMap<String, NodeId> =
            [("a".to_string(), a), ("b".to_string(), b)].into_iter().collect();
        let g = collect_grads(&tape, &nodes, |k| k == "a");
        assert!(g.contains_key("a"));
        assert!(!g.contains_key("b"), "frozen tensor must have no gradient entry");
    }

    #[test]
    fn batch_sampling_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_batch(&mut r1, 100, 16), sample_batch(&mut r2, 100, 16));
    }

    #[test]
    fn non_finite_loss_aborts() {
        assert!(check_finite(f64::NAN, 3, "unit").is_err());
        assert!(check_finite(1.0, 3, "unit").is_ok());
    }
}
