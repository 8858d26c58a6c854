use rand_chacha::ChaCha8Rng;

use super::Linear;
use crate::autograd::{AttnGroup, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Multi-headed scaled dot-product self-attention with a residual path:
/// each row's output is its input plus a linear fusion of all heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub fuse: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Shape(format!(
                "{name}: {heads} heads do not divide d_model {d_model}"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d_model, d_model, true),
            key: Linear::new(store, rng, &format!("{name}.key"), d_model, d_model, true),
            value: Linear::new(store, rng, &format!("{name}.value"), d_model, d_model, true),
            fuse: Linear::new(store, rng, &format!("{name}.fuse"), d_model, d_model, true),
            heads,
            d_model,
        })
    }

    /// Returns `(output, attention node)`; the attention node exposes the
    /// softmax weights through [`Tape::attention_record`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        groups: Vec<AttnGroup>,
    ) -> (Var, Var) {
        let q = self.query.forward(tape, store, x);
        let k = self.key.forward(tape, store, x);
        let v = self.value.forward(tape, store, x);
        let attn = tape.attention(q, k, v, groups, self.heads, None);
        let fused = self.fuse.forward(tape, store, attn);
        (tape.add(x, fused), attn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn setup(d: usize, h: usize) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MultiHeadAttention::new(&mut store, &mut rng, "mha", d, h).unwrap();
        (store, m)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(MultiHeadAttention::new(&mut store, &mut rng, "x", 10, 3).is_err());
    }

    #[test]
    fn single_element_is_input_plus_fused_value() {
        let (store, m) = setup(8, 2);
        let x0 = Tensor::row_vector((0..8).map(|i| i as f64 * 0.1).collect());
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let (out, attn) = m.forward(&mut tape, &store, x, vec![AttnGroup::square(0, 1)]);
        assert_eq!(tape.attention_record(attn).unwrap().weights(0, 0), &[1.0]);
        let mut t2 = Tape::new();
        let x2 = t2.input(x0);
        let v = m.value.forward(&mut t2, &store, x2);
        let f = m.fuse.forward(&mut t2, &store, v);
        let expect = t2.add(x2, f);
        for (a, b) in tape.value(out).data().iter().zip(t2.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_share_weight() {
        let (store, m) = setup(8, 2);
        let row: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[row.clone(), row]));
        let (_, attn) = m.forward(&mut tape, &store, x, vec![AttnGroup::square(0, 2)]);
        let rec = tape.attention_record(attn).unwrap();
        for h in 0..2 {
            assert_eq!(rec.weights(0, h), &[0.5, 0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn weights_match_scalar_loop_reference() {
        let (d, h, n) = (8, 2, 4);
        let (store, m) = setup(d, h);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let (_, attn) = m.forward(&mut tape, &store, x, vec![AttnGroup::square(0, n)]);
        let rec = tape.attention_record(attn).unwrap();

        let proj = |lin: &Linear| -> Vec<Vec<f64>> {
            let w = store.get(lin.weight);
            let b = store.get(lin.bias.unwrap());
            (0..n)
                .map(|r| {
                    (0..d)
                        .map(|c| b.get(0, c) + (0..d).map(|k| x0.get(r, k) * w.get(k, c)).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let (q, k) = (proj(&m.query), proj(&m.key));
        let dk = d / h;
        for head in 0..h {
            let got = rec.weights(0, head);
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (head * dk..(head + 1) * dk).map(|c| q[i][c] * k[j][c]).sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for j in 0..n {
                    assert!((got[i * n + j] - scores[j].exp() / z).abs() < 1e-6);
                }
                let row_sum: f64 = got[i * n..(i + 1) * n].iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
