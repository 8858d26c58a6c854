//! Recurrent cells: the triple recurrent cell used by the decoder and a
//! plain LSTM used by the encoder.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct TrcState {
    /// Cell output, the agent embedding.
    pub h: Var,
    pub c: Var,
}

/// Triple recurrent cell. With `h` the agent embedding, `s` the social
/// signal and `p` the position feedback:
///
/// ```text
/// i  = sigmoid(H1 h + S1 s + k_a)
/// c~ = tanh   (H2 h + S2 s + k_b)
/// f  = sigmoid(H3 h + S3 s + k_d)
/// c' = c * f + i * c~
/// o  = sigmoid(H4 h + P1 p + k_i)
/// u  = tanh   (H5 h + P2 p + k_j)
/// h' = tanh(c') * o + u
/// ```
///
/// The cell state never sees `p`.
#[derive(Clone, Debug)]
pub struct Trc {
    /// `d x 5d`: columns `[H1 | H2 | H3 | H4 | H5]`.
    pub hidden: ParamId,
    /// `d x 3d`: columns `[S1 | S2 | S3]`.
    pub social: ParamId,
    /// `p_dim x 2d`: columns `[P1 | P2]`.
    pub position: ParamId,
    /// `1 x 5d`: `[k_a | k_b | k_d | k_i | k_j]`.
    pub constants: ParamId,
    pub d_model: usize,
    pub p_dim: usize,
}

impl Trc {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        p_dim: usize,
    ) -> Self {
        let hidden = store.add_glorot(format!("{name}.hidden"), d_model, 5 * d_model, rng);
        let social = store.add_glorot(format!("{name}.social"), d_model, 3 * d_model, rng);
        let position = store.add_glorot(format!("{name}.position"), p_dim, 2 * d_model, rng);
        let mut k = Tensor::zeros(1, 5 * d_model);
        // forget-gate constant starts at 1
        for c in 2 * d_model..3 * d_model {
            k.set(0, c, 1.0);
        }
        let constants = store.add(format!("{name}.constants"), k);
        Self {
            hidden,
            social,
            position,
            constants,
            d_model,
            p_dim,
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prev: TrcState,
        s: Var,
        p: Var,
    ) -> Result<TrcState> {
        let d = self.d_model;
        let (n, hd) = tape.shape(prev.h);
        let check = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Shape(format!("trc {what}: got {got:?}, want {want:?}")))
            }
        };
        check("h", (n, hd), (n, d))?;
        check("c", tape.shape(prev.c), (n, d))?;
        check("s", tape.shape(s), (n, d))?;
        check("p", tape.shape(p), (n, self.p_dim))?;

        let wh = tape.param(store, self.hidden);
        let ws = tape.param(store, self.social);
        let wp = tape.param(store, self.position);
        let k = tape.param(store, self.constants);

        let hh = tape.matmul(prev.h, wh);
        let hh = tape.add_row(hh, k);
        let ss = tape.matmul(s, ws);
        let pp = tape.matmul(p, wp);

        let h_cell = tape.slice_cols(hh, 0, 3 * d);
        let cell_in = tape.add(h_cell, ss);
        let i_pre = tape.slice_cols(cell_in, 0, d);
        let i = tape.sigmoid(i_pre);
        let cand_pre = tape.slice_cols(cell_in, d, d);
        let cand = tape.tanh(cand_pre);
        let f_pre = tape.slice_cols(cell_in, 2 * d, d);
        let f = tape.sigmoid(f_pre);
        let keep = tape.mul(prev.c, f);
        let write = tape.mul(i, cand);
        let c = tape.add(keep, write);

        let h_out = tape.slice_cols(hh, 3 * d, 2 * d);
        let out_in = tape.add(h_out, pp);
        let o_pre = tape.slice_cols(out_in, 0, d);
        let o = tape.sigmoid(o_pre);
        let u_pre = tape.slice_cols(out_in, d, d);
        let u = tape.tanh(u_pre);
        let tc = tape.tanh(c);
        let gated = tape.mul(tc, o);
        let h = tape.add(gated, u);
        Ok(TrcState { h, c })
    }
}

/// Standard LSTM cell, gates ordered `[i | f | g | o]`.
#[derive(Clone, Debug)]
pub struct Lstm {
    /// `(input + d) x 4d`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub d_model: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        d_model: usize,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), input_dim + d_model, 4 * d_model, rng);
        let mut b = Tensor::zeros(1, 4 * d_model);
        for c in d_model..2 * d_model {
            b.set(0, c, 1.0);
        }
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            weight,
            bias,
            input_dim,
            d_model,
        }
    }

    /// One step; returns `(h, c)`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> (Var, Var) {
        let d = self.d_model;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xh = tape.concat_cols(&[x, h]);
        let z = tape.matmul(xh, w);
        let z = tape.add_row(z, b);
        let i_pre = tape.slice_cols(z, 0, d);
        let i = tape.sigmoid(i_pre);
        let f_pre = tape.slice_cols(z, d, d);
        let f = tape.sigmoid(f_pre);
        let g_pre = tape.slice_cols(z, 2 * d, d);
        let g = tape.tanh(g_pre);
        let o_pre = tape.slice_cols(z, 3 * d, d);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(c, f);
        let write = tape.mul(i, g);
        let c = tape.add(keep, write);
        let tc = tape.tanh(c);
        let h = tape.mul(tc, o);
        (h, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_parameters_halve_the_cell_state() {
        let (d, pd) = (6, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trc = Trc::new(&mut store, &mut rng, "trc", d, pd);
        store.zero_prefix("trc");
        let mut tape = Tape::new();
        let h0 = tape.input(random(2, d, &mut rng));
        let c0v = random(2, d, &mut rng);
        let c0 = tape.input(c0v.clone());
        let s = tape.input(random(2, d, &mut rng));
        let p = tape.input(random(2, pd, &mut rng));
        let st = trc.step(&mut tape, &store, TrcState { h: h0, c: c0 }, s, p).unwrap();
        for k in 0..c0v.len() {
            let c = 0.5 * c0v.data()[k];
            assert!((tape.value(st.c).data()[k] - c).abs() < 1e-9);
            assert!((tape.value(st.h).data()[k] - 0.5 * c.tanh()).abs() < 1e-9);
        }
    }

    #[test]
    fn cell_state_ignores_position_input() {
        let (d, pd) = (6, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trc = Trc::new(&mut store, &mut rng, "trc", d, pd);
        let h = random(3, d, &mut rng);
        let c = random(3, d, &mut rng);
        let s = random(3, d, &mut rng);
        let run = |p: Tensor| {
            let mut tape = Tape::new();
            let prev = TrcState { h: tape.input(h.clone()), c: tape.input(c.clone()) };
            let sv = tape.input(s.clone());
            let pv = tape.input(p);
            let st = trc.step(&mut tape, &store, prev, sv, pv).unwrap();
            (tape.value(st.h).clone(), tape.value(st.c).clone())
        };
        let (h1, c1) = run(random(3, pd, &mut rng));
        let (h2, c2) = run(random(3, pd, &mut rng));
        assert_eq!(c1, c2);
        assert_ne!(h1, h2);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trc = Trc::new(&mut store, &mut rng, "trc", 4, 3);
        let mut tape = Tape::new();
        let prev = TrcState { h: tape.input(Tensor::zeros(1, 4)), c: tape.input(Tensor::zeros(1, 4)) };
        let s = tape.input(Tensor::zeros(1, 4));
        let p = tape.input(Tensor::zeros(1, 5));
        assert!(trc.step(&mut tape, &store, prev, s, p).is_err());
    }

    /// With the social input at zero and the update path switched off
    /// (H5, P2, k_j and P1 zero), the cell is an LSTM without input.
    #[test]
    fn reduces_to_lstm_without_social_and_update_paths() {
        let d = 5;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trc = Trc::new(&mut store, &mut rng, "trc", d, 2);
        let lstm = Lstm::new(&mut store, &mut rng, "lstm", 1, d);
        // copy TRC hidden weights into the LSTM's recurrent block; gates
        // [i | f | g | o] <- [H1 | H3 | H2 | H4]
        let wh = store.get(trc.hidden).clone();
        let k = store.get(trc.constants).clone();
        let mut lw = Tensor::zeros(1 + d, 4 * d);
        let mut lb = Tensor::zeros(1, 4 * d);
        for (gate, src) in [(0, 0), (1, 2), (2, 1), (3, 3)] {
            for c in 0..d {
                for r in 0..d {
                    lw.set(1 + r, gate * d + c, wh.get(r, src * d + c));
                }
                lb.set(0, gate * d + c, k.get(0, src * d + c));
            }
        }
        *store.get_mut(lstm.weight) = lw;
        *store.get_mut(lstm.bias) = lb;
        {
            let wh = store.get_mut(trc.hidden);
            for r in 0..d {
                for c in 4 * d..5 * d {
                    wh.set(r, c, 0.0);
                }
            }
        }
        store.get_mut(trc.position).data_mut().iter_mut().for_each(|x| *x = 0.0);
        for c in 4 * d..5 * d {
            store.get_mut(trc.constants).set(0, c, 0.0);
        }

        let h0 = random(2, d, &mut rng);
        let c0 = random(2, d, &mut rng);
        let mut tape = Tape::new();
        let prev = TrcState { h: tape.input(h0.clone()), c: tape.input(c0.clone()) };
        let s = tape.input(Tensor::zeros(2, d));
        let p = tape.input(random(2, 2, &mut rng));
        let st = trc.step(&mut tape, &store, prev, s, p).unwrap();
        let x = tape.input(Tensor::zeros(2, 1));
        let h = tape.input(h0);
        let c = tape.input(c0);
        let (lh, lc) = lstm.step(&mut tape, &store, x, h, c);
        for (a, b) in tape.value(st.c).data().iter().zip(tape.value(lc).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(st.h).data().iter().zip(tape.value(lh).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
