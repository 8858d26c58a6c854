use rand_chacha::ChaCha8Rng;

use super::{Linear, POS_SCALE};
use crate::autograd::{Tape, Var};
use crate::params::ParamStore;
use crate::scene::Polyline;
use crate::tensor::Tensor;

/// Every polyline is resampled to this many points before encoding.
pub const POLYLINE_POINTS: usize = 10;
/// Per-point input features: x, y, tangent x, tangent y.
pub const POINT_FEATURES: usize = 4;

/// Stack resampled point features of all polylines, one row per point,
/// polylines contiguous.
pub fn polyline_point_features(polylines: &[Polyline]) -> Tensor {
    let mut data = Vec::with_capacity(polylines.len() * POLYLINE_POINTS * POINT_FEATURES);
    for l in polylines {
        let r = l.resample(POLYLINE_POINTS);
        for (p, d) in r.points.iter().zip(&r.directions) {
            data.extend_from_slice(&[p[0] * POS_SCALE, p[1] * POS_SCALE, d[0], d[1]]);
        }
    }
    Tensor::from_vec(polylines.len() * POLYLINE_POINTS, POINT_FEATURES, data)
}

/// Two kernel-3 convolutions along the point sequence followed by a
/// learned softmax-weighted average over points.
#[derive(Clone, Debug)]
pub struct PolylineEncoder {
    pub conv1: Linear,
    pub conv2: Linear,
    pub pool: Linear,
    pub d_model: usize,
}

/// One kernel-3, zero-padded convolution over sequences of `seq_len` rows.
pub(crate) fn conv1d(tape: &mut Tape, store: &ParamStore, layer: &Linear, x: Var, seq_len: usize) -> Var {
    let prev = tape.shift_seq(x, seq_len, 1);
    let next = tape.shift_seq(x, seq_len, -1);
    let taps = tape.concat_cols(&[prev, x, next]);
    let y = layer.forward(tape, store, taps);
    tape.relu(y)
}

impl PolylineEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize) -> Self {
        Self {
            conv1: Linear::new(store, rng, &format!("{name}.conv1"), 3 * POINT_FEATURES, d_model, true),
            conv2: Linear::new(store, rng, &format!("{name}.conv2"), 3 * d_model, d_model, true),
            pool: Linear::new(store, rng, &format!("{name}.pool"), d_model, 1, true),
            d_model,
        }
    }

    /// `points`: output of [`polyline_point_features`]. Returns one
    /// `d_model` row per polyline.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, points: Var) -> Var {
        let h1 = conv1d(tape, store, &self.conv1, points, POLYLINE_POINTS);
        let h2 = conv1d(tape, store, &self.conv2, h1, POLYLINE_POINTS);
        let scores = self.pool.forward(tape, store, h2);
        tape.softmax_pool(scores, h2, POLYLINE_POINTS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn encode(polys: &[Polyline]) -> Tensor {
        let mut store = ParamStore::new();
        let enc = PolylineEncoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), "poly", 64);
        let mut tape = Tape::new();
        let x = tape.input(polyline_point_features(polys));
        let out = enc.forward(&mut tape, &store, x);
        tape.value(out).clone()
    }

    fn lanes() -> Vec<Polyline> {
        vec![
            Polyline::new(vec![[0.0, 0.0], [20.0, 0.0]], 2.0).unwrap(),
            Polyline::new(vec![[0.0, 5.0], [10.0, 8.0], [15.0, 20.0]], 2.0).unwrap(),
            Polyline::new(vec![[-5.0, -5.0], [-30.0, -5.0]], 2.0).unwrap(),
        ]
    }

    #[test]
    fn identical_polylines_embed_identically() {
        let l = lanes();
        let e = encode(&[l[1].clone(), l[1].clone()]);
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn dimension_is_64() {
        for n in 1..4 {
            let e = encode(&lanes()[..n]);
            assert_eq!(e.shape(), (n, 64));
        }
    }

    #[test]
    fn permutation_permutes_embeddings() {
        let l = lanes();
        let a = encode(&l);
        let b = encode(&[l[2].clone(), l[0].clone(), l[1].clone()]);
        assert_eq!(a.row(2), b.row(0));
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(2));
    }
}
