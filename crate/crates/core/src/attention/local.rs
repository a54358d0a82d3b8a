//! Decoupled local triple attention over graph neighborhoods.
//!
//! Per directed neighbor pair the three views score independently,
//! a softmaxed view triple combines them, and a per-neighborhood softmax
//! normalizes the combined score before aggregating attribute encodings.

use crate::attention::PairSet;
use crate::autograd::Tensor;
use crate::error::Result;
use crate::linalg::Matrix;

/// Learnable weights of one local triple-attention block.
///
/// `view_logits` is `1 x 3` in `[positional, structural, attribute]` order;
/// its row softmax is the exported view triple.
#[derive(Debug, Clone)]
pub struct LocalAttentionParams<T> {
    pub w_str: T,
    pub w_pos: T,
    pub w_atr: T,
    pub q_s: T,
    pub q_p: T,
    pub q_a: T,
    pub view_logits: T,
}

impl<T> LocalAttentionParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LocalAttentionParams<U> {
        LocalAttentionParams {
            w_str: f(&self.w_str),
            w_pos: f(&self.w_pos),
            w_atr: f(&self.w_atr),
            q_s: f(&self.q_s),
            q_p: f(&self.q_p),
            q_a: f(&self.q_a),
            view_logits: f(&self.view_logits),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'static str, &'a T)) {
        f("w_str", &self.w_str);
        f("w_pos", &self.w_pos);
        f("w_atr", &self.w_atr);
        f("q_s", &self.q_s);
        f("q_p", &self.q_p);
        f("q_a", &self.q_a);
        f("view_logits", &self.view_logits);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, &mut T)) {
        f("w_str", &mut self.w_str);
        f("w_pos", &mut self.w_pos);
        f("w_atr", &mut self.w_atr);
        f("q_s", &mut self.q_s);
        f("q_p", &mut self.q_p);
        f("q_a", &mut self.q_a);
        f("view_logits", &mut self.view_logits);
    }
}

/// Per-pair raw scores of the three views, each `E x 1`.
pub struct LocalScores {
    pub s: Tensor,
    pub p: Tensor,
    pub a: Tensor,
}

/// GAT-style pair score for one view: `q^T σ([W x_i || W x_j])`.
pub fn pair_scores(
    x: &Tensor,
    w: &Tensor,
    q: &Tensor,
    pairs: &PairSet,
    slope: f64,
) -> Result<Tensor> {
    let xw = x.matmul(&w.transpose())?;
    let xi = xw.gather_rows(&pairs.src)?;
    let xj = xw.gather_rows(&pairs.dst)?;
    xi.concat_cols(&xj)?.leaky_relu(slope).matmul(q)
}

/// The three decoupled per-pair view scores over local neighborhoods.
///
/// `pairwise_positional` substitutes fixed pairwise logits for the computed
/// positional score when given.
pub fn local_scores(
    s_enc: &Tensor,
    p_enc: &Tensor,
    h_enc: &Tensor,
    pairs: &PairSet,
    params: &LocalAttentionParams<Tensor>,
    slope: f64,
    pairwise_positional: Option<&Matrix>,
) -> Result<LocalScores> {
    let s = pair_scores(s_enc, &params.w_str, &params.q_s, pairs, slope)?;
    let p = match pairwise_positional {
        Some(pw) => {
            let mut vals = Matrix::zeros(pairs.len(), 1);
            for (e, (&i, &j)) in pairs.src.iter().zip(&pairs.dst).enumerate() {
                vals[(e, 0)] = pw[(i, j)];
            }
            s_enc.tape().constant(vals)
        }
        None => pair_scores(p_enc, &params.w_pos, &params.q_p, pairs, slope)?,
    };
    let a = pair_scores(h_enc, &params.w_atr, &params.q_a, pairs, slope)?;
    Ok(LocalScores { s, p, a })
}

/// Combines view scores with the softmaxed view triple:
/// `z = α p + β s + γ a`. Returns `(z, softmaxed weights)`.
pub fn local_integrate(scores: &LocalScores, view_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let weights = view_logits.row_softmax();
    let stacked = scores.p.concat_cols(&scores.s)?.concat_cols(&scores.a)?;
    let z = stacked.matmul(&weights.transpose())?;
    Ok((z, weights))
}

/// Per-neighborhood softmax and attribute aggregation:
/// `Ĥ_i = Σ_{j∈N_i} ẑ_ij H_j`. Returns `(aggregate, ẑ)`.
///
/// `dropout` is an optional per-pair keep mask (0 or `1/(1-p)`) applied to
/// the normalized attention weights during training.
pub fn local_aggregate(
    z: &Tensor,
    h_enc: &Tensor,
    pairs: &PairSet,
    dropout: Option<&Matrix>,
) -> Result<(Tensor, Tensor)> {
    let zhat = z.segment_softmax(&pairs.offsets)?;
    let kept = match dropout {
        Some(mask) => zhat.mul(&z.tape().constant(mask.clone()))?,
        None => zhat.clone(),
    };
    let hj = h_enc.gather_rows(&pairs.dst)?;
    let weighted = hj.mul(&kept)?;
    let agg = weighted.scatter_add_rows(&pairs.src, h_enc.rows())?;
    Ok((agg, zhat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::local_pairs;
    use crate::autograd::Tape;
    use crate::graph::build_graph;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_matrix(r: usize, c: usize, rng: &mut StdRng) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    fn rand_params(d_s: usize, d_p: usize, d: usize, dh: usize, dhh: usize, rng: &mut StdRng)
        -> LocalAttentionParams<Matrix>
    {
        LocalAttentionParams {
            w_str: rand_matrix(dh, d_s, rng),
            w_pos: rand_matrix(dh, d_p, rng),
            w_atr: rand_matrix(dhh, d, rng),
            q_s: rand_matrix(2 * dh, 1, rng),
            q_p: rand_matrix(2 * dh, 1, rng),
            q_a: rand_matrix(2 * dhh, 1, rng),
            view_logits: rand_matrix(1, 3, rng),
        }
    }

    #[test]
    fn zero_encodings_give_zero_scores() {
        let tape = Tape::new();
        let (g, _) = build_graph(&[(0, 1), (1, 2)], Matrix::zeros(3, 1)).unwrap();
        let pairs = local_pairs(&g);
        let mut rng = StdRng::seed_from_u64(7);
        let params = rand_params(4, 4, 4, 3, 3, &mut rng).map(|m| tape.var(m.clone()));
        let zeros = tape.constant(Matrix::zeros(3, 4));
        let scores =
            local_scores(&zeros, &zeros, &zeros, &pairs, &params, 0.2, None).unwrap();
        for &v in scores.s.value().data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn identical_encodings_give_equal_scores() {
        let tape = Tape::new();
        let (g, _) = build_graph(&[(0, 1), (1, 2), (2, 0)], Matrix::zeros(3, 1)).unwrap();
        let pairs = local_pairs(&g);
        let mut rng = StdRng::seed_from_u64(9);
        let params = rand_params(4, 4, 4, 3, 3, &mut rng).map(|m| tape.var(m.clone()));
        let row: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let mut enc = Matrix::zeros(3, 4);
        for i in 0..3 {
            enc.row_mut(i).copy_from_slice(&row);
        }
        let enc = tape.constant(enc);
        let scores = local_scores(&enc, &enc, &enc, &pairs, &params, 0.2, None).unwrap();
        let v = scores.s.value();
        for e in 1..pairs.len() {
            assert!((v[(e, 0)] - v[(0, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_match_naive_per_edge_formula() {
        let mut rng = StdRng::seed_from_u64(42);
        let g = {
            let mut edges = Vec::new();
            for u in 0..8usize {
                for v in (u + 1)..8 {
                    if rng.random::<f64>() < 0.4 {
                        edges.push((u, v));
                    }
                }
            }
            build_graph(&edges, Matrix::zeros(8, 1)).unwrap().0
        };
        let pairs = local_pairs(&g);
        let (d_s, dh) = (5, 3);
        let params = rand_params(d_s, d_s, d_s, dh, dh, &mut rng);
        let enc = rand_matrix(8, d_s, &mut rng);

        let tape = Tape::new();
        let tp = params.map(|m| tape.var(m.clone()));
        let enc_t = tape.constant(enc.clone());
        let got = pair_scores(&enc_t, &tp.w_str, &tp.q_s, &pairs, 0.2)
            .unwrap()
            .value();

        for (e, (&i, &j)) in pairs.src.iter().zip(&pairs.dst).enumerate() {
            // q^T σ([W S_i || W S_j]) with explicit loops.
            let mut cat = vec![0.0; 2 * dh];
            for r in 0..dh {
                for c in 0..d_s {
                    cat[r] += params.w_str[(r, c)] * enc[(i, c)];
                    cat[dh + r] += params.w_str[(r, c)] * enc[(j, c)];
                }
            }
            let mut expect = 0.0;
            for (r, &v) in cat.iter().enumerate() {
                let act = if v >= 0.0 { v } else { 0.2 * v };
                expect += params.q_s[(r, 0)] * act;
            }
            assert!(
                (got[(e, 0)] - expect).abs() < 1e-12,
                "pair ({i},{j}): {} vs {expect}",
                got[(e, 0)]
            );
        }
    }

    #[test]
    fn integrate_symmetry_and_mean() {
        let tape = Tape::new();
        let scores = LocalScores {
            s: tape.constant(Matrix::from_vec(1, 1, vec![2.0])),
            p: tape.constant(Matrix::from_vec(1, 1, vec![1.0])),
            a: tape.constant(Matrix::from_vec(1, 1, vec![3.0])),
        };
        let logits = tape.var(Matrix::zeros(1, 3));
        let (z, w) = local_integrate(&scores, &logits).unwrap();
        for &v in w.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((z.scalar_value() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn integrate_invariant_to_logit_shift() {
        let tape = Tape::new();
        let mut rng = StdRng::seed_from_u64(3);
        let e = 6;
        let scores = LocalScores {
            s: tape.constant(rand_matrix(e, 1, &mut rng)),
            p: tape.constant(rand_matrix(e, 1, &mut rng)),
            a: tape.constant(rand_matrix(e, 1, &mut rng)),
        };
        let base = rand_matrix(1, 3, &mut rng);
        let shifted = base.map(|v| v + 10.0);
        let (z1, _) = local_integrate(&scores, &tape.var(base)).unwrap();
        let (z2, _) = local_integrate(&scores, &tape.var(shifted)).unwrap();
        let (v1, v2) = (z1.value(), z2.value());
        let argmax = |m: &Matrix| {
            (0..e)
                .max_by(|&a, &b| m[(a, 0)].total_cmp(&m[(b, 0)]))
                .unwrap()
        };
        assert_eq!(argmax(&v1), argmax(&v2));
    }

    #[test]
    fn aggregate_rows_are_stochastic_and_saturate() {
        let tape = Tape::new();
        let (g, _) = build_graph(
            &[(0, 1), (0, 2), (0, 3), (1, 2)],
            Matrix::zeros(4, 1),
        )
        .unwrap();
        let pairs = local_pairs(&g);
        // Uniform z over node 0's neighborhood of size 4 gives 0.25 each.
        let z = tape.constant(Matrix::zeros(pairs.len(), 1));
        let h = tape.constant(Matrix::identity(4));
        let (_, zhat) = local_aggregate(&z, &h, &pairs, None).unwrap();
        let v = zhat.value();
        for e in pairs.offsets[0]..pairs.offsets[1] {
            assert!((v[(e, 0)] - 0.25).abs() < 1e-12);
        }
        for i in 0..4 {
            let s: f64 = (pairs.offsets[i]..pairs.offsets[i + 1])
                .map(|e| v[(e, 0)])
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // A dominant score saturates onto its neighbor's row.
        let mut zd = Matrix::zeros(pairs.len(), 1);
        let target = pairs.offsets[0];
        zd[(target, 0)] = 60.0;
        let z = tape.constant(zd);
        let (agg, _) = local_aggregate(&z, &h, &pairs, None).unwrap();
        let k = pairs.dst[target];
        assert!((agg.value()[(0, k)] - 1.0).abs() < 1e-9);
    }
}
