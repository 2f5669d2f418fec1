//! Atom-based sparse voxel transformer branch.
//!
//! Full self-attention where every occupied voxel attends to every other
//! voxel of the same cloud. Queries and keys are projected down by a
//! reduction factor to keep the score matrix cheap; values keep the full
//! width. Scores are plain dot products (no scaling) passed through a row
//! softmax. The branch returns the additive update; the caller owns the
//! residual connection so variants can fuse branches before adding.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::layers::Linear;
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct AsvtBranch {
    to_values: Linear,
    to_queries: Linear,
    to_keys: Linear,
    out: Linear,
}

impl AsvtBranch {
    /// `channels / reduction` is the query/key width and must divide evenly.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        assert_eq!(
            channels % reduction,
            0,
            "reduction must divide the channel count"
        );
        let reduced = channels / reduction;
        Self {
            to_values: Linear::new(store, rng, &format!("{name}.values"), channels, channels, true),
            to_queries: Linear::new(store, rng, &format!("{name}.queries"), channels, reduced, true),
            to_keys: Linear::new(store, rng, &format!("{name}.keys"), channels, reduced, true),
            out: Linear::new(store, rng, &format!("{name}.out"), channels, channels, true),
        }
    }

    /// Additive update for one cloud's voxel rows.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let (delta, _) = self.forward_with_attention(store, binder, tape, x)?;
        Ok(delta)
    }

    /// Same as [`AsvtBranch::forward`] but also exposes the N x N attention
    /// node for inspection.
    pub fn forward_with_attention<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let values = self.to_values.forward(store, binder, tape, x)?;
        let queries = self.to_queries.forward(store, binder, tape, x)?;
        let keys = self.to_keys.forward(store, binder, tape, x)?;
        let keys_t = tape.transpose(keys);
        let scores = tape.matmul(queries, keys_t)?;
        let attention = tape.row_softmax(scores);
        let mixed = tape.matmul(attention, values)?;
        let delta = self.out.forward(store, binder, tape, mixed)?;
        Ok((delta, attention))
    }

    /// Zeroes the output projection so the branch's update vanishes. Used
    /// by the residual identity check.
    pub fn zero_out_projection<S: Scalar>(&self, store: &mut ParamStore<S>) {
        store.value_mut(self.out.weight()).fill(S::zero());
        if let Some(b) = self.out.bias() {
            store.value_mut(b).fill(S::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::rng::stream;
    use ndarray::{Array1, Array2, Axis};

    const ORACLE_TOL: f64 = 1e-10;

    fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.iter().sum();
            row.mapv_inplace(|v| v / sum);
        }
        out
    }

    fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        x.dot(w) + b
    }

    /// Independent straight-line recomputation of the branch from the raw
    /// parameter matrices.
    fn oracle(
        x: &Array2<f64>,
        params: &[(Array2<f64>, Array2<f64>)],
    ) -> (Array2<f64>, Array2<f64>) {
        let values = affine(x, &params[0].0, &params[0].1);
        let queries = affine(x, &params[1].0, &params[1].1);
        let keys = affine(x, &params[2].0, &params[2].1);
        let attention = softmax_rows(&queries.dot(&keys.t()));
        let delta = affine(&attention.dot(&values), &params[3].0, &params[3].1);
        (delta, attention)
    }

    fn collect_params(store: &ParamStore<f64>) -> Vec<(Array2<f64>, Array2<f64>)> {
        ["values", "queries", "keys", "out"]
            .iter()
            .map(|part| {
                let w = store.value(store.find(&format!("asvt.{part}.weight")).unwrap());
                let b = store.value(store.find(&format!("asvt.{part}.bias")).unwrap());
                (w.clone(), b.clone())
            })
            .collect()
    }

    #[test]
    fn matches_dense_oracle() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(5, "init");
        let branch = AsvtBranch::new(&mut store, &mut rng, "asvt", 8, 4);
        let x = Array2::from_shape_fn((7, 8), |(i, j)| ((i * 13 + j * 7) % 11) as f64 / 11.0 - 0.4);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let xn = tape.constant(x.clone());
        let (delta, attention) = branch
            .forward_with_attention(&store, &mut binder, &mut tape, xn)
            .unwrap();
        let (want_delta, want_attention) = oracle(&x, &collect_params(&store));
        let d_err = (tape.value(delta) - &want_delta)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let a_err = (tape.value(attention) - &want_attention)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d_err < ORACLE_TOL, "delta err {d_err}");
        assert!(a_err < ORACLE_TOL, "attention err {a_err}");
        // Attention rows are distributions.
        for row in tape.value(attention).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn is_permutation_equivariant() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(6, "init");
        let branch = AsvtBranch::new(&mut store, &mut rng, "asvt", 6, 2);
        let x = Array2::from_shape_fn((5, 6), |(i, j)| (i as f64 - 2.0) * 0.3 + (j as f64) * 0.1);
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = Array2::zeros((5, 6));
        for (r, &p) in perm.iter().enumerate() {
            xp.row_mut(r).assign(&x.row(p));
        }
        let run = |input: &Array2<f64>, store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(store);
            let xn = tape.constant(input.clone());
            let d = branch.forward(store, &mut binder, &mut tape, xn).unwrap();
            tape.value(d).clone()
        };
        let base = run(&x, &store);
        let permuted = run(&xp, &store);
        for (r, &p) in perm.iter().enumerate() {
            let diff: Array1<f64> = &permuted.row(r) - &base.row(p);
            assert!(diff.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn zeroed_out_projection_kills_update() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(7, "init");
        let branch = AsvtBranch::new(&mut store, &mut rng, "asvt", 6, 2);
        branch.zero_out_projection(&mut store);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let x = tape.constant(Array2::from_elem((4, 6), 0.7));
        let d = branch.forward(&store, &mut binder, &mut tape, x).unwrap();
        assert!(tape.value(d).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_through_attention() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(8, "init");
        let branch = AsvtBranch::new(&mut store, &mut rng, "asvt", 4, 2);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| 0.2 * i as f64 - 0.3 * j as f64 + 0.1);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let xn = tape.constant(x.clone());
                let d = branch.forward(store, binder, tape, xn)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.sum_all(sq))
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
