//! Cluster-based sparse voxel transformer branch.
//!
//! Instead of attending voxel-to-voxel, the branch summarizes each cloud
//! into a small set of learned tokens, runs full self-attention over the
//! tokens, and projects the refined tokens back onto the voxels:
//!
//! 1. Tokenizer: grouping weights per voxel are softmaxed and used to pool
//!    voxel features into `n_tokens` token vectors.
//! 2. Transformer: single-head unscaled dot-product attention over tokens
//!    with a residual connection.
//! 3. Projector: each voxel queries the refined tokens and receives a
//!    convex mixture of them, mapped through an output projection.
//!
//! By default the grouping softmax normalizes over the token axis, so every
//! voxel distributes unit mass across tokens. `softmax_over_voxels` flips
//! the axis, making each token a convex combination of voxels instead; both
//! normalizations appear in the token-pooling literature and the choice
//! alters only the tokenizer, so it is kept as a config switch.
//!
//! Like the atom branch, the output is the additive update; residual
//! addition happens in the caller.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::layers::Linear;
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CsvtBranch {
    group: Linear,
    token_features: Linear,
    queries: Linear,
    keys: Linear,
    values: Linear,
    attn_out: Linear,
    project: Linear,
    project_query: Linear,
    out: Linear,
    n_tokens: usize,
    softmax_over_voxels: bool,
}

/// Intermediate views exposed for inspection tooling.
pub struct CsvtTrace {
    /// Additive voxel update, N x C.
    pub delta: NodeId,
    /// Grouping weights after softmax, N x tokens.
    pub grouping: NodeId,
    /// Token features entering the transformer, tokens x C.
    pub tokens: NodeId,
    /// Token-to-token attention, tokens x tokens.
    pub token_attention: NodeId,
    /// Voxel-to-token projection weights, N x tokens.
    pub projection: NodeId,
}

impl CsvtBranch {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        n_tokens: usize,
        softmax_over_voxels: bool,
    ) -> Self {
        let lin = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, part: &str, c_out: usize| {
            Linear::new(store, rng, &format!("{name}.{part}"), channels, c_out, true)
        };
        Self {
            group: lin(store, rng, "group", n_tokens),
            token_features: lin(store, rng, "token_features", channels),
            queries: lin(store, rng, "queries", channels),
            keys: lin(store, rng, "keys", channels),
            values: lin(store, rng, "values", channels),
            attn_out: lin(store, rng, "attn_out", channels),
            project: lin(store, rng, "project", channels),
            project_query: lin(store, rng, "project_query", channels),
            out: lin(store, rng, "out", channels),
            n_tokens,
            softmax_over_voxels,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Additive update for one cloud's voxel rows.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        Ok(self.forward_traced(store, binder, tape, x)?.delta)
    }

    /// Full forward pass keeping handles to the intermediate stages.
    pub fn forward_traced<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
    ) -> Result<CsvtTrace> {
        // Tokenizer.
        let group_logits = self.group.forward(store, binder, tape, x)?;
        let grouping = if self.softmax_over_voxels {
            tape.col_softmax(group_logits)
        } else {
            tape.row_softmax(group_logits)
        };
        let feats = self.token_features.forward(store, binder, tape, x)?;
        let grouping_t = tape.transpose(grouping);
        let tokens = tape.matmul(grouping_t, feats)?;
        // Transformer over tokens.
        let q = self.queries.forward(store, binder, tape, tokens)?;
        let k = self.keys.forward(store, binder, tape, tokens)?;
        let v = self.values.forward(store, binder, tape, tokens)?;
        let k_t = tape.transpose(k);
        let scores = tape.matmul(q, k_t)?;
        let token_attention = tape.row_softmax(scores);
        let mixed = tape.matmul(token_attention, v)?;
        let attn_update = self.attn_out.forward(store, binder, tape, mixed)?;
        let refined = tape.add(tokens, attn_update)?;
        // Projector back to voxels.
        let projected_tokens = self.project.forward(store, binder, tape, refined)?;
        let voxel_queries = self.project_query.forward(store, binder, tape, x)?;
        let projected_tokens_t = tape.transpose(projected_tokens);
        let proj_scores = tape.matmul(voxel_queries, projected_tokens_t)?;
        let projection = tape.row_softmax(proj_scores);
        let mixture = tape.matmul(projection, projected_tokens)?;
        let delta = self.out.forward(store, binder, tape, mixture)?;
        Ok(CsvtTrace {
            delta,
            grouping,
            tokens,
            token_attention,
            projection,
        })
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
