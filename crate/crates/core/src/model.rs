//! The full place-recognition networks: a shared sparse convolution stem,
//! optional atom- and cluster-based attention branches, and generalized-mean
//! pooling down to one global descriptor per cloud.
//!
//! Stem layout (channel counts for the default config):
//!
//! ```text
//! occupancy 1 -> conv k5 s1 -> 32 -> conv k2 s2 -> 32 -> resblock -> 32
//!            -> conv k2 s2 -> 32 -> resblock -> 64 -> linear -> 256
//! ```
//!
//! Every convolution is followed by batch norm and ReLU except the final
//! channel expansion, which is a bare linear map. Attention branches run per
//! cloud on the coarsest level and produce additive updates; the fused
//! features are `stem + update_atom + update_cluster` with a single shared
//! residual, so zeroing the branch output projections makes the pre-pool
//! features exactly the stem output.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::asvt::AsvtBranch;
use crate::autodiff::{NodeId, Tape};
use crate::csvt::CsvtBranch;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, GemPool, Linear, ResBlock, SpConv};
use crate::params::{Binder, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::sparse::{Coord, KernelMap, SparseVoxelGrid, VoxelBatch};

/// Which attention branches the network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Both branches fused.
    Svt,
    /// Atom branch only.
    Asvt,
    /// Cluster branch only.
    Csvt,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Svt => "svt",
            Variant::Asvt => "asvt",
            Variant::Csvt => "csvt",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Svt => 0,
            Variant::Asvt => 1,
            Variant::Csvt => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Svt),
            1 => Some(Variant::Asvt),
            2 => Some(Variant::Csvt),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svt" => Ok(Variant::Svt),
            "asvt" => Ok(Variant::Asvt),
            "csvt" => Ok(Variant::Csvt),
            other => Err(Error::Parse(format!(
                "unknown variant {other:?}, expected svt, asvt, or csvt"
            ))),
        }
    }
}

/// Hyperparameters fixing the network shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Voxel edge length in the normalized point coordinate system.
    pub quant_step: f64,
    /// Stem width; the second residual block doubles it.
    pub base_channels: usize,
    /// Descriptor and attention width.
    pub feature_dim: usize,
    /// Query/key reduction factor of the atom branch.
    pub reduction: usize,
    /// Token count of the cluster branch.
    pub n_tokens: usize,
    /// Flip the tokenizer softmax from the token axis to the voxel axis.
    pub csvt_softmax_over_voxels: bool,
    /// Initial generalized-mean exponent.
    pub gem_p_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Svt,
            quant_step: 0.01,
            base_channels: 32,
            feature_dim: 256,
            reduction: 8,
            n_tokens: 8,
            csvt_softmax_over_voxels: false,
            gem_p_init: 3.0,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Tiny dimensions for gradient checks and fast tests.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            quant_step: 0.01,
            base_channels: 2,
            feature_dim: 8,
            reduction: 2,
            n_tokens: 2,
            csvt_softmax_over_voxels: false,
            gem_p_init: 3.0,
        }
    }
}

/// Kernel maps for one batch, chained through the stem's lattice levels.
/// Building them is pure coordinate work, so per-cloud maps can be cached
/// and merged per batch.
#[derive(Debug, Clone)]
pub struct StemMaps {
    pub conv0: Arc<KernelMap>,
    pub down0: Arc<KernelMap>,
    pub res0_3: Arc<KernelMap>,
    pub res0_1: Arc<KernelMap>,
    pub down1: Arc<KernelMap>,
    pub res1_3: Arc<KernelMap>,
    pub res1_1: Arc<KernelMap>,
}

impl StemMaps {
    pub fn build(clouds: &[Vec<Coord>], in_stride: i32) -> Self {
        let conv0 = KernelMap::build_from_clouds(clouds, in_stride, 5, 1);
        let down0 = KernelMap::build_from_clouds(clouds, in_stride, 2, 2);
        let l1 = down0.out_clouds();
        let s1 = down0.out_stride();
        let res0_3 = KernelMap::build_from_clouds(l1, s1, 3, 1);
        let res0_1 = KernelMap::build_from_clouds(l1, s1, 1, 1);
        let down1 = KernelMap::build_from_clouds(l1, s1, 2, 2);
        let l2 = down1.out_clouds();
        let s2 = down1.out_stride();
        let res1_3 = KernelMap::build_from_clouds(l2, s2, 3, 1);
        let res1_1 = KernelMap::build_from_clouds(l2, s2, 1, 1);
        Self {
            conv0: Arc::new(conv0),
            down0: Arc::new(down0),
            res0_3: Arc::new(res0_3),
            res0_1: Arc::new(res0_1),
            down1: Arc::new(down1),
            res1_3: Arc::new(res1_3),
            res1_1: Arc::new(res1_1),
        }
    }

    pub fn for_batch<S: Scalar>(batch: &VoxelBatch<S>) -> Self {
        Self::build(batch.clouds(), batch.stride())
    }

    /// Merges per-cloud pyramids into one batch pyramid.
    pub fn merge(parts: &[&StemMaps]) -> Self {
        fn merged(pick: impl Fn(&StemMaps) -> &KernelMap, parts: &[&StemMaps]) -> Arc<KernelMap> {
            let maps: Vec<&KernelMap> = parts.iter().map(|p| pick(p)).collect();
            Arc::new(KernelMap::merge(&maps))
        }
        Self {
            conv0: merged(|p| &p.conv0, parts),
            down0: merged(|p| &p.down0, parts),
            res0_3: merged(|p| &p.res0_3, parts),
            res0_1: merged(|p| &p.res0_1, parts),
            down1: merged(|p| &p.down1, parts),
            res1_3: merged(|p| &p.res1_3, parts),
            res1_1: merged(|p| &p.res1_1, parts),
        }
    }

    /// Per-cloud row ranges at the coarsest level.
    pub fn final_segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut row = 0;
        for c in self.down1.out_clouds() {
            out.push(row..row + c.len());
            row += c.len();
        }
        out
    }

    /// Voxel rows entering the attention branches.
    pub fn final_rows(&self) -> usize {
        self.down1.n_out()
    }
}

/// Per-forward handles to interesting intermediate nodes.
#[derive(Debug)]
pub struct ForwardOutput {
    /// B x feature_dim descriptor matrix, one row per cloud.
    pub descriptors: NodeId,
    /// Per-cloud stem output at the coarsest level (before branches).
    pub stem: Vec<NodeId>,
    /// Per-cloud fused features entering the pooling layer.
    pub prepool: Vec<NodeId>,
}

/// The network. Layers hold handles into the [`ParamStore`] created by
/// [`SvtNet::build`]; one model instance can drive many tapes.
#[derive(Debug, Clone)]
pub struct SvtNet {
    config: ModelConfig,
    conv0: SpConv,
    bn0: BatchNorm,
    down0: SpConv,
    down0_bn: BatchNorm,
    res0: ResBlock,
    down1: SpConv,
    down1_bn: BatchNorm,
    res1: ResBlock,
    expand: Linear,
    asvt: Option<AsvtBranch>,
    csvt: Option<CsvtBranch>,
    gem: GemPool,
}

impl SvtNet {
    /// Constructs the network and a store holding freshly initialized
    /// parameters. Identical (config, seed) pairs produce identical stores.
    pub fn build<S: Scalar>(config: &ModelConfig, seed: u64) -> (Self, ParamStore<S>) {
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, "init");
        let base = config.base_channels;
        let mid = base * 2;
        let feat = config.feature_dim;
        let conv0 = SpConv::new(&mut store, &mut init, "conv0", 1, base, 5, 1, false);
        let bn0 = BatchNorm::new(&mut store, "conv0.bn", base);
        let down0 = SpConv::new(&mut store, &mut init, "convs0", base, base, 2, 2, false);
        let down0_bn = BatchNorm::new(&mut store, "convs0.bn", base);
        let res0 = ResBlock::new(&mut store, &mut init, "resblock0", base, base);
        let down1 = SpConv::new(&mut store, &mut init, "convs1", base, base, 2, 2, false);
        let down1_bn = BatchNorm::new(&mut store, "convs1.bn", base);
        let res1 = ResBlock::new(&mut store, &mut init, "resblock1", base, mid);
        let expand = Linear::new(&mut store, &mut init, "conv1x1", mid, feat, false);
        let asvt = matches!(config.variant, Variant::Svt | Variant::Asvt).then(|| {
            AsvtBranch::new(&mut store, &mut init, "asvt", feat, config.reduction)
        });
        let csvt = matches!(config.variant, Variant::Svt | Variant::Csvt).then(|| {
            CsvtBranch::new(
                &mut store,
                &mut init,
                "csvt",
                feat,
                config.n_tokens,
                config.csvt_softmax_over_voxels,
            )
        });
        let gem = GemPool::new(&mut store, "gem", config.gem_p_init);
        (
            Self {
                config: config.clone(),
                conv0,
                bn0,
                down0,
                down0_bn,
                res0,
                down1,
                down1_bn,
                res1,
                expand,
                asvt,
                csvt,
                gem,
            },
            store,
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn gem(&self) -> &GemPool {
        &self.gem
    }

    pub fn asvt(&self) -> Option<&AsvtBranch> {
        self.asvt.as_ref()
    }

    pub fn csvt(&self) -> Option<&CsvtBranch> {
        self.csvt.as_ref()
    }

    /// Runs the stem over a merged batch, returning coarsest-level features.
    #[allow(clippy::too_many_arguments)]
    fn stem_forward<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
        maps: &StemMaps,
        training: bool,
    ) -> Result<NodeId> {
        let h = self.conv0.forward(store, binder, tape, x, &maps.conv0)?;
        let h = self.bn0.forward(store, binder, tape, h, training)?;
        let h = tape.relu(h);
        let h = self.down0.forward(store, binder, tape, h, &maps.down0)?;
        let h = self.down0_bn.forward(store, binder, tape, h, training)?;
        let h = tape.relu(h);
        let h = self
            .res0
            .forward(store, binder, tape, h, &maps.res0_3, &maps.res0_1, training)?;
        let h = self.down1.forward(store, binder, tape, h, &maps.down1)?;
        let h = self.down1_bn.forward(store, binder, tape, h, training)?;
        let h = tape.relu(h);
        let h = self
            .res1
            .forward(store, binder, tape, h, &maps.res1_3, &maps.res1_1, training)?;
        self.expand.forward(store, binder, tape, h)
    }

    /// Full forward pass over a batch: stem, per-cloud attention updates,
    /// fusion, and pooling into one descriptor row per cloud.
    pub fn forward<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        batch: &VoxelBatch<S>,
        maps: &StemMaps,
        training: bool,
    ) -> Result<ForwardOutput> {
        let x = tape.constant(batch.features().clone());
        let features = self.stem_forward(store, binder, tape, x, maps, training)?;
        let mut descriptors = Vec::new();
        let mut stem = Vec::new();
        let mut prepool = Vec::new();
        for segment in maps.final_segments() {
            let rows = tape.slice_rows(features, segment.start, segment.len())?;
            let mut fused = rows;
            if let Some(branch) = &self.asvt {
                let update = branch.forward(store, binder, tape, rows)?;
                fused = tape.add(fused, update)?;
            }
            if let Some(branch) = &self.csvt {
                let update = branch.forward(store, binder, tape, rows)?;
                fused = tape.add(fused, update)?;
            }
            let descriptor = self.gem.forward(store, binder, tape, fused)?;
            descriptors.push(descriptor);
            stem.push(rows);
            prepool.push(fused);
        }
        let descriptors = tape.concat_rows(&descriptors)?;
        Ok(ForwardOutput {
            descriptors,
            stem,
            prepool,
        })
    }

    /// Eval-mode descriptor for a single voxelized cloud.
    pub fn embed<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        grid: &SparseVoxelGrid<S>,
    ) -> Result<Array1<S>> {
        let batch: VoxelBatch<S> = grid.clone().into();
        let maps = StemMaps::for_batch(&batch);
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let out = self.forward(store, &mut binder, &mut tape, &batch, &maps, false)?;
        Ok(tape.value(out.descriptors).row(0).to_owned())
    }

    /// Runs the eval-mode stem over one cloud and returns the coarsest-level
    /// coordinates plus the branch-input feature node.
    fn stem_trace<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        grid: &SparseVoxelGrid<S>,
    ) -> Result<(Vec<Coord>, NodeId)> {
        let batch: VoxelBatch<S> = grid.clone().into();
        let maps = StemMaps::for_batch(&batch);
        let coords = maps.down1.out_clouds()[0].clone();
        let x = tape.constant(batch.features().clone());
        let features = self.stem_forward(store, binder, tape, x, &maps, false)?;
        Ok((coords, features))
    }

    /// Eval-mode atom-branch trace for one cloud: the coarsest-level voxel
    /// coordinates, the N x N attention matrix, and the attended per-voxel
    /// update rows. Errors when the variant carries no atom branch.
    pub fn attention_trace<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        grid: &SparseVoxelGrid<S>,
    ) -> Result<(Vec<Coord>, Array2<S>, Array2<S>)> {
        let branch = self.asvt.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "variant {} has no atom attention branch",
                self.config.variant
            ))
        })?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let (coords, features) = self.stem_trace(store, &mut binder, &mut tape, grid)?;
        let (delta, attention) =
            branch.forward_with_attention(store, &mut binder, &mut tape, features)?;
        Ok((
            coords,
            tape.value(attention).clone(),
            tape.value(delta).clone(),
        ))
    }

    /// Eval-mode cluster-branch trace for one cloud: the coarsest-level
    /// voxel coordinates and the N x tokens grouping weights. Errors when
    /// the variant carries no cluster branch.
    pub fn grouping_trace<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        grid: &SparseVoxelGrid<S>,
    ) -> Result<(Vec<Coord>, Array2<S>)> {
        let branch = self.csvt.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "variant {} has no cluster attention branch",
                self.config.variant
            ))
        })?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let (coords, features) = self.stem_trace(store, &mut binder, &mut tape, grid)?;
        let trace = branch.forward_traced(store, &mut binder, &mut tape, features)?;
        Ok((coords, tape.value(trace.grouping).clone()))
    }

    /// Zeroes both branches' output projections; with the shared residual
    /// this makes the pre-pool features equal the stem output exactly.
    pub fn zero_branch_outputs<S: Scalar>(&self, store: &mut ParamStore<S>) {
        if let Some(b) = &self.asvt {
            b.zero_out_projection(store);
        }
        if let Some(b) = &self.csvt {
            b.zero_out_projection(store);
        }
    }

    /// Applies post-step parameter constraints (the pooling exponent floor).
    pub fn constrain<S: Scalar>(&self, store: &mut ParamStore<S>) {
        self.gem.constrain(store);
    }

    /// Trainable scalar counts per named block, in stem order, plus the
    /// total. Buffers (running statistics) are excluded.
    pub fn parameter_counts<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<(String, usize)> {
        let mut blocks = vec!["conv0", "convs0", "resblock0", "convs1", "resblock1", "conv1x1"];
        if self.asvt.is_some() {
            blocks.push("asvt");
        }
        if self.csvt.is_some() {
            blocks.push("csvt");
        }
        blocks.push("gem");
        let mut out: Vec<(String, usize)> = blocks
            .iter()
            .map(|b| (b.to_string(), store.count_trainable(&format!("{b}."))))
            .collect();
        out.push(("total".to_string(), store.count_trainable("")));
        out
    }
}
