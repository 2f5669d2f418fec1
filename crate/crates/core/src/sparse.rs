//! Sparse voxel tensors: voxelization of raw point clouds, batched sparse
//! grids, and coordinate kernel maps for sparse convolution.
//!
//! A grid stores only the occupied integer lattice coordinates plus one
//! feature row per voxel; the dense bounding box is never materialized.
//! Coordinates are kept strictly lexicographically sorted so that every
//! downstream operation is independent of input point order.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Integer voxel coordinate. Lexicographic `Ord` on the array is the
/// canonical order everywhere.
pub type Coord = [i32; 3];

/// Raw input point cloud, benchmark convention: coordinates normalized to
/// roughly [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    /// Validates that the cloud is non-empty and every coordinate is finite.
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointCloud);
        }
        for (index, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidCoordinate { index });
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Sparse voxel grid: sorted unique coordinates plus an N x C feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid<S: Scalar> {
    coords: Vec<Coord>,
    features: Array2<S>,
    stride: i32,
    quant_step: f64,
}

impl<S: Scalar> SparseVoxelGrid<S> {
    /// Builds a grid from already-sorted unique coordinates. The feature
    /// matrix must have one row per coordinate.
    pub fn from_parts(
        coords: Vec<Coord>,
        features: Array2<S>,
        stride: i32,
        quant_step: f64,
    ) -> Result<Self> {
        if coords.len() != features.nrows() {
            return Err(Error::ShapeMismatch {
                op: "sparse_voxel_grid",
                details: format!(
                    "{} coordinates but {} feature rows",
                    coords.len(),
                    features.nrows()
                ),
            });
        }
        if !coords.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::ShapeMismatch {
                op: "sparse_voxel_grid",
                details: "coordinates must be strictly sorted and unique".into(),
            });
        }
        Ok(Self {
            coords,
            features,
            stride,
            quant_step,
        })
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &Array2<S> {
        &self.features
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn quant_step(&self) -> f64 {
        self.quant_step
    }

    /// Number of occupied voxels.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }
}

/// Voxelizes a point cloud into an occupancy grid with lattice stride 1.
///
/// Quantization floors each coordinate: voxel index = floor(p / step).
/// Duplicate hits merge into a single voxel with occupancy feature 1.
pub fn voxelize<S: Scalar>(pc: &PointCloud, step: f64) -> Result<SparseVoxelGrid<S>> {
    assert!(step > 0.0, "quantization step must be positive");
    if pc.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let mut set: BTreeSet<Coord> = BTreeSet::new();
    for (index, p) in pc.points().iter().enumerate() {
        let mut c = [0i32; 3];
        for a in 0..3 {
            let q = (p[a] / step).floor();
            if !q.is_finite() || q < i32::MIN as f64 || q > i32::MAX as f64 {
                return Err(Error::InvalidCoordinate { index });
            }
            c[a] = q as i32;
        }
        set.insert(c);
    }
    let coords: Vec<Coord> = set.into_iter().collect();
    let features = Array2::from_elem((coords.len(), 1), S::one());
    SparseVoxelGrid::from_parts(coords, features, 1, step)
}

/// Snaps coordinates onto the lattice of spacing `s` and deduplicates:
/// each coordinate maps to `s * floor(c / s)`.
pub fn downsample_coords(coords: &[Coord], s: i32) -> Vec<Coord> {
    assert!(s >= 1, "downsample factor must be at least 1");
    if s == 1 {
        return coords.to_vec();
    }
    let set: BTreeSet<Coord> = coords
        .iter()
        .map(|c| [snap(c[0], s), snap(c[1], s), snap(c[2], s)])
        .collect();
    set.into_iter().collect()
}

fn snap(c: i32, s: i32) -> i32 {
    s * c.div_euclid(s)
}

/// Kernel offsets in input-lattice steps, lexicographic order.
/// Odd kernels are centered; even kernels are forward-shifted {0..K-1}.
pub fn kernel_offsets(kernel: usize) -> Vec<Coord> {
    let k = kernel as i32;
    let (lo, hi) = if k % 2 == 1 {
        (-(k - 1) / 2, (k - 1) / 2)
    } else {
        (0, k - 1)
    };
    let mut offsets = Vec::with_capacity(kernel * kernel * kernel);
    for di in lo..=hi {
        for dj in lo..=hi {
            for dk in lo..=hi {
                offsets.push([di, dj, dk]);
            }
        }
    }
    offsets
}

/// Index pairs for one kernel offset, stored struct-of-arrays. Entry `r`
/// says: input row `input[r]` contributes to output row `output[r]`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OffsetPairs {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
}

impl OffsetPairs {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

/// Per-offset (input index, output index) pair lists driving the
/// gather-GEMM-scatter convolution, plus the output coordinate sets.
///
/// A map covers one or more clouds; rows of each cloud stay contiguous and
/// pairs never cross cloud boundaries, so a batch convolution is the
/// block-diagonal union of the per-cloud maps.
#[derive(Debug, Clone)]
pub struct KernelMap {
    offsets: Vec<Coord>,
    pairs: Vec<OffsetPairs>,
    out_clouds: Vec<Vec<Coord>>,
    kernel: usize,
    stride: usize,
    n_in: usize,
    n_out: usize,
    out_stride: i32,
}

impl KernelMap {
    /// Builds the map for a single grid.
    pub fn build<S: Scalar>(grid: &SparseVoxelGrid<S>, kernel: usize, stride: usize) -> Self {
        Self::build_clouds(
            std::slice::from_ref(&grid.coords).iter().map(|c| c.as_slice()),
            grid.stride,
            kernel,
            stride,
        )
    }

    /// Builds the block-diagonal map for a batch of clouds at a shared
    /// lattice stride.
    pub fn build_batch<S: Scalar>(batch: &VoxelBatch<S>, kernel: usize, stride: usize) -> Self {
        Self::build_clouds(
            batch.clouds.iter().map(|c| c.as_slice()),
            batch.stride,
            kernel,
            stride,
        )
    }

    /// Builds a map directly from per-cloud coordinate lists at a shared
    /// lattice stride, without materializing a feature batch.
    pub fn build_from_clouds(
        clouds: &[Vec<Coord>],
        in_stride: i32,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self::build_clouds(clouds.iter().map(|c| c.as_slice()), in_stride, kernel, stride)
    }

    /// Merges per-cloud maps into one block-diagonal map by re-basing the
    /// row indices. All parts must share kernel, stride, and lattice.
    pub fn merge(parts: &[&KernelMap]) -> Self {
        assert!(!parts.is_empty(), "merge needs at least one map");
        let first = parts[0];
        let mut pairs = vec![OffsetPairs::default(); first.offsets.len()];
        let mut out_clouds = Vec::new();
        let mut n_in = 0usize;
        let mut n_out = 0usize;
        for part in parts {
            assert_eq!(part.kernel, first.kernel, "kernel sizes differ");
            assert_eq!(part.stride, first.stride, "strides differ");
            assert_eq!(part.out_stride, first.out_stride, "lattices differ");
            for (d, p) in part.pairs.iter().enumerate() {
                pairs[d]
                    .input
                    .extend(p.input.iter().map(|&i| i + n_in as u32));
                pairs[d]
                    .output
                    .extend(p.output.iter().map(|&o| o + n_out as u32));
            }
            out_clouds.extend(part.out_clouds.iter().cloned());
            n_in += part.n_in;
            n_out += part.n_out;
        }
        KernelMap {
            offsets: first.offsets.clone(),
            pairs,
            out_clouds,
            kernel: first.kernel,
            stride: first.stride,
            n_in,
            n_out,
            out_stride: first.out_stride,
        }
    }

    fn build_clouds<'a>(
        clouds: impl Iterator<Item = &'a [Coord]>,
        in_stride: i32,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel >= 1, "kernel size must be at least 1");
        assert!(stride >= 1, "stride must be at least 1");
        let offsets = kernel_offsets(kernel);
        // Output voxels live on the coarser lattice in_stride * stride; the
        // window for output o covers inputs o + offset * in_stride.
        let window = in_stride * stride as i32;
        let mut pairs = vec![OffsetPairs::default(); offsets.len()];
        let mut out_clouds = Vec::new();
        let mut n_in = 0usize;
        let mut n_out = 0usize;
        for coords in clouds {
            let in_base = n_in as u32;
            let out_base = n_out as u32;
            let mut lookup: HashMap<Coord, u32> = HashMap::with_capacity(coords.len());
            for (i, c) in coords.iter().enumerate() {
                lookup.insert(*c, in_base + i as u32);
            }
            let out_coords: Vec<Coord> = if stride == 1 {
                coords.to_vec()
            } else {
                downsample_coords(coords, window)
            };
            for (oi, o) in out_coords.iter().enumerate() {
                for (d, delta) in offsets.iter().enumerate() {
                    let cand = [
                        o[0] + delta[0] * in_stride,
                        o[1] + delta[1] * in_stride,
                        o[2] + delta[2] * in_stride,
                    ];
                    if let Some(&ii) = lookup.get(&cand) {
                        pairs[d].input.push(ii);
                        pairs[d].output.push(out_base + oi as u32);
                    }
                }
            }
            n_in += coords.len();
            n_out += out_coords.len();
            out_clouds.push(out_coords);
        }
        KernelMap {
            offsets,
            pairs,
            out_clouds,
            kernel,
            stride,
            n_in,
            n_out,
            out_stride: window,
        }
    }

    pub fn offsets(&self) -> &[Coord] {
        &self.offsets
    }

    pub fn pairs(&self) -> &[OffsetPairs] {
        &self.pairs
    }

    /// Output coordinates of a single-cloud map.
    pub fn out_coords(&self) -> &[Coord] {
        debug_assert_eq!(self.out_clouds.len(), 1);
        &self.out_clouds[0]
    }

    pub fn out_clouds(&self) -> &[Vec<Coord>] {
        &self.out_clouds
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// Lattice stride of the output coordinates.
    pub fn out_stride(&self) -> i32 {
        self.out_stride
    }

    /// True when the map is the identity (kernel 1, stride 1): every voxel
    /// maps to itself under the zero offset.
    pub fn is_identity(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(|p| p.len()).sum()
    }
}

/// Spec-shaped convenience wrapper over [`KernelMap::build`].
pub fn build_kernel_map<S: Scalar>(
    grid: &SparseVoxelGrid<S>,
    kernel: usize,
    stride: usize,
) -> KernelMap {
    KernelMap::build(grid, kernel, stride)
}

/// A batch of voxel grids merged row-wise. Cloud `b` owns the contiguous
/// feature-row range `segments()[b]`; convolutions, attention, and pooling
/// all respect those boundaries.
#[derive(Debug, Clone)]
pub struct VoxelBatch<S: Scalar> {
    clouds: Vec<Vec<Coord>>,
    features: Array2<S>,
    stride: i32,
    quant_step: f64,
}

impl<S: Scalar> VoxelBatch<S> {
    pub fn from_grids(grids: &[SparseVoxelGrid<S>]) -> Result<Self> {
        assert!(!grids.is_empty(), "batch needs at least one grid");
        let channels = grids[0].channels();
        let stride = grids[0].stride;
        let quant_step = grids[0].quant_step;
        let total: usize = grids.iter().map(|g| g.len()).sum();
        let mut features = Array2::zeros((total, channels));
        let mut clouds = Vec::with_capacity(grids.len());
        let mut row = 0;
        for g in grids {
            if g.channels() != channels {
                return Err(Error::ChannelMismatch {
                    expected: channels,
                    got: g.channels(),
                });
            }
            features
                .slice_mut(ndarray::s![row..row + g.len(), ..])
                .assign(&g.features);
            row += g.len();
            clouds.push(g.coords.clone());
        }
        Ok(Self {
            clouds,
            features,
            stride,
            quant_step,
        })
    }

    /// Builds the output-side skeleton for a kernel map over this batch,
    /// carrying the given merged feature matrix.
    pub fn with_map_output(&self, km: &KernelMap, features: Array2<S>) -> Self {
        debug_assert_eq!(features.nrows(), km.n_out());
        Self {
            clouds: km.out_clouds().to_vec(),
            features,
            stride: km.out_stride(),
            quant_step: self.quant_step,
        }
    }

    pub fn clouds(&self) -> &[Vec<Coord>] {
        &self.clouds
    }

    pub fn features(&self) -> &Array2<S> {
        &self.features
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn quant_step(&self) -> f64 {
        self.quant_step
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_clouds(&self) -> usize {
        self.clouds.len()
    }

    /// Contiguous feature-row range of each cloud.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.clouds.len());
        let mut row = 0;
        for c in &self.clouds {
            out.push(row..row + c.len());
            row += c.len();
        }
        out
    }

    /// Splits the batch back into per-cloud grids.
    pub fn into_grids(self) -> Vec<SparseVoxelGrid<S>> {
        let segments = self.segments();
        self.clouds
            .iter()
            .zip(segments)
            .map(|(coords, range)| SparseVoxelGrid {
                coords: coords.clone(),
                features: self.features.slice(ndarray::s![range, ..]).to_owned(),
                stride: self.stride,
                quant_step: self.quant_step,
            })
            .collect()
    }
}

impl<S: Scalar> From<SparseVoxelGrid<S>> for VoxelBatch<S> {
    fn from(g: SparseVoxelGrid<S>) -> Self {
        Self {
            clouds: vec![g.coords],
            features: g.features,
            stride: g.stride,
            quant_step: g.quant_step,
        }
    }
}
