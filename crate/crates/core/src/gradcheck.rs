//! Finite-difference verification of parameter gradients.
//!
//! [`crate::autodiff::grad_check`] perturbs explicit input arrays; this
//! module perturbs entries of a [`ParamStore`] instead, which is how whole
//! layers and models are checked. The store is restored from a snapshot
//! around every evaluation, so stateful layers (batch norm running
//! statistics) see identical conditions each time.

use crate::autodiff::{GradCheckReport, NodeId, Tape};
use crate::error::Result;
use crate::params::{Binder, ParamStore};

/// Checks analytic parameter gradients of `forward` against central finite
/// differences. `forward` builds a fresh graph and returns the 1 x 1 loss;
/// it may mutate the store (running statistics), the checker rolls that
/// back. Relative error is |a - n| / max(1, |a|, |n|).
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    forward: F,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut ParamStore<f64>, &mut Tape<f64>, &mut Binder) -> Result<NodeId>,
{
    let snapshot = store.clone();
    let eval_loss = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let loss = forward(store, &mut tape, &mut binder)?;
        let v = tape.value(loss)[[0, 0]];
        Ok(v)
    };

    // Analytic pass: run once, backprop, copy out per-parameter gradients.
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let loss = forward(store, &mut tape, &mut binder)?;
    tape.backward(loss)?;
    let mut grads: Vec<Option<ndarray::Array2<f64>>> = vec![None; snapshot.len()];
    for (pid, node) in binder.bound() {
        if let Some(g) = tape.grad(node) {
            grads[pid.index()] = Some(g.clone());
        }
    }
    drop(tape);
    *store = snapshot.clone();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        n_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for pid in ids {
        if !store.is_trainable(pid) {
            continue;
        }
        let (rows, cols) = {
            let v = store.value(pid);
            (v.nrows(), v.ncols())
        };
        for r in 0..rows {
            for c in 0..cols {
                let orig = snapshot.value(pid)[[r, c]];
                store.value_mut(pid)[[r, c]] = orig + h;
                let f_plus = eval_loss(store)?;
                *store = snapshot.clone();
                store.value_mut(pid)[[r, c]] = orig - h;
                let f_minus = eval_loss(store)?;
                *store = snapshot.clone();
                let numeric = (f_plus - f_minus) / (2.0 * h);
                let analytic = grads[pid.index()]
                    .as_ref()
                    .map(|g| g[[r, c]])
                    .unwrap_or(0.0);
                let rel = (analytic - numeric).abs()
                    / f64::max(1.0, f64::max(analytic.abs(), numeric.abs()));
                report.n_checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (pid.index(), r, c);
                    report.analytic_at_worst = analytic;
                    report.numeric_at_worst = numeric;
                }
            }
        }
    }
    Ok(report)
}

/// One named check from [`primitive_suite`], [`layer_suite`], or
/// [`model_suite`].
#[derive(Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn dense(r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> ndarray::Array2<f64> {
    use rand::Rng;
    ndarray::Array2::from_shape_fn((rows, cols), |_| {
        // Keep magnitudes away from the relu/clamp kinks used below so the
        // central difference never straddles a non-smooth point.
        let v: f64 = r.gen_range(0.1..0.9);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn suite_grid(n: usize) -> crate::sparse::SparseVoxelGrid<f64> {
    let mut coords: Vec<[i32; 3]> = (0..n as i32).map(|i| [i, (i * i) % 3, i % 2]).collect();
    coords.sort_unstable();
    coords.dedup();
    let rows = coords.len();
    crate::sparse::SparseVoxelGrid::from_parts(
        coords,
        ndarray::Array2::ones((rows, 1)),
        1,
        0.01,
    )
    .unwrap()
}

/// Finite-difference checks for every tape primitive, one entry per op.
/// Inputs are small deterministic matrices; each loss is the sum of squared
/// outputs so every input entry influences the scalar.
pub fn primitive_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::autodiff::grad_check;
    use std::sync::Arc;

    let mut r = crate::rng::stream(seed, "init");
    let h = 1e-6;
    let mut entries = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| {
        entries.push(SuiteEntry { name, report });
    };

    let sq_sum = |tape: &mut Tape<f64>, y: NodeId| -> Result<NodeId> {
        let sq = tape.mul(y, y)?;
        Ok(tape.sum_all(sq))
    };

    let a34 = dense(&mut r, 3, 4);
    let b42 = dense(&mut r, 4, 2);
    push(
        "matmul",
        grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                sq_sum(tape, y)
            },
            &[a34.clone(), b42.clone()],
            h,
        )?,
    );
    push(
        "transpose",
        grad_check(
            |tape, ids| {
                let t = tape.transpose(ids[0]);
                let y = tape.matmul(ids[0], t)?;
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    let c34 = dense(&mut r, 3, 4);
    push(
        "add",
        grad_check(
            |tape, ids| {
                let y = tape.add(ids[0], ids[1])?;
                sq_sum(tape, y)
            },
            &[a34.clone(), c34.clone()],
            h,
        )?,
    );
    push(
        "sub",
        grad_check(
            |tape, ids| {
                let y = tape.sub(ids[0], ids[1])?;
                sq_sum(tape, y)
            },
            &[a34.clone(), c34.clone()],
            h,
        )?,
    );
    push(
        "mul",
        grad_check(
            |tape, ids| {
                let y = tape.mul(ids[0], ids[1])?;
                sq_sum(tape, y)
            },
            &[a34.clone(), c34.clone()],
            h,
        )?,
    );
    let row14 = dense(&mut r, 1, 4);
    push(
        "add_row",
        grad_check(
            |tape, ids| {
                let y = tape.add_row(ids[0], ids[1])?;
                sq_sum(tape, y)
            },
            &[a34.clone(), row14.clone()],
            h,
        )?,
    );
    push(
        "mul_row",
        grad_check(
            |tape, ids| {
                let y = tape.mul_row(ids[0], ids[1])?;
                sq_sum(tape, y)
            },
            &[a34.clone(), row14.clone()],
            h,
        )?,
    );
    push(
        "scale",
        grad_check(
            |tape, ids| {
                let y = tape.scale(ids[0], -1.7);
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    push(
        "add_scalar",
        grad_check(
            |tape, ids| {
                let y = tape.add_scalar(ids[0], 0.3);
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    push(
        "relu",
        grad_check(
            |tape, ids| {
                let y = tape.relu(ids[0]);
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    push(
        "clamp_min",
        grad_check(
            |tape, ids| {
                let y = tape.clamp_min(ids[0], 0.0);
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    let pos34 = a34.mapv(f64::abs);
    push(
        "sqrt",
        grad_check(
            |tape, ids| {
                let y = tape.sqrt(ids[0]);
                sq_sum(tape, y)
            },
            std::slice::from_ref(&pos34),
            h,
        )?,
    );
    push(
        "pow",
        grad_check(
            |tape, ids| {
                let y = tape.pow(ids[0], ids[1])?;
                sq_sum(tape, y)
            },
            &[pos34.clone(), ndarray::arr2(&[[2.3]])],
            h,
        )?,
    );
    push(
        "row_softmax",
        grad_check(
            |tape, ids| {
                let y = tape.row_softmax(ids[0]);
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    push(
        "col_softmax",
        grad_check(
            |tape, ids| {
                let y = tape.col_softmax(ids[0]);
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    let idx = Arc::new(vec![2u32, 0, 2, 1]);
    push(
        "gather_rows",
        grad_check(
            |tape, ids| {
                let y = tape.gather_rows(ids[0], idx.clone())?;
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    let scatter_idx = Arc::new(vec![1u32, 0, 1]);
    push(
        "scatter_add_rows",
        grad_check(
            |tape, ids| {
                let y = tape.scatter_add_rows(ids[0], scatter_idx.clone(), 2)?;
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    push(
        "slice_rows",
        grad_check(
            |tape, ids| {
                let y = tape.slice_rows(ids[0], 1, 2)?;
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    push(
        "mean_rows",
        grad_check(
            |tape, ids| {
                let y = tape.mean_rows(ids[0]);
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    push(
        "sum_all",
        grad_check(
            |tape, ids| {
                let y = tape.sum_all(ids[0]);
                sq_sum(tape, y)
            },
            std::slice::from_ref(&a34),
            h,
        )?,
    );
    let d24 = dense(&mut r, 2, 4);
    push(
        "concat_rows",
        grad_check(
            |tape, ids| {
                let y = tape.concat_rows(&[ids[0], ids[1]])?;
                sq_sum(tape, y)
            },
            &[a34.clone(), d24.clone()],
            h,
        )?,
    );

    let grid = suite_grid(5);
    let map = Arc::new(crate::sparse::build_kernel_map(&grid, 2, 1));
    let n = grid.len();
    let x = dense(&mut r, n, 2);
    let mut conv_inputs = vec![x.clone()];
    for _ in 0..map.offsets().len() {
        conv_inputs.push(dense(&mut r, 2, 3));
    }
    conv_inputs.push(dense(&mut r, 1, 3));
    push(
        "sp_conv",
        grad_check(
            |tape, ids| {
                let weights: Vec<NodeId> = ids[1..ids.len() - 1].to_vec();
                let y = tape.sp_conv(ids[0], &weights, Some(ids[ids.len() - 1]), map.clone())?;
                sq_sum(tape, y)
            },
            &conv_inputs,
            h,
        )?,
    );

    let bn_x = dense(&mut r, 4, 3);
    let gamma = dense(&mut r, 1, 3).mapv(|v| 1.0 + 0.2 * v);
    let beta = dense(&mut r, 1, 3);
    push(
        "batch_norm_train",
        grad_check(
            |tape, ids| {
                let (y, _) = tape.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
                sq_sum(tape, y)
            },
            &[bn_x.clone(), gamma.clone(), beta.clone()],
            h,
        )?,
    );
    let mean = ndarray::Array1::from_vec(vec![0.1, -0.2, 0.3]);
    let var = ndarray::Array1::from_vec(vec![1.2, 0.8, 1.5]);
    push(
        "batch_norm_eval",
        grad_check(
            |tape, ids| {
                let y = tape.batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5)?;
                sq_sum(tape, y)
            },
            &[bn_x, gamma, beta],
            h,
        )?,
    );

    Ok(entries)
}

/// Finite-difference parameter checks for every layer family, one entry per
/// layer. Mirrors the per-layer unit tests but is callable from the CLI and
/// the acceptance suite.
pub fn layer_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::asvt::AsvtBranch;
    use crate::csvt::CsvtBranch;
    use crate::layers::{BatchNorm, GemPool, Linear, ResBlock, SpConv};
    use crate::sparse::build_kernel_map;
    use std::sync::Arc;

    let mut r = crate::rng::stream(seed, "init");
    let h = 1e-6;
    let mut entries = Vec::new();

    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let lin = Linear::new(&mut store, &mut r, "lin", 3, 2, true);
        let x = dense(&mut r, 4, 3);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let x = tape.constant(x.clone());
                let y = lin.forward(store, binder, tape, x)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            h,
        )?;
        entries.push(SuiteEntry {
            name: "linear",
            report,
        });
    }
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let x = dense(&mut r, 5, 3);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let x = tape.constant(x.clone());
                let y = bn.forward(store, binder, tape, x, true)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            h,
        )?;
        entries.push(SuiteEntry {
            name: "batch_norm",
            report,
        });
    }
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let conv = SpConv::new(&mut store, &mut r, "conv", 2, 3, 3, 1, true);
        let grid = suite_grid(5);
        let map = Arc::new(build_kernel_map(&grid, 3, 1));
        let x = dense(&mut r, grid.len(), 2);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let x = tape.constant(x.clone());
                let y = conv.forward(store, binder, tape, x, &map)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            h,
        )?;
        entries.push(SuiteEntry {
            name: "sp_conv",
            report,
        });
    }
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let conv = SpConv::new(&mut store, &mut r, "convs", 2, 2, 2, 2, false);
        let grid = suite_grid(6);
        let map = Arc::new(build_kernel_map(&grid, 2, 2));
        let x = dense(&mut r, grid.len(), 2);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let x = tape.constant(x.clone());
                let y = conv.forward(store, binder, tape, x, &map)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            h,
        )?;
        entries.push(SuiteEntry {
            name: "sp_conv_strided",
            report,
        });
    }
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let block = ResBlock::new(&mut store, &mut r, "res", 2, 3);
        let grid = suite_grid(5);
        let map3 = Arc::new(build_kernel_map(&grid, 3, 1));
        let map1 = Arc::new(build_kernel_map(&grid, 1, 1));
        let x = dense(&mut r, grid.len(), 2);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let x = tape.constant(x.clone());
                let y = block.forward(store, binder, tape, x, &map3, &map1, true)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            h,
        )?;
        entries.push(SuiteEntry {
            name: "res_block",
            report,
        });
    }
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let gem = GemPool::new(&mut store, "gem", 2.3);
        let x = dense(&mut r, 4, 3).mapv(|v| v.abs() + 0.2);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let x = tape.constant(x.clone());
                let y = gem.forward(store, binder, tape, x)?;
                Ok(tape.sum_all(y))
            },
            h,
        )?;
        entries.push(SuiteEntry {
            name: "gem_pool",
            report,
        });
    }
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let branch = AsvtBranch::new(&mut store, &mut r, "asvt", 4, 2);
        let x = dense(&mut r, 5, 4);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let x = tape.constant(x.clone());
                let y = branch.forward(store, binder, tape, x)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            h,
        )?;
        entries.push(SuiteEntry {
            name: "asvt_branch",
            report,
        });
    }
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let branch = CsvtBranch::new(&mut store, &mut r, "csvt", 4, 2, false);
        let x = dense(&mut r, 5, 4);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let x = tape.constant(x.clone());
                let y = branch.forward(store, binder, tape, x)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            h,
        )?;
        entries.push(SuiteEntry {
            name: "csvt_branch",
            report,
        });
    }

    Ok(entries)
}

/// End-to-end finite-difference checks of each tiny model variant: the loss
/// is the squared norm of the batch descriptors, so every parameter that
/// can influence the output is exercised.
pub fn model_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::model::{ModelConfig, StemMaps, SvtNet, Variant};
    use crate::sparse::{voxelize, PointCloud, VoxelBatch};
    use rand::Rng;

    let mut entries = Vec::new();
    for (name, variant) in [
        ("tiny_svt", Variant::Svt),
        ("tiny_asvt", Variant::Asvt),
        ("tiny_csvt", Variant::Csvt),
    ] {
        let config = ModelConfig::tiny(variant);
        let (model, mut store) = SvtNet::build::<f64>(&config, seed);
        let mut r = crate::rng::stream(seed, "dataset.scene");
        let cloud = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<[f64; 3]> {
            (0..n)
                .map(|_| {
                    [
                        r.gen_range(-0.3..0.3),
                        r.gen_range(-0.3..0.3),
                        r.gen_range(-0.1..0.1),
                    ]
                })
                .collect()
        };
        let g1 = voxelize(
            &PointCloud::new(cloud(&mut r, 60)).unwrap(),
            config.quant_step,
        )?;
        let g2 = voxelize(
            &PointCloud::new(cloud(&mut r, 50)).unwrap(),
            config.quant_step,
        )?;
        let batch = VoxelBatch::from_grids(&[g1, g2])?;
        let maps = StemMaps::for_batch(&batch);
        let report = grad_check_params(
            &mut store,
            |store, tape, binder| {
                let out = model.forward(store, binder, tape, &batch, &maps, true)?;
                let sq = tape.mul(out.descriptors, out.descriptors)?;
                let sum = tape.sum_all(sq);
                // An unscaled squared-descriptor sum reaches ~1e6, and the
                // cancellation noise of (f+ - f-) at that magnitude drowns
                // near-zero gradients; scaling the loss shrinks that noise
                // while relative error on steep coordinates is unaffected.
                Ok(tape.scale(sum, 1e-3))
            },
            // Large enough to keep roundoff out of the quotient, small
            // enough that curvature on the steepest coordinates stays two
            // orders below the 1e-3 model tolerance.
            1e-6,
        )?;
        entries.push(SuiteEntry { name, report });
    }
    Ok(entries)
}
