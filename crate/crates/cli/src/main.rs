//! Command-line front end: synthetic data generation, training, descriptor
//! embedding, retrieval evaluation, parameter audits, and diagnostic dumps.
//!
//! Every command exits 0 on success and nonzero with a single `error: ...`
//! line on stderr otherwise. All randomness flows from `--seed` through
//! named sub-streams, so outputs are byte-identical across runs. Logging
//! verbosity is controlled by `SVT_LOG={error,info,debug}`.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};

use config::Settings;
use svtnet::gradcheck::{layer_suite, model_suite, primitive_suite, SuiteEntry};
use svtnet::io::{self, DescriptorSet, IndexRow};
use svtnet::model::{SvtNet, Variant};
use svtnet::params::ParamStore;
use svtnet::retrieval::{self, MATCH_RADIUS, SCALE_NOTE};
use svtnet::sparse::{voxelize, PointCloud, SparseVoxelGrid};
use svtnet::synth::{generate, SynthConfig};
use svtnet::training::{train_with_hook, TrainItem};
use svtnet::{checkpoint, Real};

#[derive(Parser)]
#[command(
    name = "svtnet",
    about = "Sparse voxel transformer place recognition",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with an index CSV.
    GenSynth(GenSynthArgs),
    /// Voxelize one cloud and report (or dump) the occupied coordinates.
    Voxelize(VoxelizeArgs),
    /// Train a model on an indexed dataset.
    Train(TrainArgs),
    /// Embed indexed clouds into a descriptor CSV with a trained model.
    Embed(EmbedArgs),
    /// Evaluate query descriptors against a database.
    Eval(EvalArgs),
    /// Print the per-block parameter table.
    Params(ParamsArgs),
    /// Run the finite-difference gradient suites.
    CheckGrads(CheckGradsArgs),
    /// Dump the atom branch's attention matrix and attended features.
    DumpAttention(DumpArgs),
    /// Dump per-voxel token assignments of the cluster branch.
    DumpTokens(DumpTokensArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output directory for clouds/ and index.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of distinct scenes.
    #[arg(long, default_value_t = 30)]
    scenes: usize,
    /// Jittered copies per scene; the last copy is tagged `test`.
    #[arg(long, default_value_t = 3)]
    copies: usize,
    /// Points per cloud (at least 64).
    #[arg(long, default_value_t = 4096)]
    points: usize,
    /// World-grid spacing between scene positions in meters.
    #[arg(long, default_value_t = 60.0)]
    spacing: f64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct VoxelizeArgs {
    /// Point cloud file (.bin little-endian f64 triples, or .txt).
    #[arg(long)]
    cloud: PathBuf,
    /// Voxel edge length.
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Optional output file for `i j k` coordinate lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset index CSV.
    #[arg(long)]
    index: PathBuf,
    /// Output directory for checkpoints and the epoch log.
    #[arg(long)]
    out: PathBuf,
    /// Model variant.
    #[arg(long, value_parser = ["svt", "asvt", "csvt"])]
    variant: Option<String>,
    /// Key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for init, batching, and augmentation streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict training to rows with this split tag (default: all rows).
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Dataset index CSV.
    #[arg(long)]
    index: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output descriptor CSV.
    #[arg(long)]
    out: PathBuf,
    /// Only embed rows with this split tag.
    #[arg(long)]
    split: Option<String>,
    /// Threads embedding clouds concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Database descriptor CSV.
    #[arg(long)]
    db: PathBuf,
    /// Query descriptor CSVs, one evaluation row each.
    #[arg(long, num_args = 1.., required = true)]
    queries: Vec<PathBuf>,
    /// Directory for recall curve CSVs (one per query set).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threads evaluating query sets concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ParamsArgs {
    /// Model variant.
    #[arg(long, value_parser = ["svt", "asvt", "csvt"])]
    variant: Option<String>,
    /// Key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CheckGradsArgs {
    /// Only run the per-layer checks.
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpArgs {
    /// Trained checkpoint (must carry the atom branch).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Point cloud file.
    #[arg(long)]
    cloud: PathBuf,
    /// Output directory for attention.csv and attended.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpTokensArgs {
    /// Trained checkpoint (must carry the cluster branch).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Point cloud file.
    #[arg(long)]
    cloud: PathBuf,
    /// Output file for `i j k token_id` lines (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let level = std::env::var("SVT_LOG").unwrap_or_else(|_| "info".to_string());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .format_target(false)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print in full; usage errors are
            // reduced to their first line so failures stay one-line.
            if e.use_stderr() {
                let text = e.to_string();
                eprintln!("{}", text.lines().next().unwrap_or("error: invalid usage"));
                std::process::exit(2);
            }
            e.exit();
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(args) => gen_synth(args),
        Command::Voxelize(args) => voxelize_cmd(args),
        Command::Train(args) => train_cmd(args),
        Command::Embed(args) => embed_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Params(args) => params_cmd(args),
        Command::CheckGrads(args) => check_grads(args),
        Command::DumpAttention(args) => dump_attention(args),
        Command::DumpTokens(args) => dump_tokens(args),
    }
}

/// Resolves settings as defaults, then the config file, then explicit flags.
fn resolve_settings(
    variant: &Option<String>,
    config: &Option<PathBuf>,
    seed: Option<u64>,
) -> Result<Settings> {
    let mut settings = Settings::new(Variant::Svt);
    if let Some(path) = config {
        settings.apply_file(path)?;
    }
    if let Some(v) = variant {
        settings.model.variant = v.parse::<Variant>()?;
    }
    if let Some(s) = seed {
        settings.train.seed = s;
    }
    Ok(settings)
}

fn gen_synth(args: GenSynthArgs) -> Result<()> {
    if args.points < 64 {
        bail!("points per cloud must be at least 64, got {}", args.points);
    }
    if args.scenes == 0 || args.copies == 0 {
        bail!("scenes and copies must both be positive");
    }
    if args.out.exists() {
        let occupied = std::fs::read_dir(&args.out)
            .with_context(|| format!("cannot read {}", args.out.display()))?
            .next()
            .is_some();
        if occupied && !args.force {
            bail!(
                "output directory {} is not empty (pass --force to overwrite)",
                args.out.display()
            );
        }
    }
    let clouds_dir = args.out.join("clouds");
    std::fs::create_dir_all(&clouds_dir)
        .with_context(|| format!("cannot create {}", clouds_dir.display()))?;

    let config = SynthConfig {
        n_scenes: args.scenes,
        copies_per_scene: args.copies,
        points_per_cloud: args.points,
        spacing: args.spacing,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let items = generate(&config);
    let mut rows = Vec::with_capacity(items.len());
    for item in &items {
        let name = format!("{}.bin", item.id());
        io::save_cloud_bin_file(clouds_dir.join(&name), &item.points)?;
        let split = if item.copy as usize == args.copies - 1 {
            "test"
        } else {
            "train"
        };
        rows.push(IndexRow {
            path: format!("clouds/{name}"),
            northing: item.position[0],
            easting: item.position[1],
            split: split.to_string(),
            run: item.copy.to_string(),
        });
    }
    let index_path = args.out.join("index.csv");
    io::save_index_file(&index_path, &rows)?;
    println!(
        "wrote {} clouds ({} scenes x {} copies) and {}",
        items.len(),
        args.scenes,
        args.copies,
        index_path.display()
    );
    Ok(())
}

fn voxelize_cmd(args: VoxelizeArgs) -> Result<()> {
    if args.step <= 0.0 {
        bail!("step must be positive, got {}", args.step);
    }
    let points = io::load_cloud_file(&args.cloud)
        .with_context(|| format!("cannot load {}", args.cloud.display()))?;
    let cloud = PointCloud::new(points)?;
    let grid: SparseVoxelGrid<Real> = voxelize(&cloud, args.step)?;
    println!(
        "{} points -> {} occupied voxels at step {}",
        cloud.len(),
        grid.len(),
        args.step
    );
    if let Some(out) = &args.out {
        let mut text = String::new();
        for c in grid.coords() {
            text.push_str(&format!("{} {} {}\n", c[0], c[1], c[2]));
        }
        std::fs::write(out, text).with_context(|| format!("cannot write {}", out.display()))?;
        println!("wrote coordinates to {}", out.display());
    }
    Ok(())
}

/// Loads index rows, optionally restricted to one split tag.
fn load_rows(index: &Path, split: Option<&str>) -> Result<Vec<IndexRow>> {
    let mut rows = io::load_index_file(index)
        .with_context(|| format!("cannot load index {}", index.display()))?;
    if let Some(tag) = split {
        rows.retain(|r| r.split == tag);
        if rows.is_empty() {
            bail!("no index rows carry split tag {tag:?}");
        }
    }
    if rows.is_empty() {
        bail!("index {} has no rows", index.display());
    }
    Ok(rows)
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let settings = resolve_settings(&args.variant, &args.config, args.seed)?;
    let rows = load_rows(&args.index, args.split.as_deref())?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;

    let mut items = Vec::with_capacity(rows.len());
    for row in &rows {
        let path = io::resolve_cloud_path(&args.index, row);
        let points =
            io::load_cloud_file(&path).with_context(|| format!("cannot load {}", path.display()))?;
        items.push(TrainItem::with_points(
            points,
            settings.model.quant_step,
            row.position(),
        )?);
    }
    log::info!(
        "training {} on {} clouds for {} epochs",
        settings.model.variant,
        items.len(),
        settings.train.epochs
    );

    let (model, mut store) = SvtNet::build::<Real>(&settings.model, settings.train.seed);
    let out = args.out.clone();
    let model_config = settings.model.clone();
    let history = train_with_hook(&model, &mut store, &items, &settings.train, |stats, store| {
        checkpoint::save_file(
            &out.join(format!("epoch_{:03}.ckpt", stats.epoch)),
            &model_config,
            store,
        )
    })?;

    let final_path = args.out.join("final.ckpt");
    checkpoint::save_file(&final_path, &settings.model, &store)?;

    let mut log_text = String::from("epoch,loss,active_fraction,batch_size,lr\n");
    for s in &history {
        log_text.push_str(&format!(
            "{},{:.9},{:.6},{},{}\n",
            s.epoch, s.mean_loss, s.active_ratio, s.batch_size, s.lr
        ));
    }
    let log_path = args.out.join("train_log.csv");
    std::fs::write(&log_path, log_text)
        .with_context(|| format!("cannot write {}", log_path.display()))?;

    let last = history.last().expect("training ran at least one epoch");
    println!(
        "trained {} epochs ({} final loss {:.6}); wrote {} and {}",
        history.len(),
        settings.model.variant,
        last.mean_loss,
        final_path.display(),
        log_path.display()
    );
    Ok(())
}

/// Embeds clouds into descriptor rows, fanning out over `workers` threads.
/// Each thread owns a store clone, so eval-mode statistics are shared and
/// results are identical for any worker count.
fn embed_clouds(
    model: &SvtNet,
    store: &ParamStore<Real>,
    clouds: &[Vec<[f64; 3]>],
    quant_step: f64,
    workers: usize,
) -> Result<Array2<Real>> {
    fn embed_one(
        model: &SvtNet,
        store: &mut ParamStore<Real>,
        points: &[[f64; 3]],
        quant_step: f64,
    ) -> Result<Array1<Real>> {
        let cloud = PointCloud::new(points.to_vec())?;
        let grid = voxelize(&cloud, quant_step)?;
        Ok(model.embed(store, &grid)?)
    }

    let dim = model.config().feature_dim;
    let mut out = Array2::zeros((clouds.len(), dim));
    let workers = workers.clamp(1, clouds.len().max(1));
    if workers == 1 {
        let mut store = store.clone();
        for (i, points) in clouds.iter().enumerate() {
            let row = embed_one(model, &mut store, points, quant_step)
                .with_context(|| format!("embedding cloud {i}"))?;
            out.row_mut(i).assign(&row);
        }
        return Ok(out);
    }

    type WorkerRows = Result<Vec<(usize, Array1<Real>)>>;
    let chunk = clouds.len().div_ceil(workers);
    let results: Vec<WorkerRows> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, batch) in clouds.chunks(chunk).enumerate() {
            let model = model.clone();
            let mut store = store.clone();
            handles.push(scope.spawn(move || {
                let start = w * chunk;
                let mut rows = Vec::with_capacity(batch.len());
                for (off, points) in batch.iter().enumerate() {
                    let i = start + off;
                    let row = embed_one(&model, &mut store, points, quant_step)
                        .with_context(|| format!("embedding cloud {i}"))?;
                    rows.push((i, row));
                }
                Ok(rows)
            }));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("embed worker panicked"))
            .collect()
    });
    for result in results {
        for (i, row) in result? {
            out.row_mut(i).assign(&row);
        }
    }
    Ok(out)
}

fn embed_cmd(args: EmbedArgs) -> Result<()> {
    let (model, store) = checkpoint::load_file::<Real>(&args.checkpoint, None)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let rows = load_rows(&args.index, args.split.as_deref())?;

    let mut clouds = Vec::with_capacity(rows.len());
    for row in &rows {
        let path = io::resolve_cloud_path(&args.index, row);
        clouds.push(
            io::load_cloud_file(&path)
                .with_context(|| format!("cannot load {}", path.display()))?,
        );
    }
    let descriptors = embed_clouds(
        &model,
        &store,
        &clouds,
        model.config().quant_step,
        args.workers,
    )?;
    let set = DescriptorSet {
        ids: rows.iter().map(|r| r.path.clone()).collect(),
        descriptors,
        positions: rows.iter().map(|r| r.position()).collect(),
    };
    io::save_descriptors_file(&args.out, &set)?;
    println!(
        "embedded {} clouds ({} variant, d={}) into {}",
        set.len(),
        model.config().variant,
        model.config().feature_dim,
        args.out.display()
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let db = io::load_descriptors_file(&args.db)
        .with_context(|| format!("cannot load database {}", args.db.display()))?;
    if db.is_empty() {
        bail!("database {} holds no descriptors", args.db.display());
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }

    // Recall curves cover the standard plot range: the top 25 ranks, or the
    // whole database when it is smaller.
    let max_n = db.len().min(25);
    let eval_one = |path: &Path| -> Result<retrieval::EvalRow> {
        let tag = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let queries = io::load_descriptors_file(path)
            .with_context(|| format!("cannot load queries {}", path.display()))?;
        if queries.is_empty() {
            bail!("query set {} holds no descriptors", path.display());
        }
        if queries.descriptors.ncols() != db.descriptors.ncols() {
            bail!(
                "descriptor width mismatch: database d={}, {} d={}",
                db.descriptors.ncols(),
                path.display(),
                queries.descriptors.ncols()
            );
        }
        let row = retrieval::evaluate(
            &tag,
            &queries.descriptors,
            &queries.positions,
            &db.descriptors,
            &db.positions,
            MATCH_RADIUS,
        );
        if let Some(dir) = &args.out {
            let curve = retrieval::recall_curve(
                &queries.descriptors,
                &queries.positions,
                &db.descriptors,
                &db.positions,
                max_n,
                MATCH_RADIUS,
            );
            io::save_curve_file(dir.join(format!("curve_{tag}.csv")), &curve)?;
        }
        Ok(row)
    };

    let workers = args.workers.clamp(1, args.queries.len());
    let rows: Vec<retrieval::EvalRow> = if workers == 1 {
        args.queries
            .iter()
            .map(|p| eval_one(p))
            .collect::<Result<_>>()?
    } else {
        let chunk = args.queries.len().div_ceil(workers);
        let nested: Vec<Result<Vec<retrieval::EvalRow>>> = std::thread::scope(|scope| {
            args.queries
                .chunks(chunk)
                .map(|batch| {
                    let eval_one = &eval_one;
                    scope.spawn(move || batch.iter().map(|p| eval_one(p)).collect())
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect()
        });
        let mut rows = Vec::new();
        for batch in nested {
            rows.extend(batch?);
        }
        rows
    };

    println!("{}", retrieval::format_table(&rows));
    println!();
    println!("{SCALE_NOTE}");
    Ok(())
}

fn params_cmd(args: ParamsArgs) -> Result<()> {
    let settings = resolve_settings(&args.variant, &args.config, None)?;
    let (model, store) = SvtNet::build::<Real>(&settings.model, 0);
    println!("variant {}", settings.model.variant);
    println!();
    print!("{}", format_param_table(&model.parameter_counts(&store)));
    Ok(())
}

fn format_param_table(counts: &[(String, usize)]) -> String {
    let name_width = counts
        .iter()
        .map(|(n, _)| n.len())
        .chain(std::iter::once("block".len()))
        .max()
        .unwrap_or(5);
    let count_width = counts
        .iter()
        .map(|(_, c)| c.to_string().len())
        .chain(std::iter::once("parameters".len()))
        .max()
        .unwrap_or(10);
    let mut out = format!("{:<name_width$}  {:>count_width$}\n", "block", "parameters");
    for (name, count) in counts {
        out.push_str(&format!("{name:<name_width$}  {count:>count_width$}\n"));
    }
    out
}

fn check_grads(args: CheckGradsArgs) -> Result<()> {
    let mut failures = 0usize;
    let mut total = 0usize;
    let mut report = |kind: &str, entries: Vec<SuiteEntry>, tolerance: f64| {
        for e in entries {
            total += 1;
            let ok = e.report.max_rel_err < tolerance;
            if !ok {
                failures += 1;
            }
            println!(
                "{} {:<9} {:<18} max_rel_err {:.3e} (tolerance {:.0e}, {} entries)",
                if ok { "ok  " } else { "FAIL" },
                kind,
                e.name,
                e.report.max_rel_err,
                tolerance,
                e.report.n_checked
            );
        }
    };

    if args.tiny {
        report("layer", layer_suite(args.seed)?, 1e-4);
    } else {
        report("primitive", primitive_suite(args.seed)?, 1e-5);
        report("layer", layer_suite(args.seed)?, 1e-4);
        report("model", model_suite(args.seed)?, 1e-3);
    }
    if failures > 0 {
        bail!("{failures} of {total} gradient checks exceeded tolerance");
    }
    println!("all {total} gradient checks passed");
    Ok(())
}

fn load_model_and_grid(
    checkpoint_path: &Path,
    cloud_path: &Path,
) -> Result<(SvtNet, ParamStore<Real>, SparseVoxelGrid<Real>)> {
    let (model, store) = checkpoint::load_file::<Real>(checkpoint_path, None)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint_path.display()))?;
    let points = io::load_cloud_file(cloud_path)
        .with_context(|| format!("cannot load {}", cloud_path.display()))?;
    let grid = voxelize(&PointCloud::new(points)?, model.config().quant_step)?;
    Ok((model, store, grid))
}

fn dump_attention(args: DumpArgs) -> Result<()> {
    let (model, mut store, grid) = load_model_and_grid(&args.checkpoint, &args.cloud)?;
    let (coords, attention, attended) = model.attention_trace(&mut store, &grid)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;

    let mut s_text = String::new();
    for row in attention.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        s_text.push_str(&cells.join(","));
        s_text.push('\n');
    }
    let s_path = args.out.join("attention.csv");
    std::fs::write(&s_path, s_text)
        .with_context(|| format!("cannot write {}", s_path.display()))?;

    let mut f_text = String::from("i,j,k");
    for c in 0..attended.ncols() {
        f_text.push_str(&format!(",f{c}"));
    }
    f_text.push('\n');
    for (coord, row) in coords.iter().zip(attended.rows()) {
        f_text.push_str(&format!("{},{},{}", coord[0], coord[1], coord[2]));
        for v in row {
            f_text.push_str(&format!(",{v:.17e}"));
        }
        f_text.push('\n');
    }
    let f_path = args.out.join("attended.csv");
    std::fs::write(&f_path, f_text)
        .with_context(|| format!("cannot write {}", f_path.display()))?;

    println!(
        "wrote {}x{} attention and {} attended feature rows to {}",
        attention.nrows(),
        attention.ncols(),
        coords.len(),
        args.out.display()
    );
    Ok(())
}

fn dump_tokens(args: DumpTokensArgs) -> Result<()> {
    let (model, mut store, grid) = load_model_and_grid(&args.checkpoint, &args.cloud)?;
    let (coords, grouping) = model.grouping_trace(&mut store, &grid)?;

    let mut text = String::new();
    for (coord, row) in coords.iter().zip(grouping.rows()) {
        // Ties break toward the lowest token id.
        let mut best = 0usize;
        for (t, &w) in row.iter().enumerate() {
            if w > row[best] {
                best = t;
            }
        }
        text.push_str(&format!("{} {} {} {}\n", coord[0], coord[1], coord[2], best));
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, text)
                .with_context(|| format!("cannot write {}", path.display()))?;
            println!("wrote {} token assignments to {}", coords.len(), path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_table_is_aligned() {
        let counts = vec![
            ("conv0".to_string(), 4064),
            ("total".to_string(), 937129),
        ];
        let table = format_param_table(&counts);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("block"));
        assert!(lines[1].ends_with("4064"));
        assert!(lines[2].ends_with("937129"));
        let widths: Vec<usize> = lines.iter().map(|l| l.len()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
    }
}
