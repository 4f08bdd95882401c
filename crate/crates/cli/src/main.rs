//! Command-line driver: run experiments from a JSON config, regenerate the
//! numeric fixtures the tests rely on, and benchmark the cluster-tiled
//! matrix multiply.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsparse::codec::{extract_clusters, masked_matmul_bench};
use fedsparse::config::load_config;
use fedsparse::grid::{build_grid, enumerate_exact, run_spmp, seeded_unaries};
use fedsparse::net::{gradient_check, NetArch};
use fedsparse::prior::{HierPrior, LayerShape};
use fedsparse::rng::stream;
use fedsparse::server::{support_log_masses, support_objective};
use fedsparse::sim::run_experiment;
use fedsparse::special::{sigmoid, GammaParams};
use rand::Rng;

#[derive(Parser)]
#[command(name = "fedsparse", version, about = "Federated sparse-model simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file.
    Run(RunArgs),
    /// Regenerate the derived fixtures used by the test suite.
    Oracle(OracleArgs),
    /// Benchmark dense versus cluster-tiled matrix multiplication.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config (JSON).
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (env FEDSPARSE_OUT overrides the default).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(subcommand)]
    kind: OracleKind,
}

#[derive(Subcommand)]
enum OracleKind {
    /// Exact grid marginals by enumeration, next to the loopy estimates.
    EnumerateGrid {
        #[arg(long, default_value_t = 3)]
        rows: usize,
        #[arg(long, default_value_t = 3)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference audit of the reparameterized gradients.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        states: usize,
        #[arg(long, default_value_t = 40)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form support update versus a 1001-point grid search.
    KlGridSearch {
        #[arg(long, default_value_t = 20)]
        states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Mask file: lines of 0/1 characters. Mutually exclusive with the
    /// generator options below.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    rows: usize,
    #[arg(long, default_value_t = 512)]
    cols: usize,
    /// Number of square clusters to place.
    #[arg(long, default_value_t = 21)]
    clusters: usize,
    /// Side length of each placed cluster.
    #[arg(long, default_value_t = 48)]
    cluster_size: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append the timing row to this CSV (created with a header if absent).
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // Input problems (missing files, bad configs) exit 2, everything
            // else exits 1.
            let msg = format!("{e:#}");
            if msg.contains("io error") || msg.contains("configuration error") {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("FEDSPARSE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = Some(threads);
    }
    let bundle = run_experiment(&cfg)?;
    let dir = out_dir(args.out);
    std::fs::create_dir_all(&dir)?;
    let stem = format!("{}_seed{}", cfg.method.label(), cfg.seed);
    let csv_path = dir.join(format!("{stem}_results.csv"));
    let json_path = dir.join(format!("{stem}_summary.json"));
    bundle.write_csv(&csv_path)?;
    bundle.write_summary(&json_path)?;
    println!("results: {}", csv_path.display());
    println!("summary: {}", json_path.display());
    println!(
        "final accuracy {:.4}, sparsity {:.4}, bits up {} down {}",
        bundle.summary.final_acc,
        bundle.summary.final_sparsity,
        bundle.summary.total_bits_up,
        bundle.summary.total_bits_down,
    );
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> anyhow::Result<()> {
    match args.kind {
        OracleKind::EnumerateGrid { rows, cols, seed } => {
            anyhow::ensure!(rows * cols <= 20, "refusing enumeration beyond 20 nodes");
            let shape = LayerShape::new(rows, cols)?;
            let prior = HierPrior::default();
            let unaries = seeded_unaries(shape, seed);
            let grid = build_grid(shape, &prior, unaries.clone())?;
            let exact = enumerate_exact(&grid)?;
            let loopy = run_spmp(&grid, 200, 0.5, 1e-10);
            println!("node,unary_p1,exact_p1,loopy_p1,abs_err");
            let mut worst = 0.0f64;
            for (n, (e, l)) in exact.iter().zip(&loopy.marginals).enumerate() {
                let err = (e.p_active - l.p_active).abs();
                worst = worst.max(err);
                println!(
                    "{n},{},{},{},{err}",
                    unaries[n].p_active(),
                    e.p_active,
                    l.p_active
                );
            }
            println!("# max_abs_err {worst} converged {}", loopy.converged);
        }
        OracleKind::GradCheck { states, coords, seed } => {
            let report = gradient_check(&NetArch::default(), states, coords, 8, seed);
            println!(
                "states {} coords_checked {} max_rel_error {:.3e}",
                report.states, report.coords_checked, report.max_rel_error
            );
        }
        OracleKind::KlGridSearch { states, seed } => {
            let mut rng = stream(seed, &[]);
            println!("state,pi,shape,rate,closed_form,grid_argmin,objective_gap");
            for s in 0..states {
                let prior = HierPrior {
                    a: rng.random_range(0.1..3.0),
                    b: rng.random_range(0.05..3.0),
                    a_bar: rng.random_range(2.0..400.0),
                    b_bar: rng.random_range(0.01..2.0),
                    slab_ratio_max: f64::INFINITY,
                    spike_ratio_min: 0.0,
                    ..HierPrior::default()
                };
                let g = GammaParams {
                    shape: rng.random_range(0.5..50.0),
                    rate: rng.random_range(0.05..20.0),
                };
                let pi = rng.random_range(0.01..0.99);
                let (ln_c1, ln_c2) = support_log_masses(&prior, pi, g);
                let closed = sigmoid(ln_c1 - ln_c2);
                let mut best = (f64::INFINITY, 0.0);
                for i in 0..=1000 {
                    let p = i as f64 / 1000.0;
                    let j = support_objective(p, ln_c1, ln_c2);
                    if j < best.0 {
                        best = (j, p);
                    }
                }
                let gap = support_objective(closed, ln_c1, ln_c2) - best.0;
                println!("{s},{pi},{},{},{closed},{},{gap}", g.shape, g.rate, best.1);
            }
        }
    }
    Ok(())
}

fn load_mask_file(path: &Path) -> anyhow::Result<ndarray::Array2<bool>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<bool>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .chars()
                .filter(|c| !c.is_whitespace() && *c != ',')
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => anyhow::bail!("mask file may only contain 0/1, found '{other}'"),
                })
                .collect()
        })
        .collect::<anyhow::Result<_>>()?;
    anyhow::ensure!(!rows.is_empty(), "mask file is empty");
    let cols = rows[0].len();
    anyhow::ensure!(
        rows.iter().all(|r| r.len() == cols),
        "mask rows have inconsistent lengths"
    );
    Ok(ndarray::Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j]))
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    let mask = match &args.mask {
        Some(path) => load_mask_file(path)?,
        None => {
            // Place non-overlapping square clusters at seeded positions.
            let mut mask = ndarray::Array2::from_elem((args.rows, args.cols), false);
            let mut rng = stream(args.seed, &[0xbe]);
            let side = args.cluster_size;
            anyhow::ensure!(
                side <= args.rows && side <= args.cols,
                "cluster larger than matrix"
            );
            let mut placed = 0;
            let mut attempts = 0;
            while placed < args.clusters && attempts < 10_000 {
                attempts += 1;
                let r = rng.random_range(0..=args.rows - side);
                let c = rng.random_range(0..=args.cols - side);
                let mut free = true;
                'scan: for i in r..r + side {
                    for j in c..c + side {
                        if mask[[i, j]] {
                            free = false;
                            break 'scan;
                        }
                    }
                }
                if free {
                    for i in r..r + side {
                        for j in c..c + side {
                            mask[[i, j]] = true;
                        }
                    }
                    placed += 1;
                }
            }
            anyhow::ensure!(
                placed == args.clusters,
                "could not place {} clusters of side {side}",
                args.clusters
            );
            mask
        }
    };
    let active = mask.iter().filter(|&&b| b).count();
    let density = active as f64 / mask.len() as f64;
    let cm = extract_clusters(&mask, 3);
    let report = masked_matmul_bench(&cm, args.batch, args.reps, args.seed)?;
    println!(
        "mask {}x{} density {:.4} clusters {} singletons {}",
        mask.nrows(),
        mask.ncols(),
        density,
        cm.clusters.len(),
        cm.singletons.len()
    );
    println!(
        "dense {:.6}s clustered {:.6}s speedup {:.2}x max_abs_diff {:.2e}",
        report.dense_secs,
        report.clustered_secs,
        report.speedup(),
        report.max_abs_diff
    );
    if let Some(csv) = &args.csv {
        let header =
            "rows,cols,density,batch,reps,dense_secs,clustered_secs,speedup,max_abs_diff\n";
        let mut line = String::new();
        if !csv.exists() {
            line.push_str(header);
        }
        line.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            mask.nrows(),
            mask.ncols(),
            density,
            args.batch,
            args.reps,
            report.dense_secs,
            report.clustered_secs,
            report.speedup(),
            report.max_abs_diff
        ));
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(csv)?;
        f.write_all(line.as_bytes())?;
        println!("appended timing row to {}", csv.display());
    }
    Ok(())
}
