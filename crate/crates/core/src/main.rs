use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patt::autodiff::{load_checkpoint, GradCheckOptions};
use patt::data::{load_dataset, parse_config, save_dataset, synth_dataset, Config};
use patt::eval::{bench_cloud, bench_search, connectivity, evaluate_dataset, EvalConfig, Matcher, BENCH_CSV_HEADER};
use patt::gradsuite::{check_operator, select_operators};
use patt::model::{stage_windows, SearchMethod, StageConfig, Task};
use patt::train::{infer_task, train_loop};
use patt::Error;

const EXIT_CHECK: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "patt", version, about = "Point-attention segmentation and detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Seg,
    Det,
    Multi,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Seg => Task::Seg,
            TaskArg::Det => Task::Det,
            TaskArg::Multi => Task::Multi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MatcherArg {
    Dist,
    Iou,
}

#[derive(Clone, Copy, ValueEnum)]
enum SearchArg {
    Vq,
    Knn,
}

impl From<SearchArg> for SearchMethod {
    fn from(s: SearchArg) -> Self {
        match s {
            SearchArg::Vq => SearchMethod::Voxel,
            SearchArg::Knn => SearchMethod::Knn,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch; writes checkpoints and loss.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segmentation and detection metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the configuration saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dist")]
        matcher: MatcherArg,
        /// Meters for `dist`, minimum BEV IoU for `iou`.
        #[arg(long)]
        match_threshold: Option<f64>,
        #[arg(long, default_value_t = 0.2)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.4)]
        nms_iou: f64,
        /// Directory for metrics.csv and confusion.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Hop counts over the neighbor-window graph of each scene.
    Connectivity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        window_size: usize,
        #[arg(long, default_value_t = 0.4)]
        radius: f64,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, value_enum, default_value = "vq")]
        search: SearchArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Neighbor-search timing with brute-force correctness checks.
    Bench {
        /// One or more methods, comma separated.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "vq,knn")]
        search: Vec<SearchArg>,
        /// One or more cloud sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "10000")]
        points: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Points per cubic meter of the random slab.
        #[arg(long, default_value_t = 10.0)]
        density: f64,
        /// Queries checked against brute force per row.
        #[arg(long, default_value_t = 200)]
        checks: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

enum Failure {
    Check(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Run = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Lib(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(path: Option<&Path>) -> Result<Config, Error> {
    path.map_or_else(|| Ok(Config::default()), parse_config)
}

/// Resolved settings go to stderr so stdout stays machine-readable.
fn echo(lines: &str) {
    for l in lines.lines() {
        eprintln!("# {l}");
    }
}

fn emit(text: &str, out: Option<&Path>, name: &str) -> Run {
    print!("{text}");
    if let Some(d) = out {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
        let p = d.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

fn write_echo(dir: &Path, cfg: &Config) -> Run {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml_string()).map_err(|e| io_err(&p, e))
}

fn run(cli: Cli) -> Run {
    match cli.cmd {
        Cmd::Synth { config, seed, count, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
                cfg.train.seed = s;
            }
            echo(&cfg.to_toml_string());
            let scenes = synth_dataset(&cfg.synth, count)?;
            save_dataset(&out, &scenes)?;
            write_echo(&out, &cfg)?;
            eprintln!("wrote {count} scenes to {}", out.display());
        }
        Cmd::Train { config, data, out, task, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(t) = task {
                cfg.train.task = t.into();
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            echo(&cfg.to_toml_string());
            let scenes = load_dataset(&data)?;
            write_echo(&out, &cfg)?;
            let o = train_loop(&scenes, &cfg.model, &cfg.train, Some(&out))?;
            if let Some(last) = o.log.last() {
                eprintln!("{} steps, final loss {:.6}", o.log.len(), last.total);
            }
            for c in &o.checkpoints {
                println!("{}", c.display());
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            config,
            matcher,
            match_threshold,
            score_threshold,
            nms_iou,
            out,
            seed: _,
        } => {
            let cfg_path = config.unwrap_or_else(|| ckpt.with_extension("toml"));
            let cfg = parse_config(&cfg_path)?;
            let matcher = match matcher {
                MatcherArg::Dist => Matcher::CenterDist(match_threshold.unwrap_or(2.0)),
                MatcherArg::Iou => Matcher::Iou(match_threshold.unwrap_or(0.5)),
            };
            let ecfg = EvalConfig {
                score_threshold,
                nms_iou,
                matcher,
            };
            echo(&cfg.to_toml_string());
            echo(&format!("{ecfg:?}"));
            let store = load_checkpoint(&ckpt)?;
            let task = infer_task(&store)?;
            let scenes = load_dataset(&data)?;
            let crop = (cfg.train.crop_min, cfg.train.crop_max);
            let report = evaluate_dataset(&store, &cfg.model, task, &scenes, crop, &ecfg)?;
            emit(&report.to_csv(), out.as_deref(), "metrics.csv")?;
            if let (Some(cm), Some(d)) = (&report.confusion, out.as_deref()) {
                let k = cm.num_classes();
                let mut s = String::from("gt\\pred");
                for c in 0..k {
                    s.push_str(&format!(",{c}"));
                }
                s.push('\n');
                for g in 0..k {
                    s.push_str(&g.to_string());
                    for p in 0..k {
                        s.push_str(&format!(",{}", cm.get(g, p)));
                    }
                    s.push('\n');
                }
                let p = d.join("confusion.csv");
                fs::write(&p, s).map_err(|e| io_err(&p, e))?;
            }
        }
        Cmd::Gradcheck { op, tol, seed } => {
            echo(&format!("op = {op:?}\ntol = {tol:e}\nseed = {seed}"));
            let opts = GradCheckOptions {
                tol,
                ..GradCheckOptions::default()
            };
            println!("op,checked,max_rel_err,result");
            let mut failed = Vec::new();
            for name in select_operators(&op)? {
                let r = check_operator(name, seed, opts)?;
                let verdict = if r.passed() { "pass" } else { "fail" };
                println!("{name},{},{:.3e},{verdict}", r.checked, r.max_rel_err);
                if !r.passed() {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Cmd::Connectivity {
            data,
            window_size,
            radius,
            samples,
            search,
            out,
            seed,
        } => {
            let method = SearchMethod::from(search);
            echo(&format!(
                "window_size = {window_size}\nradius = {radius}\nsamples = {samples}\nsearch = {:?}\nseed = {seed}",
                method.name()
            ));
            let stage = StageConfig {
                grid: radius,
                window: window_size,
                radius,
                layers: 1,
                dim: 1,
            };
            let mut csv = String::from("scene,sample,point,hops\n");
            let mut summary = String::new();
            for (i, scene) in load_dataset(&data)?.iter().enumerate() {
                let windows = stage_windows(scene.cloud.coords(), &stage, method)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let r = connectivity(&windows, samples, &mut rng)?;
                for (k, (&p, h)) in r.sources.iter().zip(&r.hops).enumerate() {
                    csv.push_str(&format!("{i},{k},{p},{}\n", h.map_or(String::new(), |h| h.to_string())));
                }
                let last = r.to_csv().lines().last().unwrap_or_default().to_string();
                summary.push_str(&format!("{} scene={i}\n", last));
            }
            csv.push_str(&summary);
            emit(&csv, out.as_deref(), "connectivity.csv")?;
        }
        Cmd::Bench {
            search,
            points,
            window,
            reps,
            radius,
            density,
            checks,
            out,
            seed,
        } => {
            echo(&format!(
                "points = {points:?}\nwindow = {window}\nreps = {reps}\nradius = {radius}\ndensity = {density}\nchecks = {checks}\nseed = {seed}"
            ));
            let mut csv = format!("{BENCH_CSV_HEADER}\n");
            let mut all_ok = true;
            for &n in &points {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let coords = bench_cloud(n, density, &mut rng);
                for &s in &search {
                    let row = bench_search(&coords, window, radius, s.into(), reps, checks, &mut rng)?;
                    all_ok &= row.correct;
                    csv.push_str(&row.csv_row());
                    csv.push('\n');
                }
            }
            emit(&csv, out.as_deref(), "bench.csv")?;
            if !all_ok {
                return Err(Failure::Check("neighbor search disagreed with brute force".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } => EXIT_IO,
                Error::NonFinite(_) => EXIT_NUMERIC,
                _ => EXIT_CHECK,
            })
        }
    }
}
