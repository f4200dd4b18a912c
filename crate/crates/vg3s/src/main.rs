use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vg3s::config::RunConfig;
use vg3s::evaluate::evaluate_model;
use vg3s::gaussians::write_gaussians;
use vg3s::parallel;
use vg3s::selftest;
use vg3s::tokens::{generate_synthetic_tokens, read_token_stack, write_token_stack, TokenStack};
use vg3s::train::{grid_targets, TrainSession};
use vg3s::voxel::{export_ply, read_label_grid, write_label_grid};

#[derive(Parser)]
#[command(name = "vg3s", about = "Semantic occupancy from multi-view tokens", version)]
struct Cli {
    /// Worker threads for data-parallel sections (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in consistency checks and report one line each.
    Selftest,
    /// Synthesize a multi-view token stack for the configured scene.
    GenTokens {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the run seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimize the model on one scene and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Token file from gen-tokens; synthesized on the fly when absent.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Continue from an existing checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps even if the schedule has more.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint against the configured scene's ground truth.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fail (exit 1) when the mean IoU lands below this.
        #[arg(long)]
        min_miou: Option<f64>,
        /// Fail (exit 1) when the occupancy IoU lands below this.
        #[arg(long)]
        min_sc_iou: Option<f64>,
    },
    /// Write a checkpoint's predicted occupancy grid and gaussians.
    Splat {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Predicted label grid destination.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Decoded gaussian set destination.
        #[arg(long)]
        gaussians: Option<PathBuf>,
    },
    /// Convert a saved label grid into an ASCII PLY point cloud.
    ExportPly {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    /// A check or threshold did not hold.
    Check(String),
    /// The configuration or command line is unusable.
    Config(String),
    /// The filesystem said no.
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Config(m) | Failure::Io(m) => m,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {}", path.display(), e))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(Failure::Config)?;
    if let Some(s) = seed {
        cfg.run_seed = s;
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn load_tokens(cfg: &RunConfig, path: &Option<PathBuf>) -> Result<TokenStack, Failure> {
    match path {
        Some(p) => {
            let file = std::fs::File::open(p).map_err(|e| io_err(p, e))?;
            let stack = read_token_stack(&mut BufReader::new(file))
                .map_err(|e| io_err(p, e))?;
            let want = cfg.token_config();
            if stack.views != cfg.views
                || stack.layers != want.layers
                || stack.tokens != want.patch_h * want.patch_w
                || stack.channels != want.channels
            {
                return Err(Failure::Config(format!(
                    "{}: token stack is {}x{}x{}x{}, config expects {}x{}x{}x{}",
                    p.display(),
                    stack.views,
                    stack.layers,
                    stack.tokens,
                    stack.channels,
                    cfg.views,
                    want.layers,
                    want.patch_h * want.patch_w,
                    want.channels
                )));
            }
            Ok(stack)
        }
        None => Ok(generate_synthetic_tokens(
            &cfg.scene(),
            &cfg.rig(),
            &cfg.grid_spec(),
            &cfg.token_config(),
            cfg.classes,
            cfg.run_seed,
        )),
    }
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>, Failure> {
    Ok(BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, e))?,
    ))
}

/// Distinguishes an unreadable checkpoint (I/O) from a readable but
/// incompatible one (configuration).
fn restore(cfg: &RunConfig, path: &Path) -> Result<TrainSession, Failure> {
    std::fs::metadata(path).map_err(|e| io_err(path, e))?;
    TrainSession::resume(cfg, path).map_err(Failure::Config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Selftest => {
            let results = selftest::run_all();
            let mut failed = 0usize;
            for r in &results {
                let status = if r.passed { "pass" } else { "FAIL" };
                println!("{} {:<24} [{:>6} ms] {}", status, r.name, r.millis, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Failure::Check(format!(
                    "{} of {} checks failed",
                    failed,
                    results.len()
                )));
            }
            println!("all {} checks passed", results.len());
            Ok(())
        }
        Command::GenTokens { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let stack = load_tokens(&cfg, &None)?;
            let mut w = create(&out)?;
            write_token_stack(&mut w, &stack).map_err(|e| io_err(&out, e))?;
            w.flush().map_err(|e| io_err(&out, e))?;
            println!(
                "wrote {} ({} views, {} layers, {} tokens, {} channels)",
                out.display(),
                stack.views,
                stack.layers,
                stack.tokens,
                stack.channels
            );
            Ok(())
        }
        Command::Train {
            config,
            tokens,
            checkpoint,
            resume,
            steps,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let stack = load_tokens(&cfg, &tokens)?;
            let targets = grid_targets(&cfg.scene().rasterize(&cfg.grid_spec(), cfg.classes));
            let mut session = if resume {
                restore(&cfg, &checkpoint)?
            } else {
                TrainSession::new(&cfg)
            };
            session
                .run(&stack, &targets, steps, &mut |line| println!("{}", line))
                .map_err(Failure::Check)?;
            session.save(&checkpoint).map_err(Failure::Io)?;
            println!(
                "saved {} after step {}",
                checkpoint.display(),
                session.next_step
            );
            Ok(())
        }
        Command::Eval {
            config,
            tokens,
            checkpoint,
            min_miou,
            min_sc_iou,
        } => {
            let cfg = load_config(&config, None)?;
            let stack = load_tokens(&cfg, &tokens)?;
            let session = restore(&cfg, &checkpoint)?;
            let eval = evaluate_model(&session.model, &stack);
            print!("{}", eval.report.render());
            println!("loss={:.6}", eval.loss);
            let check = |name: &str, floor: Option<f64>, got: Option<f64>| match (floor, got) {
                (Some(f), Some(v)) if v < f => {
                    Err(Failure::Check(format!("{} {:.6} below {:.6}", name, v, f)))
                }
                (Some(f), None) => Err(Failure::Check(format!(
                    "{} undefined, floor {:.6} requested",
                    name, f
                ))),
                _ => Ok(()),
            };
            check("miou", min_miou, eval.report.miou)?;
            check("sc_iou", min_sc_iou, eval.report.sc_iou)?;
            Ok(())
        }
        Command::Splat {
            config,
            tokens,
            checkpoint,
            grid,
            gaussians,
        } => {
            let cfg = load_config(&config, None)?;
            let stack = load_tokens(&cfg, &tokens)?;
            let session = restore(&cfg, &checkpoint)?;
            let eval = evaluate_model(&session.model, &stack);
            if let Some(path) = &grid {
                let mut w = create(path)?;
                write_label_grid(&mut w, &eval.predicted).map_err(|e| io_err(path, e))?;
                w.flush().map_err(|e| io_err(path, e))?;
                println!(
                    "wrote {} ({} occupied voxels)",
                    path.display(),
                    eval.predicted.occupied_count()
                );
            }
            if let Some(path) = &gaussians {
                let set = decoded_set(&session, &stack);
                let mut w = create(path)?;
                write_gaussians(&mut w, &set).map_err(|e| io_err(path, e))?;
                w.flush().map_err(|e| io_err(path, e))?;
                println!("wrote {} ({} gaussians)", path.display(), set.count);
            }
            if grid.is_none() && gaussians.is_none() {
                return Err(Failure::Config(
                    "splat: pass --grid and/or --gaussians".into(),
                ));
            }
            Ok(())
        }
        Command::ExportPly { grid, out } => {
            let file = std::fs::File::open(&grid).map_err(|e| io_err(&grid, e))?;
            let labels =
                read_label_grid(&mut BufReader::new(file)).map_err(|e| io_err(&grid, e))?;
            let mut w = create(&out)?;
            export_ply(&mut w, &labels).map_err(|e| io_err(&out, e))?;
            w.flush().map_err(|e| io_err(&out, e))?;
            println!(
                "wrote {} ({} occupied voxels)",
                out.display(),
                labels.occupied_count()
            );
            Ok(())
        }
    }
}

fn decoded_set(session: &TrainSession, tokens: &TokenStack) -> vg3s::gaussians::GaussianSet {
    let model = &session.model;
    let mut tape = vg3s::tape::Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let targets = vec![0usize; model.cfg.grid_spec().num_voxels()];
    let art = vg3s::train::forward_loss(&mut tape, model, &bound, tokens, &targets, 0, false);
    art.state.to_set(&tape)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = match cli.workers {
        None | Some(0) => parallel::max_workers(),
        Some(n) => n,
    };
    let outcome = parallel::with_pool(workers, || run(cli));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
