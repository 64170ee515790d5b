mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use refbox::environment::{EnvParams, GroundingTask};
use refbox::evaluator::{accuracy, evaluate, greedy_rollout, write_results};
use refbox::network::{read_checkpoint, write_checkpoint, NetworkParams};
use refbox::observation::{write_rbf, FeatureProvider, FileProvider};
use refbox::refertoy::{
    encode_query, generate, read_dataset, render_feature_map, scene_provider, tasks, write_dataset, DatasetRecord,
    ToySpec,
};
use refbox::trainer::{train_with, MetricsRecord};
use refbox::{Error, Result};

use crate::config::{ProviderKind, RunConfig};

const DATASET_FILE: &str = "dataset.jsonl";

#[derive(Parser)]
#[command(name = "refbox", version, about = "Train and evaluate box-refinement agents for referring expressions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ReferToy dataset with feature files.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent and write a checkpoint plus a metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        actors: Option<usize>,
    },
    /// Greedy evaluation on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config whose environment section overrides the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the greedy trajectory for one task.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = ".")]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Convert a metrics log to CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Io { .. } | Error::TaskLoad { .. } => 2,
        Error::Format { .. } | Error::Shape(_) | Error::UnknownToken(_) | Error::MalformedExpression(_) => 3,
        Error::Config(_)
        | Error::InvalidParam(_)
        | Error::Generation { .. }
        | Error::InvalidBox { .. }
        | Error::InvalidImageSize { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("refbox: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { spec, out } => gen(&spec, &out),
        Command::Train {
            config,
            out,
            seed,
            steps,
            actors,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            if let Some(a) = actors {
                cfg.train.actor_count = a;
            }
            if let Some(cap) = thread_cap()? {
                cfg.train.actor_count = cfg.train.actor_count.min(cap);
            }
            train(&cfg, &out)
        }
        Command::Eval {
            ckpt,
            data,
            out,
            config,
        } => {
            let env = env_params(config.as_deref())?;
            let params = read_checkpoint(&ckpt)?;
            let (tasks, provider) = load_dir(&data)?;
            let threads = match thread_cap()? {
                Some(c) => c,
                None => std::thread::available_parallelism().map_or(1, |n| n.get()),
            };
            let results = evaluate(&params, &tasks, &provider, &env, threads)?;
            write_results(&out, &results)?;
            println!("accuracy {:.6}", accuracy(&results)?);
            Ok(())
        }
        Command::Inspect {
            ckpt,
            task,
            data,
            config,
        } => {
            let env = env_params(config.as_deref())?;
            let params = read_checkpoint(&ckpt)?;
            let (tasks, provider) = load_dir(&data)?;
            let t = tasks
                .iter()
                .find(|t| t.task_id == task)
                .ok_or_else(|| Error::Usage(format!("no task {task:?} in {}", data.display())))?;
            print!("{}", inspect(&params, t, &provider, &env)?);
            Ok(())
        }
        Command::Plot { metrics, out } => plot(&metrics, &out),
    }
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("REFBOX_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("REFBOX_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn env_params(config: Option<&Path>) -> Result<EnvParams> {
    match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            cfg.train.env.validate()?;
            Ok(cfg.train.env)
        }
        None => Ok(EnvParams::default()),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen(spec_path: &Path, out: &Path) -> Result<()> {
    let text = read_to_string(spec_path)?;
    let spec: ToySpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    let scenes = generate(&spec)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    for s in &scenes {
        write_rbf(&out.join(format!("{}.rbf", s.task_id)), &render_feature_map(s), &encode_query(&s.expression)?)?;
    }
    let records: Vec<_> = scenes.iter().map(DatasetRecord::from_scene).collect();
    write_dataset(&out.join(DATASET_FILE), &records)?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

/// Tasks and file-backed features from a directory written by `gen`.
fn load_dir(dir: &Path) -> Result<(Vec<Arc<GroundingTask>>, FileProvider)> {
    let records = read_dataset(&dir.join(DATASET_FILE))?;
    let tasks = records
        .iter()
        .map(|r| r.to_task().map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    if tasks.is_empty() {
        return Err(Error::Usage(format!("no tasks in {}", dir.display())));
    }
    Ok((tasks, FileProvider::new(dir)))
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (tasks, provider): (Vec<Arc<GroundingTask>>, Box<dyn FeatureProvider>) = match (&cfg.data.dataset, &cfg.data.toy)
    {
        (_, Some(spec)) => {
            let scenes = generate(spec)?;
            (tasks(&scenes), Box::new(scene_provider(&scenes)?))
        }
        (Some(path), None) => {
            let records = read_dataset(path)?;
            let tasks = records
                .iter()
                .map(|r| r.to_task().map(Arc::new))
                .collect::<Result<Vec<_>>>()?;
            let provider: Box<dyn FeatureProvider> = match cfg.data.provider {
                ProviderKind::Files => {
                    let dir = match &cfg.data.features {
                        Some(d) => d.clone(),
                        None => path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                    };
                    Box::new(FileProvider::new(dir))
                }
                ProviderKind::Render => {
                    let scenes = records.iter().map(DatasetRecord::to_scene).collect::<Result<Vec<_>>>()?;
                    Box::new(scene_provider(&scenes)?)
                }
            };
            (tasks, provider)
        }
        (None, None) => unreachable!("validated"),
    };

    let log_path = metrics_path(out);
    let mut log = String::new();
    let outcome = train_with(&cfg.train, provider.as_ref(), &tasks, None, &mut |m| {
        eprintln!("{m}");
        writeln!(log, "{m}").unwrap();
    })?;
    write_checkpoint(out, &outcome.params)?;
    write_file(&log_path, &log)?;
    println!(
        "trained {} steps, {} episodes, {} updates; checkpoint {}",
        outcome.env_steps,
        outcome.episodes,
        outcome.updates,
        out.display()
    );
    if outcome.skipped_tasks > 0 {
        eprintln!("warning: {} task loads failed and were skipped", outcome.skipped_tasks);
    }
    Ok(())
}

/// `run.rbc` gets its log at `run.rbc.metrics`.
fn metrics_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".metrics");
    PathBuf::from(s)
}

fn inspect(params: &NetworkParams, task: &Arc<GroundingTask>, provider: &dyn FeatureProvider, env: &EnvParams) -> Result<String> {
    let r = greedy_rollout(params, task, provider, env)?;
    let gt = task.ground_truth;
    let mut s = String::new();
    writeln!(s, "task {}", task.task_id).unwrap();
    writeln!(s, "query {}", task.query_tokens.join(" ")).unwrap();
    writeln!(s, "target {:.3} {:.3} {:.3} {:.3}", gt.x0(), gt.y0(), gt.x1(), gt.y1()).unwrap();
    writeln!(s, "step\taction\tx0\ty0\tx1\ty1\tiou\treward").unwrap();
    for (t, ((a, b), rew)) in r.actions.iter().zip(&r.boxes).zip(&r.rewards).enumerate() {
        writeln!(
            s,
            "{t}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.6}\t{:.17e}",
            a.name(),
            b.x0(),
            b.y0(),
            b.x1(),
            b.y1(),
            refbox::geometry::iou(b, &gt),
            rew
        )
        .unwrap();
    }
    let ret: f64 = r.rewards.iter().sum();
    writeln!(s, "return {ret:.17e}").unwrap();
    writeln!(s, "final_iou {:.6} triggered {}", r.iou, r.triggered).unwrap();
    Ok(s)
}

fn plot(metrics: &Path, out: &Path) -> Result<()> {
    let text = read_to_string(metrics)?;
    let mut csv = MetricsRecord::FIELDS.join(",");
    csv.push('\n');
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: MetricsRecord = line.parse().map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                context: format!("{}:{}", metrics.display(), n + 1),
                reason,
            },
            other => other,
        })?;
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            m.step, m.episodes, m.mean_reward, m.mean_length, m.success_rate, m.entropy, m.alpha
        )
        .unwrap();
    }
    let mut f = fs::File::create(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    f.write_all(csv.as_bytes()).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })
}
