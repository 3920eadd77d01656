use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rime_core::envs::Env;
use rime_core::plot::{eval_curve, event_steps, render_svg};
use rime_core::teachers::TeacherKind;
use rime_core::trainer::{ablation_matrix, read_metrics, FileSink, RunConfig, RunSummary, Trainer};
use rime_core::verify::{check_q_bound, check_theorem1, default_rho_grid, expansion_error_ratio, BoundCheckReport};
use rime_feedback::{EnvInfo, ServiceFeedback, Store};

#[derive(Parser)]
#[command(name = "rime", version, about = "Robust preference-based RL from noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent with a scripted teacher.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics and the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train every on/off combination of warm start and the two KL bounds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Run a brute-force bound check.
    Verify {
        check: Check,
        /// Also write the machine-readable report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train with labels from people through the HTTP feedback service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Journal directory; reused on restart.
        #[arg(long, env = "RIME_DATA_DIR", default_value = "feedback-data")]
        data_dir: PathBuf,
        /// Built annotation client to host at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw evaluation-return curves from metrics files as SVG.
    Plot {
        /// `metrics.jsonl` files or run directories containing one.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "learning_curve.svg")]
        out: PathBuf,
        #[arg(long, default_value = "evaluation return")]
        title: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    Theorem1,
    Qbound,
}

type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut c = RunConfig::load(path)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn default_out(c: &RunConfig) -> PathBuf {
    PathBuf::from(format!("runs/{}-seed{}", c.env, c.seed))
}

fn train(mut trainer: Trainer, out: &Path, human: Option<&mut ServiceFeedback>) -> CliResult<RunSummary> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), trainer.config.to_toml()?)?;
    let mut sink = FileSink::create(out)?;
    let ckpt = out.join("checkpoint.json");
    let summary = match human {
        Some(h) => trainer.run(&mut sink, Some(h), Some(&ckpt))?,
        None => trainer.run(&mut sink, None, Some(&ckpt))?,
    };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: bool) -> CliResult<()> {
    let c = load_config(config, seed)?;
    if c.teacher == TeacherKind::Human {
        return Err("a human teacher needs the feedback service; use `rime serve`".into());
    }
    let out = out.unwrap_or_else(|| default_out(&c));
    let ckpt = out.join("checkpoint.json");
    let trainer = if resume && ckpt.exists() {
        log::warn!("resuming from {}; metrics restart from the checkpoint", ckpt.display());
        Trainer::load_checkpoint(&ckpt)?
    } else {
        Trainer::new(c)?
    };
    let summary = train(trainer, &out, None)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn ablate(config: &Path, seeds: &[u64], out: &Path) -> CliResult<()> {
    let base = load_config(config, None)?;
    std::fs::create_dir_all(out)?;
    let mut table = String::from("variant,seed,final_eval_return\n");
    println!("{:<32} {:>6} {:>14}", "variant", "seed", "final return");
    for (toggles, c) in ablation_matrix(&base) {
        for &seed in seeds {
            let mut c = c.clone();
            c.seed = seed;
            let dir = out.join(format!("{}-seed{seed}", toggles.name()));
            let s = train(Trainer::new(c)?, &dir, None)?;
            println!("{:<32} {:>6} {:>14.3}", toggles.name(), seed, s.final_eval_return);
            table.push_str(&format!("{},{seed},{}\n", toggles.name(), s.final_eval_return));
        }
    }
    std::fs::write(out.join("ablation.csv"), table)?;
    Ok(())
}

fn print_report(r: &BoundCheckReport) {
    println!("check: {}", r.check);
    println!("grid: {}", r.grid);
    for c in &r.cases {
        let margin = c
            .margin
            .map(|m| format!("{m:+.3e}"))
            .unwrap_or_else(|| "vacuous".into());
        println!(
            "  clean {:<5} rho {:<8.5} bound {:<10.6} feasible {:>6} margin {:>12} {}",
            c.clean_label.as_str(),
            c.rho,
            c.bound,
            c.feasible,
            margin,
            if c.passed { "ok" } else { "VIOLATED" }
        );
    }
    if let Some(w) = r.witness {
        println!("constant-shift witness: {w:.9}");
    }
    println!(
        "worst margin (bound - observed): {:+.3e}, tolerance {:.0e}",
        r.worst_margin, r.tolerance
    );
    if let Some(ce) = &r.counterexample {
        println!("counterexample: {}", ce.description);
    }
    println!("{}", if r.passed { "PASS" } else { "FAIL" });
}

fn verify(check: Check, json: Option<PathBuf>) -> CliResult<bool> {
    let reports = match check {
        Check::Theorem1 => {
            let r = check_theorem1(&default_rho_grid(), 10_000)?;
            let small: Vec<f64> = (1..=20).map(|i| i as f64 * 0.01).collect();
            println!(
                "expansion error / rho^2 over rho <= 0.2: {:.4}",
                expansion_error_ratio(&small)?
            );
            vec![r]
        }
        Check::Qbound => {
            let mut out = Vec::new();
            for gamma in [0.9, 0.99] {
                for delta in [0.01, 0.1, 1.0] {
                    out.push(check_q_bound(100, delta, gamma, 0)?);
                }
            }
            out
        }
    };
    for r in &reports {
        print_report(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    if let Some(path) = json {
        let body = serde_json::json!({ "passed": passed, "reports": reports });
        std::fs::write(path, serde_json::to_string_pretty(&body)?)?;
    }
    Ok(passed)
}

#[allow(clippy::too_many_arguments)]
fn serve(
    port: u16,
    host: &str,
    config: &Path,
    seed: Option<u64>,
    data_dir: PathBuf,
    static_dir: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let mut c = load_config(config, seed)?;
    if c.teacher != TeacherKind::Human {
        log::warn!(
            "config teacher is {:?}; labels will come from the service instead",
            c.teacher
        );
        c.teacher = TeacherKind::Human;
    }
    let env = Env::make(&c.env, &c.env_config, c.seed)?;
    let info = EnvInfo {
        name: c.env.clone(),
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
    };
    let store = Store::open(&data_dir)?;
    let addr: SocketAddr = format!("{host}:{port}").parse()?;
    let server = rime_feedback::spawn(store.clone(), addr, static_dir)?;
    println!("feedback service listening on http://{}", server.addr);

    let out = out.unwrap_or_else(|| default_out(&c));
    let ckpt = out.join("checkpoint.json");
    let trainer = if ckpt.exists() {
        log::info!("resuming from {}", ckpt.display());
        Trainer::load_checkpoint(&ckpt)?
    } else {
        Trainer::new(c)?
    };
    let mut feedback = ServiceFeedback::new(store, info);
    let summary = train(trainer, &out, Some(&mut feedback))?;
    println!("{}", serde_json::to_string(&summary)?);
    server.stop();
    Ok(())
}

fn plot(metrics: &[PathBuf], out: &Path, title: &str) -> CliResult<()> {
    let mut series = Vec::new();
    let mut markers = (None, Vec::new());
    for (i, p) in metrics.iter().enumerate() {
        let file = if p.is_dir() { p.join("metrics.jsonl") } else { p.clone() };
        let records = read_metrics(&file)?;
        let name = if p.is_dir() {
            p.as_path()
        } else {
            p.parent().unwrap_or(p)
        }
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.display().to_string());
        if i == 0 {
            markers = event_steps(&records);
        }
        series.push(eval_curve(&name, &records));
    }
    std::fs::write(out, render_svg(title, &series, markers.0, &markers.1))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            resume,
        } => run(&config, seed, out, resume).map(|_| true),
        Command::Ablate { config, seeds, out } => ablate(&config, &seeds, &out).map(|_| true),
        Command::Verify { check, json } => verify(check, json),
        Command::Serve {
            port,
            config,
            seed,
            host,
            data_dir,
            static_dir,
            out,
        } => serve(port, &host, &config, seed, data_dir, static_dir, out).map(|_| true),
        Command::Plot { metrics, out, title } => plot(&metrics, &out, &title).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
