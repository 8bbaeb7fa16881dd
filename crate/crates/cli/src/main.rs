use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use macb_core::harness::ablation::{self, Recipe};
use macb_core::harness::config::{GenConfig, KeyValues, TrainConfig};
use macb_core::harness::data::{generate, Dataset};
use macb_core::harness::gradcheck;
use macb_core::harness::metrics::Metrics;
use macb_core::harness::model::{Model, Prepared};
use macb_core::harness::train::{predict, train};
use macb_core::pareto::{combine, ParetoConfig};
use macb_core::{Error, Result};

#[derive(Parser)]
#[command(name = "macb", version, about = "Audio-visual deepfake detector on synthetic data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired audio-video dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a per-step CSV log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Step log path (default: checkpoint path with `.log.csv` appended).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-sample fusion diagnostics (D_v, D_a, w_v, w_a) on the held-out split.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train every variant of an ablation recipe over several seeds.
    RunAblation {
        /// contrastive, depth or pareto
        #[arg(long)]
        recipe: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file; generated with default settings when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine two gradient vectors and print the combiner's diagnostics.
    InspectPareto {
        #[arg(long)]
        gm: PathBuf,
        #[arg(long)]
        gu: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_kv(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::read(p),
        None => KeyValues::parse(""),
    }
}

fn load_data(path: &Path) -> Result<(Dataset, Prepared)> {
    let data = Dataset::load(path)?;
    let prep = Prepared::new(&data)?;
    Ok((data, prep))
}

/// Whitespace- or comma-separated numbers; `#` starts a comment.
fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("{}: bad number `{t}`", path.display())))
        })
        .collect()
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg = GenConfig::from_kv(&read_kv(config.as_deref())?)?;
            let data = generate(&cfg)?;
            data.save(&out)?;
            eprintln!("wrote {} samples ({} train, {} test) to {}", data.samples.len(), data.train.len(), data.test.len(), out.display());
        }
        Cmd::Train { config, data, out, log } => {
            let cfg = TrainConfig::from_kv(&read_kv(config.as_deref())?)?;
            let (data, prep) = load_data(&data)?;
            let mut model = Model::new(cfg)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.csv");
                PathBuf::from(p)
            });
            let mut w = BufWriter::new(File::create(&log_path)?);
            let mut dump = out.clone().into_os_string();
            dump.push(".failure");
            let start = Instant::now();
            train(&mut model, &data, &prep, Some(&mut w), Some(Path::new(&dump)))?;
            w.flush()?;
            model.save(&out)?;
            let m = predict(&mut model, &data, &prep, &data.test)?.metrics();
            eprintln!("trained in {:.1}s; log {}", start.elapsed().as_secs_f64(), log_path.display());
            println!("{}\n{}", Metrics::HEADER, m.csv_row());
        }
        Cmd::Eval { ckpt, data } => {
            let mut model = Model::load(&ckpt)?;
            let (data, prep) = load_data(&data)?;
            let m = predict(&mut model, &data, &prep, &data.test)?.metrics();
            println!("{}\n{}", Metrics::HEADER, m.csv_row());
        }
        Cmd::Inspect { ckpt, data, out } => {
            let mut model = Model::load(&ckpt)?;
            let (data, prep) = load_data(&data)?;
            let p = predict(&mut model, &data, &prep, &data.test)?;
            let mut w: Box<dyn Write> = match out {
                Some(path) => Box::new(BufWriter::new(File::create(path)?)),
                None => Box::new(io::stdout().lock()),
            };
            writeln!(w, "index,class,label,prob,D_v,D_a,w_v,w_a")?;
            for i in 0..p.index.len() {
                writeln!(
                    w,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    p.index[i],
                    data.samples[p.index[i]].class.name(),
                    p.label[i],
                    p.prob[i],
                    p.d_v[i],
                    p.d_a[i],
                    p.w_v[i],
                    p.w_a[i]
                )?;
            }
            w.flush()?;
        }
        Cmd::GradCheck { module, seeds, tol } => {
            let start = Instant::now();
            let results = gradcheck::run(module.as_deref(), seeds)?;
            println!("module,check,seeds,max_rel_err,worst,status");
            let mut failed = 0;
            for r in &results {
                let ok = r.max_err <= tol;
                failed += usize::from(!ok);
                println!(
                    "{},{},{},{:.3e},{},{}",
                    r.module,
                    r.name,
                    r.seeds,
                    r.max_err,
                    r.worst,
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            eprintln!("{} checks, {failed} failed, {:.1}s", results.len(), start.elapsed().as_secs_f64());
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} gradient checks above {tol:e}")));
            }
        }
        Cmd::RunAblation { recipe, config, data, seeds, out } => {
            let recipe: Recipe = recipe.parse()?;
            let base = TrainConfig::from_kv(&read_kv(config.as_deref())?)?;
            let data = match data {
                Some(p) => Dataset::load(&p)?,
                None => generate(&GenConfig::default())?,
            };
            let prep = Prepared::new(&data)?;
            let rows = ablation::run_ablation(recipe, &base, &data, &prep, &seeds, |r| {
                eprintln!(
                    "{} seed {}: acc {:.4} auc {}",
                    r.variant,
                    r.seed,
                    r.acc,
                    r.auc.map_or("undefined".into(), |a| format!("{a:.4}"))
                );
            })?;
            let table = ablation::table(&rows);
            print!("{table}");
            if let Some(p) = out {
                std::fs::write(p, &table)?;
            }
        }
        Cmd::InspectPareto { gm, gu, config } => {
            let pcfg: ParetoConfig = TrainConfig::from_kv(&read_kv(config.as_deref())?)?.pareto;
            let (g_m, g_u) = (read_vector(&gm)?, read_vector(&gu)?);
            let (_, d) = combine(&g_m, &g_u, &pcfg, None)?;
            println!("cos_theta,branch,alpha_m,alpha_u,lambda_orth,h_norm");
            println!(
                "{:.12},{},{:.12},{:.12},{:.12},{:.12}",
                d.cos_theta,
                d.branch.name(),
                d.alpha_m,
                d.alpha_u,
                d.lambda,
                d.h_norm
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
