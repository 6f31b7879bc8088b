use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agentpose::pipeline::config::ExperimentConfig;
use agentpose::pipeline::run::{
    run_distill, run_eval, run_gen_data, run_train_teacher, student_path, teacher_path,
};
use agentpose::pipeline::sweep::{run_sweep, SweepAxis};
use agentpose::Result;

#[derive(Parser)]
#[command(name = "agentpose", version, about = "Feature-agent distillation on a synthetic keypoint task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher and save `teacher.json`.
    TrainTeacher(Common),
    /// Distill a student against a trained teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; defaults to `<out>/teacher.json`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate saved teacher and student checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Student checkpoint; defaults to `<out>/student.json`.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Distill and evaluate once per value and seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// One of t_s, latent_dim, infer_steps.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds per value; defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the dataset cache; `--seed` sets the data seed.
    GenData(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, u64)> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let c = ExperimentConfig::default();
            c.validate()?;
            c
        }
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok((cfg, seed))
}

fn or_default(p: &Option<PathBuf>, out: &Path, f: fn(&Path) -> PathBuf) -> PathBuf {
    p.clone().unwrap_or_else(|| f(out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(c) => {
            let (cfg, seed) = load(&c)?;
            let s = run_train_teacher(&cfg, seed, &c.out)?;
            println!("teacher PCK {:?} -> {}", s.pck, teacher_path(&c.out).display());
        }
        Command::Distill { common: c, teacher } => {
            let (cfg, seed) = load(&c)?;
            let t = or_default(&teacher, &c.out, teacher_path);
            let r = run_distill(&cfg, seed, &t, &c.out)?;
            println!(
                "{} PCK {:?} energy {:?} -> {:?}",
                cfg.distill.mode.name(),
                r.eval.pck,
                r.eval.energy_pre,
                r.eval.energy_post
            );
        }
        Command::Eval { common: c, teacher, student } => {
            let (cfg, seed) = load(&c)?;
            let t = or_default(&teacher, &c.out, teacher_path);
            let s = or_default(&student, &c.out, student_path);
            let e = run_eval(&cfg, seed, &t, &s, &c.out)?;
            println!("PCK {:?} energy {:?} -> {:?}", e.pck, e.energy_pre, e.energy_post);
        }
        Command::Sweep {
            common: c,
            teacher,
            axis,
            values,
            seeds,
            jobs,
        } => {
            let (cfg, seed) = load(&c)?;
            let axis: SweepAxis = axis.parse()?;
            let seeds = if seeds.is_empty() { vec![seed] } else { seeds };
            let t = or_default(&teacher, &c.out, teacher_path);
            let rep = run_sweep(&cfg, axis, &values, &seeds, &t, &c.out, jobs)?;
            for r in &rep.rows {
                println!(
                    "{}={} PCK@{} {:.4} ± {:.4}",
                    axis.name(),
                    r.value,
                    r.tau,
                    r.mean_pck,
                    r.std_pck
                );
            }
        }
        Command::GenData(c) => {
            let (mut cfg, _) = load(&c)?;
            cfg.data.seed = c.seed.unwrap_or(cfg.data.seed);
            let p = run_gen_data(&cfg, &c.out)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
