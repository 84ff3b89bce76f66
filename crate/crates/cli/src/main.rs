//! `reachguard` experiment driver.
//!
//! Every subcommand reads a run config, resolves the output directory
//! (`REACHGUARD_OUT` overrides `run.output_dir`) and exchanges artifacts
//! with the other stages through files in that directory.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use reachguard::config::{load_env, RunConfig};
use reachguard::dictionary::{ControllerDictionary, SynthesisOptions};
use reachguard::env::{empirical_safety, fit_dynamics, generate_dataset, simulate_episode, EnvSpec, FitOptions, Policy};
use reachguard::experiments::{ablate_incremental, ablate_multi, incremental_csv};
use reachguard::metrics::{average_reward, floor_percent, MetricsReport};
use reachguard::netfile::{fmt_f64, load_net, save_net};
use reachguard::nn::{ClosedLoopSystem, ReluNet};
use reachguard::reach::{split_initial, verify_horizon, Certificate, GridCell};
use reachguard::train::{curriculum_train, phase_log_csv, pretrain, CurriculumTask, TrainingHyper};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

const OUT_ENV: &str = "REACHGUARD_OUT";

#[derive(Parser)]
#[command(name = "reachguard", version, about = "Train and verify neural-network controllers over K-step horizons")]
struct Cli {
    /// Run config (TOML).
    #[arg(long, short, global = true, default_value = "configs/lane_following.toml")]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample transitions and fit the ReLU dynamics model.
    FitDynamics,
    /// Safe-RL pretraining of the controller.
    Pretrain,
    /// Verification-guided curriculum training up to `run.k_target`.
    Curriculum {
        /// Start from this controller instead of `pretrained.net`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Branch-and-bound verification; writes `certificate.txt`.
    Verify {
        #[arg(long)]
        controller: Option<PathBuf>,
    },
    /// Controller dictionary synthesis into `dictionary/`.
    Synthesize,
    /// Sampled safety and episode reward.
    Simulate {
        /// Use the synthesised dictionary instead of `controller.net`.
        #[arg(long)]
        dictionary: bool,
    },
    /// Aggregate certificate and simulation outputs.
    Report {
        #[arg(long)]
        dictionary: bool,
    },
    /// Monolithic against incremental CROWN runtime on one cell.
    AblateIncremental {
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10, 15, 20])]
        ks: Vec<usize>,
    },
    /// Single controller against dictionary coverage.
    AblateMulti,
}

struct Run {
    cfg: RunConfig,
    path: String,
    env: EnvSpec,
    hyper: TrainingHyper,
    out: PathBuf,
}

impl Run {
    fn open(cli: &Cli) -> Result<Self> {
        let path = cli.config.display().to_string();
        let mut cfg = RunConfig::load(&cli.config)?;
        if let Some(seed) = cli.seed {
            cfg.run.seed = seed;
        }
        let env = load_env(&cfg.env_path(&cli.config))?;
        let hyper = cfg.hyper(&path)?;
        let out = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir));
        fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        if cfg.run.workers > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(cfg.run.workers).build_global().context("configuring workers")?;
        }
        Ok(Run { cfg, path, env, hyper, out })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn net(&self, name: &str) -> Result<ReluNet> {
        read_net(&self.file(name))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn system(&self, controller: ReluNet) -> Result<ClosedLoopSystem> {
        let dynamics = self.net("dynamics.net")?;
        Ok(ClosedLoopSystem::new(controller, dynamics, Some(self.env.action_clip.clone()))?)
    }

    fn grid(&self, sys: &ClosedLoopSystem) -> Result<Vec<GridCell>> {
        Ok(split_initial(&self.env.s0, self.cfg.run.grid_budget, sys, &self.env.spec, 1)?)
    }

    /// Replaces this stage's row in `timings.csv`.
    fn record_time(&self, stage: &str, start: Instant) -> Result<()> {
        let p = self.file("timings.csv");
        let mut rows: Vec<(String, u128)> = read_timings(&p)?.into_iter().filter(|(s, _)| s != stage).collect();
        rows.push((stage.into(), start.elapsed().as_millis()));
        let mut text = String::from("stage,wall_ms\n");
        for (s, ms) in rows {
            writeln!(text, "{s},{ms}")?;
        }
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }
}

fn read_net(path: &Path) -> Result<ReluNet> {
    load_net(path).with_context(|| format!("reading {} (run the upstream stage first)", path.display()))
}

fn read_timings(path: &Path) -> Result<Vec<(String, u128)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (s, ms) = l.split_once(',').with_context(|| format!("malformed timing row `{l}`"))?;
            Ok((s.to_string(), ms.trim().parse()?))
        })
        .collect()
}

fn fit_stage(run: &Run) -> Result<()> {
    let d = &run.cfg.dynamics;
    let data = generate_dataset(&run.env, d.samples, run.cfg.run.seed);
    data.save(&run.file("dataset.txt"))?;
    let opts = FitOptions { epochs: d.epochs, batch_size: d.batch_size, lr: d.lr, seed: run.cfg.run.seed, ..FitOptions::default() };
    let fit = fit_dynamics(&run.env, &data, &opts)?;
    save_net(&fit.net, &run.file("dynamics.net"))?;
    let mut csv = String::from("dim,val_rmse,init_val_rmse,threshold\n");
    for (j, (r, r0)) in fit.val_rmse.iter().zip(&fit.init_val_rmse).enumerate() {
        writeln!(csv, "{j},{r:.6e},{r0:.6e},{:.6e}", run.env.rmse_threshold)?;
    }
    run.write("fit.csv", &csv)?;
    print!("{csv}");
    let worst = fit.val_rmse.iter().cloned().fold(0.0, f64::max);
    if worst > run.env.rmse_threshold {
        bail!("dynamics fit rejected: validation RMSE {worst:.4e} exceeds threshold {:.4e}", run.env.rmse_threshold);
    }
    Ok(())
}

fn simulate_stage(run: &Run, use_dictionary: bool) -> Result<()> {
    let dynamics = run.net("dynamics.net")?;
    let dict;
    let single;
    let policy = if use_dictionary {
        dict = ControllerDictionary::load(&run.file("dictionary").join("dictionary.txt"))?;
        Policy::Dictionary(&dict)
    } else {
        single = run.net("controller.net")?;
        Policy::Single(&single)
    };
    let seed = run.cfg.run.seed;
    let ev = &run.cfg.evaluation;
    let k = run.cfg.run.k_target;
    let t = run.env.episode_len;
    let mut csv = String::from("metric,value,k\n");
    for (name, horizon) in [("emp_k", k), ("emp_t", t)] {
        let frac = empirical_safety(&run.env, &dynamics, policy, horizon, ev.samples, seed)?;
        writeln!(csv, "{name},{},{horizon}", fmt_f64(frac))?;
    }
    let (mean, std) = average_reward(&run.env, &dynamics, policy, ev.episodes, seed)?;
    writeln!(csv, "reward_mean,{mean:.6},{t}")?;
    writeln!(csv, "reward_std,{std:.6},{t}")?;
    run.write("simulation.csv", &csv)?;

    let s0 = run.env.s0.center();
    if policy.select(&s0).is_some() {
        let ep = simulate_episode(&run.env, &dynamics, policy, &s0)?;
        let mut trace = String::from("t");
        for j in 0..run.env.state_dim() {
            write!(trace, ",s{j}")?;
        }
        trace.push_str(",reward,violation\n");
        for (i, s) in ep.states.iter().enumerate() {
            write!(trace, "{i}")?;
            for v in s {
                write!(trace, ",{v:.6}")?;
            }
            let (r, viol) = if i == 0 { (0.0, false) } else { (ep.rewards[i - 1], ep.violations[i - 1]) };
            writeln!(trace, ",{r:.6},{}", viol as u8)?;
        }
        run.write("episode.csv", &trace)?;
    }
    print!("{csv}");
    Ok(())
}

fn report_stage(run: &Run, use_dictionary: bool) -> Result<()> {
    let wall: u128 = read_timings(&run.file("timings.csv"))?.iter().map(|(_, ms)| ms).sum();
    let mut report = MetricsReport::new(run.cfg.run.seed, wall);
    if use_dictionary {
        let dict = ControllerDictionary::load(&run.file("dictionary").join("dictionary.txt"))?;
        report.add_percent("verified_k", dict.coverage(), dict.k)?;
        report.push("dictionary_entries", dict.entries.len() as f64, dict.k);
    } else {
        let p = run.file("certificate.txt");
        let cert = Certificate::load(&p).with_context(|| format!("reading {} (run verify first)", p.display()))?;
        report.add_certificate(&cert)?;
    }
    let p = run.file("simulation.csv");
    if p.exists() {
        let text = fs::read_to_string(&p)?;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                bail!("{}: malformed row `{line}`", p.display());
            }
            let value: f64 = f[1].parse().with_context(|| format!("{}: value in `{line}`", p.display()))?;
            let k: usize = f[2].parse().with_context(|| format!("{}: k in `{line}`", p.display()))?;
            if f[0].starts_with("emp_") {
                report.add_percent(f[0], value, k)?;
            } else {
                report.push(f[0], value, k);
            }
        }
    }
    run.write("report.csv", &report.to_csv())?;
    run.write("report.txt", &report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let run = Run::open(&cli)?;
    let start = Instant::now();
    match &cli.command {
        Command::FitDynamics => {
            fit_stage(&run)?;
            run.record_time("fit-dynamics", start)?;
        }
        Command::Pretrain => {
            let controller = pretrain(&run.env, &run.net("dynamics.net")?, &run.hyper)?;
            save_net(&controller, &run.file("pretrained.net"))?;
            run.record_time("pretrain", start)?;
        }
        Command::Curriculum { init } => {
            let init = read_net(&init.clone().unwrap_or_else(|| run.file("pretrained.net")))?;
            let dynamics = run.net("dynamics.net")?;
            let grid = run.grid(&run.system(init.clone())?)?;
            let task = CurriculumTask { env: &run.env, dynamics: &dynamics, grid, k_target: run.cfg.run.k_target };
            let res = curriculum_train(task, &init, &run.hyper)?;
            save_net(&res.controller, &run.file("controller.net"))?;
            run.write("phase_log.csv", &phase_log_csv(&res.log))?;
            println!("curriculum: {} gradient steps, phases left unverified {:?}", res.steps, res.unverified);
            run.record_time("curriculum", start)?;
        }
        Command::Verify { controller } => {
            let controller = read_net(&controller.clone().unwrap_or_else(|| run.file("controller.net")))?;
            let sys = run.system(controller)?;
            let grid = run.grid(&sys)?;
            let opts = run.cfg.bab_options(&run.path)?;
            let k = run.cfg.run.k_target;
            let cert = verify_horizon(&sys, &grid, k, &run.env.spec, &opts, &run.env.name)?;
            cert.save(&run.file("certificate.txt"))?;
            println!(
                "verified {:.1}% of S_0 for K = {k} ({} cells, verified max {})",
                floor_percent(cert.verified_fraction(k)),
                cert.records.len(),
                cert.verified_max()
            );
            run.record_time("verify", start)?;
        }
        Command::Synthesize => {
            let base = run.net("controller.net")?;
            let dynamics = run.net("dynamics.net")?;
            let grid = run.grid(&run.system(base.clone())?)?;
            let opts = SynthesisOptions { verify: run.cfg.bab_options(&run.path)?, max_iterations: run.cfg.synthesis.max_iterations };
            let res = reachguard::dictionary::synthesize(&run.env, &dynamics, &base, &grid, run.cfg.run.k_target, &run.hyper, &opts)?;
            res.dictionary.save(&run.file("dictionary"))?;
            run.write("synthesis_log.csv", &synthesis_csv(&res))?;
            println!(
                "dictionary: {} entries, coverage {:.1}% (base controller {:.1}%)",
                res.dictionary.entries.len(),
                floor_percent(res.dictionary.coverage()),
                floor_percent(res.baseline_coverage)
            );
            if let Some(d) = &res.diagnostic {
                println!("synthesis stopped early: {d}");
            }
            run.record_time("synthesize", start)?;
        }
        Command::Simulate { dictionary } => {
            simulate_stage(&run, *dictionary)?;
            run.record_time("simulate", start)?;
        }
        Command::Report { dictionary } => report_stage(&run, *dictionary)?,
        Command::AblateIncremental { epochs, ks } => {
            let controller = run.net("controller.net").or_else(|_| run.net("pretrained.net"))?;
            let dynamics = run.net("dynamics.net")?;
            let cell = GridCell::root(run.env.s0.clone());
            let rows = ablate_incremental(&run.env, &dynamics, &controller, &cell, ks, *epochs, &run.hyper)?;
            let csv = incremental_csv(&rows);
            run.write("ablation_incremental.csv", &csv)?;
            print!("{csv}");
        }
        Command::AblateMulti => {
            let base = run.net("controller.net")?;
            let dynamics = run.net("dynamics.net")?;
            let grid = run.grid(&run.system(base.clone())?)?;
            let opts = SynthesisOptions { verify: run.cfg.bab_options(&run.path)?, max_iterations: run.cfg.synthesis.max_iterations };
            let k = run.cfg.run.k_target;
            let res = ablate_multi(&run.env, &dynamics, &base, &grid, k, &run.hyper, &opts)?;
            let csv = format!(
                "method,verified_k,k,entries\nsingle,{},{k},1\nmulti,{},{k},{}\n",
                floor_percent(res.single),
                floor_percent(res.multi),
                res.synthesis.dictionary.entries.len()
            );
            run.write("ablation_multi.csv", &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn synthesis_csv(res: &reachguard::dictionary::SynthesisResult) -> String {
    let mut out = String::from("iteration,clusters,new_volume,covered_volume,residual_volume,stalled\n");
    for it in &res.log {
        out.push_str(&format!(
            "{},{},{:.6e},{:.6e},{:.6e},{}\n",
            it.iteration, it.clusters, it.new_volume, it.covered_volume, it.residual_volume, it.stalled as u8
        ));
    }
    out
}
