use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdgame_core::config::ExperimentConfig;
use cdgame_core::harness::{self, exit_code};
use cdgame_core::selftest::SelftestOptions;
use cdgame_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cdgame", version, about = "Attack, defend and play the community detection game")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one entry, e.g. `--set attack.step=0.2`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Single seed; shorthand for `--seeds N`.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated target node indices.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct AttackArgs {
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct DefenseArgs {
    #[arg(long)]
    defense_budget: Option<usize>,
    #[arg(long)]
    scope_policy: Option<String>,
    #[arg(long)]
    signal_policy: Option<String>,
    /// Edit diff applied to the clean graph before defending.
    #[arg(long)]
    diff: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the detector and report the clean partition.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Gradient attack on the targets.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Rayleigh-quotient defense of a perturbed graph.
    Defend {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        defense: DefenseArgs,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Leader-follower game between attacker and defender.
    Game {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
        #[command(flatten)]
        defense: DefenseArgs,
    },
    /// Random heuristic attack or defense.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// dice, mba, rta or inverse_dice.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        /// Restrict edits to the attack scope.
        #[arg(long)]
        respect_scope: bool,
        #[arg(long)]
        diff: Option<PathBuf>,
    },
    /// Segment an image (PGM/PPM) with the detector.
    Segment {
        image: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long = "k", short = 'k')]
        k: Option<usize>,
        /// Spatial radius (default 1).
        #[arg(long)]
        r: Option<f64>,
        /// Color-distance threshold (default 20).
        #[arg(long)]
        alpha: Option<f64>,
        /// Comma-separated pixel indices to attack after segmenting.
        #[arg(long)]
        patch: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Finite-difference checks of every gradient.
    Selftest {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_bug: Option<String>,
    },
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn opt<T: ToString>(&mut self, key: &str, v: &Option<T>) {
        if let Some(v) = v {
            self.0.push((key.into(), v.to_string()));
        }
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        self.opt(key, &v.as_ref().map(|p| p.display().to_string()));
    }
}

fn build_config(common: &Common, extra: Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut o = Overrides(Vec::new());
    o.path("run.output", &common.output);
    o.opt("run.seeds", &common.seed);
    o.opt("run.seeds", &common.seeds);
    o.opt("data.targets", &common.targets);
    o.path("data.edges", &common.edges);
    o.path("data.features", &common.features);
    o.path("detector.checkpoint", &common.checkpoint);
    for s in &common.overrides {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects SECTION.KEY=VALUE, got {s:?}")))?;
        o.0.push((k.trim().into(), v.trim().into()));
    }
    o.0.extend(extra.0);
    for (k, v) in o.0 {
        cfg.set(&k, &v)?;
    }
    Ok(cfg)
}

fn attack_overrides(o: &mut Overrides, a: &AttackArgs) {
    o.opt("attack.budget", &a.budget);
    o.opt("attack.hops", &a.hops);
    o.opt("attack.step", &a.step);
    o.opt("attack.iterations", &a.iters);
}

fn defense_overrides(o: &mut Overrides, d: &DefenseArgs) {
    o.opt("defense.budget", &d.defense_budget);
    o.opt("defense.scope_policy", &d.scope_policy);
    o.opt("defense.signal_policy", &d.signal_policy);
    o.path("defense.input_diff", &d.diff);
}

fn print_summaries(reports: &[serde_json::Value]) {
    for r in reports {
        let hash = r["config_hash"].as_str().unwrap_or("");
        println!("{} seed {} config {}", r["command"].as_str().unwrap_or("?"), r["seed"], &hash[..hash.len().min(12)]);
    }
}

fn run(cli: Cli) -> Result<u8> {
    let reports = match cli.command {
        Command::Detect { common, epochs } => {
            let mut o = Overrides(Vec::new());
            o.opt("detector.epochs", &epochs);
            harness::cmd_detect(&build_config(&common, o)?)?
        }
        Command::Attack { common, attack } => {
            let mut o = Overrides(Vec::new());
            attack_overrides(&mut o, &attack);
            harness::cmd_attack(&build_config(&common, o)?)?
        }
        Command::Defend { common, defense, step, iters } => {
            let mut o = Overrides(Vec::new());
            defense_overrides(&mut o, &defense);
            o.opt("defense.step", &step);
            o.opt("defense.iterations", &iters);
            harness::cmd_defend(&build_config(&common, o)?)?
        }
        Command::Game { common, attack, defense } => {
            let mut o = Overrides(Vec::new());
            attack_overrides(&mut o, &attack);
            defense_overrides(&mut o, &defense);
            harness::cmd_game(&build_config(&common, o)?)?
        }
        Command::Baseline { common, method, budget, respect_scope, diff } => {
            let mut o = Overrides(Vec::new());
            o.opt("baseline.method", &method);
            o.opt("baseline.budget", &budget);
            if respect_scope {
                o.0.push(("baseline.respect_scope".into(), "true".into()));
            }
            o.path("defense.input_diff", &diff);
            harness::cmd_baseline(&build_config(&common, o)?)?
        }
        Command::Segment { image, common, k, r, alpha, patch, budget } => {
            let mut o = Overrides(Vec::new());
            o.path("segment.image", &Some(image));
            o.opt("segment.k", &k);
            o.opt("segment.r", &r);
            o.opt("segment.alpha", &alpha);
            o.opt("segment.patch", &patch);
            o.opt("segment.attack_budget", &budget);
            harness::cmd_segment(&build_config(&common, o)?)?
        }
        Command::Selftest { points, seed, inject_bug } => {
            let opts = SelftestOptions { inject_bug };
            let (ok, checks) = harness::cmd_selftest(points, seed, &opts)?;
            for c in &checks {
                println!(
                    "{} {:<10} points {:>4} redrawn {:>3} max_rel_err {:.3e} tol {:.0e}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.points,
                    c.redrawn,
                    c.max_rel_err,
                    c.tolerance
                );
            }
            return Ok(if ok { 0 } else { 1 });
        }
    };
    print_summaries(&reports);
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
