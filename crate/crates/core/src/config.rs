//! Experiment configuration: `key = value` lines grouped under `[section]`
//! headers. Comments start with `#` or `;`. Unknown keys are rejected.
//!
//! ```text
//! [data]
//! sizes = 20,20
//! targets = 3,7
//!
//! [attack]
//! budget = 2
//! ```
//!
//! Every value has a default; [`ExperimentConfig::canonical`] renders the
//! fully resolved configuration, one `section.key=value` line per entry in
//! sorted order, and its SHA-256 is the hash recorded in reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::attack::AttackConfig;
use crate::baselines::Method;
use crate::defense::{DefenseConfig, ScopePolicy, SignalPolicy};
use crate::detector::{Dims, TrainConfig};
use crate::error::{Error, Result};
use crate::game::{GameConfig, IftForm};
use crate::mask::DiscretizeMode;
use crate::metrics::config_hash;
use crate::sbm::SbmSpec;
use crate::scope::ScopeMode;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Edge list; when unset the built-in block model is used.
    pub edges: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub sbm: SbmSpec,
    pub k: usize,
    /// Empty means the two most loosely attached members of block 0 (block
    /// model only).
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub embed: usize,
    pub head: usize,
    pub dropout: f64,
    pub init_gain: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub gamma: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSection {
    /// Unset means one edit per target.
    pub budget: Option<usize>,
    pub hops: usize,
    pub scope_mode: ScopeMode,
    pub step: f64,
    pub iterations: usize,
    pub report_every: usize,
    pub init_amplitude: f64,
    pub discretize: DiscretizeMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseSection {
    /// Unset means the attack budget.
    pub budget: Option<usize>,
    pub hops: usize,
    pub scope_mode: ScopeMode,
    pub scope_policy: ScopePolicy,
    pub signal_policy: SignalPolicy,
    pub step: f64,
    pub iterations: usize,
    pub report_every: usize,
    pub init_amplitude: f64,
    pub discretize: DiscretizeMode,
    /// Edit diff applied to the clean graph before defending.
    pub input_diff: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSection {
    pub max_iterations: usize,
    pub patience: usize,
    pub tolerance: usize,
    pub ift_lambda: f64,
    pub ift_form: IftForm,
    pub rebuild_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSection {
    pub method: Method,
    pub budget: Option<usize>,
    pub respect_scope: bool,
    pub delete_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSection {
    pub image: Option<PathBuf>,
    pub k: usize,
    pub r: f64,
    pub alpha: f64,
    /// Pixel indices attacked after segmenting; empty skips the attack.
    pub patch: Vec<usize>,
    pub attack_budget: usize,
    pub hops: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub game: GameSection,
    pub baseline: BaselineSection,
    pub segment: SegmentSection,
    pub output: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let a = AttackConfig::new(Vec::new());
        let d = DefenseConfig::default();
        let g = GameConfig::new(a.clone());
        let t = TrainConfig::default();
        let dims = Dims::with_defaults(1, 2);
        ExperimentConfig {
            data: DataConfig {
                edges: None,
                features: None,
                sbm: SbmSpec::default(),
                k: 2,
                targets: Vec::new(),
            },
            detector: DetectorConfig {
                hidden: dims.h,
                embed: dims.v,
                head: dims.r,
                dropout: 0.3,
                init_gain: 1.0,
                epochs: t.epochs,
                lr: t.lr,
                lr_decay: t.lr_decay,
                gamma: t.gamma,
                checkpoint: None,
            },
            attack: AttackSection {
                budget: None,
                hops: a.hops,
                scope_mode: a.scope_mode,
                step: a.step,
                iterations: a.iterations,
                report_every: a.report_every,
                init_amplitude: a.init_amplitude,
                discretize: a.discretize,
            },
            defense: DefenseSection {
                budget: None,
                hops: d.hops,
                scope_mode: d.scope_mode,
                scope_policy: ScopePolicy::PerturbedNeighborhood,
                signal_policy: d.signal_policy,
                step: d.step,
                iterations: d.iterations,
                report_every: d.report_every,
                init_amplitude: d.init_amplitude,
                discretize: d.discretize,
                input_diff: None,
            },
            game: GameSection {
                max_iterations: g.max_iterations,
                patience: g.patience,
                tolerance: g.tolerance,
                ift_lambda: g.ift_lambda,
                ift_form: g.ift_form,
                rebuild_every: g.rebuild_every,
            },
            baseline: BaselineSection {
                method: Method::Dice,
                budget: None,
                respect_scope: false,
                delete_prob: 0.5,
            },
            segment: SegmentSection {
                image: None,
                k: 2,
                r: 1.0,
                alpha: 20.0,
                patch: Vec::new(),
                attack_budget: 2,
                hops: 2,
            },
            output: PathBuf::from("out"),
            seeds: vec![0],
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_opt_usize(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "" | "auto" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        v => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

fn mode_name(m: ScopeMode) -> &'static str {
    match m {
        ScopeMode::PairsInNeighborhood => "pairs_in_neighborhood",
        ScopeMode::IncidentToTarget => "incident_to_target",
    }
}

fn discretize_name(m: DiscretizeMode) -> &'static str {
    match m {
        DiscretizeMode::TopK => "topk",
        DiscretizeMode::Sample => "sample",
    }
}

fn scope_policy_name(p: ScopePolicy) -> &'static str {
    match p {
        ScopePolicy::Auto => "auto",
        ScopePolicy::Full => "full",
        ScopePolicy::PerturbedNeighborhood => "perturbed_neighborhood",
        ScopePolicy::TargetKhop => "target_khop",
    }
}

fn signal_policy_name(p: SignalPolicy) -> &'static str {
    match p {
        SignalPolicy::PerColumnMean => "per_column_mean",
        SignalPolicy::FeatureMean => "feature_mean",
    }
}

fn ift_name(f: IftForm) -> &'static str {
    match f {
        IftForm::Standard => "standard",
        IftForm::PaperLiteral => "paper_literal",
        IftForm::Simultaneous => "simultaneous",
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Dice => "dice",
        Method::Mba => "mba",
        Method::Rta => "rta",
        Method::InverseDice => "inverse_dice",
    }
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("run");
            for (key, value) in props.iter() {
                let full = format!("{section}.{key}");
                if seen.insert(full.clone(), ()).is_some() {
                    return Err(Error::Config(format!("duplicate key {full}")));
                }
                cfg.set(&full, value)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text)
    }

    /// Sets one `section.key` entry, as written in a config file.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "run.output" => self.output = PathBuf::from(v.trim()),
            "run.seeds" => self.seeds = parse_list(k, v)?,
            "data.edges" => self.data.edges = parse_opt_path(v),
            "data.features" => self.data.features = parse_opt_path(v),
            "data.k" => self.data.k = parse_value(k, v)?,
            "data.targets" => self.data.targets = parse_list(k, v)?,
            "data.sizes" => self.data.sbm.sizes = parse_list(k, v)?,
            "data.p_in" => self.data.sbm.p_in = parse_value(k, v)?,
            "data.p_out" => self.data.sbm.p_out = parse_value(k, v)?,
            "data.feature_signal" => self.data.sbm.feature_signal = parse_value(k, v)?,
            "data.feature_noise" => self.data.sbm.feature_noise = parse_value(k, v)?,
            "data.noise_dims" => self.data.sbm.noise_dims = parse_value(k, v)?,
            "detector.hidden" => self.detector.hidden = parse_value(k, v)?,
            "detector.embed" => self.detector.embed = parse_value(k, v)?,
            "detector.head" => self.detector.head = parse_value(k, v)?,
            "detector.dropout" => self.detector.dropout = parse_value(k, v)?,
            "detector.init_gain" => self.detector.init_gain = parse_value(k, v)?,
            "detector.epochs" => self.detector.epochs = parse_value(k, v)?,
            "detector.lr" => self.detector.lr = parse_value(k, v)?,
            "detector.lr_decay" => self.detector.lr_decay = parse_value(k, v)?,
            "detector.gamma" => self.detector.gamma = parse_value(k, v)?,
            "detector.checkpoint" => self.detector.checkpoint = parse_opt_path(v),
            "attack.budget" => self.attack.budget = parse_opt_usize(k, v)?,
            "attack.hops" => self.attack.hops = parse_value(k, v)?,
            "attack.scope_mode" => self.attack.scope_mode = parse_enum(k, v)?,
            "attack.step" => self.attack.step = parse_value(k, v)?,
            "attack.iterations" => self.attack.iterations = parse_value(k, v)?,
            "attack.report_every" => self.attack.report_every = parse_value(k, v)?,
            "attack.init_amplitude" => self.attack.init_amplitude = parse_value(k, v)?,
            "attack.discretize" => self.attack.discretize = parse_enum(k, v)?,
            "defense.budget" => self.defense.budget = parse_opt_usize(k, v)?,
            "defense.hops" => self.defense.hops = parse_value(k, v)?,
            "defense.scope_mode" => self.defense.scope_mode = parse_enum(k, v)?,
            "defense.scope_policy" => self.defense.scope_policy = parse_enum(k, v)?,
            "defense.signal_policy" => self.defense.signal_policy = parse_enum(k, v)?,
            "defense.step" => self.defense.step = parse_value(k, v)?,
            "defense.iterations" => self.defense.iterations = parse_value(k, v)?,
            "defense.report_every" => self.defense.report_every = parse_value(k, v)?,
            "defense.init_amplitude" => self.defense.init_amplitude = parse_value(k, v)?,
            "defense.discretize" => self.defense.discretize = parse_enum(k, v)?,
            "defense.input_diff" => self.defense.input_diff = parse_opt_path(v),
            "game.max_iterations" => self.game.max_iterations = parse_value(k, v)?,
            "game.patience" => self.game.patience = parse_value(k, v)?,
            "game.tolerance" => self.game.tolerance = parse_value(k, v)?,
            "game.ift_lambda" => self.game.ift_lambda = parse_value(k, v)?,
            "game.ift_form" => self.game.ift_form = parse_enum(k, v)?,
            "game.rebuild_every" => self.game.rebuild_every = parse_value(k, v)?,
            "baseline.method" => self.baseline.method = parse_enum(k, v)?,
            "baseline.budget" => self.baseline.budget = parse_opt_usize(k, v)?,
            "baseline.respect_scope" => self.baseline.respect_scope = parse_bool(k, v)?,
            "baseline.delete_prob" => self.baseline.delete_prob = parse_value(k, v)?,
            "segment.image" => self.segment.image = parse_opt_path(v),
            "segment.k" => self.segment.k = parse_value(k, v)?,
            "segment.r" => self.segment.r = parse_value(k, v)?,
            "segment.alpha" => self.segment.alpha = parse_value(k, v)?,
            "segment.patch" => self.segment.patch = parse_list(k, v)?,
            "segment.attack_budget" => self.segment.attack_budget = parse_value(k, v)?,
            "segment.hops" => self.segment.hops = parse_value(k, v)?,
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        let d = &self.data;
        let t = &self.detector;
        let a = &self.attack;
        let f = &self.defense;
        let g = &self.game;
        let b = &self.baseline;
        let s = &self.segment;
        BTreeMap::from([
            ("run.output", self.output.display().to_string()),
            ("run.seeds", join(&self.seeds)),
            ("data.edges", opt_path(&d.edges)),
            ("data.features", opt_path(&d.features)),
            ("data.k", d.k.to_string()),
            ("data.targets", join(&d.targets)),
            ("data.sizes", join(&d.sbm.sizes)),
            ("data.p_in", d.sbm.p_in.to_string()),
            ("data.p_out", d.sbm.p_out.to_string()),
            ("data.feature_signal", d.sbm.feature_signal.to_string()),
            ("data.feature_noise", d.sbm.feature_noise.to_string()),
            ("data.noise_dims", d.sbm.noise_dims.to_string()),
            ("detector.hidden", t.hidden.to_string()),
            ("detector.embed", t.embed.to_string()),
            ("detector.head", t.head.to_string()),
            ("detector.dropout", t.dropout.to_string()),
            ("detector.init_gain", t.init_gain.to_string()),
            ("detector.epochs", t.epochs.to_string()),
            ("detector.lr", t.lr.to_string()),
            ("detector.lr_decay", t.lr_decay.to_string()),
            ("detector.gamma", t.gamma.to_string()),
            ("detector.checkpoint", opt_path(&t.checkpoint)),
            ("attack.budget", opt_usize(a.budget)),
            ("attack.hops", a.hops.to_string()),
            ("attack.scope_mode", mode_name(a.scope_mode).into()),
            ("attack.step", a.step.to_string()),
            ("attack.iterations", a.iterations.to_string()),
            ("attack.report_every", a.report_every.to_string()),
            ("attack.init_amplitude", a.init_amplitude.to_string()),
            ("attack.discretize", discretize_name(a.discretize).into()),
            ("defense.budget", opt_usize(f.budget)),
            ("defense.hops", f.hops.to_string()),
            ("defense.scope_mode", mode_name(f.scope_mode).into()),
            ("defense.scope_policy", scope_policy_name(f.scope_policy).into()),
            ("defense.signal_policy", signal_policy_name(f.signal_policy).into()),
            ("defense.step", f.step.to_string()),
            ("defense.iterations", f.iterations.to_string()),
            ("defense.report_every", f.report_every.to_string()),
            ("defense.init_amplitude", f.init_amplitude.to_string()),
            ("defense.discretize", discretize_name(f.discretize).into()),
            ("defense.input_diff", opt_path(&f.input_diff)),
            ("game.max_iterations", g.max_iterations.to_string()),
            ("game.patience", g.patience.to_string()),
            ("game.tolerance", g.tolerance.to_string()),
            ("game.ift_lambda", g.ift_lambda.to_string()),
            ("game.ift_form", ift_name(g.ift_form).into()),
            ("game.rebuild_every", g.rebuild_every.to_string()),
            ("baseline.method", method_name(b.method).into()),
            ("baseline.budget", opt_usize(b.budget)),
            ("baseline.respect_scope", b.respect_scope.to_string()),
            ("baseline.delete_prob", b.delete_prob.to_string()),
            ("segment.image", opt_path(&s.image)),
            ("segment.k", s.k.to_string()),
            ("segment.r", s.r.to_string()),
            ("segment.alpha", s.alpha.to_string()),
            ("segment.patch", join(&s.patch)),
            ("segment.attack_budget", s.attack_budget.to_string()),
            ("segment.hops", s.hops.to_string()),
        ])
    }

    /// Resolved configuration, one sorted `section.key=value` per line.
    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Canonical form in config-file syntax, parseable by [`Self::from_str`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (k, v) in self.entries() {
            let (section, key) = k.split_once('.').expect("dotted key");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }

    pub fn entry_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Checks referenced input files and seed uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be unique".into()));
        }
        if self.data.edges.is_some() != self.data.features.is_some() {
            return Err(Error::Config("data.edges and data.features must be given together".into()));
        }
        for p in [&self.data.edges, &self.data.features, &self.segment.image].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                ));
            }
        }
        if self.data.k < 1 || self.segment.k < 1 {
            return Err(Error::Config("community count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.detector.dropout) {
            return Err(Error::Config("detector.dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.detector.epochs,
            lr: self.detector.lr,
            lr_decay: self.detector.lr_decay,
            gamma: self.detector.gamma,
            seed,
        }
    }

    pub fn dims(&self, d: usize, k: usize) -> Dims {
        Dims {
            d,
            h: self.detector.hidden,
            v: self.detector.embed,
            r: self.detector.head,
            k,
        }
    }

    pub fn attack_config(&self, targets: Vec<usize>, seed: u64) -> AttackConfig {
        let a = &self.attack;
        let mut cfg = AttackConfig::new(targets);
        if let Some(b) = a.budget {
            cfg.budget = b;
        }
        cfg.hops = a.hops;
        cfg.scope_mode = a.scope_mode;
        cfg.step = a.step;
        cfg.iterations = a.iterations;
        cfg.report_every = a.report_every;
        cfg.init_amplitude = a.init_amplitude;
        cfg.discretize = a.discretize;
        cfg.seed = seed;
        cfg
    }

    pub fn defense_config(&self, attack_budget: usize, seed: u64) -> DefenseConfig {
        let f = &self.defense;
        DefenseConfig {
            budget: f.budget.unwrap_or(attack_budget),
            step: f.step,
            iterations: f.iterations,
            report_every: f.report_every,
            scope_policy: f.scope_policy,
            signal_policy: f.signal_policy,
            hops: f.hops,
            scope_mode: f.scope_mode,
            init_amplitude: f.init_amplitude,
            discretize: f.discretize,
            seed,
        }
    }

    pub fn game_config(&self, targets: Vec<usize>, seed: u64) -> GameConfig {
        let attack = self.attack_config(targets, seed);
        let defense = self.defense_config(attack.budget, seed);
        let g = &self.game;
        GameConfig {
            attack,
            defense,
            max_iterations: g.max_iterations,
            patience: g.patience,
            tolerance: g.tolerance,
            ift_lambda: g.ift_lambda,
            ift_form: g.ift_form,
            rebuild_every: g.rebuild_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("attack.budget", "3").unwrap();
        cfg.set("data.targets", "1, 4").unwrap();
        cfg.set("defense.input_diff", "runs/a.diff").unwrap();
        let back = ExperimentConfig::from_str(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn parses_sections_and_comments() {
        let text = "seeds = 1,2\n# note\n[attack]\nstep = 0.5 \n; other\n[segment]\nk = 3\n";
        let cfg = ExperimentConfig::from_str(text).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.attack.step, 0.5);
        assert_eq!(cfg.segment.k, 3);
        assert_eq!(cfg.segment.r, 1.0);
        assert_eq!(cfg.segment.alpha, 20.0);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(ExperimentConfig::from_str("[attack]\nbudgte = 2\n").is_err());
        assert!(ExperimentConfig::from_str("[attack]\nbudget = 2\nbudget = 3\n").is_err());
        assert!(ExperimentConfig::from_str("[attack]\nbudget = two\n").is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.set("attack.step", "0.2").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn validation() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![1];
        cfg.data.edges = Some("/nonexistent/e.txt".into());
        cfg.data.features = Some("/nonexistent/x.csv".into());
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/e.txt"), "{err}");
    }
}
