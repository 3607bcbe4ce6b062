//! Subcommand drivers. Each command is a function of the configuration and
//! seed list; outputs go to `<output>/seed-<s>/`. Reports are JSON objects
//! whose only non-reproducible field is `metadata.timestamp`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::attack::{attack_scope, run_attack, run_attack_on_scope, AttackConfig};
use crate::baselines::{dice, inverse_dice, mba, rta, BaselineOptions, BaselineRun, Method};
use crate::config::ExperimentConfig;
use crate::defense::{run_defense, DefenseContext};
use crate::detector::{init_detector, load_checkpoint, save_checkpoint, train, DetectorParams};
use crate::error::{Error, Result};
use crate::game::{equilibrium_check, run_game, ENUMERATION_BUDGET_LIMIT, ENUMERATION_SCOPE_LIMIT};
use crate::graph::{load_graph, Graph};
use crate::image::{encode_netpbm, image_to_graph, label_image, read_netpbm, spatial_graph, Raster};
use crate::mask::{apply_records, diff_graphs, format_diff, parse_diff, EditRecord};
use crate::metrics::{budget_used, MetricsReport};
use crate::sbm::{generate_sbm, weakest_members};
use crate::scope::CandidateScope;
use crate::selftest::{run_all, CheckOutcome, SelftestOptions};

/// Process exit status for an error: 2 configuration or input problems,
/// 3 numeric divergence, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 4,
        Error::Divergence(_) => 3,
        _ => 2,
    }
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output.join(format!("seed-{seed}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Wraps `results` with the command name, seed and configuration.
pub fn report(command: &str, cfg: &ExperimentConfig, seed: u64, results: Value) -> Value {
    json!({
        "command": command,
        "seed": seed,
        "config_hash": cfg.hash(),
        "config": cfg.entry_map(),
        "results": results,
        "metadata": { "timestamp": timestamp() },
    })
}

fn write_report(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Report text with the metadata field removed, for byte comparisons.
pub fn strip_metadata(text: &str) -> Result<String> {
    let mut v: Value = serde_json::from_str(text).map_err(|e| Error::parse("report", e.to_string()))?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("metadata");
    }
    Ok(serde_json::to_string_pretty(&v).expect("json value serializes"))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse("csv trace", e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::parse("csv trace", e.to_string()))
}

fn record_strings(records: &[EditRecord]) -> Vec<String> {
    records.iter().map(|r| r.to_string()).collect()
}

/// Clean graph, targets and (for the block model) planted blocks.
pub struct Dataset {
    pub graph: Graph,
    pub targets: Vec<usize>,
    pub blocks: Option<Vec<usize>>,
}

pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match (&cfg.data.edges, &cfg.data.features) {
        (Some(e), Some(f)) => Ok(Dataset {
            graph: load_graph(e, f)?,
            targets: cfg.data.targets.clone(),
            blocks: None,
        }),
        _ => {
            let s = generate_sbm(&cfg.data.sbm, seed)?;
            let targets = if cfg.data.targets.is_empty() {
                weakest_members(&s.graph, &s.blocks, 0).into_iter().take(2).collect()
            } else {
                cfg.data.targets.clone()
            };
            Ok(Dataset {
                graph: s.graph,
                targets,
                blocks: Some(s.blocks),
            })
        }
    }
}

fn checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.detector
        .checkpoint
        .clone()
        .unwrap_or_else(|| seed_dir(cfg, seed).join("detector.ckpt"))
}

fn require_targets(ds: &Dataset) -> Result<()> {
    if ds.targets.len() < 2 {
        return Err(Error::Config("at least two targets are required (data.targets)".into()));
    }
    Ok(())
}

pub fn train_detector(cfg: &ExperimentConfig, g: &Graph, k: usize, seed: u64) -> Result<(DetectorParams, Vec<f64>)> {
    let mut p = init_detector(cfg.dims(g.n_features(), k), seed, cfg.detector.init_gain)?;
    p.dropout_rate = cfg.detector.dropout;
    let out = train(&p, g, &cfg.train_config(seed))?;
    Ok((out.params, out.loss_history))
}

/// Fraction of nodes whose label matches the planted block under the best
/// relabeling of two communities.
fn block_agreement(labels: &[usize], blocks: &[usize]) -> f64 {
    let same = labels.iter().zip(blocks).filter(|(a, b)| a == b).count();
    let n = labels.len();
    if labels.iter().chain(blocks).all(|&l| l < 2) {
        same.max(n - same) as f64 / n as f64
    } else {
        same as f64 / n as f64
    }
}

fn metrics(det: &DetectorParams, clean: &Graph, g: &Graph, targets: &[usize]) -> Result<MetricsReport> {
    let labels = det.predict(g)?.hard;
    MetricsReport::evaluate(&labels, targets, det.k(), budget_used(clean, g)?)
}

pub fn cmd_detect(cfg: &ExperimentConfig) -> Result<Vec<Value>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ds = load_dataset(cfg, seed)?;
        let (det, history) = train_detector(cfg, &ds.graph, cfg.data.k, seed)?;
        let dir = seed_dir(cfg, seed);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_checkpoint(&det, &checkpoint_path(cfg, seed))?;
        let labels = det.predict(&ds.graph)?.hard;
        let clean = if ds.targets.len() >= 2 {
            Some(MetricsReport::evaluate(&labels, &ds.targets, det.k(), 0)?)
        } else {
            None
        };
        let results = json!({
            "n_nodes": ds.graph.n_nodes(),
            "n_edges": ds.graph.n_edges(),
            "targets": ds.targets,
            "final_loss": history.last(),
            "initial_loss": history.first(),
            "labels": labels,
            "block_agreement": ds.blocks.as_ref().map(|b| block_agreement(&labels, b)),
            "clean": clean,
        });
        let rep = report("detect", cfg, seed, results);
        write_report(&dir.join("detect_report.json"), &rep)?;
        out.push(rep);
    }
    Ok(out)
}

fn load_detector(cfg: &ExperimentConfig, seed: u64) -> Result<DetectorParams> {
    load_checkpoint(&checkpoint_path(cfg, seed))
}

pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<Vec<Value>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ds = load_dataset(cfg, seed)?;
        require_targets(&ds)?;
        let det = load_detector(cfg, seed)?;
        let acfg = cfg.attack_config(ds.targets.clone(), seed);
        let res = run_attack(&ds.graph, &det, &acfg)?;
        let dir = seed_dir(cfg, seed);
        write_file(&dir.join("attack.diff"), format_diff(&res.records).as_bytes())?;
        write_file(&dir.join("attack_trace.csv"), &csv_bytes(&res.trace)?)?;
        let results = json!({
            "targets": ds.targets,
            "budget": acfg.budget,
            "scope_size": res.mask.len(),
            "edits": record_strings(&res.records),
            "attack_loss": res.loss,
            "clean": res.clean,
            "attacked": res.metrics,
            "table_row": [res.clean.table_cell(), res.metrics.table_cell()],
        });
        let rep = report("attack", cfg, seed, results);
        write_report(&dir.join("attack_report.json"), &rep)?;
        out.push(rep);
    }
    Ok(out)
}

/// The graph a defense runs on: the clean graph with the configured diff
/// applied, falling back to this seed's `attack.diff` when it exists.
fn perturbed_input(cfg: &ExperimentConfig, seed: u64, clean: &Graph) -> Result<(Graph, Option<PathBuf>)> {
    let path = cfg
        .defense
        .input_diff
        .clone()
        .or_else(|| Some(seed_dir(cfg, seed).join("attack.diff")).filter(|p| p.exists()));
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let records = parse_diff(&text, &p.display().to_string())?;
            Ok((apply_records(clean, &records, None)?, Some(p)))
        }
        None => Ok((clean.clone(), None)),
    }
}

fn optional_detector(cfg: &ExperimentConfig, seed: u64) -> Result<Option<DetectorParams>> {
    let p = checkpoint_path(cfg, seed);
    if p.exists() {
        load_checkpoint(&p).map(Some)
    } else {
        Ok(None)
    }
}

pub fn cmd_defend(cfg: &ExperimentConfig) -> Result<Vec<Value>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ds = load_dataset(cfg, seed)?;
        let (attacked, source) = perturbed_input(cfg, seed, &ds.graph)?;
        let det = optional_detector(cfg, seed)?;
        let attack_budget = cfg.attack.budget.unwrap_or(ds.targets.len());
        let dcfg = cfg.defense_config(attack_budget, seed);
        let ctx = DefenseContext {
            detector: det.as_ref(),
            targets: &ds.targets,
            reference: Some(&ds.graph),
        };
        let res = run_defense(&attacked, &dcfg, &ctx)?;
        let dir = seed_dir(cfg, seed);
        write_file(&dir.join("defense.diff"), format_diff(&res.records).as_bytes())?;
        write_file(&dir.join("defense_trace.csv"), &csv_bytes(&res.trace)?)?;
        let clean = match (&det, ds.targets.len() >= 2) {
            (Some(d), true) => Some(metrics(d, &ds.graph, &ds.graph, &ds.targets)?),
            _ => None,
        };
        let results = json!({
            "input_diff": source.map(|p| p.display().to_string()),
            "budget": dcfg.budget,
            "scope_size": res.mask.len(),
            "edits": record_strings(&res.records),
            "rayleigh_before": res.rayleigh_before,
            "rayleigh_after": res.rayleigh,
            "clean": clean,
            "attacked": res.before,
            "defended": res.after,
        });
        let rep = report("defend", cfg, seed, results);
        write_report(&dir.join("defense_report.json"), &rep)?;
        out.push(rep);
    }
    Ok(out)
}

pub fn cmd_game(cfg: &ExperimentConfig) -> Result<Vec<Value>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ds = load_dataset(cfg, seed)?;
        require_targets(&ds)?;
        let det = load_detector(cfg, seed)?;
        let gcfg = cfg.game_config(ds.targets.clone(), seed);
        let res = run_game(&ds.graph, &det, &gcfg)?;
        let enumerable = res.attack_scope.len() <= ENUMERATION_SCOPE_LIMIT
            && res.attack_edit.budget <= ENUMERATION_BUDGET_LIMIT
            && res.defense_scope.len() <= ENUMERATION_SCOPE_LIMIT
            && res.defense_edit.budget <= ENUMERATION_BUDGET_LIMIT;
        let eq = if enumerable {
            Some(equilibrium_check(&ds.graph, &det, &gcfg, &res)?)
        } else {
            None
        };
        let dir = seed_dir(cfg, seed);
        write_file(&dir.join("game_trace.csv"), &csv_bytes(&res.trace)?)?;
        write_file(&dir.join("game_attack.diff"), format_diff(&res.attack_records).as_bytes())?;
        write_file(&dir.join("game_defense.diff"), format_diff(&res.defense_records).as_bytes())?;
        let clean = metrics(&det, &ds.graph, &ds.graph, &ds.targets)?;
        let attacked = metrics(&det, &ds.graph, &res.attacked, &ds.targets)?;
        let defended = metrics(&det, &ds.graph, &res.defended, &ds.targets)?;
        let results = json!({
            "targets": ds.targets,
            "converged": res.converged,
            "iterations": res.iterations_used,
            "attack_edits": record_strings(&res.attack_records),
            "defense_edits": record_strings(&res.defense_records),
            "attack_loss": res.attack_loss,
            "defense_loss": res.defense_loss,
            "clean": clean,
            "attack_only": attacked,
            "equilibrium": defended,
            "equilibrium_check": eq,
        });
        let rep = report("game", cfg, seed, results);
        write_report(&dir.join("game_report.json"), &rep)?;
        out.push(rep);
    }
    Ok(out)
}

pub fn run_baseline(
    method: Method,
    g: &Graph,
    targets: &[usize],
    labels: Option<&[usize]>,
    budget: usize,
    seed: u64,
    scope: Option<&CandidateScope>,
    delete_prob: f64,
) -> Result<BaselineRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = BaselineOptions {
        scope,
        split: None,
        delete_prob,
    };
    match method {
        Method::Dice => dice(g, targets, budget, seed, &mut rng, &opts),
        Method::Rta => rta(g, targets, budget, seed, &mut rng, &opts),
        Method::InverseDice => inverse_dice(g, targets, budget, seed, &mut rng, &opts),
        Method::Mba => {
            let labels = labels.ok_or_else(|| Error::Config("mba needs community labels (train a detector first)".into()))?;
            mba(g, labels, budget, seed, &mut rng, &opts)
        }
    }
}

fn method_slug(m: Method) -> &'static str {
    match m {
        Method::Dice => "dice",
        Method::Mba => "mba",
        Method::Rta => "rta",
        Method::InverseDice => "inverse_dice",
    }
}

pub fn cmd_baseline(cfg: &ExperimentConfig) -> Result<Vec<Value>> {
    cfg.validate()?;
    let method = cfg.baseline.method;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ds = load_dataset(cfg, seed)?;
        require_targets(&ds)?;
        let det = optional_detector(cfg, seed)?;
        let (input, source) = if method == Method::InverseDice {
            perturbed_input(cfg, seed, &ds.graph)?
        } else {
            (ds.graph.clone(), None)
        };
        let labels = det.as_ref().map(|d| d.predict(&input)).transpose()?.map(|a| a.hard);
        let acfg = cfg.attack_config(ds.targets.clone(), seed);
        let scope = if cfg.baseline.respect_scope {
            Some(attack_scope(&input, &acfg)?)
        } else {
            None
        };
        let budget = cfg.baseline.budget.unwrap_or(acfg.budget);
        let run = run_baseline(method, &input, &ds.targets, labels.as_deref(), budget, seed, scope.as_ref(), cfg.baseline.delete_prob)?;
        let dir = seed_dir(cfg, seed);
        let name = method_slug(method);
        write_file(&dir.join(format!("baseline_{name}.diff")), format_diff(&run.edits).as_bytes())?;
        let (before, after) = match &det {
            Some(d) => (
                Some(metrics(d, &ds.graph, &input, &ds.targets)?),
                Some(metrics(d, &ds.graph, &run.graph, &ds.targets)?),
            ),
            None => (None, None),
        };
        let results = json!({
            "method": name,
            "budget": budget,
            "input_diff": source.map(|p| p.display().to_string()),
            "respect_scope": cfg.baseline.respect_scope,
            "edits": record_strings(&run.edits),
            "before": before,
            "after": after,
        });
        let rep = report("baseline", cfg, seed, results);
        write_report(&dir.join(format!("baseline_{name}_report.json")), &rep)?;
        out.push(rep);
    }
    Ok(out)
}

/// Channel values scaled to `[0, 1]` plus a constant column.
pub fn segmentation_features(img: &Raster) -> Array2<f64> {
    let c = img.channels;
    let scale = f64::from(img.maxval.max(1));
    Array2::from_shape_fn((img.n_pixels(), c + 1), |(p, j)| {
        if j < c {
            f64::from(img.data[p * c + j]) / scale
        } else {
            1.0
        }
    })
}

pub struct Segmentation {
    pub graph: Graph,
    pub detector: DetectorParams,
    pub labels: Vec<usize>,
}

pub fn segment_image(cfg: &ExperimentConfig, img: &Raster, seed: u64) -> Result<Segmentation> {
    let s = &cfg.segment;
    if s.k > img.n_pixels() {
        return Err(Error::Config(format!(
            "K = {} exceeds the pixel count {}",
            s.k,
            img.n_pixels()
        )));
    }
    let g = image_to_graph(img, s.r, s.alpha)?.with_features(segmentation_features(img))?;
    let (det, _) = train_detector(cfg, &g, s.k, seed)?;
    let labels = det.predict(&g)?.hard;
    Ok(Segmentation {
        graph: g,
        detector: det,
        labels,
    })
}

fn segment_count(labels: &[usize]) -> usize {
    labels.iter().collect::<std::collections::BTreeSet<_>>().len()
}

/// Whether two labelings split `patch` into different groups.
pub fn patch_structure_changed(before: &[usize], after: &[usize], patch: &[usize]) -> bool {
    patch.iter().any(|&a| {
        patch
            .iter()
            .any(|&b| (before[a] == before[b]) != (after[a] == after[b]))
    })
}

/// Budgeted attack on a pixel patch; the scope is measured on the spatial
/// lattice so that pairs across a color boundary are reachable.
pub fn attack_patch(cfg: &ExperimentConfig, img: &Raster, seg: &Segmentation, seed: u64) -> Result<(Graph, Vec<EditRecord>)> {
    let s = &cfg.segment;
    let reach = spatial_graph(img, s.r)?;
    let scope = CandidateScope::build_with_reach(&seg.graph, &reach, &s.patch, s.hops, cfg.attack.scope_mode)?;
    let mut acfg: AttackConfig = cfg.attack_config(s.patch.clone(), seed);
    acfg.budget = s.attack_budget;
    acfg.hops = s.hops;
    let res = run_attack_on_scope(&seg.graph, &seg.detector, &acfg, &scope)?;
    Ok((res.attacked, res.records))
}

pub fn cmd_segment(cfg: &ExperimentConfig) -> Result<Vec<Value>> {
    cfg.validate()?;
    let path = cfg
        .segment
        .image
        .clone()
        .ok_or_else(|| Error::Config("no input image (segment.image)".into()))?;
    let img = read_netpbm(&path)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let seg = segment_image(cfg, &img, seed)?;
        let dir = seed_dir(cfg, seed);
        let label_img = label_image(img.width, img.height, &seg.labels)?;
        write_file(&dir.join("segments.pgm"), &encode_netpbm(&label_img))?;
        let mut attack = Value::Null;
        if !cfg.segment.patch.is_empty() && cfg.segment.attack_budget > 0 {
            let (attacked, records) = attack_patch(cfg, &img, &seg, seed)?;
            let after = seg.detector.predict(&attacked)?.hard;
            write_file(&dir.join("segment_attack.diff"), format_diff(&records).as_bytes())?;
            let after_img = label_image(img.width, img.height, &after)?;
            write_file(&dir.join("segments_attacked.pgm"), &encode_netpbm(&after_img))?;
            attack = json!({
                "patch": cfg.segment.patch,
                "edits": record_strings(&records),
                "segments_after": segment_count(&after),
                "patch_changed": patch_structure_changed(&seg.labels, &after, &cfg.segment.patch),
                "budget_used": diff_graphs(&seg.graph, &attacked)?.len(),
            });
        }
        let results = json!({
            "image": path.display().to_string(),
            "width": img.width,
            "height": img.height,
            "k": cfg.segment.k,
            "r": cfg.segment.r,
            "alpha": cfg.segment.alpha,
            "segments": segment_count(&seg.labels),
            "segment_sizes": crate::metrics::community_sizes(&seg.labels, cfg.segment.k),
            "attack": attack,
        });
        let rep = report("segment", cfg, seed, results);
        write_report(&dir.join("segment_report.json"), &rep)?;
        out.push(rep);
    }
    Ok(out)
}

/// Runs the finite-difference suite; the report lists each check.
pub fn cmd_selftest(points: usize, seed: u64, opts: &SelftestOptions) -> Result<(bool, Vec<CheckOutcome>)> {
    let checks = run_all(points, seed, opts)?;
    Ok((checks.iter().all(CheckOutcome::passed), checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Divergence("x".into())), 3);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), 4);
    }

    #[test]
    fn patch_change() {
        assert!(!patch_structure_changed(&[0, 0, 1], &[1, 1, 0], &[0, 1, 2]));
        assert!(patch_structure_changed(&[0, 0, 1], &[0, 1, 1], &[0, 1, 2]));
        assert!(!patch_structure_changed(&[0, 0, 1], &[0, 1, 1], &[0, 2]));
    }

    #[test]
    fn metadata_is_stripped() {
        let cfg = ExperimentConfig::default();
        let a = serde_json::to_string(&report("x", &cfg, 1, json!({"v": 1}))).unwrap();
        let mut b: Value = serde_json::from_str(&a).unwrap();
        b["metadata"]["timestamp"] = json!(0);
        let b = serde_json::to_string(&b).unwrap();
        assert_eq!(strip_metadata(&a).unwrap(), strip_metadata(&b).unwrap());
    }

    #[test]
    fn agreement_ignores_label_swap() {
        assert_eq!(block_agreement(&[1, 1, 0, 0], &[0, 0, 1, 1]), 1.0);
        assert_eq!(block_agreement(&[0, 1, 0, 0], &[0, 0, 1, 1]), 0.75);
    }
}
