//! Batch commands behind the `cachetrap` binary. Each command reads one JSON
//! run configuration (plus dotted flag overrides), runs a pipeline stage and
//! writes a `cachetrap-report/1` report into the output directory.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bitflip::BitCoordinate;
use crate::config::ModelConfig;
use crate::data::{
    load_labeled_jsonl, prepare_prompts, sample_calibration, Prompt, TokenizerMode, TokenizerSpec, Verbalizer,
};
use crate::error::{Error, Result};
use crate::eval::evaluate_attack;
use crate::fault_model::{filter_feasible, DramMapping, FeasibilityConstraint, MemoryLayoutModel, PrefillSampler};
use crate::fixture::{check_fixture, Fixture};
use crate::kv_cache::CacheLayout;
use crate::model::{build_synthetic_model, build_trojan_demo_model, load_model, Model, TargetChannel};
use crate::report::{envelope, to_canonical_string};
use crate::search::{
    compute_lss, cvs_from_caches, exhaustive_search_oracle, prefill_prompts, run_search, select_sensitive_layers,
    select_topk, CorruptionMap, OracleScope, ScopeGrid, SearchConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INCOMPLETE: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;
pub const EXIT_GUARD: i32 = 5;

/// Process exit code for an error that aborted a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Load(_) | Error::Dataset(_) | Error::Io(_) | Error::Json(_) => {
            EXIT_INPUT
        }
        Error::Guard { .. } => EXIT_GUARD,
        _ => EXIT_INTERNAL,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// CTKV v1 checkpoint.
    Path(PathBuf),
    Synthetic { config: ModelConfig, seed: u64 },
    TrojanDemo {
        config: ModelConfig,
        targets: Vec<TargetChannel>,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSource {
    pub mode: TokenizerMode,
    pub cue_token: u32,
    /// JSON object `{token-string: id}`; required for `vocab_greedy`.
    #[serde(default)]
    pub vocab_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FeasibilitySection {
    /// Defaults to every bank allowed, 0 -> 1 only.
    #[serde(default)]
    pub constraint: Option<FeasibilityConstraint>,
    #[serde(default)]
    pub mapping: DramMapping,
    /// Arena start, in cache words.
    #[serde(default)]
    pub arena_base: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("cachetrap-out")
}

/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub calibration_path: PathBuf,
    pub victim_path: PathBuf,
    /// Defaults to the demo tokenizer, else byte-level with cue `vocab - 1`.
    #[serde(default)]
    pub tokenizer: Option<TokenizerSource>,
    /// Defaults to the demo verbalizer; required otherwise.
    #[serde(default)]
    pub verbalizer_path: Option<PathBuf>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub feasibility: FeasibilitySection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// A parsed run configuration and the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Sets `path` (dot separated) in a JSON tree, creating objects as needed.
/// `raw` is parsed as JSON when possible, otherwise taken as a string.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key {path:?}")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("override {path:?} descends into a non-object")));
        }
        let obj = node.as_object_mut().expect("checked object");
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    match node {
        Value::Object(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("override {path:?} descends into a non-object"))),
    }
}

/// Reads the config file and applies `(dotted key, raw value)` overrides in
/// order before deserializing.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config {} not readable: {e}", path.display())))?;
    let mut tree: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    for (k, v) in overrides {
        apply_override(&mut tree, k, v)?;
    }
    let config: RunConfig =
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, base_dir })
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub reports: Vec<PathBuf>,
    /// Human-readable summary for stdout.
    pub summary: String,
}

/// Model plus the readout pieces every command needs.
pub struct Session {
    pub loaded: LoadedConfig,
    pub model: Model,
    pub tokenizer: TokenizerSpec,
    pub verbalizer: Verbalizer,
}

impl Session {
    pub fn open(loaded: LoadedConfig) -> Result<Self> {
        let cfg = &loaded.config;
        let (model, demo_tok, demo_verb) = match &cfg.model {
            ModelSource::Path(p) => {
                let path = loaded.resolve(p);
                let f = fs::File::open(&path)
                    .map_err(|e| Error::Input(format!("model {} not readable: {e}", path.display())))?;
                (load_model(BufReader::new(f))?, None, None)
            }
            ModelSource::Synthetic { config, seed } => (build_synthetic_model(config.clone(), *seed)?, None, None),
            ModelSource::TrojanDemo { config, targets, seed } => {
                let demo = build_trojan_demo_model(config.clone(), targets, *seed)?;
                (demo.model, Some(demo.tokenizer), Some(demo.verbalizer))
            }
        };
        let vocab = model.config.vocab_size;
        let tokenizer = match (&cfg.tokenizer, demo_tok) {
            (Some(src), _) => {
                let vocab_map = match &src.vocab_path {
                    Some(p) => {
                        let path = loaded.resolve(p);
                        let text = fs::read_to_string(&path)
                            .map_err(|e| Error::Input(format!("vocab {} not readable: {e}", path.display())))?;
                        serde_json::from_str(&text)
                            .map_err(|e| Error::Input(format!("vocab {}: {e}", path.display())))?
                    }
                    None => Default::default(),
                };
                TokenizerSpec {
                    mode: src.mode,
                    vocab: vocab_map,
                    cue_token: src.cue_token,
                }
            }
            (None, Some(t)) => t,
            (None, None) => TokenizerSpec::byte_level(vocab.saturating_sub(1) as u32),
        };
        tokenizer.validate(vocab)?;
        let verbalizer = match (&cfg.verbalizer_path, demo_verb) {
            (Some(p), _) => {
                let path = loaded.resolve(p);
                let text = fs::read_to_string(&path)
                    .map_err(|e| Error::Input(format!("verbalizer {} not readable: {e}", path.display())))?;
                Verbalizer::from_json(&text)?
            }
            (None, Some(v)) => v,
            (None, None) => return Err(Error::Config("verbalizer_path is required for this model".into())),
        };
        verbalizer.check_vocab(vocab)?;
        cfg.search.validate(model.config.n_layers, model.config.cache_dtype)?;
        Ok(Self {
            loaded,
            model,
            tokenizer,
            verbalizer,
        })
    }

    fn config(&self) -> &RunConfig {
        &self.loaded.config
    }

    /// Checks both dataset paths exist and differ.
    pub fn check_datasets(&self) -> Result<(PathBuf, PathBuf)> {
        let calib = self.loaded.resolve(&self.config().calibration_path);
        let victim = self.loaded.resolve(&self.config().victim_path);
        if !calib.is_file() {
            return Err(Error::Input(format!("calibration not found: {}", calib.display())));
        }
        if !victim.is_file() {
            return Err(Error::Input(format!("victim not found: {}", victim.display())));
        }
        if fs::canonicalize(&calib)? == fs::canonicalize(&victim)? {
            return Err(Error::Config(format!(
                "calibration and victim must be distinct files, both are {}",
                calib.display()
            )));
        }
        Ok((calib, victim))
    }

    fn prompts_from(&self, name: &str, path: &Path, sample: Option<(usize, u64)>) -> Result<Vec<Prompt>> {
        let f = fs::File::open(path)?;
        let mut set = load_labeled_jsonl(name, BufReader::new(f))?;
        if let Some((n, seed)) = sample {
            set = sample_calibration(&set, n, seed)?;
        }
        let prompts = prepare_prompts(&set, &self.tokenizer, self.model.config.max_seq)?;
        if let Some(p) = prompts.iter().find(|p| p.label >= self.verbalizer.num_classes()) {
            return Err(Error::Input(format!(
                "{name} label {} has no verbalizer token ({} classes)",
                p.label,
                self.verbalizer.num_classes()
            )));
        }
        Ok(prompts)
    }

    /// The seeded calibration subset the search runs on.
    pub fn calibration_prompts(&self) -> Result<Vec<Prompt>> {
        let (calib, _) = self.check_datasets()?;
        let s = &self.config().search;
        self.prompts_from("calibration", &calib, Some((s.calibration_samples, s.seed)))
    }

    pub fn victim_prompts(&self) -> Result<Vec<Prompt>> {
        let (_, victim) = self.check_datasets()?;
        self.prompts_from("victim", &victim, None)
    }

    fn write_report<P: Serialize>(&self, file: &str, stage: &str, payload: &P) -> Result<PathBuf> {
        let dir = self.loaded.resolve(&self.config().output_dir);
        fs::create_dir_all(&dir)?;
        let path = dir.join(file);
        let doc = envelope(stage, self.config(), payload)?;
        fs::write(&path, to_canonical_string(&doc)?)?;
        Ok(path)
    }
}

#[derive(Serialize)]
struct LssPayload<'a> {
    report: &'a crate::search::LssReport,
    layer_subset: &'a [usize],
}

pub fn cmd_lss(session: &Session) -> Result<CommandOutcome> {
    let prompts = session.calibration_prompts()?;
    let report = compute_lss(&session.model, &prompts)?;
    let subset = select_sensitive_layers(&report, session.config().search.m)?;
    let path = session.write_report(
        "lss.json",
        "lss",
        &LssPayload {
            report: &report,
            layer_subset: &subset.0,
        },
    )?;
    let mut summary = String::new();
    for (l, s) in report.scores.iter().enumerate() {
        summary.push_str(&format!("layer {l}: lss {s:.6}\n"));
    }
    summary.push_str(&format!("selected layers: {:?}\n", subset.0));
    Ok(CommandOutcome {
        exit_code: EXIT_OK,
        reports: vec![path],
        summary,
    })
}

#[derive(Serialize)]
struct SearchTrace<'a> {
    lss: &'a crate::search::LssReport,
    layer_subset: &'a [usize],
    cvs: &'a crate::search::CvsTable,
    candidates: &'a crate::search::CandidateSet,
}

fn describe(c: &BitCoordinate) -> String {
    format!(
        "layer {} head {} channel {} bit {} ({:?}, {:?})",
        c.layer, c.kv_head, c.channel, c.bit, c.token_pos, c.mode
    )
}

pub fn cmd_search(session: &Session) -> Result<CommandOutcome> {
    let prompts = session.calibration_prompts()?;
    let out = run_search(&session.model, &prompts, &session.verbalizer, &session.config().search)?;
    let reports = vec![
        session.write_report("corruption_map.json", "search", &out.map)?,
        session.write_report("asr_matrix.json", "search.asr_matrix", &out.matrix)?,
        session.write_report(
            "search_trace.json",
            "search.trace",
            &SearchTrace {
                lss: &out.lss,
                layer_subset: &out.layers.0,
                cvs: &out.cvs,
                candidates: &out.candidates,
            },
        )?,
    ];
    let mut summary = format!(
        "layers {:?}, {} candidate coordinates, {} calibration samples\n",
        out.layers.0,
        out.candidates.coordinates.len(),
        out.matrix.samples
    );
    for c in &out.map.classes {
        summary.push_str(&format!(
            "class {}: {} asr {:.4} ({} fallbacks)\n",
            c.class,
            describe(&c.coordinate),
            c.asr,
            c.ranked.len().saturating_sub(1)
        ));
    }
    let exit_code = if out.map.complete {
        EXIT_OK
    } else {
        summary.push_str(&format!(
            "incomplete map: classes {:?} below tau {}\n",
            out.map.failing_classes, out.map.threshold
        ));
        EXIT_INCOMPLETE
    };
    Ok(CommandOutcome {
        exit_code,
        reports,
        summary,
    })
}

/// Reads a corruption map from a search or feasibility report, or a bare map.
pub fn read_map(path: &Path) -> Result<CorruptionMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("map {} not readable: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text)?;
    let payload = doc.get("payload").unwrap_or(&doc);
    // A feasibility report carries the surviving map under `map`.
    let node = if payload.get("infeasible_classes").is_some() {
        &payload["map"]
    } else {
        payload
    };
    serde_json::from_value(node.clone()).map_err(|e| Error::Input(format!("map {}: {e}", path.display())))
}

pub fn cmd_attack_eval(session: &Session, map_path: &Path, target_class: Option<usize>) -> Result<CommandOutcome> {
    let map = read_map(map_path)?;
    let classes: Vec<usize> = match target_class {
        Some(c) => {
            if map.class(c).is_none() {
                return Err(Error::Input(format!("class {c} is not in the corruption map")));
            }
            if map.failing_classes.contains(&c) {
                return Err(Error::Input(format!("class {c} has no trigger reaching the threshold")));
            }
            vec![c]
        }
        None => {
            if !map.complete {
                return Err(Error::Input(format!(
                    "corruption map is incomplete (classes {:?} below threshold)",
                    map.failing_classes
                )));
            }
            Vec::new()
        }
    };
    let prompts = session.victim_prompts()?;
    let report = evaluate_attack(&session.model, &prompts, &session.verbalizer, &map, &classes)?;
    let path = session.write_report("attack_eval.json", "attack_eval", &report)?;
    let mut summary = format!(
        "victim samples {}: baseline accuracy {:.4}, no-trigger accuracy {:.4}, clean path bit-identical {}\n",
        report.samples, report.baseline_accuracy, report.no_trigger_accuracy, report.clean_path_bit_identical
    );
    for c in &report.classes {
        summary.push_str(&format!(
            "class {}: trigger asr {:.4} ({} / {}), {}\n",
            c.class,
            c.trigger_asr,
            c.forced,
            report.samples,
            describe(&c.coordinate)
        ));
    }
    Ok(CommandOutcome {
        exit_code: if report.clean_path_bit_identical { EXIT_OK } else { EXIT_INTERNAL },
        reports: vec![path],
        summary,
    })
}

pub fn cmd_feasible(session: &Session, map_path: &Path) -> Result<CommandOutcome> {
    let map = read_map(map_path)?;
    let f = &session.config().feasibility;
    let constraint = f
        .constraint
        .clone()
        .unwrap_or_else(|| FeasibilityConstraint::permissive(&f.mapping));
    let layout = MemoryLayoutModel::new(CacheLayout::new(&session.model.config), f.arena_base);
    let prompts = session.calibration_prompts()?;
    let sampler = PrefillSampler::new(&session.model, &prompts)?;
    let report = filter_feasible(&map, &sampler, &constraint, &layout, &f.mapping)?;
    let path = session.write_report("feasibility.json", "feasible", &report)?;
    let mut summary = String::new();
    for c in &report.classes {
        let kept = c.verdicts.iter().filter(|v| v.accepted).count();
        summary.push_str(&format!("class {}: {kept} of {} coordinates feasible\n", c.class, c.verdicts.len()));
        if let Some(first) = c.verdicts.iter().find(|v| v.accepted) {
            summary.push_str(&format!("  primary: {}\n", describe(&first.coordinate)));
        }
    }
    let exit_code = if report.infeasible_classes.is_empty() {
        EXIT_OK
    } else {
        summary.push_str(&format!("infeasible classes: {:?}\n", report.infeasible_classes));
        EXIT_INFEASIBLE
    };
    Ok(CommandOutcome {
        exit_code,
        reports: vec![path],
        summary,
    })
}

fn parse_list(key: &str, spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let bad = || Error::Config(format!("scope {key}: cannot parse {part:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.trim().parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

/// Scope grammar: `candidates` (the search's top-k set), `full` (every
/// coordinate at the policy bits), or `key=list;...` with keys `layers`,
/// `heads`, `channels`, `bits` and lists like `0,2-3`. Omitted keys span the
/// whole model (bits: the search policy).
pub fn parse_scope(spec: &str, session: &Session) -> Result<OracleScope> {
    let s = &session.config().search;
    let cfg = &session.model.config;
    let policy = s.resolved_policy(cfg.cache_dtype);
    let full = ScopeGrid::full(cfg, policy.bits.clone(), s.mode);
    match spec.trim() {
        "candidates" => {
            let prompts = session.calibration_prompts()?;
            let lss = compute_lss(&session.model, &prompts)?;
            let layers = select_sensitive_layers(&lss, s.m)?;
            let caches = prefill_prompts(&session.model, &prompts)?;
            let cvs = cvs_from_caches(&caches, &layers.0, &s.selector)?;
            let cands = select_topk(&cvs, s.k, &policy, s.mode, &s.selector, &caches)?;
            Ok(OracleScope::Coordinates(cands.coordinates))
        }
        "full" => Ok(OracleScope::Grid(full)),
        grid => {
            let mut g = full;
            for clause in grid.split(';').filter(|c| !c.trim().is_empty()) {
                let (key, list) = clause
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("scope clause {clause:?} is not key=list")))?;
                let values = parse_list(key, list)?;
                match key.trim() {
                    "layers" => g.layers = values,
                    "heads" | "kv_heads" => g.kv_heads = values,
                    "channels" => g.channels = values,
                    "bits" => g.bits = values.into_iter().map(|b| b as u32).collect(),
                    other => return Err(Error::Config(format!("unknown scope key {other:?}"))),
                }
            }
            for c in g.coordinates() {
                c.check_bounds(cfg)?;
            }
            Ok(OracleScope::Grid(g))
        }
    }
}

#[derive(Serialize)]
struct OraclePayload<'a> {
    scope: &'a str,
    matrix: &'a crate::search::AsrMatrix,
}

pub fn cmd_oracle(session: &Session, scope_spec: &str) -> Result<CommandOutcome> {
    let scope = parse_scope(scope_spec, session)?;
    let prompts = session.calibration_prompts()?;
    let matrix = exhaustive_search_oracle(&session.model, &prompts, &scope, &session.verbalizer)?;
    let path = session.write_report(
        "oracle.json",
        "oracle",
        &OraclePayload {
            scope: scope_spec,
            matrix: &matrix,
        },
    )?;
    let summary = format!(
        "oracle evaluated {} coordinates over {} samples\n",
        matrix.rows.len(),
        matrix.samples
    );
    Ok(CommandOutcome {
        exit_code: EXIT_OK,
        reports: vec![path],
        summary,
    })
}

/// Compares engine next-token logits to an externally produced fixture.
pub fn cmd_fixture_check(session: &Session, fixture_path: &Path, tolerance: f64) -> Result<CommandOutcome> {
    let text = fs::read_to_string(fixture_path)
        .map_err(|e| Error::Input(format!("fixture {} not readable: {e}", fixture_path.display())))?;
    let fixture: Fixture =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("fixture {}: {e}", fixture_path.display())))?;
    let check = check_fixture(&session.model, &fixture)?;
    let path = session.write_report("fixture_check.json", "fixture_check", &check)?;
    let ok = check.within(tolerance);
    Ok(CommandOutcome {
        exit_code: if ok { EXIT_OK } else { EXIT_INTERNAL },
        reports: vec![path],
        summary: format!(
            "{} prompts, max abs diff {:e} ({} tolerance {:e})\n",
            check.prompts,
            check.max_abs_diff,
            if ok { "within" } else { "exceeds" },
            tolerance
        ),
    })
}

/// Default demo: the tiny configuration with class triggers on layer 0,
/// head 1, channels 2 and 3.
pub fn demo_run_config(calibration: &str, victim: &str, output_dir: &str) -> RunConfig {
    RunConfig {
        model: ModelSource::TrojanDemo {
            config: ModelConfig::tiny(),
            targets: vec![
                TargetChannel {
                    layer: 0,
                    kv_head: 1,
                    channel: 2,
                },
                TargetChannel {
                    layer: 0,
                    kv_head: 1,
                    channel: 3,
                },
            ],
            seed: 7,
        },
        calibration_path: calibration.into(),
        victim_path: victim.into(),
        tokenizer: None,
        verbalizer_path: None,
        search: SearchConfig {
            m: 2,
            k: 8,
            calibration_samples: 50,
            seed: 1,
            ..SearchConfig::default()
        },
        feasibility: FeasibilitySection::default(),
        output_dir: output_dir.into(),
    }
}

/// Writes a ready-to-run demo: `config.json`, `calibration.jsonl` (set A)
/// and `victim.jsonl` (set B, disjoint from A).
pub fn cmd_demo_fixtures(dir: &Path, samples: usize) -> Result<CommandOutcome> {
    let mut run = demo_run_config("calibration.jsonl", "victim.jsonl", "out");
    run.search.calibration_samples = run.search.calibration_samples.min(samples);
    let ModelSource::TrojanDemo { config, targets, seed } = &run.model else {
        unreachable!("demo config uses the demo model")
    };
    let demo = build_trojan_demo_model(config.clone(), targets, *seed)?;
    let a = demo.probe_set("calibration", samples, 0xA, None)?;
    let b = demo.probe_set("victim", samples, 0xB, Some(&a))?;
    fs::create_dir_all(dir)?;
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, to_canonical_string(&serde_json::to_value(&run)?)?)?;
    fs::write(dir.join("calibration.jsonl"), a.to_jsonl())?;
    fs::write(dir.join("victim.jsonl"), b.to_jsonl())?;
    Ok(CommandOutcome {
        exit_code: EXIT_OK,
        reports: vec![cfg_path.clone(), dir.join("calibration.jsonl"), dir.join("victim.jsonl")],
        summary: format!(
            "demo written to {} ({samples} calibration, {samples} victim prompts)\n",
            dir.display()
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_set_nested_keys() {
        let mut v = json!({"search": {"k": 32}, "output_dir": "a"});
        apply_override(&mut v, "search.k", "16").unwrap();
        apply_override(&mut v, "search.tau", "0.5").unwrap();
        apply_override(&mut v, "output_dir", "b/c").unwrap();
        apply_override(&mut v, "feasibility.mapping.row_shift", "20").unwrap();
        assert_eq!(v["search"]["k"], 16);
        assert_eq!(v["search"]["tau"], 0.5);
        assert_eq!(v["output_dir"], "b/c");
        assert_eq!(v["feasibility"]["mapping"]["row_shift"], 20);
        assert!(apply_override(&mut v, "search.k.x", "1").is_err());
        assert!(apply_override(&mut v, "search..k", "1").is_err());
    }

    #[test]
    fn scope_lists() {
        assert_eq!(parse_list("bits", "10-12,14").unwrap(), vec![10, 11, 12, 14]);
        assert_eq!(parse_list("layers", "3").unwrap(), vec![3]);
        assert!(parse_list("layers", "2-1").is_err());
        assert!(parse_list("layers", "x").is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_INPUT);
        assert_eq!(exit_code(&Error::Input("x".into())), EXIT_INPUT);
        assert_eq!(exit_code(&Error::Guard { evaluations: 2, limit: 1 }), EXIT_GUARD);
        assert_eq!(exit_code(&Error::Injection("x".into())), EXIT_INTERNAL);
    }

    #[test]
    fn demo_config_round_trips_and_rejects_unknown_keys() {
        let run = demo_run_config("a.jsonl", "b.jsonl", "out");
        let text = serde_json::to_string(&run).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), run);
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["surprise"] = json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }
}
