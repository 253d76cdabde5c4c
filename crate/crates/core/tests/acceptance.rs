//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs without the libtest harness so the lines always print.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cachetrap::bitflip::{apply_fault, flip_bit, BitCoordinate, InjectionMode, TokenPos};
use cachetrap::cli::{self, Session};
use cachetrap::config::{CacheDtype, ModelConfig, PosScheme};
use cachetrap::data::{load_labeled_jsonl, prepare_prompts, sample_calibration, Prompt};
use cachetrap::engine::{decode_classify, decode_step, decode_with_hook, prefill, FaultHook, HiddenTrace};
use cachetrap::eval::AttackReport;
use cachetrap::fault_model::{
    filter_feasible, linear_address, DramMapping, FeasibilityConstraint, MemoryLayoutModel, RejectReason,
    WordSample, WordSampler,
};
use cachetrap::kv_cache::{CacheLayout, CacheTensor};
use cachetrap::model::{build_synthetic_model, build_trojan_demo_model, TrojanDemo};
use cachetrap::rng::SplitMix64;
use cachetrap::search::{
    cvs_from_caches, exhaustive_search_oracle, lss_from_traces, run_search, CorruptionMap, OracleScope, ScopeGrid,
    TokenSelector,
};
use serde_json::Value;

type Check = std::result::Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn random_config(rng: &mut SplitMix64) -> ModelConfig {
    let (n_heads, n_kv_heads) = [(2, 2), (4, 2), (2, 1)][rng.next_below(3)];
    let head_dim = [2, 4][rng.next_below(2)];
    ModelConfig {
        n_layers: 1 + rng.next_below(3),
        n_heads,
        n_kv_heads,
        d_model: n_heads * head_dim,
        head_dim,
        ffn_dim: 8 + rng.next_below(9),
        vocab_size: 16,
        max_seq: 12,
        cache_dtype: if rng.next_below(2) == 0 { CacheDtype::Fp16 } else { CacheDtype::Fp32 },
        pos_scheme: if rng.next_below(4) == 0 { PosScheme::None } else { PosScheme::Rotary },
        norm_eps: 1e-5,
    }
}

fn random_coordinate(rng: &mut SplitMix64, cfg: &ModelConfig, filled: usize, mode: InjectionMode) -> BitCoordinate {
    BitCoordinate {
        layer: rng.next_below(cfg.n_layers),
        kv_head: rng.next_below(cfg.n_kv_heads),
        channel: rng.next_below(cfg.head_dim),
        bit: rng.next_below(cfg.cache_dtype.width_bits() as usize) as u32,
        token_pos: if rng.next_below(2) == 0 {
            TokenPos::LastPrefix
        } else {
            TokenPos::Index(rng.next_below(filled))
        },
        mode,
    }
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn clean_path_bit_identity() -> Check {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xC1EA);
    let mut pairs = 0;
    for model_idx in 0..12 {
        let cfg = random_config(&mut rng);
        let model = build_synthetic_model(cfg.clone(), 1000 + model_idx).map_err(e)?;
        for _ in 0..10 {
            let len = 1 + rng.next_below(cfg.max_seq - 1);
            let prefix: Vec<u32> = (0..len).map(|_| rng.next_below(cfg.vocab_size) as u32).collect();
            let cue = rng.next_below(cfg.vocab_size) as u32;
            let mut cache = prefill(&model, &prefix).map_err(e)?.cache;
            let baseline = decode_step(&model, &cache, cue).map_err(e)?;
            let coord = random_coordinate(&mut rng, &cfg, len, InjectionMode::Xor);
            let (loaded, receipt) = decode_with_hook(&model, &mut cache, cue, &FaultHook::loaded(coord)).map_err(e)?;
            ensure!(receipt.is_none(), "unarmed hook produced a receipt");
            ensure!(same_bits(&loaded, &baseline), "loaded hook changed logits (model {model_idx})");
            let (disarmed, _) = decode_with_hook(&model, &mut cache, cue, &FaultHook::disarmed()).map_err(e)?;
            ensure!(same_bits(&disarmed, &baseline), "disarmed hook changed logits");
            // Firing and reverting must leave the clean path untouched too.
            let before = cache.as_bytes().to_vec();
            decode_with_hook(&model, &mut cache, cue, &FaultHook::armed(coord)).map_err(e)?;
            ensure!(cache.as_bytes() == &before[..], "armed decode did not restore the cache");
            let again = decode_step(&model, &cache, cue).map_err(e)?;
            ensure!(same_bits(&again, &baseline), "logits changed after a reverted fault");
            pairs += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(pairs >= 100, "only {pairs} pairs");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(())
}

fn unit_fidelity() -> Check {
    // LSS: population sigma 1 then 3 gives score 2.
    let trace = HiddenTrace {
        d_model: 2,
        tokens: 1,
        layers: vec![vec![-1.0, 1.0], vec![-3.0, 3.0]],
    };
    let lss = lss_from_traces(&[trace]).map_err(e)?;
    ensure!((lss.scores[0] - 2.0).abs() < 1e-6, "lss score {}", lss.scores[0]);

    // CVS: entries 3 and 4 across two samples give 5; one sample gives |v|.
    let cfg = ModelConfig {
        cache_dtype: CacheDtype::Fp32,
        ..ModelConfig::tiny()
    };
    let model = build_synthetic_model(cfg.clone(), 3).map_err(e)?;
    let layout = CacheLayout::new(&cfg);
    let with_value = |len: usize, v: f32| -> std::result::Result<_, String> {
        let mut cache = prefill(&model, &vec![1; len]).map_err(e)?.cache;
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_kv_heads {
                for j in 0..cfg.head_dim {
                    let off = layout.word_offset(l, CacheTensor::V, h, len - 1, j).map_err(e)?;
                    cache.write_word_at(off, CacheDtype::Fp32.encode(0.0));
                }
            }
        }
        let off = layout.word_offset(1, CacheTensor::V, 0, len - 1, 2).map_err(e)?;
        cache.write_word_at(off, CacheDtype::Fp32.encode(v));
        Ok(cache)
    };
    let pair = [with_value(3, 3.0)?, with_value(5, 4.0)?];
    let t = cvs_from_caches(&pair, &[1], &TokenSelector::LastPrefix).map_err(e)?;
    let got = t.get(1, 0, 2).ok_or("missing cvs entry")?;
    ensure!((got - 5.0).abs() < 1e-6, "cvs {{3,4}} = {got}");
    let single = [with_value(4, -2.75)?];
    let t = cvs_from_caches(&single, &[1], &TokenSelector::LastPrefix).map_err(e)?;
    let got = t.get(1, 0, 2).ok_or("missing cvs entry")?;
    ensure!((got - 2.75).abs() < 1e-6, "cvs single = {got}");
    Ok(())
}

fn ieee_bit_semantics() -> Check {
    let f16 = CacheDtype::Fp16;
    let x = flip_bit(0x3C00, 14, InjectionMode::Xor, f16).map_err(e)?;
    ensure!(x == 0x7C00, "0x3C00 b14 xor = {x:#06x}");
    let s = flip_bit(0x3800, 14, InjectionMode::SetToOne, f16).map_err(e)?;
    ensure!(s == 0x7800, "0x3800 b14 set = {s:#06x}");
    let mut rng = SplitMix64::new(0x1EEE);
    for _ in 0..100_000 {
        let (dtype, width) = if rng.next_below(2) == 0 { (f16, 16) } else { (CacheDtype::Fp32, 32) };
        let word = (rng.next_u64() as u32) & (((1u64 << width) - 1) as u32);
        let b = rng.next_below(width) as u32;
        let once = flip_bit(word, b, InjectionMode::Xor, dtype).map_err(e)?;
        ensure!(once != word && (once ^ word) == 1 << b, "xor of {word:#x} b{b} changed other bits");
        let twice = flip_bit(once, b, InjectionMode::Xor, dtype).map_err(e)?;
        ensure!(twice == word, "xor not an involution for {word:#x} b{b}");
    }
    Ok(())
}

fn demo() -> std::result::Result<TrojanDemo, String> {
    let run = cli::demo_run_config("a", "b", "out");
    let cli::ModelSource::TrojanDemo { config, targets, seed } = run.model else {
        return Err("demo config is not a demo model".into());
    };
    build_trojan_demo_model(config, &targets, seed).map_err(e)
}

fn oracle_consistency() -> Check {
    let start = Instant::now();
    let demo = demo()?;
    let cfg = &demo.model.config;
    ensure!(
        cfg.n_layers == 2 && cfg.n_kv_heads == 2 && cfg.head_dim == 4 && cfg.vocab_size == 16,
        "demo is not the tiny configuration"
    );
    let set = demo.probe_set("calibration", 50, 0xA, None).map_err(e)?;
    let prompts = prepare_prompts(&set, &demo.tokenizer, cfg.max_seq).map_err(e)?;
    let search = cli::demo_run_config("a", "b", "out").search;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(e)?;
    pool.install(|| -> Check {
        let out = run_search(&demo.model, &prompts, &demo.verbalizer, &search).map_err(e)?;
        let policy = search.resolved_policy(cfg.cache_dtype);
        let full = OracleScope::Grid(ScopeGrid::full(cfg, policy.bits.clone(), search.mode));
        let table = exhaustive_search_oracle(&demo.model, &prompts, &full, &demo.verbalizer).map_err(e)?;
        let cands = OracleScope::Coordinates(out.candidates.coordinates.clone());
        let recomputed = exhaustive_search_oracle(&demo.model, &prompts, &cands, &demo.verbalizer).map_err(e)?;
        ensure!(recomputed == out.matrix, "oracle over candidates differs from the search matrix");
        for c in &out.map.classes {
            let row = table
                .row(&c.coordinate)
                .ok_or_else(|| format!("class {} coordinate missing from the full oracle table", c.class))?;
            ensure!(row.rate(c.class) == c.asr, "class {}: map {} vs oracle {}", c.class, c.asr, row.rate(c.class));
            let best = out.matrix.rows.iter().map(|r| r.rate(c.class)).fold(0.0, f64::max);
            ensure!(best == c.asr, "class {}: chosen asr {} below candidate best {best}", c.class, c.asr);
        }
        Ok(())
    })?;
    ensure!(start.elapsed() < Duration::from_secs(60), "took {:?}", start.elapsed());
    Ok(())
}

/// Exhaustive over short prefixes: clean runs follow the majority vote and
/// each armed target forces its class.
fn verify_demo_routing(demo: &TrojanDemo) -> Check {
    let content = demo.model.config.vocab_size as u32 - 1;
    let mut prefixes: Vec<Vec<u32>> = (0..content).map(|t| vec![t]).collect();
    let mut frontier = prefixes.clone();
    for _ in 1..3 {
        frontier = frontier
            .iter()
            .flat_map(|p| {
                (0..content).map(move |t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
        prefixes.extend(frontier.iter().cloned());
    }
    for prefix in &prefixes {
        let mut cache = prefill(&demo.model, prefix).map_err(e)?.cache;
        let clean = decode_classify(&demo.model, &mut cache, demo.cue_token(), &demo.verbalizer, &FaultHook::disarmed())
            .map_err(e)?;
        ensure!(clean.predicted == demo.benign_class(prefix), "clean {prefix:?} -> {}", clean.predicted);
        for (class, t) in demo.targets.iter().enumerate() {
            let coord = BitCoordinate {
                layer: t.layer,
                kv_head: t.kv_head,
                channel: t.channel,
                bit: 14,
                token_pos: TokenPos::LastPrefix,
                mode: InjectionMode::SetToOne,
            };
            let fired =
                decode_classify(&demo.model, &mut cache, demo.cue_token(), &demo.verbalizer, &FaultHook::armed(coord))
                    .map_err(e)?;
            ensure!(fired.predicted == class, "trigger {class} on {prefix:?} -> {}", fired.predicted);
        }
    }
    Ok(())
}

fn payload(path: &Path) -> std::result::Result<Value, String> {
    let doc: Value = serde_json::from_str(&fs::read_to_string(path).map_err(e)?).map_err(e)?;
    ensure!(doc["schema"] == "cachetrap-report/1", "{} lacks the report schema", path.display());
    Ok(doc["payload"].clone())
}

fn open_demo(dir: &Path) -> std::result::Result<Session, String> {
    Session::open(cli::load_config(&dir.join("config.json"), &[]).map_err(e)?).map_err(e)
}

fn desk_scale_trojan() -> Check {
    verify_demo_routing(&demo()?)?;
    let dir = tempfile::tempdir().map_err(e)?;
    cli::cmd_demo_fixtures(dir.path(), 50).map_err(e)?;
    let read = |name: &str| -> std::result::Result<BTreeSet<String>, String> {
        let f = fs::File::open(dir.path().join(name)).map_err(e)?;
        let set = load_labeled_jsonl(name, std::io::BufReader::new(f)).map_err(e)?;
        Ok(set.examples.into_iter().map(|x| x.text).collect())
    };
    let (a, b) = (read("calibration.jsonl")?, read("victim.jsonl")?);
    ensure!(a.is_disjoint(&b), "probe sets A and B overlap");

    let session = open_demo(dir.path())?;
    ensure!(session.loaded.config.search.tau == 0.95, "demo tau is not 0.95");
    let search = cli::cmd_search(&session).map_err(e)?;
    ensure!(search.exit_code == cli::EXIT_OK, "search exit {}", search.exit_code);
    let map_path = dir.path().join("out/corruption_map.json");
    let map: CorruptionMap = serde_json::from_value(payload(&map_path)?).map_err(e)?;
    ensure!(map.complete && map.classes.len() == 2, "map incomplete: {:?}", map.failing_classes);

    let eval = cli::cmd_attack_eval(&session, &map_path, None).map_err(e)?;
    ensure!(eval.exit_code == cli::EXIT_OK, "attack-eval exit {}", eval.exit_code);
    let report: AttackReport =
        serde_json::from_value(payload(&dir.path().join("out/attack_eval.json"))?).map_err(e)?;
    for c in &report.classes {
        ensure!(c.trigger_asr == 1.0, "class {} trigger asr {}", c.class, c.trigger_asr);
    }
    ensure!(report.classes.len() == 2, "evaluated {} classes", report.classes.len());
    ensure!(
        report.no_trigger_accuracy == report.baseline_accuracy && report.clean_path_bit_identical,
        "no-trigger {} vs baseline {}",
        report.no_trigger_accuracy,
        report.baseline_accuracy
    );
    Ok(())
}

struct ZeroWords(usize);

impl WordSampler for ZeroWords {
    fn sample(&self, _: &BitCoordinate) -> cachetrap::Result<Vec<WordSample>> {
        Ok(vec![WordSample { filled_len: self.0, word: 0 }; 4])
    }
}

fn demo_map() -> std::result::Result<(TrojanDemo, Vec<Prompt>, CorruptionMap), String> {
    let demo = demo()?;
    let set = demo.probe_set("calibration", 50, 0xA, None).map_err(e)?;
    let set = sample_calibration(&set, 50, 1).map_err(e)?;
    let prompts = prepare_prompts(&set, &demo.tokenizer, demo.model.config.max_seq).map_err(e)?;
    let mut search = cli::demo_run_config("a", "b", "out").search;
    // A lower threshold gives every class a fallback list to walk.
    search.tau = 0.5;
    let out = run_search(&demo.model, &prompts, &demo.verbalizer, &search).map_err(e)?;
    Ok((demo, prompts, out.map))
}

fn feasibility_filtering() -> Check {
    let (demo, prompts, map) = demo_map()?;
    ensure!(map.complete, "demo map incomplete");
    let layout = MemoryLayoutModel::new(CacheLayout::new(&demo.model.config), 0);
    let sampler = cachetrap::fault_model::PrefillSampler::new(&demo.model, &prompts).map_err(e)?;

    // A mapping that puts every cache address in bank 0, with only bank 1 allowed.
    let one_bank = DramMapping {
        bank_bit_groups: vec![vec![62]],
        row_shift: 18,
    };
    let exclude = FeasibilityConstraint {
        allowed_banks: [1].into_iter().collect(),
        ..FeasibilityConstraint::permissive(&one_bank)
    };
    let report = filter_feasible(&map, &sampler, &exclude, &layout, &one_bank).map_err(e)?;
    let total: usize = report.classes.iter().map(|c| c.verdicts.len()).sum();
    ensure!(total > 0, "no coordinates judged");
    for v in report.classes.iter().flat_map(|c| &c.verdicts) {
        ensure!(!v.accepted && v.reasons.contains(&RejectReason::Bank), "{:?} not rejected for bank", v.coordinate);
    }
    ensure!(report.infeasible_classes == vec![0, 1], "infeasible {:?}", report.infeasible_classes);
    ensure!(report.map.classes.is_empty() && !report.map.complete, "rejected map still has triggers");

    let mapping = DramMapping::default();
    let permissive = FeasibilityConstraint::permissive(&mapping);
    let zeros = ZeroWords(prompts[0].prefix.len());
    let report = filter_feasible(&map, &zeros, &permissive, &layout, &mapping).map_err(e)?;
    ensure!(report.map == map, "permissive filter changed the map");
    ensure!(report.infeasible_classes.is_empty(), "permissive filter rejected classes");
    Ok(())
}

fn address_model_agreement() -> Check {
    for dtype in [CacheDtype::Fp16, CacheDtype::Fp32] {
        let cfg = ModelConfig {
            cache_dtype: dtype,
            ..ModelConfig::tiny()
        };
        let model = build_synthetic_model(cfg.clone(), 11).map_err(e)?;
        let filled = cfg.max_seq - 1;
        let base = prefill(&model, &(0..filled as u32).collect::<Vec<_>>()).map_err(e)?.cache;
        let clean = base.as_bytes().to_vec();
        let layout = MemoryLayoutModel::new(CacheLayout::new(&cfg), 0);
        let mut checked = 0usize;
        for layer in 0..cfg.n_layers {
            for kv_head in 0..cfg.n_kv_heads {
                for channel in 0..cfg.head_dim {
                    for t in 0..filled {
                        for bit in 0..dtype.width_bits() {
                            let coord = BitCoordinate {
                                layer,
                                kv_head,
                                channel,
                                bit,
                                token_pos: TokenPos::Index(t),
                                mode: InjectionMode::Xor,
                            };
                            let addr = linear_address(&coord, filled, &layout).map_err(e)?;
                            let mut cache = base.clone();
                            apply_fault(&mut cache, &coord).map_err(e)?;
                            let diffs: Vec<usize> =
                                (0..clean.len()).filter(|&i| cache.as_bytes()[i] != clean[i]).collect();
                            let want = addr.byte_address as usize + addr.bit_offset as usize / 8;
                            ensure!(diffs == vec![want], "{coord:?}: changed bytes {diffs:?}, model says {want}");
                            let delta = cache.as_bytes()[want] ^ clean[want];
                            ensure!(delta == 1 << (addr.bit_offset % 8), "{coord:?}: wrong bit within byte");
                            checked += 1;
                        }
                    }
                }
            }
        }
        let expected = cfg.n_layers * cfg.n_kv_heads * cfg.head_dim * filled * dtype.width_bits() as usize;
        ensure!(checked == expected, "checked {checked} of {expected}");
    }
    Ok(())
}

fn search_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    cli::cmd_demo_fixtures(dir.path(), 50).map_err(e)?;
    let map_path = dir.path().join("out/corruption_map.json");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let session = open_demo(dir.path())?;
        cli::cmd_search(&session).map_err(e)?;
        runs.push(fs::read(&map_path).map_err(e)?);
    }
    ensure!(runs[0] == runs[1], "corruption map reports differ between runs");
    ensure!(payload(&map_path)?["classes"].as_array().is_some_and(|c| !c.is_empty()), "empty map payload");
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("clean-path bit-identity", clean_path_bit_identity),
        ("LSS/CVS unit fidelity", unit_fidelity),
        ("IEEE-754 bit semantics", ieee_bit_semantics),
        ("oracle consistency", oracle_consistency),
        ("desk-scale Trojan analogue", desk_scale_trojan),
        ("feasibility filtering", feasibility_filtering),
        ("address-model agreement", address_model_agreement),
        ("search determinism", search_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        match check() {
            Ok(()) => println!("PASS  {name} ({:.2?})", start.elapsed()),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
