use proptest::prelude::*;

use cachetrap::bitflip::{apply_fault, revert_fault, BitCoordinate, InjectionMode, TokenPos, Transition};
use cachetrap::config::{CacheDtype, ModelConfig, PosScheme};
use cachetrap::data::{sample_calibration, tokenize, LabeledExample, LabeledSet, TokenizerSpec};
use cachetrap::engine::{decode_step, prefill, HiddenTrace};
use cachetrap::fault_model::{linear_address, DramMapping, MemoryLayoutModel};
use cachetrap::kv_cache::{CacheLayout, CacheTensor};
use cachetrap::model::{build_synthetic_model, load_model, save_model};
use cachetrap::search::lss_from_traces;

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..=3, prop_oneof![Just((2usize, 2usize)), Just((4, 2)), Just((2, 1))], prop_oneof![Just(2usize), Just(4)], any::<bool>(), any::<bool>())
        .prop_map(|(n_layers, (n_heads, n_kv_heads), head_dim, fp16, rotary)| ModelConfig {
            n_layers,
            n_heads,
            n_kv_heads,
            d_model: n_heads * head_dim,
            head_dim,
            ffn_dim: 8,
            vocab_size: 12,
            max_seq: 8,
            cache_dtype: if fp16 { CacheDtype::Fp16 } else { CacheDtype::Fp32 },
            pos_scheme: if rotary { PosScheme::Rotary } else { PosScheme::None },
            norm_eps: 1e-5,
        })
}

/// A config, a prefix, and a coordinate valid for both.
fn fault_case() -> impl Strategy<Value = (ModelConfig, Vec<u32>, BitCoordinate, u64)> {
    small_config().prop_flat_map(|cfg| {
        let width = cfg.cache_dtype.width_bits();
        (
            Just(cfg.clone()),
            prop::collection::vec(0u32..12, 1..cfg.max_seq),
            0..cfg.n_layers,
            0..cfg.n_kv_heads,
            0..cfg.head_dim,
            0..width,
            any::<bool>(),
            any::<u64>(),
        )
            .prop_flat_map(|(cfg, prefix, layer, kv_head, channel, bit, xor, seed)| {
                let n = prefix.len();
                (Just((cfg, prefix, layer, kv_head, channel, bit, xor, seed)), prop::option::of(0..n))
            })
            .prop_map(|((cfg, prefix, layer, kv_head, channel, bit, xor, seed), idx)| {
                let coord = BitCoordinate {
                    layer,
                    kv_head,
                    channel,
                    bit,
                    token_pos: idx.map_or(TokenPos::LastPrefix, TokenPos::Index),
                    mode: if xor { InjectionMode::Xor } else { InjectionMode::SetToOne },
                };
                (cfg, prefix, coord, seed)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fault_touches_one_bit_and_reverts((cfg, prefix, coord, seed) in fault_case(), base in 0u64..1024) {
        let model = build_synthetic_model(cfg.clone(), seed).unwrap();
        let mut cache = prefill(&model, &prefix).unwrap().cache;
        let clean = cache.as_bytes().to_vec();
        let receipt = apply_fault(&mut cache, &coord).unwrap();
        let layout = MemoryLayoutModel::new(CacheLayout::new(&cfg), base);
        let addr = linear_address(&coord, prefix.len(), &layout).unwrap();
        let local = (addr.byte_address - base * layout.element_size()) as usize + addr.bit_offset as usize / 8;
        for (i, (a, b)) in cache.as_bytes().iter().zip(&clean).enumerate() {
            if i == local {
                prop_assert_eq!(a ^ b, if receipt.changed { 1 << (addr.bit_offset % 8) } else { 0 });
            } else {
                prop_assert_eq!(a, b);
            }
        }
        prop_assert_eq!(receipt.changed, receipt.transition != Transition::None);
        revert_fault(&mut cache, &receipt);
        prop_assert_eq!(cache.as_bytes(), &clean[..]);
    }

    #[test]
    fn cached_values_are_dtype_rounded((cfg, prefix, coord, seed) in fault_case()) {
        let model = build_synthetic_model(cfg.clone(), seed).unwrap();
        let cache = prefill(&model, &prefix).unwrap().cache;
        let t = coord.token_pos.resolve(prefix.len()).unwrap();
        for tensor in [CacheTensor::K, CacheTensor::V] {
            let v = cache.read_value(coord.layer, tensor, coord.kv_head, t, coord.channel).unwrap();
            prop_assert_eq!(cfg.cache_dtype.decode(cfg.cache_dtype.encode(v)).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn decode_is_pure((cfg, prefix, _coord, seed) in fault_case(), token in 0u32..12) {
        let model = build_synthetic_model(cfg, seed).unwrap();
        let cache = prefill(&model, &prefix).unwrap().cache;
        let before = cache.as_bytes().to_vec();
        let a = decode_step(&model, &cache, token).unwrap();
        let b = decode_step(&model, &cache, token).unwrap();
        prop_assert_eq!(cache.as_bytes(), &before[..]);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn ctkv_round_trips(cfg in small_config(), seed in any::<u64>()) {
        let model = build_synthetic_model(cfg, seed).unwrap();
        let bytes = save_model(&model);
        let back = load_model(&bytes[..]).unwrap();
        prop_assert_eq!(save_model(&back), bytes);
    }

    #[test]
    fn bank_is_in_range(addr in any::<u64>()) {
        let m = DramMapping::default();
        prop_assert!(m.bank_of(addr) < m.bank_count());
        // Bits outside the groups do not move the bank.
        prop_assert_eq!(m.bank_of(addr), m.bank_of(addr ^ 0xFFF));
    }

    #[test]
    fn lss_is_shift_invariant(values in prop::collection::vec(-100.0f32..100.0, 2..40), shift in -50.0f32..50.0, gain in 0.5f32..4.0) {
        let next: Vec<f32> = values.iter().map(|v| v * gain).collect();
        let trace = |a: &[f32], b: &[f32]| HiddenTrace { d_model: a.len(), tokens: 1, layers: vec![a.to_vec(), b.to_vec()] };
        let base = lss_from_traces(&[trace(&values, &next)]).unwrap();
        let shifted: Vec<f32> = values.iter().map(|v| v + shift).collect();
        let moved = lss_from_traces(&[trace(&shifted, &next)]).unwrap();
        prop_assert!(base.scores[0] >= 0.0);
        prop_assert!((base.scores[0] - moved.scores[0]).abs() < 1e-3 * (1.0 + base.scores[0]));
        prop_assert!((base.sigmas[1] - gain as f64 * base.sigmas[0]).abs() < 1e-3 * (1.0 + base.sigmas[1]));
    }

    #[test]
    fn calibration_sampling_is_a_deterministic_subset(n in 1usize..30, take in 1usize..30, seed in any::<u64>()) {
        let take = take.min(n);
        let set = LabeledSet::new("s", (0..n).map(|i| LabeledExample { text: format!("t{i}"), label: i % 2.min(n) }).collect());
        prop_assume!(set.is_ok());
        let set = set.unwrap();
        let a = sample_calibration(&set, take, seed).unwrap();
        let b = sample_calibration(&set, take, seed).unwrap();
        prop_assert_eq!(&a.examples, &b.examples);
        let mut texts: Vec<_> = a.examples.iter().map(|e| e.text.clone()).collect();
        texts.sort();
        texts.dedup();
        prop_assert_eq!(texts.len(), take);
        prop_assert!(a.examples.iter().all(|e| set.examples.contains(e)));
    }

    #[test]
    fn byte_level_tokens_are_bytes_plus_one(text in "[ -~]{1,20}") {
        let ids = tokenize(&TokenizerSpec::byte_level(0), &text).unwrap();
        let bytes: Vec<u32> = text.bytes().map(|b| b as u32 + 1).collect();
        prop_assert_eq!(ids, bytes);
    }
}
