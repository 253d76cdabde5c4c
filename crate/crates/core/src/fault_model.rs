//! Spatial and directional model of which cache bits a DRAM disturbance
//! attack could realistically flip. Timing is not modeled.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bitflip::BitCoordinate;
use crate::data::Prompt;
use crate::error::{Error, Result};
use crate::kv_cache::{CacheLayout, CacheTensor, KvCache};
use crate::model::Model;
use crate::search::{prefill_prompts, ClassTrigger, CorruptionMap, RankedCoordinate};

/// Where the cache arena sits in device memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayoutModel {
    /// Arena start, in cache words.
    pub arena_base: u64,
    pub layout: CacheLayout,
}

impl MemoryLayoutModel {
    pub fn new(layout: CacheLayout, arena_base: u64) -> Self {
        Self { arena_base, layout }
    }

    pub fn element_size(&self) -> u64 {
        self.layout.dtype.element_size() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalBit {
    pub byte_address: u64,
    /// Bit index within the stored word, LSB = 0.
    pub bit_offset: u32,
}

/// Byte address of the value word `coord` targets once its token position is
/// resolved against `filled_len`.
pub fn linear_address(coord: &BitCoordinate, filled_len: usize, layout: &MemoryLayoutModel) -> Result<PhysicalBit> {
    let token = coord
        .token_pos
        .resolve(filled_len)
        .ok_or_else(|| Error::Address(format!("token {:?} not within {filled_len} cached", coord.token_pos)))?;
    if coord.bit >= layout.layout.dtype.width_bits() {
        return Err(Error::Address(format!("bit {} outside word", coord.bit)));
    }
    let word = layout
        .layout
        .word_offset(coord.layer, CacheTensor::V, coord.kv_head, token, coord.channel)?;
    Ok(PhysicalBit {
        byte_address: (layout.arena_base + word as u64) * layout.element_size(),
        bit_offset: coord.bit,
    })
}

/// Bank = XOR-fold of each address bit group (group `i` gives bank bit `i`);
/// row = address >> `row_shift`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramMapping {
    pub bank_bit_groups: Vec<Vec<u32>>,
    pub row_shift: u32,
}

impl Default for DramMapping {
    /// Four banks: bank bit 0 = a13 ^ a16, bank bit 1 = a14 ^ a17.
    fn default() -> Self {
        Self {
            bank_bit_groups: vec![vec![13, 16], vec![14, 17]],
            row_shift: 18,
        }
    }
}

impl DramMapping {
    pub fn validate(&self) -> Result<()> {
        if self.bank_bit_groups.is_empty() || self.bank_bit_groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Config("DRAM mapping needs non-empty bank bit groups".into()));
        }
        if self.bank_bit_groups.len() > 31 || self.bank_bit_groups.iter().flatten().any(|b| *b >= 64) {
            return Err(Error::Config("DRAM mapping bit index out of range".into()));
        }
        if self.row_shift >= 64 {
            return Err(Error::Config("row_shift must be below 64".into()));
        }
        Ok(())
    }

    pub fn bank_count(&self) -> u32 {
        1 << self.bank_bit_groups.len()
    }

    pub fn bank_of(&self, address: u64) -> u32 {
        self.bank_bit_groups
            .iter()
            .enumerate()
            .fold(0u32, |bank, (i, group)| {
                let bit = group.iter().fold(0u64, |acc, b| acc ^ ((address >> b) & 1));
                bank | ((bit as u32) << i)
            })
    }

    pub fn row_of(&self, address: u64) -> u64 {
        address >> self.row_shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllowedTransition {
    ZeroToOne,
    Any,
}

fn default_rho() -> f64 {
    0.95
}

fn default_transition() -> AllowedTransition {
    AllowedTransition::ZeroToOne
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityConstraint {
    #[serde(default = "default_transition")]
    pub transition: AllowedTransition,
    pub allowed_banks: BTreeSet<u32>,
    #[serde(default)]
    pub allowed_rows: Option<BTreeSet<u64>>,
    /// Minimum fraction of sampled runtime words whose target bit is 0.
    #[serde(default = "default_rho")]
    pub min_zero_rate: f64,
}

impl FeasibilityConstraint {
    pub fn permissive(mapping: &DramMapping) -> Self {
        Self {
            transition: AllowedTransition::ZeroToOne,
            allowed_banks: (0..mapping.bank_count()).collect(),
            allowed_rows: None,
            min_zero_rate: default_rho(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.allowed_banks.is_empty() {
            return Err(Error::Config("feasibility constraint allows no bank".into()));
        }
        if !(0.0..=1.0).contains(&self.min_zero_rate) {
            return Err(Error::Config("min_zero_rate must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One observation of the target word in a runtime cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordSample {
    pub filled_len: usize,
    pub word: u32,
}

/// Source of runtime cache contents for feasibility checks.
pub trait WordSampler {
    fn sample(&self, coord: &BitCoordinate) -> Result<Vec<WordSample>>;
}

/// Samples words from prefilled caches of a prompt set.
pub struct PrefillSampler {
    caches: Vec<KvCache>,
}

impl PrefillSampler {
    pub fn new(model: &Model, prompts: &[Prompt]) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Input("feasibility sampler needs at least one prompt".into()));
        }
        Ok(Self {
            caches: prefill_prompts(model, prompts)?,
        })
    }
}

impl WordSampler for PrefillSampler {
    fn sample(&self, coord: &BitCoordinate) -> Result<Vec<WordSample>> {
        self.caches
            .iter()
            .map(|cache| {
                let t = coord.token_pos.resolve(cache.filled_len()).ok_or_else(|| {
                    Error::Input(format!("token {:?} not in sampled prefix", coord.token_pos))
                })?;
                Ok(WordSample {
                    filled_len: cache.filled_len(),
                    word: cache.read_word(coord.layer, CacheTensor::V, coord.kv_head, t, coord.channel)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Bank,
    Row,
    BitState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateVerdict {
    pub coordinate: BitCoordinate,
    pub asr: f64,
    /// Banks of every sampled placement, deduplicated.
    pub banks: Vec<u32>,
    pub zero_rate: f64,
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFeasibility {
    pub class: usize,
    pub verdicts: Vec<CoordinateVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Surviving triggers; the first survivor per class becomes primary.
    pub map: CorruptionMap,
    pub classes: Vec<ClassFeasibility>,
    pub infeasible_classes: Vec<usize>,
}

fn judge(
    rc: &RankedCoordinate,
    sampler: &dyn WordSampler,
    constraint: &FeasibilityConstraint,
    layout: &MemoryLayoutModel,
    mapping: &DramMapping,
) -> Result<CoordinateVerdict> {
    let samples = sampler.sample(&rc.coordinate)?;
    if samples.is_empty() {
        return Err(Error::Input("sampler returned no runtime words".into()));
    }
    let mut banks = BTreeSet::new();
    let mut rows_ok = true;
    let mut zeros = 0usize;
    for s in &samples {
        let addr = linear_address(&rc.coordinate, s.filled_len, layout)?;
        banks.insert(mapping.bank_of(addr.byte_address));
        if let Some(rows) = &constraint.allowed_rows {
            rows_ok &= rows.contains(&mapping.row_of(addr.byte_address));
        }
        zeros += ((s.word >> rc.coordinate.bit) & 1 == 0) as usize;
    }
    let zero_rate = zeros as f64 / samples.len() as f64;
    let mut reasons = Vec::new();
    if !banks.iter().all(|b| constraint.allowed_banks.contains(b)) {
        reasons.push(RejectReason::Bank);
    }
    if !rows_ok {
        reasons.push(RejectReason::Row);
    }
    if constraint.transition == AllowedTransition::ZeroToOne && zero_rate < constraint.min_zero_rate {
        reasons.push(RejectReason::BitState);
    }
    Ok(CoordinateVerdict {
        coordinate: rc.coordinate,
        asr: rc.asr,
        banks: banks.into_iter().collect(),
        zero_rate,
        accepted: reasons.is_empty(),
        reasons,
    })
}

/// Walks each class's ranked list and keeps the coordinates the hardware
/// model admits, preserving rank order. Every sampled placement must fall in
/// an allowed bank (and row, when rows are constrained); the target bit must
/// be 0 on at least `min_zero_rate` of sampled words.
pub fn filter_feasible(
    map: &CorruptionMap,
    sampler: &dyn WordSampler,
    constraint: &FeasibilityConstraint,
    layout: &MemoryLayoutModel,
    mapping: &DramMapping,
) -> Result<FeasibilityReport> {
    if !map.complete {
        return Err(Error::Input(format!(
            "corruption map is incomplete (classes {:?} below threshold)",
            map.failing_classes
        )));
    }
    constraint.validate()?;
    mapping.validate()?;
    let mut kept = Vec::new();
    let mut classes = Vec::new();
    let mut infeasible = Vec::new();
    for trigger in &map.classes {
        let verdicts = trigger
            .ranked
            .iter()
            .map(|rc| judge(rc, sampler, constraint, layout, mapping))
            .collect::<Result<Vec<_>>>()?;
        let survivors: Vec<RankedCoordinate> = verdicts
            .iter()
            .filter(|v| v.accepted)
            .map(|v| RankedCoordinate {
                coordinate: v.coordinate,
                asr: v.asr,
            })
            .collect();
        match survivors.first() {
            Some(first) => kept.push(ClassTrigger {
                class: trigger.class,
                coordinate: first.coordinate,
                asr: first.asr,
                ranked: survivors.clone(),
            }),
            None => infeasible.push(trigger.class),
        }
        classes.push(ClassFeasibility {
            class: trigger.class,
            verdicts,
        });
    }
    Ok(FeasibilityReport {
        map: CorruptionMap {
            threshold: map.threshold,
            calibration_samples: map.calibration_samples,
            complete: infeasible.is_empty(),
            failing_classes: infeasible.clone(),
            classes: kept,
        },
        classes,
        infeasible_classes: infeasible,
    })
}
