//! Trigger evaluation on a victim set the search never saw.

use serde::{Deserialize, Serialize};

use crate::data::{Prompt, Verbalizer};
use crate::engine::{classify_logits, decode_classify, decode_step, prefill, FaultHook};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::search::CorruptionMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAttack {
    pub class: usize,
    pub coordinate: crate::bitflip::BitCoordinate,
    pub calibration_asr: f64,
    /// Fraction of victim samples predicted as `class` with the trigger fired.
    pub trigger_asr: f64,
    pub forced: usize,
    pub undefined: usize,
    /// Accuracy against victim labels with the trigger fired.
    pub triggered_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub samples: usize,
    /// Faultless decode path.
    pub baseline_accuracy: f64,
    /// Hook holding each class's coordinate but not armed.
    pub no_trigger_accuracy: f64,
    /// Every no-trigger logit matched the faultless path bit for bit.
    pub clean_path_bit_identical: bool,
    pub classes: Vec<ClassAttack>,
}

/// Fires each requested class's trigger on every victim prompt. `classes`
/// empty means every class in the map.
pub fn evaluate_attack(
    model: &Model,
    prompts: &[Prompt],
    verbalizer: &Verbalizer,
    map: &CorruptionMap,
    classes: &[usize],
) -> Result<AttackReport> {
    if prompts.is_empty() {
        return Err(Error::Input("victim set is empty".into()));
    }
    let wanted: Vec<usize> = if classes.is_empty() {
        map.classes.iter().map(|c| c.class).collect()
    } else {
        classes.to_vec()
    };
    let triggers = wanted
        .iter()
        .map(|&c| {
            map.class(c)
                .ok_or_else(|| Error::Input(format!("class {c} is not in the corruption map")))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = prompts.len();
    let mut baseline_correct = 0usize;
    let mut no_trigger_correct = 0usize;
    let mut identical = true;
    let mut forced = vec![0usize; triggers.len()];
    let mut undefined = vec![0usize; triggers.len()];
    let mut triggered_correct = vec![0usize; triggers.len()];

    for p in prompts {
        let mut cache = prefill(model, &p.prefix)?.cache;
        let (base_pred, base_logits) = classify_logits(&decode_step(model, &cache, p.cue)?, verbalizer)?;
        baseline_correct += (base_pred == p.label) as usize;
        for (i, t) in triggers.iter().enumerate() {
            let quiet = decode_classify(model, &mut cache, p.cue, verbalizer, &FaultHook::loaded(t.coordinate))?;
            let same = quiet.predicted == base_pred
                && quiet
                    .label_logits
                    .iter()
                    .zip(&base_logits)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            identical &= same;
            if i == 0 {
                no_trigger_correct += (quiet.predicted == p.label) as usize;
            }
            match decode_classify(model, &mut cache, p.cue, verbalizer, &FaultHook::armed(t.coordinate)) {
                Ok(out) => {
                    forced[i] += (out.predicted == t.class) as usize;
                    triggered_correct[i] += (out.predicted == p.label) as usize;
                }
                Err(Error::UndefinedPrediction { .. }) => undefined[i] += 1,
                Err(e) => return Err(e),
            }
        }
    }

    let frac = |k: usize| k as f64 / n as f64;
    Ok(AttackReport {
        samples: n,
        baseline_accuracy: frac(baseline_correct),
        no_trigger_accuracy: if triggers.is_empty() {
            frac(baseline_correct)
        } else {
            frac(no_trigger_correct)
        },
        clean_path_bit_identical: identical,
        classes: triggers
            .iter()
            .enumerate()
            .map(|(i, t)| ClassAttack {
                class: t.class,
                coordinate: t.coordinate,
                calibration_asr: t.asr,
                trigger_asr: frac(forced[i]),
                forced: forced[i],
                undefined: undefined[i],
                triggered_accuracy: frac(triggered_correct[i]),
            })
            .collect(),
    })
}
