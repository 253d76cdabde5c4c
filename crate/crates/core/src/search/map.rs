use serde::{Deserialize, Serialize};

use super::calibrate::AsrMatrix;
use crate::bitflip::BitCoordinate;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCoordinate {
    pub coordinate: BitCoordinate,
    pub asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTrigger {
    pub class: usize,
    pub coordinate: BitCoordinate,
    pub asr: f64,
    /// Every coordinate reaching the threshold for this class, best first.
    /// Tried in order when the primary cannot be realized.
    pub ranked: Vec<RankedCoordinate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMap {
    pub threshold: f64,
    pub calibration_samples: usize,
    pub classes: Vec<ClassTrigger>,
    pub complete: bool,
    pub failing_classes: Vec<usize>,
}

impl CorruptionMap {
    pub fn class(&self, class: usize) -> Option<&ClassTrigger> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Picks the highest-ASR coordinate per class (ties to the smallest
/// coordinate) and lists all coordinates at or above `threshold`.
pub fn build_corruption_map(matrix: &AsrMatrix, threshold: f64) -> Result<CorruptionMap> {
    if matrix.rows.is_empty() {
        return Err(Error::Input("ASR matrix has no coordinates".into()));
    }
    let mut classes = Vec::with_capacity(matrix.num_classes);
    let mut failing = Vec::new();
    for class in 0..matrix.num_classes {
        let mut order: Vec<_> = matrix.rows.iter().collect();
        order.sort_by(|a, b| {
            b.counts[class]
                .cmp(&a.counts[class])
                .then(a.coordinate.cmp(&b.coordinate))
        });
        let best = order[0];
        let asr = best.rate(class);
        if asr < threshold {
            failing.push(class);
        }
        let ranked = order
            .iter()
            .filter(|r| r.rate(class) >= threshold)
            .map(|r| RankedCoordinate {
                coordinate: r.coordinate,
                asr: r.rate(class),
            })
            .collect();
        classes.push(ClassTrigger {
            class,
            coordinate: best.coordinate,
            asr,
            ranked,
        });
    }
    Ok(CorruptionMap {
        threshold,
        calibration_samples: matrix.samples,
        complete: failing.is_empty(),
        failing_classes: failing,
        classes,
    })
}
