//! Compositional generalization metrics.
//!
//! Mask AP (greedy IoU matching, 101-point interpolated PR, averaged over
//! the 0.50:0.05:0.95 threshold ladder) evaluated separately on seen and
//! unseen composition prompts, the relative drop between them, and
//! AND-efficiency: unseen AP divided by the weakest single-attribute-group
//! AP, which measures whether independently learned atoms compose.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::synth::{Dataset, PromptSpec, Split, SynthScene};

pub const EPSILON: f64 = 1e-8;

/// One scored mask prediction on one image.
#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub image: usize,
    /// exp of the matching log-probability; positive.
    pub score: f64,
    pub mask: Vec<bool>,
}

/// `|a and b| / |a or b|`; two empty masks have IoU 0 by convention.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::MaskDims(a.len(), 1, b.len(), 1));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Average precision for one class: detections pooled over images, matched
/// greedily (best remaining IoU >= threshold, score order), 101-point
/// interpolated PR, averaged over thresholds. `None` when the class has no
/// ground truth anywhere (excluded from macro averages).
pub fn average_precision(
    detections: &[DetectionRecord],
    ground_truth: &BTreeMap<usize, Vec<Vec<bool>>>,
    iou_thresholds: &[f64],
) -> Result<Option<f64>, EvalError> {
    let total_gt: usize = ground_truth.values().map(Vec::len).sum();
    if total_gt == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b].score.partial_cmp(&detections[a].score).expect("finite scores")
    });

    // IoU of every detection against its image's instances, score-ordered
    let mut ious: Vec<Vec<f64>> = Vec::with_capacity(order.len());
    for &d in &order {
        let det = &detections[d];
        let gts = ground_truth.get(&det.image).map(Vec::as_slice).unwrap_or(&[]);
        let mut row = Vec::with_capacity(gts.len());
        for gt in gts {
            row.push(mask_iou(&det.mask, gt)?);
        }
        ious.push(row);
    }

    let mut ap_sum = 0.0;
    for &tau in iou_thresholds {
        // greedy matching per image at this threshold
        let mut used: BTreeMap<usize, Vec<bool>> =
            ground_truth.iter().map(|(&img, g)| (img, vec![false; g.len()])).collect();
        let mut tp_flags = Vec::with_capacity(order.len());
        for (rank, &d) in order.iter().enumerate() {
            let img = detections[d].image;
            let mut best: Option<(usize, f64)> = None;
            if let Some(taken) = used.get(&img) {
                for (g, &iou) in ious[rank].iter().enumerate() {
                    if taken[g] || iou < tau {
                        continue;
                    }
                    if best.map(|(_, b)| iou > b).unwrap_or(true) {
                        best = Some((g, iou));
                    }
                }
            }
            match best {
                Some((g, _)) => {
                    used.get_mut(&img).unwrap()[g] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }

        // interpolated PR over 101 recall points
        let mut precisions = Vec::with_capacity(tp_flags.len());
        let mut recalls = Vec::with_capacity(tp_flags.len());
        let mut tp = 0usize;
        for (k, &hit) in tp_flags.iter().enumerate() {
            tp += usize::from(hit);
            precisions.push(tp as f64 / (k + 1) as f64);
            recalls.push(tp as f64 / total_gt as f64);
        }
        // envelope: precision monotone non-increasing from the right
        for k in (0..precisions.len().saturating_sub(1)).rev() {
            if precisions[k] < precisions[k + 1] {
                precisions[k] = precisions[k + 1];
            }
        }
        let mut acc = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let p = recalls
                .iter()
                .position(|&rec| rec >= r - 1e-12)
                .map(|ix| precisions[ix])
                .unwrap_or(0.0);
            acc += p;
        }
        ap_sum += acc / 101.0;
    }
    Ok(Some(ap_sum / iou_thresholds.len() as f64))
}

/// `R_d = 1 - AP_unseen / (AP_seen + eps)`
pub fn relative_drop(ap_seen: f64, ap_unseen: f64) -> f64 {
    1.0 - ap_unseen / (ap_seen + EPSILON)
}

/// `AND-Eff = AP_unseen / min_g AP_g`; undefined when the weakest group AP
/// is zero.
pub fn and_efficiency(ap_unseen: f64, per_group_ap: &BTreeMap<String, f64>) -> Result<f64, EvalError> {
    let min = per_group_ap.values().cloned().fold(f64::INFINITY, f64::min);
    if per_group_ap.is_empty() || min <= 0.0 {
        return Err(EvalError::UndefinedAndEfficiency);
    }
    Ok(ap_unseen / min)
}

/// Which scenes the per-group single-attribute prompts are evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApGroupSplit {
    /// Union of both test splits (default).
    Full,
    /// Unseen-composition test split only.
    UnseenOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub iou_thresholds: Vec<f64>,
    pub ap_group_split: ApGroupSplit,
    pub max_detections_per_image: usize,
    /// Keep predictions with exp(log-score) at or above this.
    pub score_threshold: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            iou_thresholds: default_iou_thresholds(),
            ap_group_split: ApGroupSplit::Full,
            max_detections_per_image: 20,
            score_threshold: 0.3,
        }
    }
}

/// Anything that can turn `(scene, prompt)` into scored masks.
pub trait Detector {
    fn detect(&self, scene: &SynthScene, prompt: &PromptSpec) -> Vec<(f64, Vec<bool>)>;
}

/// Debug detector that replays ground truth at a fixed score.
pub struct OracleDetector;

impl Detector for OracleDetector {
    fn detect(&self, scene: &SynthScene, prompt: &PromptSpec) -> Vec<(f64, Vec<bool>)> {
        crate::synth::targets_for_prompt(scene, prompt)
            .into_iter()
            .map(|ix| (0.9, scene.instances[ix].mask.clone()))
            .collect()
    }
}

/// Detector that never fires; the AND-efficiency-undefined path.
pub struct SilentDetector;

impl Detector for SilentDetector {
    fn detect(&self, _: &SynthScene, _: &PromptSpec) -> Vec<(f64, Vec<bool>)> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mask AP percentages.
    pub ap_seen: f64,
    pub ap_unseen: f64,
    pub r_d: f64,
    pub and_eff: Option<f64>,
    /// Set when the weakest attribute-group AP is zero.
    pub and_eff_undefined: bool,
    pub per_group_ap: BTreeMap<String, f64>,
    pub per_composition_ap: BTreeMap<String, f64>,
    pub protocol: ProtocolConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    /// Aligned plain-text table in the headline column order.
    pub fn table(&self) -> String {
        let and_eff = match self.and_eff {
            Some(v) => format!("{v:.3}"),
            None => "undef".to_string(),
        };
        let mut s = String::new();
        s.push_str(&format!(
            "{:<12} {:>9} {:>8} {:>6} {:>8}\n",
            "", "AP_unseen", "AP_seen", "R_d", "AND-Eff"
        ));
        s.push_str(&format!(
            "{:<12} {:>9.1} {:>8.1} {:>6.3} {:>8}\n",
            "result", self.ap_unseen, self.ap_seen, self.r_d, and_eff
        ));
        s
    }
}

fn prompt_key(space: &crate::synth::CompositionSpace, prompt: &PromptSpec) -> String {
    let (cat, attrs) = prompt.names(space);
    let mut parts: Vec<&str> = attrs.iter().map(|(_, v)| *v).collect();
    parts.push(cat);
    parts.join("+")
}

/// AP for one prompt over a set of scenes, pooled COCO-style.
fn class_ap(
    detector: &dyn Detector,
    scenes: &[&SynthScene],
    prompt: &PromptSpec,
    protocol: &ProtocolConfig,
) -> Result<Option<f64>, EvalError> {
    let mut detections = vec![];
    let mut ground_truth: BTreeMap<usize, Vec<Vec<bool>>> = BTreeMap::new();
    for (img, scene) in scenes.iter().enumerate() {
        let gts: Vec<Vec<bool>> = crate::synth::targets_for_prompt(scene, prompt)
            .into_iter()
            .map(|ix| scene.instances[ix].mask.clone())
            .collect();
        if !gts.is_empty() {
            ground_truth.insert(img, gts);
        }
        let mut dets = detector.detect(scene, prompt);
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
        dets.truncate(protocol.max_detections_per_image);
        for (score, mask) in dets {
            detections.push(DetectionRecord { image: img, score, mask });
        }
    }
    average_precision(&detections, &ground_truth, &protocol.iou_thresholds)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Run the full protocol: composed prompts per split for AP_seen/AP_unseen,
/// single-attribute prompts per group for AP_g, and the derived metrics.
pub fn evaluate(
    detector: &dyn Detector,
    dataset: &Dataset,
    protocol: &ProtocolConfig,
) -> Result<EvalReport, EvalError> {
    let space = &dataset.spec.space;
    let seen_scenes: Vec<&SynthScene> = dataset.scenes_of(Split::TestSeen).collect();
    let unseen_scenes: Vec<&SynthScene> = dataset.scenes_of(Split::TestUnseen).collect();
    if seen_scenes.is_empty() {
        return Err(EvalError::MissingSplit("test_seen".into()));
    }
    if unseen_scenes.is_empty() {
        return Err(EvalError::MissingSplit("test_unseen".into()));
    }

    let mut per_composition_ap = BTreeMap::new();
    let mut split_ap = |comps: &[crate::synth::Composition],
                        scenes: &[&SynthScene],
                        per_comp: &mut BTreeMap<String, f64>|
     -> Result<f64, EvalError> {
        let mut aps = vec![];
        for comp in comps {
            let prompt = PromptSpec {
                category: comp.category,
                attributes: comp.attributes.iter().map(|&a| Some(a)).collect(),
            };
            if let Some(ap) = class_ap(detector, scenes, &prompt, protocol)? {
                let pct = ap * 100.0;
                per_comp.insert(prompt_key(space, &prompt), pct);
                aps.push(pct);
            }
        }
        Ok(mean(&aps))
    };

    let ap_seen = split_ap(&space.seen, &seen_scenes, &mut per_composition_ap)?;
    let ap_unseen = split_ap(&space.unseen, &unseen_scenes, &mut per_composition_ap)?;

    let group_scenes: Vec<&SynthScene> = match protocol.ap_group_split {
        ApGroupSplit::Full => seen_scenes.iter().chain(unseen_scenes.iter()).copied().collect(),
        ApGroupSplit::UnseenOnly => unseen_scenes.clone(),
    };
    let mut per_group_ap = BTreeMap::new();
    for (g, group) in space.groups.iter().enumerate() {
        let mut aps = vec![];
        for member in 0..group.members.len() {
            for category in 0..space.categories.len() {
                let mut attributes = vec![None; space.group_count()];
                attributes[g] = Some(member);
                let prompt = PromptSpec { category, attributes };
                if let Some(ap) = class_ap(detector, &group_scenes, &prompt, protocol)? {
                    aps.push(ap * 100.0);
                }
            }
        }
        per_group_ap.insert(group.name.clone(), mean(&aps));
    }

    let (and_eff, and_eff_undefined) = match and_efficiency(ap_unseen, &per_group_ap) {
        Ok(v) => (Some(v), false),
        Err(EvalError::UndefinedAndEfficiency) => (None, true),
        Err(e) => return Err(e),
    };

    Ok(EvalReport {
        ap_seen,
        ap_unseen,
        r_d: relative_drop(ap_seen, ap_unseen),
        and_eff,
        and_eff_undefined,
        per_group_ap,
        per_composition_ap,
        protocol: protocol.clone(),
        config: None,
    })
}

#[cfg(test)]
mod tests;
