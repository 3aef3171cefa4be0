//! Segmentation and detection metrics and the evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::{Corpus, LoadedVolume};
use crate::error::{Error, Result};
use crate::label_space::RawLabelMap;
use crate::predict::predict_masks;

fn same_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("mask sizes differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|&&b| b).count()
}

/// `2|P∩G| / (|P| + |G|)`, or 1 when both masks are empty.
pub fn dice_score(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len(pred, gt)?;
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    let total = count(pred) + count(gt);
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Absolute volume difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Avd {
    /// `| |P| - |G| |` times the voxel volume.
    pub mm3: f64,
    /// The same difference as a fraction of the whole image volume.
    pub normalized: f64,
}

pub fn avd(pred: &[bool], gt: &[bool], voxel_volume: f64) -> Result<Avd> {
    same_len(pred, gt)?;
    if !(voxel_volume > 0.0 && voxel_volume.is_finite()) {
        return Err(Error::Config(format!("voxel volume must be positive, got {voxel_volume}")));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty masks"));
    }
    let diff = count(pred).abs_diff(count(gt)) as f64;
    Ok(Avd {
        mm3: diff * voxel_volume,
        normalized: diff / pred.len() as f64,
    })
}

/// Share of (positive, negative) pairs where the positive scores higher;
/// ties count one half.
pub fn detection_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedAuc);
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Prediction and reference for one class on one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMasks {
    pub pred: Vec<bool>,
    pub gt: Vec<bool>,
    pub voxel_volume: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub name: String,
    /// Mean Dice over volumes.
    pub ds: f64,
    /// Mean absolute volume difference over volumes, mm³.
    pub avd_mm3: f64,
    pub avd_norm: f64,
    /// Detection AUC over volumes, `None` when every volume has the same presence.
    pub auc: Option<f64>,
    pub volumes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub mean_ds: f64,
    pub mean_avd_mm3: f64,
    pub mean_avd_norm: f64,
    /// Mean over classes with a defined AUC.
    pub mean_auc: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

/// Score one class over its volumes.
pub fn class_report(name: &str, volumes: &[VolumeMasks]) -> Result<ClassReport> {
    if volumes.is_empty() {
        return Err(Error::shape(format!("class {name} has no volumes to evaluate")));
    }
    let mut ds = Vec::with_capacity(volumes.len());
    let mut av = Vec::with_capacity(volumes.len());
    let mut scores = Vec::with_capacity(volumes.len());
    let mut present = Vec::with_capacity(volumes.len());
    for v in volumes {
        ds.push(dice_score(&v.pred, &v.gt)?);
        av.push(avd(&v.pred, &v.gt, v.voxel_volume)?);
        scores.push(count(&v.pred) as f64);
        present.push(v.gt.iter().any(|&b| b));
    }
    let auc = match detection_auc(&scores, &present) {
        Ok(a) => Some(a),
        Err(Error::UndefinedAuc) => None,
        Err(e) => return Err(e),
    };
    Ok(ClassReport {
        name: name.to_string(),
        ds: mean(ds.into_iter()).unwrap(),
        avd_mm3: mean(av.iter().map(|a| a.mm3)).unwrap(),
        avd_norm: mean(av.iter().map(|a| a.normalized)).unwrap(),
        auc,
        volumes: volumes.len(),
    })
}

/// Assemble a report from per-class volume masks.
pub fn evaluate_predictions(per_class: &[(String, Vec<VolumeMasks>)]) -> Result<EvalReport> {
    let classes = per_class
        .iter()
        .map(|(name, vols)| class_report(name, vols))
        .collect::<Result<Vec<_>>>()?;
    if classes.is_empty() {
        return Err(Error::shape("nothing to evaluate"));
    }
    Ok(EvalReport {
        mean_ds: mean(classes.iter().map(|c| c.ds)).unwrap(),
        mean_avd_mm3: mean(classes.iter().map(|c| c.avd_mm3)).unwrap(),
        mean_avd_norm: mean(classes.iter().map(|c| c.avd_norm)).unwrap(),
        mean_auc: mean(classes.iter().filter_map(|c| c.auc)),
        classes,
    })
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ds,avd_mm3,avd_norm,auc\n");
        for c in &self.classes {
            writeln!(out, "{},{},{},{},{}", c.name, c.ds, c.avd_mm3, c.avd_norm, fmt_opt(c.auc)).unwrap();
        }
        writeln!(
            out,
            "mean,{},{},{},{}",
            self.mean_ds,
            self.mean_avd_mm3,
            self.mean_avd_norm,
            fmt_opt(self.mean_auc)
        )
        .unwrap();
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Which reference masks to score against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TruthSource {
    /// The dataset's own label maps; each class is scored on its dataset's volumes.
    Annotated,
    /// Full-truth masks; each class is scored on every volume that has a
    /// full-truth mask for a structure of the same name.
    FullTruth,
}

/// Evaluate `ckpt` on the given volumes of `corpus`.
pub fn evaluate_volumes(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    volumes: &[usize],
    threshold: f64,
    truth: TruthSource,
) -> Result<EvalReport> {
    // channel of the checkpoint for every class of the corpus
    let mut channels = Vec::new();
    for class in corpus.space.classes() {
        let qn = class.qualified_name();
        let ch = ckpt
            .classes
            .iter()
            .position(|c| c.qualified_name() == qn)
            .ok_or_else(|| Error::Manifest(format!("class {qn} is not in the checkpoint's label space")))?;
        channels.push(ch);
    }
    let mut per_class: Vec<(String, Vec<VolumeMasks>)> = corpus
        .space
        .classes()
        .iter()
        .map(|c| (c.qualified_name(), Vec::new()))
        .collect();
    for &vi in volumes {
        let vol = corpus.volumes.get(vi).ok_or(Error::Index {
            index: vi,
            len: corpus.volumes.len(),
        })?;
        let preds = predict_masks(ckpt, &vol.image, threshold)?;
        for (k, class) in corpus.space.classes().iter().enumerate() {
            let gt = match truth {
                TruthSource::Annotated if class.dataset == vol.dataset => {
                    Some(annotated_mask(corpus, vol, class.index)?)
                }
                TruthSource::Annotated => None,
                TruthSource::FullTruth => vol
                    .truth
                    .get(&class.name)
                    .map(|t| t.data().iter().map(|&v| v != 0).collect()),
            };
            if let Some(gt) = gt {
                per_class[k].1.push(VolumeMasks {
                    pred: preds[channels[k]].clone(),
                    gt,
                    voxel_volume: vol.image.voxel_volume(),
                });
            }
        }
    }
    per_class.retain(|(_, v)| !v.is_empty());
    evaluate_predictions(&per_class)
}

/// Binary mask of global class `global` from a volume's raw label maps.
pub fn annotated_mask(corpus: &Corpus, vol: &LoadedVolume, global: usize) -> Result<Vec<bool>> {
    let [d, h, w] = vol.image.dims();
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let maps = vol
            .labels
            .iter()
            .map(|lv| RawLabelMap::new(h, w, lv.slice(z)?.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let t = corpus.space.encode_target(&maps, &vol.dataset)?;
        out.extend(t.onehot.data()[(global - 1) * h * w..global * h * w].iter().map(|&v| v > 0.5));
    }
    Ok(out)
}

/// Load a checkpoint and a data directory and evaluate every volume.
pub fn evaluate(ckpt_path: &Path, data_dir: &Path, threshold: f64, truth: TruthSource) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let corpus = Corpus::load(data_dir)?;
    let all: Vec<usize> = (0..corpus.volumes.len()).collect();
    evaluate_volumes(&ckpt, &corpus, &all, threshold, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn dice_cases() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice_score(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(dice_score(&a, &mask(&[1])).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(detection_auc(&[3.0, 4.0, 1.0, 0.0], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(detection_auc(&[0.0, 1.0, 3.0, 4.0], &[true, true, false, false]).unwrap(), 0.0);
        assert_eq!(detection_auc(&[2.0, 2.0], &[true, false]).unwrap(), 0.5);
        assert!(matches!(detection_auc(&[1.0, 2.0], &[true, true]), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn csv_layout() {
        let vm = VolumeMasks {
            pred: mask(&[1, 0]),
            gt: mask(&[1, 0]),
            voxel_volume: 1.0,
        };
        let report = evaluate_predictions(&[("d/c".to_string(), vec![vm])]).unwrap();
        assert_eq!(report.to_csv(), "class,ds,avd_mm3,avd_norm,auc\nd/c,1,0,0,nan\nmean,1,0,0,nan\n");
    }
}
