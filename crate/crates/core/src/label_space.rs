//! One-hot label space shared by several partially annotated datasets.
//!
//! Every `(dataset, raw label)` pair gets its own global index, even when two
//! datasets label the same anatomy. Index 0 is background and has no output
//! channel; global index `g` lives in channel `g - 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: &str = "Background";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawLabel {
    pub value: u16,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Image volume, relative to the manifest's directory.
    pub image: String,
    /// One or more raw label maps. Nested structures come as separate maps.
    #[serde(default)]
    pub labels: Vec<String>,
    /// Full-truth binary masks keyed by structure name (synthetic data only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub truth: BTreeMap<String, String>,
    /// Shape parameters used to draw the sample (synthetic data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapes: Option<String>,
}

/// Per-dataset manifest, stored as `manifest.json` in the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub modality: String,
    /// Voxel spacing in mm, `(depth, height, width)`.
    pub spacing: [f64; 3],
    pub labels: Vec<RawLabel>,
    #[serde(default)]
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn new(dataset_id: &str, modality: &str, spacing: [f64; 3], labels: &[(u16, &str)]) -> Self {
        DatasetManifest {
            dataset_id: dataset_id.to_string(),
            modality: modality.to_string(),
            spacing,
            labels: labels
                .iter()
                .map(|&(value, name)| RawLabel {
                    value,
                    name: name.to_string(),
                })
                .collect(),
            samples: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub index: usize,
    pub name: String,
    pub dataset: String,
}

impl ClassInfo {
    /// `dataset/name`, unique across the label space.
    pub fn qualified_name(&self) -> String {
        format!("{}/{}", self.dataset, self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DatasetLabels {
    id: String,
    raw_to_global: BTreeMap<u16, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpace {
    classes: Vec<ClassInfo>,
    datasets: Vec<DatasetLabels>,
}

/// The ten-dataset registry: 19 foreground classes in their published order.
pub fn default_manifests() -> Vec<DatasetManifest> {
    vec![
        DatasetManifest::new("msd_liver", "CT", [1.0, 0.77, 0.77], &[(1, "Liver"), (2, "Liver tumor")]),
        DatasetManifest::new("msd_pancreas", "CT", [2.5, 0.80, 0.80], &[(1, "Pancreas"), (2, "Pancreas tumor")]),
        DatasetManifest::new(
            "msd_hepatic_vessel",
            "CT",
            [5.0, 0.80, 0.80],
            &[(1, "Hepatic vessels"), (2, "Hepatic vessels tumor")],
        ),
        DatasetManifest::new("msd_lung", "CT", [1.24, 0.79, 0.79], &[(1, "Lung tumor")]),
        DatasetManifest::new("msd_spleen", "CT", [5.0, 0.79, 0.79], &[(1, "Spleen")]),
        DatasetManifest::new("msd_colon", "CT", [5.0, 0.78, 0.78], &[(1, "Colon cancer")]),
        DatasetManifest::new(
            "pelvis",
            "CT",
            [2.5, 0.98, 0.98],
            &[(1, "Bladder"), (2, "Uterus"), (3, "Rectum"), (4, "Small bowel")],
        ),
        DatasetManifest::new("pancreas_ct", "CT", [1.0, 0.86, 0.86], &[(1, "Pancreas")]),
        DatasetManifest::new("kits19", "CT", [3.0, 0.78, 0.78], &[(1, "Kidney"), (2, "Kidney tumor")]),
        DatasetManifest::new(
            "retouch",
            "OCT",
            [0.01, 0.01, 0.05],
            &[
                (1, "Intraretinal Fluid (IRF)"),
                (2, "Subretinal Fluid (SRF)"),
                (3, "Pigment Epithelium Detachments (PED)"),
            ],
        ),
    ]
}

impl LabelSpace {
    /// Assign global indices in manifest order, and within a dataset in
    /// ascending raw value order.
    pub fn build(manifests: &[DatasetManifest]) -> Result<Self> {
        let mut classes = Vec::new();
        let mut datasets = Vec::new();
        let mut seen_ids = BTreeSet::new();
        for m in manifests {
            if !seen_ids.insert(m.dataset_id.as_str()) {
                return Err(Error::Manifest(format!("dataset `{}` listed twice", m.dataset_id)));
            }
            let mut raw: BTreeMap<u16, &str> = BTreeMap::new();
            for l in &m.labels {
                if l.value == 0 {
                    return Err(Error::Manifest(format!(
                        "dataset `{}`: raw value 0 is reserved for background",
                        m.dataset_id
                    )));
                }
                if raw.insert(l.value, &l.name).is_some() {
                    return Err(Error::Manifest(format!(
                        "dataset `{}`: duplicate raw value {}",
                        m.dataset_id, l.value
                    )));
                }
            }
            let mut raw_to_global = BTreeMap::new();
            for (value, name) in raw {
                let index = classes.len() + 1;
                classes.push(ClassInfo {
                    index,
                    name: name.to_string(),
                    dataset: m.dataset_id.clone(),
                });
                raw_to_global.insert(value, index);
            }
            datasets.push(DatasetLabels {
                id: m.dataset_id.clone(),
                raw_to_global,
            });
        }
        Ok(LabelSpace { classes, datasets })
    }

    pub fn default_registry() -> Self {
        Self::build(&default_manifests()).expect("default registry is well formed")
    }

    /// Number of foreground classes (= output channels).
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    /// Class for a global index; `None` for background or out of range.
    pub fn class(&self, global: usize) -> Option<&ClassInfo> {
        global.checked_sub(1).and_then(|i| self.classes.get(i))
    }

    pub fn class_name(&self, global: usize) -> Option<&str> {
        if global == 0 {
            Some(BACKGROUND)
        } else {
            self.class(global).map(|c| c.name.as_str())
        }
    }

    pub fn dataset_ids(&self) -> impl Iterator<Item = &str> {
        self.datasets.iter().map(|d| d.id.as_str())
    }

    fn dataset(&self, id: &str) -> Result<&DatasetLabels> {
        self.datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::Manifest(format!("dataset `{id}` is not registered")))
    }

    /// Global index for a raw value of a dataset. Raw 0 maps to background.
    pub fn global_index(&self, dataset: &str, raw: u16) -> Result<usize> {
        if raw == 0 {
            return Ok(0);
        }
        self.dataset(dataset)?
            .raw_to_global
            .get(&raw)
            .copied()
            .ok_or_else(|| Error::Encoding {
                value: raw,
                dataset: dataset.to_string(),
            })
    }

    /// Global indices annotated by a dataset.
    pub fn annotated(&self, dataset: &str) -> Result<BTreeSet<usize>> {
        Ok(self.dataset(dataset)?.raw_to_global.values().copied().collect())
    }

    /// Per-channel flag: does this dataset annotate the class?
    pub fn mask_for(&self, dataset: &str) -> Result<Vec<bool>> {
        let ann = self.annotated(dataset)?;
        Ok((1..=self.num_classes()).map(|g| ann.contains(&g)).collect())
    }

    /// Map raw label maps of one sample to global one-hot channels.
    pub fn encode_target(&self, maps: &[RawLabelMap], dataset: &str) -> Result<SampleTarget> {
        let first = maps
            .first()
            .ok_or_else(|| Error::shape("encode_target needs at least one label map"))?;
        let (h, w) = (first.height, first.width);
        let ds = self.dataset(dataset)?;
        let c = self.num_classes();
        let mut onehot = vec![0.0; c * h * w];
        for m in maps {
            if (m.height, m.width) != (h, w) {
                return Err(Error::shape(format!(
                    "label maps differ in size: {}x{} vs {h}x{w}",
                    m.height, m.width
                )));
            }
            for (p, &raw) in m.values.iter().enumerate() {
                if raw == 0 {
                    continue;
                }
                let g = *ds.raw_to_global.get(&raw).ok_or_else(|| Error::Encoding {
                    value: raw,
                    dataset: dataset.to_string(),
                })?;
                onehot[(g - 1) * h * w + p] = 1.0;
            }
        }
        Ok(SampleTarget {
            onehot: Tensor::new(vec![c, h, w], onehot)?,
            mask: self.mask_for(dataset)?,
        })
    }

    /// Inverse of [`encode_target`](Self::encode_target) for datasets without
    /// overlapping structures. Where several annotated channels are set, the
    /// highest global index wins.
    pub fn decode_target(&self, target: &SampleTarget, dataset: &str) -> Result<RawLabelMap> {
        let ds = self.dataset(dataset)?;
        let [c, h, w] = match target.onehot.shape() {
            &[c, h, w] => [c, h, w],
            s => return Err(Error::shape(format!("one-hot target must be [C, H, W], got {s:?}"))),
        };
        if c != self.num_classes() {
            return Err(Error::shape(format!("target has {c} channels, label space has {}", self.num_classes())));
        }
        let mut values = vec![0u16; h * w];
        for (&raw, &g) in &ds.raw_to_global {
            let ch = &target.onehot.data()[(g - 1) * h * w..][..h * w];
            for (v, &on) in values.iter_mut().zip(ch) {
                if on > 0.5 {
                    *v = raw;
                }
            }
        }
        Ok(RawLabelMap {
            height: h,
            width: w,
            values,
        })
    }
}

/// Integer label image of one slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawLabelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u16>,
}

impl RawLabelMap {
    pub fn new(height: usize, width: usize, values: Vec<u16>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(RawLabelMap { height, width, values })
    }
}

/// Training target for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTarget {
    /// `[num_classes, H, W]`, values in {0, 1}. Channels may overlap.
    pub onehot: Tensor,
    /// `true` where the sample's dataset annotates the class.
    pub mask: Vec<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_dataset() {
        let space = LabelSpace::build(&[DatasetManifest::new("a", "CT", [1.0; 3], &[(1, "organ")])]).unwrap();
        assert_eq!(space.num_classes(), 1);
        assert_eq!(space.class_name(0), Some(BACKGROUND));
        assert_eq!(space.global_index("a", 1).unwrap(), 1);
    }

    #[test]
    fn duplicate_raw_value_rejected() {
        let m = DatasetManifest::new("a", "CT", [1.0; 3], &[(1, "x"), (1, "y")]);
        assert!(matches!(LabelSpace::build(&[m]), Err(Error::Manifest(_))));
        let m = DatasetManifest::new("a", "CT", [1.0; 3], &[(0, "x")]);
        assert!(matches!(LabelSpace::build(&[m]), Err(Error::Manifest(_))));
        let m = DatasetManifest::new("a", "CT", [1.0; 3], &[(1, "x")]);
        assert!(matches!(LabelSpace::build(&[m.clone(), m]), Err(Error::Manifest(_))));
    }

    #[test]
    fn unknown_raw_value_reports_dataset() {
        let space = LabelSpace::default_registry();
        let map = RawLabelMap::new(1, 2, vec![0, 4]).unwrap();
        match space.encode_target(&[map], "retouch") {
            Err(Error::Encoding { value, dataset }) => {
                assert_eq!(value, 4);
                assert_eq!(dataset, "retouch");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn background_only_map() {
        let space = LabelSpace::default_registry();
        let t = space
            .encode_target(&[RawLabelMap::new(3, 3, vec![0; 9]).unwrap()], "kits19")
            .unwrap();
        assert_eq!(t.onehot.sum(), 0.0);
        let expected: Vec<bool> = (1..=19).map(|g| g == 15 || g == 16).collect();
        assert_eq!(t.mask, expected);
    }

    #[test]
    fn retouch_channels() {
        let space = LabelSpace::default_registry();
        let map = RawLabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let t = space.encode_target(&[map], "retouch").unwrap();
        let plane = 4;
        for g in 1..=19usize {
            let ch_sum: f64 = t.onehot.data()[(g - 1) * plane..][..plane].iter().sum();
            let expect = if (17..=19).contains(&g) { 1.0 } else { 0.0 };
            assert_eq!(ch_sum, expect, "class {g}");
            assert_eq!(t.mask[g - 1], (17..=19).contains(&g));
        }
    }
}
