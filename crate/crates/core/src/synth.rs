//! Synthetic multi-dataset corpus.
//!
//! Every image shows one elliptical organ; some also show a lesion blob drawn
//! strictly inside the organ. Each dataset annotates only the structures it
//! declares, even when others are visible, and a full-truth sidecar records
//! every drawn structure. Two noise models stand in for imaging modalities.
//!
//! Output layout under the target directory:
//!
//! ```text
//! dataset_<id>/manifest.json
//! dataset_<id>/images/case_000.mmiv
//! dataset_<id>/labels/case_000_<structure>.mmil   one map per annotated structure
//! dataset_<id>/truth/case_000_<structure>.mmil    binary, every structure
//! dataset_<id>/truth/case_000_shapes.json         shape parameters per slice
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{DatasetManifest, SampleEntry};
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Organ,
    Lesion,
}

impl Structure {
    pub const ALL: [Structure; 2] = [Structure::Organ, Structure::Lesion];

    pub fn name(self) -> &'static str {
        match self {
            Structure::Organ => "organ",
            Structure::Lesion => "lesion",
        }
    }

    /// Raw label value written to the dataset's label maps.
    pub fn raw_value(self) -> u16 {
        match self {
            Structure::Organ => 1,
            Structure::Lesion => 2,
        }
    }
}

/// Noise model and intensity levels of a simulated modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Bright lesion in a mid-gray organ on a dark background, additive
    /// Gaussian noise.
    Additive,
    /// Dark lesion in a bright organ on a mid-gray background, multiplicative
    /// speckle noise.
    Speckle,
}

/// Smallest gap between the mean intensities of the two modalities, as
/// produced by the levels below. Checked by the test suite on a fixed seed.
pub const MODALITY_MEAN_GAP: f64 = 0.15;

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Additive => "additive",
            Modality::Speckle => "speckle",
        }
    }

    /// Noise-free intensity of background, organ and lesion.
    pub fn levels(self) -> [f64; 3] {
        match self {
            Modality::Additive => [0.2, 0.55, 0.9],
            Modality::Speckle => [0.45, 0.8, 0.25],
        }
    }

    fn noisy<R: Rng>(self, clean: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match self {
            Modality::Additive => clean + 0.05 * z,
            Modality::Speckle => clean * (1.0 + 0.15 * z),
        }
    }
}

fn default_slices() -> usize {
    1
}

fn default_lesion_fraction() -> f64 {
    0.5
}

fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_image_size() -> [usize; 2] {
    [64, 64]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub id: String,
    /// Number of volumes.
    pub images: usize,
    #[serde(default = "default_slices")]
    pub slices: usize,
    pub modality: Modality,
    /// Structures this dataset annotates.
    pub annotate: Vec<Structure>,
    /// Share of volumes that contain a lesion, rounded to a whole count.
    #[serde(default = "default_lesion_fraction")]
    pub lesion_fraction: f64,
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// `(H, W)` of every slice.
    #[serde(default = "default_image_size")]
    pub image_size: [usize; 2],
    pub datasets: Vec<SynthDatasetSpec>,
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!("image size {h}x{w} is below 16x16")));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("synthetic spec has no datasets".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for ds in &self.datasets {
            if ds.id.is_empty() || !ds.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("dataset id `{}` must be non-empty [A-Za-z0-9_-]", ds.id)));
            }
            if !ids.insert(ds.id.as_str()) {
                return Err(Error::Config(format!("duplicate dataset id `{}`", ds.id)));
            }
            if ds.images == 0 || ds.slices == 0 {
                return Err(Error::Config(format!("dataset `{}` needs at least one image and slice", ds.id)));
            }
            if ds.annotate.is_empty() {
                return Err(Error::Config(format!("dataset `{}` annotates nothing", ds.id)));
            }
            let mut seen = ds.annotate.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != ds.annotate.len() {
                return Err(Error::Config(format!("dataset `{}` lists a structure twice", ds.id)));
            }
            if !(0.0..=1.0).contains(&ds.lesion_fraction) {
                return Err(Error::Config(format!("dataset `{}`: lesion_fraction outside [0, 1]", ds.id)));
            }
            if ds.annotate.contains(&Structure::Lesion) && ds.lesion_fraction == 0.0 {
                return Err(Error::Config(format!(
                    "dataset `{}` annotates lesions but never draws one",
                    ds.id
                )));
            }
            if ds.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Config(format!("dataset `{}`: spacing must be positive", ds.id)));
            }
        }
        Ok(())
    }
}

/// Rotated ellipse in pixel coordinates (row, column of pixel centers).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dy * c + dx * s) / self.ry;
        let v = (-dy * s + dx * c) / self.rx;
        u * u + v * v <= 1.0
    }
}

/// Star-shaped blob: `r(phi) = radius * (1 + amplitude * cos(lobes * phi + phase))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub amplitude: f64,
    pub lobes: u32,
    pub phase: f64,
}

impl Blob {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let r = (dy * dy + dx * dx).sqrt();
        let phi = dy.atan2(dx);
        r <= self.radius * (1.0 + self.amplitude * (self.lobes as f64 * phi + self.phase).cos())
    }

    pub fn max_radius(&self) -> f64 {
        self.radius * (1.0 + self.amplitude)
    }
}

/// Geometry drawn on one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceShapes {
    pub organ: Ellipse,
    pub lesion: Option<Blob>,
}

impl SliceShapes {
    pub fn rasterize(&self, structure: Structure, h: usize, w: usize) -> Vec<bool> {
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64, x as f64);
                out[y * w + x] = match structure {
                    Structure::Organ => self.organ.contains(fy, fx),
                    Structure::Lesion => self.lesion.is_some_and(|b| b.contains(fy, fx)),
                };
            }
        }
        out
    }
}

/// One generated volume held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVolume {
    pub name: String,
    pub image: Volume,
    /// One raw label map per annotated structure, in the dataset's order.
    pub labels: Vec<(Structure, LabelVolume)>,
    /// Binary masks of every structure.
    pub truth: BTreeMap<Structure, LabelVolume>,
    pub shapes: Vec<SliceShapes>,
    pub has_lesion: bool,
}

fn random_organ<R: Rng>(rng: &mut R, h: usize, w: usize) -> Ellipse {
    let (hf, wf) = (h as f64, w as f64);
    Ellipse {
        cy: hf * rng.random_range(0.4..0.6),
        cx: wf * rng.random_range(0.4..0.6),
        ry: hf * rng.random_range(0.2..0.32),
        rx: wf * rng.random_range(0.2..0.32),
        angle: rng.random_range(0.0..std::f64::consts::PI),
    }
}

/// A blob whose one-pixel dilation still lies inside `organ`.
///
/// With the center at normalized ellipse radius `s`, the ellipse contains the
/// disk of radius `(1 - s) * min(ry, rx)` around it; the blob stays one pixel
/// short of that disk.
fn random_lesion<R: Rng>(rng: &mut R, organ: &Ellipse) -> Blob {
    const S: f64 = 0.3;
    let rho = S * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..std::f64::consts::TAU);
    let (u, v) = (rho * t.cos(), rho * t.sin());
    let (sn, cs) = organ.angle.sin_cos();
    let (ly, lx) = (u * organ.ry, v * organ.rx);
    let cy = organ.cy + ly * cs - lx * sn;
    let cx = organ.cx + ly * sn + lx * cs;
    let room = (1.0 - S) * organ.ry.min(organ.rx) - 1.0;
    let amplitude = rng.random_range(0.0..0.3);
    let radius = room * rng.random_range(0.55..0.9) / (1.0 + amplitude);
    Blob {
        cy,
        cx,
        radius,
        amplitude,
        lobes: rng.random_range(2..=4),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

fn dataset_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Render every volume of dataset `index` in memory.
pub fn render_dataset(spec: &SynthSpec, index: usize) -> Result<Vec<SynthVolume>> {
    spec.validate()?;
    let ds = spec
        .datasets
        .get(index)
        .ok_or(Error::Index {
            index,
            len: spec.datasets.len(),
        })?;
    let [h, w] = spec.image_size;
    let mut rng = dataset_rng(spec.seed, index);

    let mut n_lesion = (ds.images as f64 * ds.lesion_fraction).round() as usize;
    if ds.lesion_fraction > 0.0 {
        n_lesion = n_lesion.max(1);
    }
    let mut order: Vec<usize> = (0..ds.images).collect();
    order.shuffle(&mut rng);
    let mut with_lesion = vec![false; ds.images];
    for &i in &order[..n_lesion] {
        with_lesion[i] = true;
    }

    let levels = ds.modality.levels();
    let dims = [ds.slices, h, w];
    let mut volumes = Vec::with_capacity(ds.images);
    for (i, &has_lesion) in with_lesion.iter().enumerate() {
        let mut image = Vec::with_capacity(ds.slices * h * w);
        let mut masks: BTreeMap<Structure, Vec<u16>> = Structure::ALL.iter().map(|&s| (s, Vec::new())).collect();
        let mut shapes = Vec::with_capacity(ds.slices);
        for _ in 0..ds.slices {
            let organ = random_organ(&mut rng, h, w);
            let lesion = has_lesion.then(|| random_lesion(&mut rng, &organ));
            let sh = SliceShapes { organ, lesion };
            let organ_px = sh.rasterize(Structure::Organ, h, w);
            let lesion_px = sh.rasterize(Structure::Lesion, h, w);
            for p in 0..h * w {
                let clean = if lesion_px[p] {
                    levels[2]
                } else if organ_px[p] {
                    levels[1]
                } else {
                    levels[0]
                };
                image.push(ds.modality.noisy(clean, &mut rng));
            }
            masks.get_mut(&Structure::Organ).unwrap().extend(organ_px.iter().map(|&b| b as u16));
            masks.get_mut(&Structure::Lesion).unwrap().extend(lesion_px.iter().map(|&b| b as u16));
            shapes.push(sh);
        }
        let truth = masks
            .into_iter()
            .map(|(s, m)| Ok((s, Volume::new(dims, ds.spacing, m)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let labels = ds
            .annotate
            .iter()
            .map(|&s| {
                let raw = truth[&s].data().iter().map(|&b| b * s.raw_value()).collect();
                Ok((s, Volume::new(dims, ds.spacing, raw)?))
            })
            .collect::<Result<Vec<_>>>()?;
        volumes.push(SynthVolume {
            name: format!("case_{i:03}"),
            image: Volume::new(dims, ds.spacing, image)?,
            labels,
            truth,
            shapes,
            has_lesion,
        });
    }
    Ok(volumes)
}

/// Manifest for dataset `index`, listing the files [`generate`] writes.
pub fn dataset_manifest(ds: &SynthDatasetSpec, volumes: &[SynthVolume]) -> DatasetManifest {
    let labels: Vec<(u16, &str)> = ds.annotate.iter().map(|s| (s.raw_value(), s.name())).collect();
    let mut manifest = DatasetManifest::new(&ds.id, ds.modality.name(), ds.spacing, &labels);
    manifest.samples = volumes
        .iter()
        .map(|v| SampleEntry {
            image: format!("images/{}.mmiv", v.name),
            labels: v
                .labels
                .iter()
                .map(|(s, _)| format!("labels/{}_{}.mmil", v.name, s.name()))
                .collect(),
            truth: v
                .truth
                .keys()
                .map(|s| (s.name().to_string(), format!("truth/{}_{}.mmil", v.name, s.name())))
                .collect(),
            shapes: Some(format!("truth/{}_shapes.json", v.name)),
        })
        .collect();
    manifest
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write the whole corpus under `out`. Returns the manifests in spec order.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<Vec<DatasetManifest>> {
    spec.validate()?;
    let mut manifests = Vec::with_capacity(spec.datasets.len());
    for (index, ds) in spec.datasets.iter().enumerate() {
        let volumes = render_dataset(spec, index)?;
        let root = out.join(format!("dataset_{}", ds.id));
        for sub in ["images", "labels", "truth"] {
            create_dir(&root.join(sub))?;
        }
        let manifest = dataset_manifest(ds, &volumes);
        for (v, entry) in volumes.iter().zip(&manifest.samples) {
            v.image.write(&root.join(&entry.image))?;
            for ((_, lv), rel) in v.labels.iter().zip(&entry.labels) {
                lv.write(&root.join(rel))?;
            }
            for (s, tv) in &v.truth {
                tv.write(&root.join(&entry.truth[s.name()]))?;
            }
            let shapes_path = root.join(entry.shapes.as_ref().expect("synthetic samples carry shapes"));
            let json = serde_json::to_string_pretty(&v.shapes)?;
            std::fs::write(&shapes_path, json).map_err(|e| Error::io(&shapes_path, e))?;
        }
        manifest.save(&root.join("manifest.json"))?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            seed: 11,
            image_size: [32, 32],
            datasets: vec![SynthDatasetSpec {
                id: "a".into(),
                images: 4,
                slices: 2,
                modality: Modality::Additive,
                annotate: vec![Structure::Organ, Structure::Lesion],
                lesion_fraction: 0.5,
                spacing: [1.0; 3],
            }],
        }
    }

    #[test]
    fn lesion_count_follows_fraction() {
        let vols = render_dataset(&spec(), 0).unwrap();
        assert_eq!(vols.iter().filter(|v| v.has_lesion).count(), 2);
        for v in &vols {
            let any = v.truth[&Structure::Lesion].data().iter().any(|&b| b == 1);
            assert_eq!(any, v.has_lesion);
        }
    }

    #[test]
    fn class_floor_forces_one_lesion() {
        let mut s = spec();
        s.datasets[0].lesion_fraction = 0.01;
        let vols = render_dataset(&s, 0).unwrap();
        assert_eq!(vols.iter().filter(|v| v.has_lesion).count(), 1);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec();
        s.datasets[0].annotate = vec![Structure::Organ, Structure::Organ];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.datasets[0].lesion_fraction = 0.0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.datasets[0].id = "../x".into();
        assert!(s.validate().is_err());
    }
}
