//! Loading dataset directories into training slices.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label_space::{DatasetManifest, LabelSpace, RawLabelMap, SampleTarget};
use crate::loss::TargetBatch;
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

/// One volume with its label maps and optional full-truth masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedVolume {
    pub dataset: String,
    pub name: String,
    pub image: Volume,
    pub labels: Vec<LabelVolume>,
    /// Binary masks keyed by structure name.
    pub truth: BTreeMap<String, LabelVolume>,
}

impl LoadedVolume {
    pub fn num_slices(&self) -> usize {
        self.image.dims()[0]
    }
}

/// Every dataset found under a data directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifests: Vec<DatasetManifest>,
    pub space: LabelSpace,
    pub volumes: Vec<LoadedVolume>,
}

/// One slice ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    /// Index into [`Corpus::volumes`].
    pub volume: usize,
    pub z: usize,
    /// Normalized intensities, `[1, H, W]`.
    pub image: Tensor,
    pub target: SampleTarget,
}

/// `dataset_*` subdirectories of `dir`, sorted by name.
pub fn dataset_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if entry.path().is_dir() && name.to_string_lossy().starts_with("dataset_") {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Ingestion(vec![dir.join("dataset_*/manifest.json")]));
    }
    Ok(dirs)
}

/// Zero mean, unit variance. Flat slices are only centered.
pub fn normalize_slice(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    values.iter().map(|v| (v - mean) * scale).collect()
}

impl Corpus {
    /// Load every `dataset_*/manifest.json` below `dir`. All referenced files
    /// are checked before any is read; missing ones are reported together.
    pub fn load(dir: &Path) -> Result<Self> {
        let dirs = dataset_dirs(dir)?;
        let mut manifests = Vec::new();
        let mut missing = Vec::new();
        for d in &dirs {
            let mpath = d.join("manifest.json");
            if !mpath.is_file() {
                missing.push(mpath);
                continue;
            }
            let m = DatasetManifest::load(&mpath)?;
            for s in &m.samples {
                let files = std::iter::once(&s.image).chain(&s.labels).chain(s.truth.values());
                missing.extend(files.map(|f| d.join(f)).filter(|p| !p.is_file()));
            }
            manifests.push(m);
        }
        if !missing.is_empty() {
            return Err(Error::Ingestion(missing));
        }
        let space = LabelSpace::build(&manifests)?;
        let mut volumes = Vec::new();
        for (d, m) in dirs.iter().zip(&manifests) {
            for s in &m.samples {
                let image = Volume::read(&d.join(&s.image))?;
                let labels = s
                    .labels
                    .iter()
                    .map(|f| LabelVolume::read(&d.join(f)))
                    .collect::<Result<Vec<_>>>()?;
                let truth = s
                    .truth
                    .iter()
                    .map(|(k, f)| Ok((k.clone(), LabelVolume::read(&d.join(f))?)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                for lv in labels.iter().chain(truth.values()) {
                    if lv.dims() != image.dims() {
                        return Err(Error::shape(format!(
                            "{}: label dims {:?} differ from image dims {:?}",
                            s.image,
                            lv.dims(),
                            image.dims()
                        )));
                    }
                }
                if labels.is_empty() {
                    return Err(Error::Manifest(format!("{}: sample has no label maps", s.image)));
                }
                volumes.push(LoadedVolume {
                    dataset: m.dataset_id.clone(),
                    name: s.image.clone(),
                    image,
                    labels,
                    truth,
                });
            }
        }
        Ok(Corpus {
            manifests,
            space,
            volumes,
        })
    }

    /// Seeded per-dataset split: `floor(n * val_fraction)` volumes of each
    /// dataset go to validation. Returns sorted `(train, val)` volume indices.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for m in &self.manifests {
            let mut idx: Vec<usize> = (0..self.volumes.len())
                .filter(|&i| self.volumes[i].dataset == m.dataset_id)
                .collect();
            idx.shuffle(&mut rng);
            let n_val = (idx.len() as f64 * val_fraction).floor() as usize;
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (train, val)
    }

    /// Normalized image and encoded target of slice `z` of volume `v`.
    pub fn slice(&self, v: usize, z: usize) -> Result<Slice> {
        let vol = self.volumes.get(v).ok_or(Error::Index {
            index: v,
            len: self.volumes.len(),
        })?;
        let [_, h, w] = vol.image.dims();
        let image = Tensor::new(vec![1, h, w], normalize_slice(vol.image.slice(z)?))?;
        let maps = vol
            .labels
            .iter()
            .map(|lv| RawLabelMap::new(h, w, lv.slice(z)?.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let target = self.space.encode_target(&maps, &vol.dataset)?;
        Ok(Slice {
            volume: v,
            z,
            image,
            target,
        })
    }

    /// Every slice of the given volumes, in order.
    pub fn slices(&self, volumes: &[usize]) -> Result<Vec<Slice>> {
        let mut out = Vec::new();
        for &v in volumes {
            let n = self
                .volumes
                .get(v)
                .ok_or(Error::Index {
                    index: v,
                    len: self.volumes.len(),
                })?
                .num_slices();
            for z in 0..n {
                out.push(self.slice(v, z)?);
            }
        }
        Ok(out)
    }
}

/// Stack slices into a network input `[B, 1, H, W]` and a target batch.
pub fn batch(slices: &[&Slice]) -> Result<(Tensor, TargetBatch)> {
    let images: Vec<&Tensor> = slices.iter().map(|s| &s.image).collect();
    let input = Tensor::stack(&images)?;
    let targets: Vec<&SampleTarget> = slices.iter().map(|s| &s.target).collect();
    Ok((input, TargetBatch::from_samples(&targets)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_moments() {
        let v = normalize_slice(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-12);
        assert_eq!(normalize_slice(&[5.0, 5.0]), vec![0.0, 0.0]);
    }
}
