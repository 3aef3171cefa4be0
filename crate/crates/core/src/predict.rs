//! Slice-wise inference, per-class masks and overlay images.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::data::normalize_slice;
use crate::error::{Error, Result};
use crate::network::predict_logits;
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    /// A pixel belongs to a class when its probability exceeds this.
    pub threshold: f64,
    /// Resample slices whose size the network cannot take to the next valid
    /// size (nearest neighbor) instead of failing.
    pub resize: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            threshold: 0.5,
            resize: false,
        }
    }
}

/// Logit cut equivalent to `sigmoid(z) > threshold`. Comparing logits keeps
/// the thresholds 0 and 1 exact where the sigmoid saturates.
pub fn logit_cut(threshold: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(threshold.ln() - (-threshold).ln_1p())
}

fn resample(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = y * h / nh;
        for x in 0..nw {
            out.push(src[sy * w + x * w / nw]);
        }
    }
    out
}

/// Per-class logits of slice `z`, `[C, H, W]` flattened, at the slice's own size.
fn slice_logits(ckpt: &Checkpoint, vol: &Volume, z: usize, resize: bool) -> Result<Vec<f64>> {
    let [_, h, w] = vol.dims();
    let m = ckpt.config.spatial_multiple();
    let (nh, nw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let norm = normalize_slice(vol.slice(z)?);
    if (nh, nw) == (h, w) {
        return Ok(predict_logits(&ckpt.config, &ckpt.params, &Tensor::new(vec![1, 1, h, w], norm)?)?.into_data());
    }
    if !resize {
        return Err(Error::shape(format!(
            "slice {h}x{w} is not divisible by {m}; pass the resize option to resample"
        )));
    }
    let input = Tensor::new(vec![1, 1, nh, nw], resample(&norm, h, w, nh, nw))?;
    let logits = predict_logits(&ckpt.config, &ckpt.params, &input)?.into_data();
    let mut out = Vec::with_capacity(ckpt.config.num_classes * h * w);
    for c in 0..ckpt.config.num_classes {
        out.extend(resample(&logits[c * nh * nw..(c + 1) * nh * nw], nh, nw, h, w));
    }
    Ok(out)
}

/// Binary masks of every output class over the whole volume, `[C][D*H*W]`.
pub fn predict_masks_with(ckpt: &Checkpoint, vol: &Volume, opts: &PredictOptions) -> Result<Vec<Vec<bool>>> {
    let cut = logit_cut(opts.threshold)?;
    let [d, h, w] = vol.dims();
    let c = ckpt.config.num_classes;
    let mut masks = vec![Vec::with_capacity(d * h * w); c];
    for z in 0..d {
        let logits = slice_logits(ckpt, vol, z, opts.resize)?;
        for (k, m) in masks.iter_mut().enumerate() {
            m.extend(logits[k * h * w..(k + 1) * h * w].iter().map(|&l| l > cut));
        }
    }
    Ok(masks)
}

/// [`predict_masks_with`] without resizing.
pub fn predict_masks(ckpt: &Checkpoint, vol: &Volume, threshold: f64) -> Result<Vec<Vec<bool>>> {
    predict_masks_with(
        ckpt,
        vol,
        &PredictOptions {
            threshold,
            resize: false,
        },
    )
}

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

/// Fixed overlay color of output channel `c`.
pub fn class_color(c: usize) -> [u8; 3] {
    PALETTE[c % PALETTE.len()]
}

/// Binary PPM (P6): the slice in grayscale, each class mask blended 50% with
/// its color, channels applied in order.
pub fn overlay_ppm(slice: &[f64], h: usize, w: usize, masks: &[&[bool]]) -> Result<Vec<u8>> {
    if slice.len() != h * w || masks.iter().any(|m| m.len() != h * w) {
        return Err(Error::shape(format!("overlay inputs do not match {h}x{w}")));
    }
    let lo = slice.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (p, &v) in slice.iter().enumerate() {
        let g = ((v - lo) / span * 255.0).round();
        let mut px = [g; 3];
        for (c, m) in masks.iter().enumerate() {
            if m[p] {
                let col = class_color(c);
                for k in 0..3 {
                    px[k] = 0.5 * px[k] + 0.5 * col[k] as f64;
                }
            }
        }
        out.extend(px.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Predict one volume file and write `mask_<ccc>_<class>.mmil` per output
/// class plus `overlay_<zzz>.ppm` per slice into `out_dir`.
pub fn predict_to_dir(ckpt: &Checkpoint, input: &Path, out_dir: &Path, opts: &PredictOptions) -> Result<Vec<PathBuf>> {
    let vol = Volume::read(input)?;
    let masks = predict_masks_with(ckpt, &vol, opts)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let [d, h, w] = vol.dims();
    let mut written = Vec::new();
    for (c, m) in masks.iter().enumerate() {
        let label = match ckpt.classes.get(c) {
            Some(info) => format!("mask_{c:03}_{}.mmil", file_safe(&info.qualified_name())),
            None => format!("mask_{c:03}.mmil"),
        };
        let path = out_dir.join(label);
        LabelVolume::new(vol.dims(), vol.spacing(), m.iter().map(|&b| b as u16).collect())?.write(&path)?;
        written.push(path);
    }
    for z in 0..d {
        let n = h * w;
        let slice_masks: Vec<&[bool]> = masks.iter().map(|m| &m[z * n..(z + 1) * n]).collect();
        let ppm = overlay_ppm(vol.slice(z)?, h, w, &slice_masks)?;
        let path = out_dir.join(format!("overlay_{z:03}.ppm"));
        std::fs::write(&path, ppm).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_cut_edges() {
        assert_eq!(logit_cut(0.5).unwrap(), 0.0);
        assert_eq!(logit_cut(0.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(logit_cut(1.0).unwrap(), f64::INFINITY);
        assert!(logit_cut(1.5).is_err());
    }

    #[test]
    fn overlay_blends_half() {
        let ppm = overlay_ppm(&[0.0, 1.0], 1, 2, &[&[false, true]]).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        let px = &ppm[header.len()..];
        assert_eq!(&px[..3], &[0, 0, 0]);
        let c = class_color(0);
        let blend = |k: usize| (0.5 * 255.0 + 0.5 * c[k] as f64).round() as u8;
        assert_eq!(&px[3..], &[blend(0), blend(1), blend(2)]);
    }

    #[test]
    fn nearest_resample_identity() {
        let v: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(resample(&v, 2, 3, 2, 3), v);
    }
}
