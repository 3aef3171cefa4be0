//! Similarity fusion block.
//!
//! A feature map is smoothed at three Gaussian scales. At every position the
//! three smoothed values form a group, and the map is rebuilt from the member
//! (or closest pair of members) that agrees best with the rest of the group.
//! Dissimilar responses are dropped.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub const NUM_SCALES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Keep the member with the smallest summed distance to the other two.
    SelectOne,
    /// Average the two members that are closest to each other.
    FuseClosestPair,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub sigmas: [f64; NUM_SCALES],
    pub variant: FusionVariant,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            sigmas: [0.5, 1.0, 2.0],
            variant: FusionVariant::SelectOne,
        }
    }
}

impl FusionConfig {
    pub fn new(sigmas: [f64; NUM_SCALES], variant: FusionVariant) -> Result<Self> {
        let cfg = FusionConfig { sigmas, variant };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("fusion sigmas must be positive, got {:?}", self.sigmas)));
        }
        if !self.sigmas.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "fusion sigmas must be strictly increasing, got {:?}",
                self.sigmas
            )));
        }
        Ok(())
    }
}

/// Which stack members produced an output value. For `SelectOne` both
/// fields hold the winner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Selection {
    pub first: u8,
    pub second: u8,
}

const PAIRS: [(u8, u8); 3] = [(0, 1), (0, 2), (1, 2)];

/// Selection rule for one group of three values. Ties go to the lowest
/// member index (or lowest pair in `(0,1), (0,2), (1,2)` order).
pub fn select_group(group: [f64; NUM_SCALES], variant: FusionVariant) -> Selection {
    match variant {
        FusionVariant::SelectOne => {
            let score = |i: usize| -> f64 { (0..NUM_SCALES).filter(|&j| j != i).map(|j| (group[i] - group[j]).abs()).sum() };
            let mut best = 0;
            let mut best_score = score(0);
            for i in 1..NUM_SCALES {
                let s = score(i);
                if s < best_score {
                    best = i;
                    best_score = s;
                }
            }
            Selection {
                first: best as u8,
                second: best as u8,
            }
        }
        FusionVariant::FuseClosestPair => {
            let dist = |(a, b): (u8, u8)| (group[a as usize] - group[b as usize]).abs();
            let mut best = PAIRS[0];
            for &p in &PAIRS[1..] {
                if dist(p) < dist(best) {
                    best = p;
                }
            }
            Selection {
                first: best.0,
                second: best.1,
            }
        }
    }
}

fn fused_value(group: [f64; NUM_SCALES], sel: Selection, variant: FusionVariant) -> f64 {
    match variant {
        FusionVariant::SelectOne => group[sel.first as usize],
        FusionVariant::FuseClosestPair => (group[sel.first as usize] + group[sel.second as usize]) * 0.5,
    }
}

/// `[3, B, C, H, W]` stack of blurred copies, smallest sigma first.
pub fn smooth_stack(input: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    cfg.validate()?;
    input.dims4()?;
    let slices = cfg
        .sigmas
        .iter()
        .map(|&s| kernels::gaussian_blur2d(input, &kernels::gaussian_kernel(s)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&slices.iter().collect::<Vec<_>>())
}

fn check_stack(stack: &Tensor) -> Result<usize> {
    if stack.rank() != 5 || stack.shape()[0] != NUM_SCALES {
        return Err(Error::shape(format!(
            "fusion stack must have shape [3, B, C, H, W], got {:?}",
            stack.shape()
        )));
    }
    Ok(stack.numel() / NUM_SCALES)
}

fn selections(stack: &Tensor, variant: FusionVariant) -> Result<Vec<Selection>> {
    let n = check_stack(stack)?;
    let d = stack.data();
    Ok((0..n).map(|p| select_group([d[p], d[n + p], d[2 * n + p]], variant)).collect())
}

/// Rebuild a map from a smoothing stack. Returns the fused `[B, C, H, W]` map
/// and the per-position selection.
pub fn select_similar(stack: &Tensor, cfg: &FusionConfig) -> Result<(Tensor, Vec<Selection>)> {
    let sel = selections(stack, cfg.variant)?;
    let n = sel.len();
    let d = stack.data();
    let out: Vec<f64> = sel
        .iter()
        .enumerate()
        .map(|(p, &s)| fused_value([d[p], d[n + p], d[2 * n + p]], s, cfg.variant))
        .collect();
    Ok((Tensor::new(stack.shape()[1..].to_vec(), out)?, sel))
}

/// Tape-free fusion block.
pub fn fusion_block(input: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    let stack = smooth_stack(input, cfg)?;
    Ok(select_similar(&stack, cfg)?.0)
}

/// Fusion block recorded on a tape. Gradients reach the input through the
/// blur weights; the selection routes them like max-pooling (all to the
/// winner, or half to each member of the fused pair).
pub fn fusion_block_on_tape(tape: &mut Tape, x: Var, cfg: &FusionConfig) -> Result<(Var, Vec<Selection>)> {
    cfg.validate()?;
    let shape = tape.value(x).dims4()?.to_vec();
    let blurred = cfg
        .sigmas
        .iter()
        .map(|&s| tape.gaussian_blur2d(x, s))
        .collect::<Result<Vec<_>>>()?;
    let stack = tape.stack(&blurred)?;
    let sel = selections(tape.value(stack), cfg.variant)?;
    let n = sel.len();
    let out = match cfg.variant {
        FusionVariant::SelectOne => {
            let idx = sel.iter().enumerate().map(|(p, s)| s.first as usize * n + p).collect();
            tape.gather(stack, idx, &shape)?
        }
        FusionVariant::FuseClosestPair => {
            let a = sel.iter().enumerate().map(|(p, s)| s.first as usize * n + p).collect();
            let b = sel.iter().enumerate().map(|(p, s)| s.second as usize * n + p).collect();
            let ga = tape.gather(stack, a, &shape)?;
            let gb = tape.gather(stack, b, &shape)?;
            let sum = tape.add(ga, gb)?;
            tape.scale(sum, 0.5)?
        }
    };
    Ok((out, sel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        assert!(FusionConfig::new([0.5, 1.0, 2.0], FusionVariant::SelectOne).is_ok());
        assert!(FusionConfig::new([1.0, 1.0, 2.0], FusionVariant::SelectOne).is_err());
        assert!(FusionConfig::new([2.0, 1.0, 3.0], FusionVariant::SelectOne).is_err());
        assert!(FusionConfig::new([0.0, 1.0, 2.0], FusionVariant::FuseClosestPair).is_err());
    }

    #[test]
    fn equal_group_picks_first() {
        for v in [FusionVariant::SelectOne, FusionVariant::FuseClosestPair] {
            let s = select_group([2.0, 2.0, 2.0], v);
            assert_eq!(s.first, 0);
            assert_eq!(fused_value([2.0; 3], s, v), 2.0);
        }
    }

    #[test]
    fn worked_group() {
        // scores: 0.1 + 4.0 = 4.1, 0.1 + 3.9 = 4.0, 4.0 + 3.9 = 7.9
        let g = [1.0, 1.1, 5.0];
        let s = select_group(g, FusionVariant::SelectOne);
        assert_eq!(s.first, 1);
        assert_eq!(fused_value(g, s, FusionVariant::SelectOne), 1.1);
        let s = select_group(g, FusionVariant::FuseClosestPair);
        assert_eq!((s.first, s.second), (0, 1));
        assert!((fused_value(g, s, FusionVariant::FuseClosestPair) - 1.05).abs() < 1e-15);
    }

    #[test]
    fn constant_map_is_exact_identity() {
        let x = Tensor::full(&[2, 3, 8, 8], -0.625);
        for variant in [FusionVariant::SelectOne, FusionVariant::FuseClosestPair] {
            let cfg = FusionConfig { variant, ..Default::default() };
            let stack = smooth_stack(&x, &cfg).unwrap();
            assert_eq!(stack.shape(), &[3, 2, 3, 8, 8]);
            assert_eq!(fusion_block(&x, &cfg).unwrap(), x);
        }
    }

    #[test]
    fn stack_arity_checked() {
        let cfg = FusionConfig::default();
        assert!(select_similar(&Tensor::zeros(&[2, 1, 1, 4, 4]), &cfg).is_err());
        assert!(select_similar(&Tensor::zeros(&[1, 4, 4]), &cfg).is_err());
    }

    #[test]
    fn impulse_variance_decreases_with_sigma() {
        let mut x = Tensor::zeros(&[1, 1, 17, 17]);
        x.data_mut()[8 * 17 + 8] = 1.0;
        let stack = smooth_stack(&x, &FusionConfig::default()).unwrap();
        let var = |t: &Tensor| {
            let m = t.sum() / t.numel() as f64;
            t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.numel() as f64
        };
        let v: Vec<f64> = (0..3).map(|i| var(&stack.slice_outer(i).unwrap())).collect();
        assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
    }

    #[test]
    fn tape_and_plain_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng);
        for variant in [FusionVariant::SelectOne, FusionVariant::FuseClosestPair] {
            let cfg = FusionConfig { variant, ..Default::default() };
            let mut tape = Tape::new();
            let xv = tape.param(x.clone()).unwrap();
            let (y, _) = fusion_block_on_tape(&mut tape, xv, &cfg).unwrap();
            assert_eq!(tape.value(y), &fusion_block(&x, &cfg).unwrap());
        }
    }

    #[test]
    fn output_bounded_by_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng);
        for variant in [FusionVariant::SelectOne, FusionVariant::FuseClosestPair] {
            let cfg = FusionConfig { variant, ..Default::default() };
            let stack = smooth_stack(&x, &cfg).unwrap();
            let (y, _) = select_similar(&stack, &cfg).unwrap();
            let n = y.numel();
            for p in 0..n {
                let g = [stack.data()[p], stack.data()[n + p], stack.data()[2 * n + p]];
                let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(y.data()[p] >= lo && y.data()[p] <= hi);
            }
        }
    }
}
