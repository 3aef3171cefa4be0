//! Finite-difference verification of every differentiable op.
//!
//! Each case maps input tensors to an output on a tape. The output is reduced
//! with a fixed random projection `L = sum(r * out)`; the analytic gradient of
//! `L` is compared with central differences. Perturbations that change a
//! discrete choice (pooling winner, ReLU activity, fusion selection) are
//! skipped, since the function is not differentiable across them.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::fusion::{fusion_block_on_tape, FusionConfig, FusionVariant};
use crate::kernels::Padding;
use crate::loss::{total_loss_on_tape, LossConfig, TargetBatch};
use crate::network::{forward, init_params, residual_double_conv, NetworkConfig};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-6;

pub type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub tolerance: f64,
    pub inputs: Vec<Tensor>,
    /// Coordinates checked per input; larger inputs are subsampled.
    pub max_points: usize,
    pub forward: Forward,
}

impl Case {
    pub fn new(name: &str, tolerance: f64, inputs: Vec<Tensor>, forward: Forward) -> Self {
        Case {
            name: name.to_string(),
            tolerance,
            inputs,
            max_points: 256,
            forward,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: String,
    /// Worst norm-wise relative error over the inputs.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Set when the case could not be evaluated at all.
    pub error: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {:<28} max_rel_err={:.3e} tol={:.0e} checked={} skipped={}",
            self.op, self.max_rel_error, self.tolerance, self.checked, self.skipped
        )?;
        if let Some(e) = &self.error {
            write!(f, " error: {e}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} ops checked, {failed} failed", self.results.len())
    }
}

/// Projected output value and decision fingerprint at `inputs`.
fn evaluate(case: &Case, inputs: &[Tensor], proj: &Tensor) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.forward)(&mut tape, &vars)?;
    Ok((tape.value(out).dot(proj), tape.decision_fingerprint()))
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn run_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars = case
        .inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.forward)(&mut tape, &vars)?;
    let proj = Tensor::randn(tape.value(out).shape(), 1.0, rng);
    let base_fp = tape.decision_fingerprint();
    let grads = tape.backward_with(out, proj.clone())?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for (k, input) in case.inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.shape());
        let n = input.numel();
        let coords: Vec<usize> = if n <= case.max_points {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, case.max_points).into_vec();
            c.sort_unstable();
            c
        };
        let mut a_sel = Vec::new();
        let mut n_sel = Vec::new();
        for i in coords {
            let mut shifted = case.inputs.clone();
            let x0 = input.data()[i];
            shifted[k].data_mut()[i] = x0 + STEP;
            let (lp, fp_p) = evaluate(case, &shifted, &proj)?;
            shifted[k].data_mut()[i] = x0 - STEP;
            let (lm, fp_m) = evaluate(case, &shifted, &proj)?;
            if fp_p != base_fp || fp_m != base_fp {
                skipped += 1;
                continue;
            }
            a_sel.push(analytic.data()[i]);
            n_sel.push((lp - lm) / (2.0 * STEP));
        }
        checked += a_sel.len();
        if !a_sel.is_empty() {
            worst = worst.max(rel_error(&a_sel, &n_sel));
        }
    }
    Ok(CheckResult {
        op: case.name.clone(),
        max_rel_error: worst,
        tolerance: case.tolerance,
        checked,
        skipped,
        error: None,
    })
}

/// Check one case. `seed` fixes the projection and the sampled coordinates.
pub fn check_case(case: &Case, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_case(case, &mut rng).unwrap_or_else(|e| CheckResult {
        op: case.name.clone(),
        max_rel_error: f64::INFINITY,
        tolerance: case.tolerance,
        checked: 0,
        skipped: 0,
        error: Some(e.to_string()),
    })
}

pub fn run_cases(cases: &[Case], seed: u64) -> GradcheckReport {
    GradcheckReport {
        results: cases
            .iter()
            .enumerate()
            .map(|(i, c)| check_case(c, seed.wrapping_add(i as u64)))
            .collect(),
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn random_targets(rng: &mut ChaCha8Rng, b: usize, c: usize, hw: usize, masked: &[usize]) -> TargetBatch {
    let onehot: Vec<f64> = (0..b * c * hw).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let mask = (0..b * c).map(|i| !masked.contains(&i)).collect();
    TargetBatch::new(Tensor::new(vec![b, c, 4, hw / 4], onehot).unwrap(), mask).unwrap()
}

fn loss_case(name: &str, rng: &mut ChaCha8Rng, cfg: LossConfig) -> Case {
    let pred = Tensor::uniform(&[2, 3, 4, 4], 0.05, 0.95, rng);
    // sample 0 lacks class 1, sample 1 lacks class 2
    let targets = random_targets(rng, 2, 3, 16, &[1, 5]);
    Case::new(
        name,
        LOSS_TOL,
        vec![pred],
        Box::new(move |t, v| total_loss_on_tape(t, v[0], &targets, &cfg)),
    )
}

fn fusion_case(name: &str, rng: &mut ChaCha8Rng, variant: FusionVariant) -> Case {
    let cfg = FusionConfig {
        sigmas: [0.5, 1.0, 2.0],
        variant,
    };
    Case::new(
        name,
        COMPOSITE_TOL,
        vec![randn(rng, &[1, 2, 8, 8])],
        Box::new(move |t, v| fusion_block_on_tape(t, v[0], &cfg).map(|(o, _)| o)),
    )
}

fn network_case(name: &str, rng: &mut ChaCha8Rng, variant: FusionVariant) -> Result<Case> {
    let cfg = NetworkConfig {
        in_channels: 1,
        base_channels: 2,
        depth: 2,
        num_classes: 2,
        fusion: FusionConfig {
            sigmas: [0.5, 1.0, 2.0],
            variant,
        },
    };
    let params = init_params(&cfg, rng.random())?;
    let names: Vec<String> = params.keys().cloned().collect();
    let mut inputs = vec![randn(rng, &[1, 1, 8, 8])];
    inputs.extend(params.into_values());
    let mut case = Case::new(
        name,
        COMPOSITE_TOL,
        inputs,
        Box::new(move |t, v| {
            let bound = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            forward(t, &cfg, &bound, v[0])
        }),
    );
    case.max_points = 16;
    Ok(case)
}

/// Every op of the engine, the fusion block, the losses and a tiny network.
pub fn standard_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        Case::new(
            "conv2d",
            PRIMITIVE_TOL,
            vec![randn(r, &[2, 2, 5, 5]), randn(r, &[3, 2, 3, 3]), randn(r, &[3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::same(3))),
        ),
        Case::new(
            "conv2d_valid_2x2",
            PRIMITIVE_TOL,
            vec![randn(r, &[1, 2, 4, 5]), randn(r, &[2, 2, 2, 2])],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, Padding::default())),
        ),
        Case::new(
            "conv_transpose2d",
            PRIMITIVE_TOL,
            vec![randn(r, &[2, 3, 3, 3]), randn(r, &[3, 2, 2, 2])],
            Box::new(|t, v| t.conv_transpose2d(v[0], v[1])),
        ),
        Case::new(
            "maxpool2x2",
            PRIMITIVE_TOL,
            vec![randn(r, &[2, 2, 4, 6])],
            Box::new(|t, v| t.maxpool2x2(v[0]).map(|(o, _)| o)),
        ),
        Case::new("relu", PRIMITIVE_TOL, vec![randn(r, &[2, 3, 4])], Box::new(|t, v| t.relu(v[0]))),
        Case::new("sigmoid", PRIMITIVE_TOL, vec![randn(r, &[2, 3, 4])], Box::new(|t, v| t.sigmoid(v[0]))),
        Case::new(
            "add",
            PRIMITIVE_TOL,
            vec![randn(r, &[3, 4]), randn(r, &[3, 4])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        Case::new("scale", PRIMITIVE_TOL, vec![randn(r, &[3, 4])], Box::new(|t, v| t.scale(v[0], -1.7))),
        Case::new(
            "concat_channels",
            PRIMITIVE_TOL,
            vec![randn(r, &[2, 2, 3, 3]), randn(r, &[2, 1, 3, 3])],
            Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
        ),
        Case::new(
            "stack",
            PRIMITIVE_TOL,
            vec![randn(r, &[2, 3]), randn(r, &[2, 3]), randn(r, &[2, 3])],
            Box::new(|t, v| t.stack(&[v[0], v[1], v[2]])),
        ),
        Case::new(
            "gather",
            PRIMITIVE_TOL,
            vec![randn(r, &[2, 5])],
            Box::new(|t, v| t.gather(v[0], vec![3, 0, 3, 9, 7, 7], &[2, 3])),
        ),
    ];
    for sigma in [0.5, 1.0, 2.0] {
        cases.push(Case::new(
            &format!("gaussian_blur2d_s{sigma}"),
            PRIMITIVE_TOL,
            vec![randn(r, &[1, 2, 7, 9])],
            Box::new(move |t, v| t.gaussian_blur2d(v[0], sigma)),
        ));
    }
    cases.push(fusion_case("fusion_select_one", r, FusionVariant::SelectOne));
    cases.push(fusion_case("fusion_closest_pair", r, FusionVariant::FuseClosestPair));

    let block_params = vec![
        randn(r, &[1, 2, 6, 6]),
        randn(r, &[3, 2, 3, 3]).scale(0.5),
        randn(r, &[3]),
        randn(r, &[3, 3, 3, 3]).scale(0.5),
        randn(r, &[3]),
        randn(r, &[3, 2, 1, 1]),
        randn(r, &[3]),
    ];
    cases.push(Case::new(
        "residual_double_conv",
        COMPOSITE_TOL,
        block_params,
        Box::new(|t, v| {
            let names = ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "proj.w", "proj.b"];
            let bound = names
                .iter()
                .zip(&v[1..])
                .map(|(n, &var)| (format!("blk.{n}"), var))
                .collect();
            residual_double_conv(t, &bound, "blk", v[0])
        }),
    ));

    cases.push(loss_case(
        "masked_bce",
        r,
        LossConfig {
            bce_weight: 1.0,
            dice_weight: 0.0,
            ..LossConfig::default()
        },
    ));
    cases.push(loss_case(
        "joint_dice_loss",
        r,
        LossConfig {
            bce_weight: 0.0,
            dice_weight: 1.0,
            ..LossConfig::default()
        },
    ));
    cases.push(loss_case("total_loss", r, LossConfig::default()));
    cases.push(network_case("network_select_one", r, FusionVariant::SelectOne)?);
    cases.push(network_case("network_closest_pair", r, FusionVariant::FuseClosestPair)?);
    Ok(cases)
}

/// Build and run the standard suite.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    Ok(run_cases(&standard_cases(seed)?, seed))
}
