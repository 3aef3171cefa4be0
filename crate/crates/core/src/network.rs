//! The segmentation network.
//!
//! Encoder level: fusion, residual double-conv, fusion, 2x2 max-pool.
//! Bridge: a single fusion block. Decoder level: 2x2 stride-2 transpose
//! conv, concatenation with the encoder output of the same level, fusion,
//! residual double-conv, fusion. One 1x1 conv head per class, each followed
//! by its own sigmoid, so classes are independent binary problems and a
//! pixel may belong to several classes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{fusion_block_on_tape, FusionConfig};
use crate::kernels::Padding;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of pooling levels.
    pub depth: usize,
    pub num_classes: usize,
    pub fusion: FusionConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            num_classes: 19,
            fusion: FusionConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.depth == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "network extents must be positive: {self:?}"
            )));
        }
        self.fusion.validate()
    }

    /// Channel width of level `d`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

pub type Params = BTreeMap<String, Tensor>;
pub type BoundParams = BTreeMap<String, Var>;

fn block_specs(prefix: &str, cin: usize, cout: usize, out: &mut Vec<(String, Vec<usize>)>) {
    out.push((format!("{prefix}.conv1.w"), vec![cout, cin, 3, 3]));
    out.push((format!("{prefix}.conv1.b"), vec![cout]));
    out.push((format!("{prefix}.conv2.w"), vec![cout, cout, 3, 3]));
    out.push((format!("{prefix}.conv2.b"), vec![cout]));
    if cin != cout {
        out.push((format!("{prefix}.proj.w"), vec![cout, cin, 1, 1]));
        out.push((format!("{prefix}.proj.b"), vec![cout]));
    }
}

pub fn head_name(class: usize) -> String {
    format!("head.{class:03}")
}

/// Every parameter's name and shape, in initialization order.
pub fn param_specs(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let mut cin = cfg.in_channels;
    for d in 0..cfg.depth {
        block_specs(&format!("enc{d}"), cin, cfg.width(d), &mut specs);
        cin = cfg.width(d);
    }
    for d in (0..cfg.depth).rev() {
        let w = cfg.width(d);
        specs.push((format!("dec{d}.up.w"), vec![cin, w, 2, 2]));
        block_specs(&format!("dec{d}"), 2 * w, w, &mut specs);
        cin = w;
    }
    for c in 0..cfg.num_classes {
        specs.push((format!("{}.w", head_name(c)), vec![1, cfg.base_channels, 1, 1]));
        specs.push((format!("{}.b", head_name(c)), vec![1]));
    }
    specs
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    if name.ends_with(".up.w") {
        // each output of a stride-2 transpose conv sees one tap per input channel
        shape[0]
    } else {
        shape[1..].iter().product()
    }
}

/// He-scaled normal kernels and zero biases, deterministic per seed.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    for (name, shape) in param_specs(cfg) {
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let std = (2.0 / fan_in(&name, &shape) as f64).sqrt();
            Tensor::randn(&shape, std, &mut rng)
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Check that `params` matches the module graph of `cfg` exactly.
pub fn check_params(cfg: &NetworkConfig, params: &Params) -> Result<()> {
    let specs = param_specs(cfg);
    if specs.len() != params.len() {
        return Err(Error::shape(format!(
            "expected {} parameters, found {}",
            specs.len(),
            params.len()
        )));
    }
    for (name, shape) in specs {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::shape(format!(
                    "parameter {name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::shape(format!("missing parameter {name}"))),
        }
    }
    Ok(())
}

/// Record parameters on a tape. Trainable ones accumulate gradients.
pub fn bind_params(tape: &mut Tape, params: &Params, trainable: bool) -> Result<BoundParams> {
    params
        .iter()
        .map(|(k, v)| {
            let var = if trainable {
                tape.param(v.clone())?
            } else {
                tape.constant(v.clone())?
            };
            Ok((k.clone(), var))
        })
        .collect()
}

fn get(params: &BoundParams, name: &str) -> Result<Var> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
}

/// `relu(F(x) + P(x))` with `F = conv3x3 -> relu -> conv3x3` and `P` the
/// identity, or a 1x1 projection when `{prefix}.proj.w` exists.
pub fn residual_double_conv(tape: &mut Tape, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let same = Padding::same(3);
    let h = tape.conv2d(
        x,
        get(params, &format!("{prefix}.conv1.w"))?,
        Some(get(params, &format!("{prefix}.conv1.b"))?),
        same,
    )?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(
        h,
        get(params, &format!("{prefix}.conv2.w"))?,
        Some(get(params, &format!("{prefix}.conv2.b"))?),
        same,
    )?;
    let skip = match params.get(&format!("{prefix}.proj.w")) {
        Some(&w) => tape.conv2d(x, w, Some(get(params, &format!("{prefix}.proj.b"))?), Padding::default())?,
        None => x,
    };
    let sum = tape.add(h, skip)?;
    tape.relu(sum)
}

/// Full forward pass to per-class probabilities `[B, num_classes, H, W]`.
pub fn forward(tape: &mut Tape, cfg: &NetworkConfig, params: &BoundParams, input: Var) -> Result<Var> {
    let logits = forward_logits(tape, cfg, params, input)?;
    tape.sigmoid(logits).map_err(|e| e.in_layer("heads"))
}

/// Forward pass up to the per-class logits, before the sigmoid.
pub fn forward_logits(tape: &mut Tape, cfg: &NetworkConfig, params: &BoundParams, input: Var) -> Result<Var> {
    let [_, c, h, w] = tape.value(input).dims4()?;
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, network expects {}",
            cfg.in_channels
        )));
    }
    let m = cfg.spatial_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} is not divisible by {m} (depth {})",
            cfg.depth
        )));
    }
    let fuse = |tape: &mut Tape, x: Var, layer: &str| -> Result<Var> {
        fusion_block_on_tape(tape, x, &cfg.fusion)
            .map(|(v, _)| v)
            .map_err(|e| e.in_layer(layer))
    };

    let mut x = input;
    let mut skips = Vec::with_capacity(cfg.depth);
    for d in 0..cfg.depth {
        let name = format!("enc{d}");
        x = fuse(tape, x, &format!("{name}.fusion_in"))?;
        x = residual_double_conv(tape, params, &name, x).map_err(|e| e.in_layer(&name))?;
        x = fuse(tape, x, &format!("{name}.fusion_out"))?;
        skips.push(x);
        x = tape.maxpool2x2(x).map_err(|e| e.in_layer(&format!("{name}.pool")))?.0;
    }
    x = fuse(tape, x, "bridge")?;
    for d in (0..cfg.depth).rev() {
        let name = format!("dec{d}");
        let up = tape
            .conv_transpose2d(x, get(params, &format!("{name}.up.w"))?)
            .map_err(|e| e.in_layer(&format!("{name}.up")))?;
        x = tape.concat_channels(&[skips[d], up])?;
        x = fuse(tape, x, &format!("{name}.fusion_in"))?;
        x = residual_double_conv(tape, params, &name, x).map_err(|e| e.in_layer(&name))?;
        x = fuse(tape, x, &format!("{name}.fusion_out"))?;
    }
    let mut logits = Vec::with_capacity(cfg.num_classes);
    for class in 0..cfg.num_classes {
        let name = head_name(class);
        let l = tape
            .conv2d(
                x,
                get(params, &format!("{name}.w"))?,
                Some(get(params, &format!("{name}.b"))?),
                Padding::default(),
            )
            .map_err(|e| e.in_layer(&name))?;
        logits.push(l);
    }
    tape.concat_channels(&logits)
}

/// Inference without gradient bookkeeping.
pub fn predict(cfg: &NetworkConfig, params: &Params, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false)?;
    let x = tape.constant(input.clone())?;
    let y = forward(&mut tape, cfg, &bound, x)?;
    Ok(tape.value(y).clone())
}

/// Inference returning logits.
pub fn predict_logits(cfg: &NetworkConfig, params: &Params, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false)?;
    let x = tape.constant(input.clone())?;
    let y = forward_logits(&mut tape, cfg, &bound, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            base_channels: 2,
            depth: 2,
            num_classes: 3,
            fusion: FusionConfig::default(),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&tiny(), 7).unwrap();
        let b = init_params(&tiny(), 7).unwrap();
        let c = init_params(&tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        check_params(&tiny(), &a).unwrap();
    }

    #[test]
    fn projection_only_when_channels_change() {
        let names: Vec<String> = param_specs(&tiny()).into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"enc0.proj.w".to_string()));
        assert!(names.contains(&"enc1.proj.w".to_string()));
        assert!(names.contains(&"dec0.proj.w".to_string()));
        let cfg = NetworkConfig { in_channels: 2, ..tiny() };
        let names: Vec<String> = param_specs(&cfg).into_iter().map(|(n, _)| n).collect();
        assert!(!names.contains(&"enc0.proj.w".to_string()));
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let cfg = tiny();
        let params: Params = param_specs(&cfg).into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        let x = Tensor::full(&[1, 1, 8, 8], 0.3);
        let y = predict(&cfg, &params, &x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = tiny();
        let params = init_params(&cfg, 0).unwrap();
        let err = predict(&cfg, &params, &Tensor::zeros(&[1, 1, 6, 8])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = predict(&cfg, &params, &Tensor::zeros(&[1, 2, 8, 8])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zeroed_residual_branch_is_relu() {
        let mut tape = Tape::new();
        let mut params = Params::new();
        params.insert("b.conv1.w".into(), Tensor::zeros(&[2, 2, 3, 3]));
        params.insert("b.conv1.b".into(), Tensor::zeros(&[2]));
        params.insert("b.conv2.w".into(), Tensor::zeros(&[2, 2, 3, 3]));
        params.insert("b.conv2.b".into(), Tensor::zeros(&[2]));
        let bound = bind_params(&mut tape, &params, true).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 2], vec![-1.0, 2.0, 0.5, -0.25, 3.0, -4.0, 0.0, 1.0]).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = residual_double_conv(&mut tape, &bound, "b", xv).unwrap();
        assert_eq!(tape.value(y), &x.map(|v| v.max(0.0)));
    }
}
