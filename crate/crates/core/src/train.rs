//! Mixed-dataset training with Adam and early stopping.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{batch, Corpus, Slice};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::label_space::ClassInfo;
use crate::loss::{total_loss, total_loss_on_tape, LossConfig};
use crate::network::{bind_params, forward, predict, NetworkConfig, Params};
use crate::optim::{adam_step, AdamConfig};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    /// Share of each dataset's volumes held out. With 0, the training
    /// slices double as the validation set.
    pub val_fraction: f64,
    pub base_channels: usize,
    pub depth: usize,
    pub loss: LossConfig,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            max_epochs: 1000,
            batch_size: 4,
            patience: 20,
            min_delta: 1e-5,
            seed: 0,
            val_fraction: 0.2,
            base_channels: 8,
            depth: 3,
            loss: LossConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config("patience must be below max_epochs".into()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::Config("min_delta must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        self.loss.validate()?;
        self.fusion.validate()
    }

    pub fn network(&self, num_classes: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            base_channels: self.base_channels,
            depth: self.depth,
            num_classes,
            fusion: self.fusion,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

pub fn log_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_loss).unwrap();
    }
    out
}

/// Loss and parameter gradients of one batch.
pub fn compute_gradients(
    net: &NetworkConfig,
    params: &Params,
    slices: &[&Slice],
    loss: &LossConfig,
) -> Result<(f64, Params)> {
    let (input, targets) = batch(slices)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, true)?;
    let x = tape.constant(input)?;
    let pred = forward(&mut tape, net, &bound, x)?;
    let l = total_loss_on_tape(&mut tape, pred, &targets, loss)?;
    let value = tape.value(l).data()[0];
    let grads = tape.backward(l)?;
    let mut out = Params::new();
    for (name, &var) in &bound {
        out.insert(name.clone(), grads.get_or_zeros(var, params[name].shape()));
    }
    Ok((value, out))
}

/// Mean batch loss over `slices` in order, without gradients.
pub fn mean_loss(net: &NetworkConfig, params: &Params, slices: &[Slice], batch_size: usize, loss: &LossConfig) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in slices.chunks(batch_size) {
        let refs: Vec<&Slice> = chunk.iter().collect();
        let (input, targets) = batch(&refs)?;
        let pred = predict(net, params, &input)?;
        sum += total_loss(&pred, &targets, loss)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("no slices to evaluate".into()));
    }
    Ok(sum / n as f64)
}

fn persist(out_dir: Option<&Path>, best: Option<&Checkpoint>, history: &[EpochRecord]) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    if let Some(b) = best {
        b.save(&dir.join(CHECKPOINT_FILE))?;
    }
    let path = dir.join(LOG_FILE);
    std::fs::write(&path, log_csv(history)).map_err(|e| Error::io(&path, e))
}

/// Train on prepared slices. When `out_dir` is given, the best checkpoint
/// and the epoch log are written there as training proceeds; on a numeric
/// failure the last written checkpoint is left in place.
pub fn train_slices(
    cfg: &TrainConfig,
    classes: &[ClassInfo],
    train: &[Slice],
    val: &[Slice],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let val = if val.is_empty() { train } else { val };
    let net = cfg.network(classes.len());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = Checkpoint::init(net.clone(), classes.to_vec(), cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut wait = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Slice> = chunk.iter().map(|&i| &train[i]).collect();
            let (l, grads) = compute_gradients(&net, &state.params, &refs, &cfg.loss)?;
            adam_step(&mut state.params, &grads, &mut state.optimizer, &adam)?;
            sum += l;
            batches += 1;
        }
        let train_loss = sum / batches as f64;
        let val_loss = mean_loss(&net, &state.params, val, cfg.batch_size, &cfg.loss)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::numeric(format!("loss at epoch {epoch}")));
        }
        state.epoch = epoch;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let improved = best
            .as_ref()
            .and_then(|b| b.best_val_loss)
            .is_none_or(|b| val_loss < b - cfg.min_delta);
        if improved {
            state.best_val_loss = Some(val_loss);
            best = Some(state.clone());
            wait = 0;
            persist(out_dir, best.as_ref(), &history)?;
        } else {
            wait += 1;
            persist(out_dir, None, &history)?;
            if wait > cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        history,
        stopped_early,
    })
}

/// Split a corpus, train, and return the outcome together with the
/// `(train, val)` volume indices.
pub fn train_corpus(
    cfg: &TrainConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
) -> Result<(TrainOutcome, Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    let (train_idx, val_idx) = corpus.split(cfg.val_fraction, cfg.seed);
    let train = corpus.slices(&train_idx)?;
    let val = corpus.slices(&val_idx)?;
    let outcome = train_slices(cfg, corpus.space.classes(), &train, &val, out_dir)?;
    Ok((outcome, train_idx, val_idx))
}

/// Load `data_dir`, train, and write `best.ckpt` and `train_log.csv` to `out_dir`.
pub fn train(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let corpus = Corpus::load(data_dir)?;
    train_corpus(cfg, &corpus, Some(out_dir)).map(|(o, _, _)| o)
}
