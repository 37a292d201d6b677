//! The optimization loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{attention_loss, combined_loss, density_loss, PixelReduction};
use crate::autodiff::{Graph, Mode};
use crate::checkpoint::{apply_checkpoint, optimizer_state, to_checkpoint, Checkpoint};
use crate::data::{augment, make_batch, AugmentConfig, Entry, GroundTruthConfig, Normalization};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the attention term.
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    /// Save `last.sfac` every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: u64,
    pub seed: u64,
    pub amp_enabled: bool,
    pub reduction: PixelReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            alpha: 0.1,
            batch_size: 30,
            epochs: 100,
            max_steps: None,
            checkpoint_every: 0,
            eval_every: 1,
            seed: 0,
            amp_enabled: true,
            reduction: PixelReduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Loop state that survives a checkpoint/resume cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed training steps, including rejected ones.
    pub step: u64,
    pub optimizer: AdamState<f32>,
    pub best_mae: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub loss_den: f64,
    pub loss_att: f64,
    /// False when the optimizer rejected the update.
    pub applied: bool,
}

/// One line of the CSV report.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    /// Global step count at the end of the epoch.
    pub step: u64,
    pub loss: f64,
    pub loss_den: f64,
    pub loss_att: f64,
    pub val: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLosses>,
    pub epochs: Vec<EpochRow>,
    pub best_mae: Option<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,L,L_den,L_att,val_MAE,val_MSE\n");
        for r in &self.epochs {
            let (mae, mse) = match r.val {
                Some((a, b)) => (a.to_string(), b.to_string()),
                None => (String::new(), String::new()),
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.step, r.loss, r.loss_den, r.loss_att, mae, mse
            ));
        }
        s
    }
}

/// splitmix64 fold of `parts` into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Drives training of an `f32` model. Sample order and augmentation depend
/// only on the seeds and the global step, so a resumed run replays exactly
/// the stream an uninterrupted one would have seen.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub augment: AugmentConfig,
    pub groundtruth: GroundTruthConfig,
    pub normalization: Normalization,
    pub state: TrainState,
    /// Where checkpoints and the report go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    order_cache: Option<(u64, Vec<usize>)>,
}

const STEP_RECORD: &str = "train.step";
const BEST_RECORD: &str = "train.best_mae";

impl Trainer {
    pub fn new(
        config: TrainConfig,
        augment: AugmentConfig,
        groundtruth: GroundTruthConfig,
        normalization: Normalization,
        model: &Model<f32>,
    ) -> Result<Self> {
        config.validate()?;
        augment.validate()?;
        if config.amp_enabled && !model.config().amp_enabled {
            return Err(Error::InvalidArgument(
                "training with attention supervision needs a model with the attention path".into(),
            ));
        }
        Ok(Self {
            state: TrainState {
                step: 0,
                optimizer: AdamState::new(model.parameters()),
                best_mae: None,
            },
            config,
            augment,
            groundtruth,
            normalization,
            out_dir: None,
            order_cache: None,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.config
            .max_steps
            .unwrap_or(self.config.epochs * self.steps_per_epoch(n))
    }

    fn epoch_order(&mut self, n: usize, epoch: u64) -> &[usize] {
        if self.order_cache.as_ref().is_none_or(|(e, o)| *e != epoch || o.len() != n) {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, epoch]));
            order.shuffle(&mut rng);
            self.order_cache = Some((epoch, order));
        }
        &self.order_cache.as_ref().expect("just filled").1
    }

    /// Runs one optimization step on the next batch.
    pub fn step(&mut self, model: &mut Model<f32>, dataset: &[Entry]) -> Result<StepLosses> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let step = self.state.step;
        let spe = self.steps_per_epoch(dataset.len());
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let b = self.config.batch_size;
        let picks: Vec<usize> = {
            let order = self.epoch_order(dataset.len(), epoch);
            order[pos * b..((pos + 1) * b).min(order.len())].to_vec()
        };
        let samples = picks
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    self.config.seed,
                    self.augment.seed,
                    step,
                    slot as u64,
                ]));
                augment(
                    &dataset[i],
                    &self.augment,
                    &self.groundtruth,
                    &self.normalization,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = make_batch::<f32>(&samples)?;

        let mut g = Graph::new();
        let x = g.constant(batch.images);
        let pass = model.forward(&mut g, x, Mode::Train)?;
        let dl = density_loss(&mut g, pass.density, &batch.density, self.config.reduction)?;
        let al = match (self.config.amp_enabled, pass.attention_logits) {
            (true, Some(logits)) => Some(attention_loss(
                &mut g,
                logits,
                &batch.attention,
                self.config.reduction,
            )?),
            _ => None,
        };
        let total = combined_loss(&mut g, dl, al, self.config.alpha)?;
        let read = |g: &Graph<f32>, v| g.value(v).data()[0] as f64;
        let loss_den = read(&g, dl);
        let loss_att = al.map_or(0.0, |v| read(&g, v));
        let loss = read(&g, total);
        let mut grads = g.backward(total)?;
        model.zero_grad();
        model.accumulate_grads(&mut grads, &pass)?;
        let applied = match adam_step(
            model.parameters_mut(),
            &mut self.state.optimizer,
            &self.config.adam(),
        ) {
            Ok(()) => true,
            Err(Error::NonFiniteGradient(name)) => {
                log::warn!("step {step}: update skipped, non-finite gradient in {name}");
                false
            }
            Err(e) => return Err(e),
        };
        self.state.step += 1;
        Ok(StepLosses {
            step: self.state.step,
            epoch,
            loss,
            loss_den,
            loss_att,
            applied,
        })
    }

    /// Trains until the configured step count, validating at epoch ends
    /// and checkpointing to `out_dir`.
    pub fn run(
        &mut self,
        model: &mut Model<f32>,
        train: &[Entry],
        val: &[Entry],
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let spe = self.steps_per_epoch(train.len());
        let total = self.total_steps(train.len());
        let mut report = TrainReport {
            best_mae: self.state.best_mae,
            ..Default::default()
        };
        let mut epoch_acc: Vec<StepLosses> = Vec::new();
        while self.state.step < total {
            let s = self.step(model, train)?;
            log::debug!(
                "step {} epoch {} L={:.6} L_den={:.6} L_att={:.6}",
                s.step,
                s.epoch,
                s.loss,
                s.loss_den,
                s.loss_att
            );
            report.steps.push(s);
            epoch_acc.push(s);
            if self.config.checkpoint_every > 0 && s.step % self.config.checkpoint_every == 0 {
                self.checkpoint(model, "last.sfac")?;
            }
            let epoch_done = s.step % spe == 0 || s.step == total;
            if epoch_done {
                let row = self.close_epoch(model, val, &epoch_acc, s)?;
                log::info!(
                    "epoch {} step {} L={:.6}{}",
                    row.epoch,
                    row.step,
                    row.loss,
                    row.val
                        .map(|(a, b)| format!(" val MAE={a:.4} MSE={b:.4}"))
                        .unwrap_or_default()
                );
                report.epochs.push(row);
                epoch_acc.clear();
                self.write_report(&report)?;
            }
        }
        report.best_mae = self.state.best_mae;
        self.checkpoint(model, "last.sfac")?;
        self.write_report(&report)?;
        Ok(report)
    }

    fn close_epoch(
        &mut self,
        model: &mut Model<f32>,
        val: &[Entry],
        acc: &[StepLosses],
        last: StepLosses,
    ) -> Result<EpochRow> {
        let n = acc.len().max(1) as f64;
        let mean = |f: fn(&StepLosses) -> f64| acc.iter().map(f).sum::<f64>() / n;
        let mut row = EpochRow {
            epoch: last.epoch,
            step: last.step,
            loss: mean(|s| s.loss),
            loss_den: mean(|s| s.loss_den),
            loss_att: mean(|s| s.loss_att),
            val: None,
        };
        let every = self.config.eval_every;
        if !val.is_empty() && every > 0 && (last.epoch + 1).is_multiple_of(every) {
            let r: EvalResult = evaluate(model, val, None, &self.normalization)?;
            row.val = Some((r.mae, r.mse));
            if self.state.best_mae.is_none_or(|b| r.mae < b) {
                self.state.best_mae = Some(r.mae);
                self.checkpoint(model, "best.sfac")?;
            }
        }
        Ok(row)
    }

    fn write_report(&self, report: &TrainReport) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("report.csv");
            fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn checkpoint(&self, model: &Model<f32>, name: &str) -> Result<()> {
        match &self.out_dir {
            Some(dir) => self.save(model, dir.join(name)),
            None => Ok(()),
        }
    }

    /// Model, optimizer and loop state as one checkpoint.
    pub fn to_checkpoint(&self, model: &Model<f32>) -> Checkpoint {
        let mut ck = to_checkpoint(model, Some(&self.state.optimizer));
        // Split so steps past 2^24 survive the f32 payload exactly.
        let step = self.state.step;
        ck.push(
            STEP_RECORD,
            &Tensor::<f32>::new([2], vec![(step >> 24) as f32, (step & 0xff_ffff) as f32])
                .expect("shape"),
        );
        if let Some(b) = self.state.best_mae {
            ck.push(BEST_RECORD, &Tensor::<f32>::new([1], vec![b as f32]).expect("shape"));
        }
        ck
    }

    pub fn save(&self, model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint(model).write(path)
    }

    /// Restores model, optimizer and loop state written by [`Trainer::save`].
    pub fn resume(&mut self, model: &mut Model<f32>, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint::read(path)?;
        let optimizer = optimizer_state(&ck, model)?
            .ok_or_else(|| Error::format(path, "checkpoint has no optimizer state"))?;
        let step = ck
            .get(STEP_RECORD)
            .filter(|r| r.data.len() == 2)
            .map(|r| ((r.data[0] as u64) << 24) | r.data[1] as u64)
            .ok_or_else(|| Error::CheckpointMissing(STEP_RECORD.into()))?;
        apply_checkpoint(&ck, model, true)?;
        self.state = TrainState {
            step,
            optimizer,
            best_mae: ck.get(BEST_RECORD).map(|r| r.data[0] as f64),
        };
        self.order_cache = None;
        Ok(())
    }
}

/// Trains `model` on `dataset` with default augmentation settings for the
/// given crop, no validation and no files written.
pub fn train(
    model: &mut Model<f32>,
    dataset: &[Entry],
    config: &TrainConfig,
    augment: &AugmentConfig,
) -> Result<TrainReport> {
    let mut t = Trainer::new(
        config.clone(),
        augment.clone(),
        GroundTruthConfig::default(),
        Normalization::default(),
        model,
    )?;
    t.run(model, dataset, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(&[0, 1]), derive_seed(&[1, 0]));
        assert_eq!(derive_seed(&[3, 4]), derive_seed(&[3, 4]));
    }

    #[test]
    fn csv_header_and_blank_validation() {
        let r = TrainReport {
            epochs: vec![EpochRow {
                epoch: 0,
                step: 5,
                loss: 1.5,
                loss_den: 1.0,
                loss_att: 5.0,
                val: None,
            }],
            ..Default::default()
        };
        assert_eq!(
            r.to_csv(),
            "epoch,step,L,L_den,L_att,val_MAE,val_MSE\n0,5,1.5,1,5,,\n"
        );
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
