//! Alternating adversarial training: discriminators, then the coarse
//! generator, then the fine generator, then a joint step over all six
//! networks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::PairedSample;
use crate::discriminators::{DiscriminatorId, DiscriminatorSet, DiscriminatorSetConfig};
use crate::error::{config_err, input_err, Error, Result};
use crate::generators::{Generator, GeneratorConfig};
use crate::image::ImageTensor;
use crate::nn::{zero_grad, Mode, Module, Tensor};
use crate::objective::{
    lsgan_d_loss, lsgan_g_loss, recon_l2, recon_l2_grad, squared_error_grad, total_generator_objective,
    LossRecord, ObjectiveConfig,
};
use crate::optim::{Adam, AdamConfig};
use crate::resample::{BatchPyramid, Resampler};

/// The three networks' shapes, tied together by the crop size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub crop_size: usize,
    pub coarse: GeneratorConfig,
    pub fine: GeneratorConfig,
    pub discriminators: DiscriminatorSetConfig,
}

impl ModelConfig {
    /// Full scale: 512 crops, coarse at 256.
    pub fn full() -> Self {
        ModelConfig {
            crop_size: 512,
            coarse: GeneratorConfig::coarse(),
            fine: GeneratorConfig::fine(),
            discriminators: DiscriminatorSetConfig::default(),
        }
    }

    /// Desk-scale model: 64 crops, coarse at 32, base widths 4/2/4.
    pub fn toy() -> Self {
        ModelConfig {
            crop_size: 64,
            coarse: GeneratorConfig::coarse().scaled(32, 4),
            fine: GeneratorConfig::fine().scaled(64, 2),
            discriminators: DiscriminatorSetConfig::new(64, 4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        self.fine.validate()?;
        let s = self.crop_size;
        if !s.is_multiple_of(4) {
            return Err(config_err!("crop size {s} must be divisible by 4"));
        }
        if self.coarse.input_size * 2 != s || self.fine.input_size != s {
            return Err(config_err!(
                "crop {s} needs coarse input {} and fine input {s}, got {} and {}",
                s / 2,
                self.coarse.input_size,
                self.fine.input_size
            ));
        }
        if self.discriminators.base_size != s {
            return Err(config_err!(
                "discriminator base size {} differs from crop size {s}",
                self.discriminators.base_size
            ));
        }
        if self.coarse.feature_channels() != self.fine.residual_channels()
            || self.coarse.input_size != self.fine.bottleneck_size()
        {
            return Err(config_err!(
                "coarse feature ({} channels at {}) does not match the fine handoff ({} channels at {})",
                self.coarse.feature_channels(),
                self.coarse.input_size,
                self.fine.residual_channels(),
                self.fine.bottleneck_size()
            ));
        }
        for id in DiscriminatorId::ALL {
            self.discriminators.config_for(id).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub d_steps_per_cycle: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Joint step every cycle; otherwise the final tenth of the epochs run
    /// joint steps only and the rest run the individual steps only.
    pub joint_every_cycle: bool,
    /// Write a checkpoint every this many cycles (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            d_steps_per_cycle: 2,
            batch_size: 4,
            epochs: 100,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            joint_every_cycle: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        if self.d_steps_per_cycle == 0 || self.batch_size == 0 {
            return Err(config_err!("d_steps_per_cycle and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(config_err!(
                "invalid Adam settings lr={} beta1={} beta2={}",
                self.learning_rate,
                self.beta1,
                self.beta2
            ));
        }
        if self.batch_size > dataset_size {
            return Err(config_err!(
                "batch size {} exceeds the {dataset_size} available samples",
                self.batch_size
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn cycles_per_epoch(&self, dataset_size: usize) -> u64 {
        (dataset_size / self.batch_size.max(1)).max(1) as u64
    }

    /// First epoch of the joint-only phase when the joint step is not run
    /// every cycle.
    pub fn joint_phase_start(&self) -> usize {
        self.epochs - self.epochs.div_ceil(10)
    }
}

/// Which steps a cycle runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclePlan {
    pub individual: bool,
    pub joint: bool,
}

impl CyclePlan {
    pub const FULL: CyclePlan = CyclePlan {
        individual: true,
        joint: true,
    };

    pub fn for_epoch(schedule: &TrainingSchedule, epoch: usize) -> Self {
        if schedule.joint_every_cycle {
            Self::FULL
        } else {
            let joint = epoch >= schedule.joint_phase_start();
            CyclePlan {
                individual: !joint,
                joint,
            }
        }
    }

    pub fn batches_needed(&self, d_steps: usize) -> usize {
        let individual = if self.individual { d_steps + 2 } else { 0 };
        individual + usize::from(self.joint)
    }
}

/// Full-resolution fundus and angiogram crops with their pyramids.
#[derive(Debug, Clone)]
pub struct Batch {
    fundus: BatchPyramid,
    angiogram: BatchPyramid,
}

impl Batch {
    pub fn new(fundus: Tensor, angiogram: Tensor) -> Result<Self> {
        let (nf, cf, hf, wf) = fundus.dim();
        let (na, ca, ha, wa) = angiogram.dim();
        if nf == 0 {
            return Err(input_err!("empty batch"));
        }
        if cf != 3 || ca != 1 || (nf, hf, wf) != (na, ha, wa) {
            return Err(input_err!(
                "batch needs N×3×S×S fundus and N×1×S×S angiograms, got {:?} and {:?}",
                fundus.dim(),
                angiogram.dim()
            ));
        }
        Ok(Batch {
            fundus: BatchPyramid::build(&fundus)?,
            angiogram: BatchPyramid::build(&angiogram)?,
        })
    }

    pub fn from_samples(samples: &[&PairedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(input_err!("empty batch"));
        }
        let f: Vec<ImageTensor> = samples.iter().map(|s| s.fundus_crop()).collect();
        let a: Vec<ImageTensor> = samples.iter().map(|s| s.angio_crop()).collect();
        Batch::new(
            ImageTensor::stack(&f.iter().collect::<Vec<_>>())?,
            ImageTensor::stack(&a.iter().collect::<Vec<_>>())?,
        )
    }

    pub fn len(&self) -> usize {
        self.fundus.levels[0].dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.fundus.levels[0].dim().2
    }
}

/// Batches for one cycle, consumed in order: `d_steps_per_cycle`
/// discriminator batches, one coarse, one fine, one joint (missing entries
/// are allowed when the plan skips those steps).
#[derive(Debug, Clone, Default)]
pub struct CycleBatches {
    pub discriminator: Vec<Batch>,
    pub coarse: Option<Batch>,
    pub fine: Option<Batch>,
    pub joint: Option<Batch>,
}

/// Generated images at every scale a discriminator looks at.
struct Fakes {
    /// Fine output (level 0) and its half-size copy (level 1).
    fine: Tensor,
    fine_half: Tensor,
    /// Coarse output (level 1) and its half-size copy (level 2).
    coarse: Tensor,
    coarse_half: Tensor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiscriminatorLosses {
    pub fine: f64,
    pub coarse: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorLosses {
    pub adversarial: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JointLosses {
    pub fine: GeneratorLosses,
    pub coarse: GeneratorLosses,
    pub discriminators: DiscriminatorLosses,
    pub total: f64,
}

fn halve(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dim();
    Resampler::halving(h, w).apply(x)
}

/// Gradient through [`halve`] back to the full-size input.
fn halve_adjoint(grad_half: &Tensor, full: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = full.dim();
    Resampler::halving(h, w).adjoint(grad_half)
}

/// Every network, optimizer and counter of a run.
pub struct TrainingState {
    pub model: ModelConfig,
    pub coarse: Generator,
    pub fine: Generator,
    pub discriminators: DiscriminatorSet,
    pub adam_coarse: Adam,
    pub adam_fine: Adam,
    pub adam_discriminators: Adam,
    /// Completed cycles.
    pub cycle: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    rng: ChaCha8Rng,
}

/// Seed offsets for each network's initialization stream.
const COARSE_SEED: u64 = 0;
const FINE_SEED: u64 = 1;
const DISCRIMINATOR_SEED: u64 = 10;
/// Stream of the batch sampler.
const SAMPLER_STREAM: u64 = 7;

impl TrainingState {
    pub fn new(model: ModelConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        let mut coarse = Generator::build(model.coarse.clone(), seed.wrapping_add(COARSE_SEED))?;
        let mut fine = Generator::build(model.fine.clone(), seed.wrapping_add(FINE_SEED))?;
        let mut discriminators =
            DiscriminatorSet::build(model.discriminators.clone(), seed.wrapping_add(DISCRIMINATOR_SEED))?;
        let adam_coarse = Adam::new(adam, &mut coarse);
        let adam_fine = Adam::new(adam, &mut fine);
        let adam_discriminators = Adam::new(adam, &mut discriminators);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(TrainingState {
            model,
            coarse,
            fine,
            discriminators,
            adam_coarse,
            adam_fine,
            adam_discriminators,
            cycle: 0,
            epoch: 0,
            seed,
            rng,
        })
    }

    pub fn sampler_position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_sampler_position(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    /// Draws `batch_size` sample indices uniformly, with replacement.
    pub fn sample_indices(&mut self, dataset_size: usize, batch_size: usize) -> Vec<usize> {
        (0..batch_size)
            .map(|_| self.rng.random_range(0..dataset_size))
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(input_err!("empty batch"));
        }
        if batch.size() != self.model.crop_size {
            return Err(input_err!(
                "batch crops are {} pixels, the model trains on {}",
                batch.size(),
                self.model.crop_size
            ));
        }
        Ok(())
    }

    fn diverged(&self, what: &str, value: f64) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence {
                cycle: self.cycle + 1,
                what: what.to_string(),
            })
        }
    }

    fn generate(&mut self, batch: &Batch, mode: Mode) -> Result<Fakes> {
        let out = self.coarse.coarse_forward(&batch.fundus.levels[1], mode)?;
        let fine = self.fine.fine_forward(&batch.fundus.levels[0], &out.feature, mode)?;
        Ok(Fakes {
            fine_half: halve(&fine)?,
            fine,
            coarse_half: halve(&out.angiogram)?,
            coarse: out.angiogram,
        })
    }

    /// One update of all four discriminators on real pairs and the given
    /// (detached) generated pairs.
    fn update_discriminators(&mut self, batch: &Batch, fakes: &Fakes, obj: &ObjectiveConfig) -> Result<DiscriminatorLosses> {
        zero_grad(&mut self.discriminators);
        let (f, a) = (&batch.fundus.levels, &batch.angiogram.levels);
        let mut real_maps = Vec::new();
        let mut fake_maps = Vec::new();
        for id in DiscriminatorId::ALL {
            let (fundus, real, fake) = match id {
                DiscriminatorId::D1Fine => (&f[0], &a[0], &fakes.fine),
                DiscriminatorId::D2Fine => (&f[1], &a[1], &fakes.fine_half),
                DiscriminatorId::D1Coarse => (&f[1], &a[1], &fakes.coarse),
                DiscriminatorId::D2Coarse => (&f[2], &a[2], &fakes.coarse_half),
            };
            let d = self.discriminators.get_mut(id);
            let m = d.judge(fundus, real, Mode::Train)?;
            d.backward(&squared_error_grad(&m, obj.real_target))?;
            real_maps.push((id, m));
            let m = d.judge(fundus, fake, Mode::Train)?;
            d.backward(&squared_error_grad(&m, obj.fake_target_d))?;
            fake_maps.push((id, m));
        }
        let group = |maps: &[(DiscriminatorId, Tensor)], fine: bool| -> Vec<Tensor> {
            maps.iter()
                .filter(|(id, _)| id.is_fine() == fine)
                .map(|(_, m)| m.clone())
                .collect()
        };
        let loss = |fine: bool| {
            let r = group(&real_maps, fine);
            let k = group(&fake_maps, fine);
            lsgan_d_loss(&r.iter().collect::<Vec<_>>(), &k.iter().collect::<Vec<_>>(), obj)
        };
        let losses = DiscriminatorLosses {
            fine: loss(true),
            coarse: loss(false),
        };
        self.diverged("d_fine_loss", losses.fine)?;
        self.diverged("d_coarse_loss", losses.coarse)?;
        self.adam_discriminators.step(&mut self.discriminators)?;
        Ok(losses)
    }

    /// Adversarial loss of a generated image against one frozen
    /// discriminator, returning the loss and the gradient w.r.t. the image.
    fn adversarial(&mut self, id: DiscriminatorId, fundus: &Tensor, fake: &Tensor, obj: &ObjectiveConfig) -> Result<(f64, Tensor)> {
        let d = self.discriminators.get_mut(id);
        let m = d.judge(fundus, fake, Mode::Frozen)?;
        let loss = lsgan_g_loss(&[&m], obj);
        let grad = d.backward_angiogram(&squared_error_grad(&m, obj.fake_target_g))?;
        Ok((loss, grad))
    }

    /// Loss and gradient for the coarse path: both coarse discriminators plus λ·L2.
    fn coarse_terms(&mut self, batch: &Batch, fakes: &Fakes, obj: &ObjectiveConfig) -> Result<(GeneratorLosses, Tensor)> {
        let (f, a) = (&batch.fundus.levels, &batch.angiogram.levels);
        let (adv1, g1) = self.adversarial(DiscriminatorId::D1Coarse, &f[1], &fakes.coarse, obj)?;
        let (adv2, g2) = self.adversarial(DiscriminatorId::D2Coarse, &f[2], &fakes.coarse_half, obj)?;
        let l2 = recon_l2(&fakes.coarse, &a[1])?;
        let mut grad = g1 + halve_adjoint(&g2, &fakes.coarse)?;
        grad.scaled_add(obj.lambda_weight, &recon_l2_grad(&fakes.coarse, &a[1])?);
        Ok((GeneratorLosses { adversarial: adv1 + adv2, l2 }, grad))
    }

    fn fine_terms(&mut self, batch: &Batch, fakes: &Fakes, obj: &ObjectiveConfig) -> Result<(GeneratorLosses, Tensor)> {
        let (f, a) = (&batch.fundus.levels, &batch.angiogram.levels);
        let (adv1, g1) = self.adversarial(DiscriminatorId::D1Fine, &f[0], &fakes.fine, obj)?;
        let (adv2, g2) = self.adversarial(DiscriminatorId::D2Fine, &f[1], &fakes.fine_half, obj)?;
        let l2 = recon_l2(&fakes.fine, &a[0])?;
        let mut grad = g1 + halve_adjoint(&g2, &fakes.fine)?;
        grad.scaled_add(obj.lambda_weight, &recon_l2_grad(&fakes.fine, &a[0])?);
        Ok((GeneratorLosses { adversarial: adv1 + adv2, l2 }, grad))
    }

    fn check_generator(&self, prefix: &str, l: &GeneratorLosses) -> Result<()> {
        self.diverged(&format!("{prefix}_adv"), l.adversarial)?;
        self.diverged(&format!("l2_{prefix}"), l.l2)
    }

    /// Step (1): one discriminator update with both generators frozen.
    pub fn discriminator_step(&mut self, batch: &Batch, obj: &ObjectiveConfig) -> Result<DiscriminatorLosses> {
        self.check_batch(batch)?;
        let fakes = self.generate(batch, Mode::Frozen)?;
        self.update_discriminators(batch, &fakes, obj)
    }

    /// Step (2): coarse generator update against frozen discriminators.
    pub fn coarse_step(&mut self, batch: &Batch, obj: &ObjectiveConfig) -> Result<GeneratorLosses> {
        self.check_batch(batch)?;
        zero_grad(&mut self.coarse);
        let out = self.coarse.coarse_forward(&batch.fundus.levels[1], Mode::Train)?;
        let fakes = Fakes {
            coarse_half: halve(&out.angiogram)?,
            coarse: out.angiogram,
            fine: Tensor::zeros((0, 0, 0, 0)),
            fine_half: Tensor::zeros((0, 0, 0, 0)),
        };
        let (losses, grad) = self.coarse_terms(batch, &fakes, obj)?;
        self.check_generator("g_coarse", &losses)?;
        self.coarse.coarse_backward(&grad, None)?;
        self.adam_coarse.step(&mut self.coarse)?;
        Ok(losses)
    }

    /// Step (3): fine generator update; the coarse feature comes from the
    /// frozen coarse generator.
    pub fn fine_step(&mut self, batch: &Batch, obj: &ObjectiveConfig) -> Result<GeneratorLosses> {
        self.check_batch(batch)?;
        let feature = self
            .coarse
            .coarse_forward(&batch.fundus.levels[1], Mode::Frozen)?
            .feature;
        zero_grad(&mut self.fine);
        let fine = self.fine.fine_forward(&batch.fundus.levels[0], &feature, Mode::Train)?;
        let fakes = Fakes {
            fine_half: halve(&fine)?,
            fine,
            coarse: Tensor::zeros((0, 0, 0, 0)),
            coarse_half: Tensor::zeros((0, 0, 0, 0)),
        };
        let (losses, grad) = self.fine_terms(batch, &fakes, obj)?;
        self.check_generator("g_fine", &losses)?;
        self.fine.fine_backward(&grad)?;
        self.adam_fine.step(&mut self.fine)?;
        Ok(losses)
    }

    /// Step (4): both generators minimize the full objective, with the fine
    /// path's handoff gradient flowing into the coarse generator; then one
    /// discriminator update on the same generated pairs.
    pub fn joint_step(&mut self, batch: &Batch, obj: &ObjectiveConfig) -> Result<JointLosses> {
        self.check_batch(batch)?;
        zero_grad(&mut self.coarse);
        zero_grad(&mut self.fine);
        let fakes = self.generate(batch, Mode::Train)?;
        let (fine, d_fine) = self.fine_terms(batch, &fakes, obj)?;
        let (coarse, d_coarse) = self.coarse_terms(batch, &fakes, obj)?;
        self.check_generator("g_fine", &fine)?;
        self.check_generator("g_coarse", &coarse)?;
        let total = total_generator_objective(fine.adversarial, coarse.adversarial, fine.l2, coarse.l2, obj);
        self.diverged("total", total)?;
        let (_, d_handoff) = self.fine.fine_backward(&d_fine)?;
        self.coarse.coarse_backward(&d_coarse, Some(&d_handoff))?;
        self.adam_fine.step(&mut self.fine)?;
        self.adam_coarse.step(&mut self.coarse)?;
        let discriminators = self.update_discriminators(batch, &fakes, obj)?;
        Ok(JointLosses {
            fine,
            coarse,
            discriminators,
            total,
        })
    }

    /// Runs the steps of `plan` in order and advances the cycle counter.
    pub fn train_cycle(&mut self, batches: &CycleBatches, schedule: &TrainingSchedule, obj: &ObjectiveConfig, plan: CyclePlan) -> Result<LossRecord> {
        let mut record = LossRecord {
            cycle: self.cycle + 1,
            ..LossRecord::default()
        };
        let need = |b: &Option<Batch>, what: &str| -> Result<Batch> {
            b.clone().ok_or_else(|| input_err!("cycle plan needs a {what} batch"))
        };
        if plan.individual {
            if batches.discriminator.len() < schedule.d_steps_per_cycle {
                return Err(input_err!(
                    "{} discriminator batches supplied, {} needed",
                    batches.discriminator.len(),
                    schedule.d_steps_per_cycle
                ));
            }
            for b in &batches.discriminator[..schedule.d_steps_per_cycle] {
                let d = self.discriminator_step(b, obj)?;
                record.d_fine_loss = d.fine;
                record.d_coarse_loss = d.coarse;
            }
            let c = self.coarse_step(&need(&batches.coarse, "coarse")?, obj)?;
            let f = self.fine_step(&need(&batches.fine, "fine")?, obj)?;
            record.g_coarse_adv = c.adversarial;
            record.l2_coarse = c.l2;
            record.g_fine_adv = f.adversarial;
            record.l2_fine = f.l2;
            record.total = total_generator_objective(f.adversarial, c.adversarial, f.l2, c.l2, obj);
        }
        if plan.joint {
            let j = self.joint_step(&need(&batches.joint, "joint")?, obj)?;
            record.d_fine_loss = j.discriminators.fine;
            record.d_coarse_loss = j.discriminators.coarse;
            record.g_fine_adv = j.fine.adversarial;
            record.g_coarse_adv = j.coarse.adversarial;
            record.l2_fine = j.fine.l2;
            record.l2_coarse = j.coarse.l2;
            record.total = j.total;
        }
        if let Some(what) = record.non_finite() {
            return Err(Error::Divergence {
                cycle: record.cycle,
                what: what.to_string(),
            });
        }
        self.cycle += 1;
        Ok(record)
    }

    /// Draws the batches for one cycle from the seeded sampler.
    pub fn draw_cycle(&mut self, samples: &[PairedSample], schedule: &TrainingSchedule, plan: CyclePlan) -> Result<CycleBatches> {
        if samples.is_empty() {
            return Err(input_err!("no training samples"));
        }
        let draw = |state: &mut Self| -> Result<Batch> {
            let idx = state.sample_indices(samples.len(), schedule.batch_size);
            Batch::from_samples(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>())
        };
        let mut out = CycleBatches::default();
        if plan.individual {
            for _ in 0..schedule.d_steps_per_cycle {
                out.discriminator.push(draw(self)?);
            }
            out.coarse = Some(draw(self)?);
            out.fine = Some(draw(self)?);
        }
        if plan.joint {
            out.joint = Some(draw(self)?);
        }
        Ok(out)
    }

    /// Translates one full-size fundus crop with inference statistics.
    pub fn infer(&mut self, fundus: &ImageTensor) -> Result<ImageTensor> {
        let s = self.model.crop_size;
        if fundus.channels() != 3 || fundus.height() != s || fundus.width() != s {
            return Err(input_err!(
                "inference expects a 3×{s}×{s} fundus crop, got {}×{}×{}",
                fundus.channels(),
                fundus.height(),
                fundus.width()
            ));
        }
        let full = fundus.to_batch();
        let half = halve(&full)?;
        let out = self.coarse.coarse_forward(&half, Mode::Inference)?;
        let y = self.fine.fine_forward(&full, &out.feature, Mode::Inference)?;
        Ok(ImageTensor::from_batch(&y, 0))
    }
}

/// Where `fit` writes its artifacts.
#[derive(Debug, Clone)]
pub struct FitOutputs {
    pub directory: PathBuf,
}

pub const LOG_FILE: &str = "train_log.csv";

impl FitOutputs {
    pub fn checkpoint_path(&self, cycle: u64) -> PathBuf {
        self.directory.join(format!("checkpoint_{cycle:08}.{}", checkpoint::EXTENSION))
    }

    pub fn log_path(&self) -> PathBuf {
        self.directory.join(LOG_FILE)
    }
}

fn read_log(path: &Path, keep_through: u64) -> Result<Vec<LossRecord>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for r in reader.deserialize() {
        let r: LossRecord = r.map_err(|e| csv_err(path, e))?;
        if r.cycle <= keep_through {
            rows.push(r);
        }
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Trains for `schedule.epochs` epochs of `samples.len() / batch_size`
/// cycles, starting from the state's cycle counter (so a loaded checkpoint
/// resumes where it stopped). Returns the checkpoints written.
pub fn fit(
    state: &mut TrainingState,
    samples: &[PairedSample],
    schedule: &TrainingSchedule,
    obj: &ObjectiveConfig,
    outputs: &FitOutputs,
) -> Result<Vec<PathBuf>> {
    if samples.is_empty() {
        return Err(input_err!("no training samples"));
    }
    schedule.validate(samples.len())?;
    obj.validate(state.model.discriminators.sigmoid_output)?;
    fs::create_dir_all(&outputs.directory).map_err(|e| Error::io(&outputs.directory, e))?;

    let per_epoch = schedule.cycles_per_epoch(samples.len());
    let total = per_epoch * schedule.epochs as u64;
    let log_path = outputs.log_path();
    // Rows past the resume point belong to an abandoned run and are dropped.
    let previous = read_log(&log_path, state.cycle)?;
    let mut log = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&log_path)
        .map_err(|e| csv_err(&log_path, e))?;
    log.write_record(LossRecord::HEADER).map_err(|e| csv_err(&log_path, e))?;
    for r in &previous {
        log.serialize(r).map_err(|e| csv_err(&log_path, e))?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let mut written = Vec::new();
    if total == 0 || state.cycle >= total {
        let path = outputs.checkpoint_path(state.cycle);
        checkpoint::save(&path, state, schedule, obj)?;
        written.push(path);
        return Ok(written);
    }
    while state.cycle < total {
        let epoch = (state.cycle / per_epoch) as usize;
        let plan = CyclePlan::for_epoch(schedule, epoch);
        let batches = state.draw_cycle(samples, schedule, plan)?;
        let record = state.train_cycle(&batches, schedule, obj, plan)?;
        state.epoch = state.cycle / per_epoch;
        log.serialize(record).map_err(|e| csv_err(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "cycle {} epoch {} total {:.5} l2_fine {:.5}",
            record.cycle,
            epoch,
            record.total,
            record.l2_fine
        );
        let periodic = schedule.checkpoint_every > 0 && state.cycle.is_multiple_of(schedule.checkpoint_every);
        if periodic || state.cycle == total {
            let path = outputs.checkpoint_path(state.cycle);
            checkpoint::save(&path, state, schedule, obj)?;
            written.push(path);
        }
    }
    Ok(written)
}
