use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
use super::{
    adversarial_grad, axpy, check_finite_params, check_total, child_seed, compute_f_ab, hwc_grad_tensor,
    sampling_rng, should_checkpoint, update_discriminator, LogWriter, StepLog, TrainConfig,
};
use crate::data_io::{sample_domain, PatchDataset};
use crate::error::{Error, Result};
use crate::losses::{guidance_loss_with_grad, term, total_generator_loss, Stage};
use crate::networks::{build_discriminator, build_generator, Discriminator, Generator};
use crate::nn::{Adam, Tensor};
use crate::scalar::Scalar;
use crate::stain_space::RestainCoefficients;

#[derive(Clone, Copy, Debug)]
pub struct Stage2Data<'a> {
    pub a: &'a PatchDataset,
    pub b: &'a PatchDataset,
}

impl Stage2Data<'_> {
    fn check(&self) -> Result<()> {
        for ds in [self.a, self.b] {
            if ds.is_empty() {
                return Err(Error::Empty(format!("{} dataset", ds.domain().letter())));
            }
        }
        if self.a.dims() != self.b.dims() {
            return Err(Error::ShapeMismatch("stage-2 datasets differ in patch size".into()));
        }
        Ok(())
    }
}

/// Direct duplex -> monoplex translator trained against the frozen
/// stage-1 target.
pub struct Stage2Trainer<T: Scalar> {
    config: TrainConfig,
    alpha: RestainCoefficients<T>,
    g_ac: Generator<T>,
    g_ca: Generator<T>,
    g_ab: Generator<T>,
    d_b: Discriminator<T>,
    opt_g_ab: Adam<T>,
    opt_d_b: Adam<T>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<T: Scalar> Stage2Trainer<T> {
    /// Fresh `G_AB` / `D_B` on top of a stage-1 checkpoint.
    pub fn new(config: &TrainConfig, stage1: &Checkpoint) -> Result<Self> {
        let config = stage2_config(config)?;
        stage1.check_stage(Stage::One.tag())?;
        let g_ab = build_generator::<T>(&config.generator, child_seed(config.seed, 4))?;
        let d_b = build_discriminator::<T>(&config.discriminator, child_seed(config.seed, 5))?;
        Ok(Self {
            alpha: config.restain_coefficients()?,
            g_ac: stage1.generator("g_ac")?,
            g_ca: stage1.generator("g_ca")?,
            opt_g_ab: Adam::new(g_ab.network().params(), config.lr_generator, config.beta1, config.beta2),
            opt_d_b: Adam::new(d_b.network().params(), config.lr_discriminator, config.beta1, config.beta2),
            g_ab,
            d_b,
            rng: sampling_rng(config.seed, Stage::Two),
            step: 0,
            config,
        })
    }

    pub fn resume(config: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let config = stage2_config(config)?;
        ckpt.check_stage(Stage::Two.tag())?;
        let g_ab = ckpt.generator::<T>("g_ab")?;
        let d_b = ckpt.discriminator::<T>("d_b")?;
        let mut opt_g_ab = ckpt.optimizer("g_ab", g_ab.network().params())?;
        let mut opt_d_b = ckpt.optimizer("d_b", d_b.network().params())?;
        opt_g_ab.lr = config.lr_generator;
        opt_d_b.lr = config.lr_discriminator;
        Ok(Self {
            alpha: config.restain_coefficients()?,
            g_ac: ckpt.generator("g_ac")?,
            g_ca: ckpt.generator("g_ca")?,
            g_ab,
            d_b,
            opt_g_ab,
            opt_d_b,
            rng: ckpt.rng.restore()?,
            step: ckpt.step,
            config,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn g_ab(&self) -> &Generator<T> {
        &self.g_ab
    }

    pub fn g_ac(&self) -> &Generator<T> {
        &self.g_ac
    }

    pub fn g_ca(&self) -> &Generator<T> {
        &self.g_ca
    }

    /// Includes the frozen stage-1 generators so the checkpoint stands alone.
    pub fn checkpoint(&self) -> Checkpoint {
        let networks = BTreeMap::from([
            ("g_ab".to_string(), self.g_ab.record()),
            ("d_b".to_string(), self.d_b.record()),
            ("g_ac".to_string(), self.g_ac.record()),
            ("g_ca".to_string(), self.g_ca.record()),
        ]);
        let optimizers = BTreeMap::from([
            ("g_ab".to_string(), self.opt_g_ab.state()),
            ("d_b".to_string(), self.opt_d_b.state()),
        ]);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: Stage::Two.tag().to_string(),
            step: self.step,
            dtype: T::NAME.to_string(),
            networks,
            optimizers,
            config: self.config.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn step(&mut self, data: Stage2Data<'_>) -> Result<StepLog> {
        data.check()?;
        let step = self.step + 1;
        let cfg = &self.config;
        let flips = cfg.sampling.flips;
        let x_a = sample_domain::<T, _>(data.a, cfg.batch_size, flips, &mut self.rng)?;
        let x_b = sample_domain::<T, _>(data.b, cfg.batch_size, flips, &mut self.rng)?;
        let n = x_a.len();
        let (h, w) = x_a[0].dims();
        let target = compute_f_ab(&x_a, &self.g_ac, &self.g_ca, &self.alpha)?;

        let xa = Tensor::from_patches(&x_a)?;
        let (fake_b, trace) = self.g_ab.forward_train(&xa)?;
        let loss_d_b = update_discriminator(&mut self.d_b, &mut self.opt_d_b, &Tensor::from_patches(&x_b)?, &fake_b)?;
        if !loss_d_b.is_finite() {
            return Err(Error::Diverged { step, value: loss_d_b });
        }

        let w_adv = cfg.weights.lambda_adversarial;
        let (adv, d_adv) = adversarial_grad(&self.d_b, &fake_b)?;
        let guid = guidance_loss_with_grad(&fake_b.to_patches()?, &target)?;
        let terms = BTreeMap::from([
            (term::ADVERSARIAL.to_string(), adv),
            (term::GUIDANCE.to_string(), guid.value.f64()),
        ]);
        let report = total_generator_loss(&terms, &cfg.weights, Stage::Two)?;
        check_total(step, &report)?;

        let mut dy = hwc_grad_tensor(&guid.grad, n, h, w)?;
        dy.as_mut_slice().iter_mut().for_each(|g| *g *= T::c(cfg.weights.lambda_guidance));
        axpy(&mut dy, w_adv, &d_adv);
        let mut grads = self.g_ab.network().params().zeros_like();
        self.g_ab.network().backward_params(trace, dy, &mut grads);
        self.opt_g_ab.step(self.g_ab.network_mut().params_mut(), &grads);
        check_finite_params(step, &[self.g_ab.network(), self.d_b.network()])?;
        self.step = step;

        Ok(StepLog {
            stage: Stage::Two.tag().to_string(),
            step,
            generator: report,
            discriminators: BTreeMap::from([("d_b".to_string(), loss_d_b)]),
            details: BTreeMap::new(),
        })
    }

    pub fn run(&mut self, data: Stage2Data<'_>, observer: &mut dyn FnMut(&StepLog)) -> Result<Checkpoint> {
        let dir = self.config.stage_dir()?;
        let mut log = LogWriter::open(&dir, self.step)?;
        let total = self.config.steps;
        if self.step as usize >= total {
            let ckpt = self.checkpoint();
            save_checkpoint(&ckpt, &dir)?;
            return Ok(ckpt);
        }
        while (self.step as usize) < total {
            let rec = self.step(data)?;
            log.write(&rec)?;
            observer(&rec);
            if should_checkpoint(self.step as usize, total, self.config.checkpoint_interval) {
                save_checkpoint(&self.checkpoint(), &dir)?;
            }
        }
        Ok(self.checkpoint())
    }
}

fn stage2_config(config: &TrainConfig) -> Result<TrainConfig> {
    let mut config = config.clone();
    config.stage = 2;
    config.validate()?;
    Ok(config)
}

/// Trains stage 2 on top of `stage1`, or continues from a stage-2 `resume`.
pub fn train_stage2<T: Scalar>(
    config: &TrainConfig,
    data: Stage2Data<'_>,
    stage1: &Checkpoint,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    data.check()?;
    let mut trainer = match resume {
        Some(ckpt) => Stage2Trainer::<T>::resume(config, ckpt)?,
        None => Stage2Trainer::<T>::new(config, stage1)?,
    };
    trainer.run(data, &mut |_| {})
}
