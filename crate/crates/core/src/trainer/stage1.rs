use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
use super::{
    adversarial_grad, axpy, check_finite_params, check_total, child_seed, hwc_grad_tensor, sampling_rng, scaled,
    should_checkpoint, update_discriminator, LogWriter, StepLog, TrainConfig,
};
use crate::data_io::{sample_batch, PatchDataset};
use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss_with_grad, eosin_absence_loss_with_grad, stain_guidance_loss_with_grad,
    supervised_separation_loss_with_grad, term, total_generator_loss, Stage,
};
use crate::networks::{build_discriminator, build_generator, fluorescence_to_stains, Discriminator, Generator};
use crate::nn::{Adam, Tensor};
use crate::scalar::Scalar;
use crate::stain_space::{deconvolve, Stain, StainImage, StainMatrix};

/// Datasets consumed by stage 1. B only feeds the eosin-absence term.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Data<'a> {
    pub a: &'a PatchDataset,
    pub b: &'a PatchDataset,
    pub c: &'a PatchDataset,
}

impl Stage1Data<'_> {
    fn check(&self) -> Result<()> {
        for ds in [self.a, self.b, self.c] {
            if ds.is_empty() {
                return Err(Error::Empty(format!("{} dataset", ds.domain().letter())));
            }
        }
        let dims = self.a.dims();
        if self.b.dims() != dims || self.c.dims() != dims {
            return Err(Error::ShapeMismatch("stage-1 datasets differ in patch size".into()));
        }
        Ok(())
    }
}

/// Duplex <-> IF CycleGAN state.
pub struct Stage1Trainer<T: Scalar> {
    config: TrainConfig,
    matrix: StainMatrix<T>,
    g_ac: Generator<T>,
    g_ca: Generator<T>,
    d_a: Discriminator<T>,
    d_c: Discriminator<T>,
    opt_g_ac: Adam<T>,
    opt_g_ca: Adam<T>,
    opt_d_a: Adam<T>,
    opt_d_c: Adam<T>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<T: Scalar> Stage1Trainer<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let config = stage1_config(config)?;
        let g_ac = build_generator::<T>(&config.generator, child_seed(config.seed, 0))?;
        let g_ca = build_generator::<T>(&config.generator, child_seed(config.seed, 1))?;
        let d_a = build_discriminator::<T>(&config.discriminator, child_seed(config.seed, 2))?;
        let d_c = build_discriminator::<T>(&config.discriminator, child_seed(config.seed, 3))?;
        let (lg, ld, b1, b2) = (config.lr_generator, config.lr_discriminator, config.beta1, config.beta2);
        Ok(Self {
            matrix: config.matrix()?,
            opt_g_ac: Adam::new(g_ac.network().params(), lg, b1, b2),
            opt_g_ca: Adam::new(g_ca.network().params(), lg, b1, b2),
            opt_d_a: Adam::new(d_a.network().params(), ld, b1, b2),
            opt_d_c: Adam::new(d_c.network().params(), ld, b1, b2),
            g_ac,
            g_ca,
            d_a,
            d_c,
            rng: sampling_rng(config.seed, Stage::One),
            step: 0,
            config,
        })
    }

    /// Continues from `ckpt` under `config`; architecture and state come from
    /// the checkpoint, run length, learning rates and weights from `config`.
    pub fn resume(config: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let config = stage1_config(config)?;
        ckpt.check_stage(Stage::One.tag())?;
        let g_ac = ckpt.generator::<T>("g_ac")?;
        let g_ca = ckpt.generator::<T>("g_ca")?;
        let d_a = ckpt.discriminator::<T>("d_a")?;
        let d_c = ckpt.discriminator::<T>("d_c")?;
        let mut opt_g_ac = ckpt.optimizer("g_ac", g_ac.network().params())?;
        let mut opt_g_ca = ckpt.optimizer("g_ca", g_ca.network().params())?;
        let mut opt_d_a = ckpt.optimizer("d_a", d_a.network().params())?;
        let mut opt_d_c = ckpt.optimizer("d_c", d_c.network().params())?;
        for o in [&mut opt_g_ac, &mut opt_g_ca] {
            o.lr = config.lr_generator;
        }
        for o in [&mut opt_d_a, &mut opt_d_c] {
            o.lr = config.lr_discriminator;
        }
        Ok(Self {
            matrix: config.matrix()?,
            g_ac,
            g_ca,
            d_a,
            d_c,
            opt_g_ac,
            opt_g_ca,
            opt_d_a,
            opt_d_c,
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

    pub fn g_ac(&self) -> &Generator<T> {
        &self.g_ac
    }

    pub fn g_ca(&self) -> &Generator<T> {
        &self.g_ca
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let networks = BTreeMap::from([
            ("g_ac".to_string(), self.g_ac.record()),
            ("g_ca".to_string(), self.g_ca.record()),
            ("d_a".to_string(), self.d_a.record()),
            ("d_c".to_string(), self.d_c.record()),
        ]);
        let optimizers = BTreeMap::from([
            ("g_ac".to_string(), self.opt_g_ac.state()),
            ("g_ca".to_string(), self.opt_g_ca.state()),
            ("d_a".to_string(), self.opt_d_a.state()),
            ("d_c".to_string(), self.opt_d_c.state()),
        ]);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: Stage::One.tag().to_string(),
            step: self.step,
            dtype: T::NAME.to_string(),
            networks,
            optimizers,
            config: self.config.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, data: Stage1Data<'_>) -> Result<StepLog> {
        data.check()?;
        let step = self.step + 1;
        let cfg = &self.config;
        let w = &cfg.weights;
        let batch = sample_batch::<T, _>((data.a, data.b, data.c), cfg.batch_size, &cfg.sampling, &mut self.rng)?;
        let n = batch.x_a.len();
        let (h, wd) = batch.x_a[0].dims();
        let x_a = Tensor::from_patches(&batch.x_a)?;
        let x_b = Tensor::from_patches(&batch.x_b)?;
        let x_c = Tensor::from_patches(&batch.x_c)?;

        let (fake_c, tr_fake_c) = self.g_ac.forward_train(&x_a)?;
        let (rec_a, tr_rec_a) = self.g_ca.forward_train(&fake_c)?;
        let (fake_a, tr_fake_a) = self.g_ca.forward_train(&x_c)?;
        let (rec_c, tr_rec_c) = self.g_ac.forward_train(&fake_a)?;
        let (if_b, tr_if_b) = self.g_ac.forward_train(&x_b)?;

        let loss_d_c = update_discriminator(&mut self.d_c, &mut self.opt_d_c, &x_c, &fake_c)?;
        let loss_d_a = update_discriminator(&mut self.d_a, &mut self.opt_d_a, &x_a, &fake_a)?;
        if !(loss_d_a.is_finite() && loss_d_c.is_finite()) {
            return Err(Error::Diverged { step, value: loss_d_a + loss_d_c });
        }

        let (adv_ac, d_adv_ac) = adversarial_grad(&self.d_c, &fake_c)?;
        let (adv_ca, d_adv_ca) = adversarial_grad(&self.d_a, &fake_a)?;

        let fake_c_patches = fake_c.to_patches()?;
        let fake_c_stains = fluorescence_to_stains(&fake_c_patches);
        let cyc_a = cycle_loss_with_grad(&batch.x_a, &rec_a.to_patches()?)?;
        let cyc_c = cycle_loss_with_grad(&batch.x_c, &rec_c.to_patches()?)?;
        let pseudo_if: Vec<StainImage<T>> =
            batch.x_a.iter().map(|x| deconvolve(x, &self.matrix)).collect::<Result<_>>()?;
        let sg = stain_guidance_loss_with_grad(&fake_c_stains, &pseudo_if)?;
        let eos = eosin_absence_loss_with_grad(&fluorescence_to_stains(&if_b.to_patches()?))?;

        // Separation terms average over the batch items carrying a mask;
        // a term with no labelled item in the batch is left out.
        let per = h * wd * 3;
        let mut sup: BTreeMap<&str, (f64, Vec<T>)> = BTreeMap::new();
        for (name, stain) in [(term::SUP_E, Stain::E), (term::SUP_D, Stain::D)] {
            let mut value = 0.0;
            let mut grad = vec![T::zero(); n * per];
            let mut k = 0usize;
            for (i, labels) in batch.labels.iter().enumerate() {
                let mask = labels.as_ref().and_then(|l| if stain == Stain::E { l.mask_e.as_ref() } else { l.mask_d.as_ref() });
                let Some(mask) = mask.filter(|m| !m.is_empty()) else { continue };
                let lg = supervised_separation_loss_with_grad(&fake_c_stains[i], mask, stain, cfg.separation_variant)?;
                value += lg.value.f64();
                grad[i * per..(i + 1) * per].copy_from_slice(&lg.grad);
                k += 1;
            }
            if k > 0 {
                let inv = T::c(1.0 / k as f64);
                grad.iter_mut().for_each(|g| *g *= inv);
                sup.insert(name, (value / k as f64, grad));
            }
        }

        let mut terms = BTreeMap::from([
            (term::ADVERSARIAL.to_string(), adv_ac + adv_ca),
            (term::CYCLE.to_string(), cyc_a.value.f64() + cyc_c.value.f64()),
            (term::STAIN_GUIDANCE.to_string(), sg.value.f64()),
            (term::EOSIN_ABSENCE.to_string(), eos.value.f64()),
        ]);
        for (name, (v, _)) in &sup {
            terms.insert(name.to_string(), *v);
        }
        let report = total_generator_loss(&terms, w, Stage::One)?;
        check_total(step, &report)?;

        let weight = |name: &str| w.weight_of(name).expect("known term");
        let mut grads_ac = self.g_ac.network().params().zeros_like();
        let mut grads_ca = self.g_ca.network().params().zeros_like();

        // C -> A -> C cycle: gradient reaches G_AC, then flows on into fake_a.
        let d_rec_c = scaled(&hwc_grad_tensor(&cyc_c.grad, n, h, wd)?, weight(term::CYCLE));
        let mut d_fake_a = self.g_ac.network().backward(tr_rec_c, d_rec_c, Some(&mut grads_ac));
        let d_if_b = scaled(&hwc_grad_tensor(&eos.grad, n, h, wd)?, weight(term::EOSIN_ABSENCE));
        self.g_ac.network().backward_params(tr_if_b, d_if_b, &mut grads_ac);

        // A -> C -> A cycle: gradient reaches G_CA, then flows on into fake_c.
        let d_rec_a = scaled(&hwc_grad_tensor(&cyc_a.grad, n, h, wd)?, weight(term::CYCLE));
        let mut d_fake_c = self.g_ca.network().backward(tr_rec_a, d_rec_a, Some(&mut grads_ca));

        axpy(&mut d_fake_a, weight(term::ADVERSARIAL), &d_adv_ca);
        self.g_ca.network().backward_params(tr_fake_a, d_fake_a, &mut grads_ca);

        axpy(&mut d_fake_c, weight(term::ADVERSARIAL), &d_adv_ac);
        axpy(&mut d_fake_c, weight(term::STAIN_GUIDANCE), &hwc_grad_tensor(&sg.grad, n, h, wd)?);
        for (name, (_, grad)) in &sup {
            axpy(&mut d_fake_c, weight(name), &hwc_grad_tensor(grad, n, h, wd)?);
        }
        self.g_ac.network().backward_params(tr_fake_c, d_fake_c, &mut grads_ac);

        self.opt_g_ac.step(self.g_ac.network_mut().params_mut(), &grads_ac);
        self.opt_g_ca.step(self.g_ca.network_mut().params_mut(), &grads_ca);
        check_finite_params(
            step,
            &[self.g_ac.network(), self.g_ca.network(), self.d_a.network(), self.d_c.network()],
        )?;
        self.step = step;

        Ok(StepLog {
            stage: Stage::One.tag().to_string(),
            step,
            generator: report,
            discriminators: BTreeMap::from([("d_a".to_string(), loss_d_a), ("d_c".to_string(), loss_d_c)]),
            details: BTreeMap::from([
                ("adversarial_ac".to_string(), adv_ac),
                ("adversarial_ca".to_string(), adv_ca),
                ("cycle_a".to_string(), cyc_a.value.f64()),
                ("cycle_c".to_string(), cyc_c.value.f64()),
            ]),
        })
    }

    /// Steps until `config.steps`, appending to the stage log and saving
    /// checkpoints on the configured interval and at the end.
    pub fn run(&mut self, data: Stage1Data<'_>, observer: &mut dyn FnMut(&StepLog)) -> Result<Checkpoint> {
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

fn stage1_config(config: &TrainConfig) -> Result<TrainConfig> {
    let mut config = config.clone();
    config.stage = 1;
    config.validate()?;
    Ok(config)
}

/// Trains stage 1 from scratch, or from `resume` when given.
pub fn train_stage1<T: Scalar>(
    config: &TrainConfig,
    data: Stage1Data<'_>,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    data.check()?;
    let mut trainer = match resume {
        Some(ckpt) => Stage1Trainer::<T>::resume(config, ckpt)?,
        None => Stage1Trainer::<T>::new(config)?,
    };
    trainer.run(data, &mut |_| {})
}
