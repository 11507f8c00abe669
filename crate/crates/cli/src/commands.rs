use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use auxstain::data_io::{
    list_patch_pngs, load_dataset, load_eval_split, load_rgb_png, load_segmentation_split, save_rgb_png, Domain,
    PatchDataset, MANIFEST_FILE,
};
use auxstain::evalkit::{
    evaluate_methods, render_svg, train_surrogate_sb, Method, MetricsReport, PosteriorModel, PosteriorModelRecord,
    SurrogateConfig,
};
use auxstain::networks::{DeconvolutionTransform, ImageTransform, IdentityTransform, ReconstructionTransform};
use auxstain::phantom::{export_corpus, CorpusCounts, PhantomConfig};
use auxstain::stain_space::StainMatrix;
use auxstain::trainer::{
    load_checkpoint, Checkpoint, Stage1Data, Stage1Trainer, Stage2Data, Stage2Trainer, StepLog, SyntheticMonoplex,
    TrainConfig, CHECKPOINT_FILE, LOG_FILE,
};
use auxstain::Scalar;
use serde::{Deserialize, Serialize};

use crate::run_manifest::RunRecorder;
use crate::{Dtype, EvaluateArgs, GenDataArgs, PlotArgs, TrainArgs, TranslateArgs, UsageError};

pub const FIGURE_FILE: &str = "cumulative_histograms.svg";
pub const METRICS_FILE: &str = "metrics.json";
pub const SB_FILE: &str = "sb.json";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    phantom: PhantomConfig,
    counts: CorpusCounts,
}

fn read_toml<C: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn gen_data(a: GenDataArgs, single_thread: bool) -> Result<()> {
    let mut cfg: GenDataConfig = read_toml(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.phantom.seed = seed;
    }
    cfg.phantom.validate().map_err(|e| usage(e.to_string()))?;
    let mut rec = RunRecorder::start("gen-data", &a.out, single_thread);
    rec.config(&cfg)?;
    rec.seed(cfg.phantom.seed);
    if let Some(p) = &a.config {
        rec.input(p);
    }
    let manifest = export_corpus(&cfg.phantom, &a.out, &cfg.counts)?;
    for r in &manifest.records {
        rec.artifact(&a.out.join(&r.path))?;
    }
    rec.artifact(&a.out.join(MANIFEST_FILE))?;
    rec.finish()?;
    eprintln!("wrote {} files to {}", manifest.records.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs, single_thread: bool) -> Result<()> {
    let mut cfg: TrainConfig = read_toml(a.config.as_deref())?;
    cfg.stage = a.stage;
    cfg.out_dir = a.out.clone();
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.stage == 2 && a.stage1_ckpt.is_none() && a.resume.is_none() {
        return Err(usage("stage 2 needs --stage1-ckpt (or --resume with a stage-2 checkpoint)"));
    }
    match a.dtype {
        Dtype::F32 => train_typed::<f32>(&a, &cfg, single_thread),
        Dtype::F64 => train_typed::<f64>(&a, &cfg, single_thread),
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn progress(every: usize) -> impl FnMut(&StepLog) {
    move |r: &StepLog| {
        if every > 0 && r.step.is_multiple_of(every as u64) {
            let terms: Vec<String> = r.generator.terms.iter().map(|(k, t)| format!("{k} {:.4}", t.value)).collect();
            eprintln!("{} step {}: total {:.4} ({})", r.stage, r.step, r.generator.total, terms.join(", "));
        }
    }
}

fn train_typed<T: Scalar>(a: &TrainArgs, cfg: &TrainConfig, single_thread: bool) -> Result<()> {
    let stage_dir = cfg.stage_dir()?;
    let mut rec = RunRecorder::start("train", &stage_dir, single_thread);
    rec.config(cfg)?;
    rec.seed(cfg.seed);
    rec.input(&a.data);
    let domain = |d| load_dataset(&a.data, d).with_context(|| format!("loading domain {d:?} from {}", a.data.display()));
    let resume = a.resume.as_deref().map(load_ckpt).transpose()?;
    if let Some(p) = &a.resume {
        rec.input(p);
    }
    let (ds_a, ds_b): (PatchDataset, PatchDataset) = (domain(Domain::A)?, domain(Domain::B)?);
    let mut observer = progress(a.log_every);
    let ckpt = if a.stage == 1 {
        let ds_c = domain(Domain::C)?;
        let mut t = match &resume {
            Some(c) => Stage1Trainer::<T>::resume(cfg, c)?,
            None => Stage1Trainer::<T>::new(cfg)?,
        };
        t.run(Stage1Data { a: &ds_a, b: &ds_b, c: &ds_c }, &mut observer)?
    } else {
        let mut t = match (&resume, &a.stage1_ckpt) {
            (Some(c), _) => Stage2Trainer::<T>::resume(cfg, c)?,
            (None, Some(p)) => {
                rec.input(p);
                Stage2Trainer::<T>::new(cfg, &load_ckpt(p)?)?
            }
            (None, None) => unreachable!("checked by the caller"),
        };
        t.run(Stage2Data { a: &ds_a, b: &ds_b }, &mut observer)?
    };
    let final_path = stage_dir.join(format!("step_{}", ckpt.step)).join(CHECKPOINT_FILE);
    rec.artifact(&final_path)?;
    rec.artifact(&stage_dir.join(LOG_FILE))?;
    rec.finish()?;
    eprintln!("{} finished at step {}: {}", ckpt.stage, ckpt.step, final_path.display());
    Ok(())
}

fn check_distinct(input: &Path, out: &Path) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if canon(input) == canon(out) {
        return Err(usage("output directory must differ from the input directory"));
    }
    Ok(())
}

pub fn translate(a: TranslateArgs, single_thread: bool) -> Result<()> {
    check_distinct(&a.input, &a.out)?;
    let ckpt = load_ckpt(&a.ckpt)?;
    match ckpt.dtype.as_str() {
        "f32" => translate_typed::<f32>(&a, &ckpt, single_thread),
        "f64" => translate_typed::<f64>(&a, &ckpt, single_thread),
        other => bail!("unsupported checkpoint dtype {other}"),
    }
}

fn translate_typed<T: Scalar>(a: &TranslateArgs, ckpt: &Checkpoint, single_thread: bool) -> Result<()> {
    let g_ab = ckpt.generator::<T>("g_ab").context("translate needs a stage-2 checkpoint")?;
    let mut rec = RunRecorder::start("translate", &a.out, single_thread);
    rec.config(&ckpt.config)?;
    if let Some(seed) = a.seed {
        rec.seed(seed);
    }
    rec.input(&a.ckpt);
    rec.input(&a.input);
    let inputs = list_patch_pngs(&a.input)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if inputs.is_empty() {
        eprintln!("warning: no PNG patches in {}", a.input.display());
    }
    for path in &inputs {
        let patch = load_rgb_png::<T>(path)?;
        let out = g_ab.apply(std::slice::from_ref(&patch)).with_context(|| format!("translating {}", path.display()))?;
        let name = path.file_name().expect("listed files have names");
        let dest = a.out.join(name);
        save_rgb_png(&out[0], &dest)?;
        rec.artifact(&dest)?;
    }
    rec.finish()?;
    eprintln!("translated {} patches into {}", inputs.len(), a.out.display());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs, single_thread: bool) -> Result<()> {
    const KNOWN: [&str; 5] = ["identity", "proposed", "f_ab", "analytic", "oracle"];
    if a.methods.is_empty() {
        return Err(usage("--methods is empty"));
    }
    for m in &a.methods {
        if !KNOWN.contains(&m.as_str()) {
            return Err(usage(format!("unknown method `{m}`; expected one of {}", KNOWN.join(", "))));
        }
    }
    let needs_ckpt = a.methods.iter().any(|m| m == "proposed" || m == "f_ab");
    if needs_ckpt && a.ckpt.is_none() {
        return Err(usage("methods `proposed` and `f_ab` need --ckpt"));
    }
    let ckpt = a.ckpt.as_deref().map(load_ckpt).transpose()?;
    match ckpt.as_ref().map(|c| c.dtype.as_str()).unwrap_or("f32") {
        "f32" => evaluate_typed::<f32>(&a, ckpt.as_ref(), single_thread),
        "f64" => evaluate_typed::<f64>(&a, ckpt.as_ref(), single_thread),
        other => bail!("unsupported checkpoint dtype {other}"),
    }
}

fn evaluate_typed<T: Scalar>(a: &EvaluateArgs, ckpt: Option<&Checkpoint>, single_thread: bool) -> Result<()> {
    let mut sb_cfg: SurrogateConfig = read_toml(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        sb_cfg.seed = seed;
    }
    let mut rec = RunRecorder::start("evaluate", &a.out, single_thread);
    rec.config(&serde_json::json!({ "surrogate": sb_cfg, "methods": a.methods, "bins": a.bins }))?;
    rec.seed(sb_cfg.seed);
    rec.input(&a.data);
    let items = load_eval_split::<T>(&a.data).context("loading the eval split")?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let sb = match &a.sb_ckpt {
        Some(p) => {
            rec.input(p);
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let record: PosteriorModelRecord = serde_json::from_str(&text)?;
            if record.dtype != T::NAME {
                bail!("posterior model holds {} parameters, expected {}", record.dtype, T::NAME);
            }
            PosteriorModel::<T>::from_record(&record)?
        }
        None => {
            let seg = load_segmentation_split::<T>(&a.data).context("loading the segmentation split")?;
            eprintln!("training the posterior model on {} segmentation patches", seg.len());
            let sb = train_surrogate_sb(&seg, &sb_cfg)?;
            let path = a.out.join(SB_FILE);
            fs::write(&path, serde_json::to_string(&sb.record())?)?;
            rec.artifact(&path)?;
            sb
        }
    };

    let stage2 = ckpt.map(|c| -> Result<_> {
        c.check_stage("stage2").context("--ckpt must be a stage-2 checkpoint")?;
        Ok((c.generator::<T>("g_ab")?, c.generator::<T>("g_ac")?, c.generator::<T>("g_ca")?, c.config.clone()))
    });
    let stage2 = stage2.transpose()?;
    let train_cfg = stage2.as_ref().map(|s| s.3.clone()).unwrap_or_default();
    let matrix: StainMatrix<T> = train_cfg.matrix()?;
    let deconv = DeconvolutionTransform { matrix: matrix.clone() };
    let recon = ReconstructionTransform { matrix };
    let analytic = SyntheticMonoplex { g_ac: &deconv, g_ca: &recon, alpha: train_cfg.restain_coefficients()? };
    let synthetic = stage2.as_ref().map(|s| -> Result<_> {
        Ok(SyntheticMonoplex { g_ac: &s.1, g_ca: &s.2, alpha: s.3.restain_coefficients()? })
    });
    let synthetic = synthetic.transpose()?;

    let mut methods: Vec<(String, Method<'_, T>)> = Vec::new();
    for name in &a.methods {
        let m = match name.as_str() {
            "identity" => Method::Transform(&IdentityTransform as &dyn ImageTransform<T>),
            "proposed" => Method::Transform(&stage2.as_ref().expect("checked").0 as &dyn ImageTransform<T>),
            "f_ab" => Method::Transform(synthetic.as_ref().expect("checked") as &dyn ImageTransform<T>),
            "analytic" => Method::Transform(&analytic as &dyn ImageTransform<T>),
            "oracle" => Method::Oracle,
            _ => unreachable!("validated above"),
        };
        methods.push((name.clone(), m));
    }
    let report = evaluate_methods(&items, &methods, &sb, a.bins)?;
    let metrics = a.out.join(METRICS_FILE);
    fs::write(&metrics, report.to_json()?)?;
    let figure = a.out.join(FIGURE_FILE);
    fs::write(&figure, render_svg(&report))?;
    rec.artifact(&metrics)?;
    rec.artifact(&figure)?;
    rec.finish()?;
    for m in &report.methods {
        let tag = if m.oracle { " (oracle)" } else { "" };
        eprintln!(
            "{}{tag}: nucleus 1-AUC {:.5}, background 1-AUC {:.5}, harmonic mean {:.5}",
            m.name, m.nucleus_inv_auc, m.background_inv_auc, m.harmonic_mean
        );
    }
    Ok(())
}

pub fn plot(a: PlotArgs, single_thread: bool) -> Result<()> {
    let text = fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let report = MetricsReport::from_json(&text).with_context(|| format!("parsing {}", a.report.display()))?;
    let mut rec = RunRecorder::start("plot", &a.out, single_thread);
    if let Some(seed) = a.seed {
        rec.seed(seed);
    }
    rec.input(&a.report);
    if let Some(p) = &a.config {
        rec.input(p);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let figure: PathBuf = a.out.join(FIGURE_FILE);
    fs::write(&figure, render_svg(&report))?;
    rec.artifact(&figure)?;
    rec.finish()?;
    Ok(())
}
