use std::path::Path;

use super::*;
use crate::data_io::{load_dataset, Domain, PatchDataset};
use crate::networks::{DeconvolutionTransform, Generator, ReconstructionTransform};
use crate::phantom::{
    export_corpus, generate_scene, render_rgb, render_stains, CorpusCounts, PhantomConfig, RenderStyle, StainStyle,
};
use crate::stain_space::StainImage;

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
    a: PatchDataset,
    b: PatchDataset,
    c: PatchDataset,
}

fn corpus(n: usize) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let cfg = PhantomConfig { patch_size: 32, nuclei: (2, 3), ..Default::default() };
    let counts = CorpusCounts { duplex: n, monoplex: n, fluorescence: n, eval: 0, segmentation: 0, labeled: n / 2 };
    export_corpus(&cfg, &root, &counts).unwrap();
    let a = load_dataset(&root, Domain::A).unwrap();
    let b = load_dataset(&root, Domain::B).unwrap();
    let c = load_dataset(&root, Domain::C).unwrap();
    Corpus { _dir: dir, root, a, b, c }
}

fn tiny_config(out: &Path) -> TrainConfig {
    TrainConfig {
        steps: 4,
        batch_size: 2,
        generator: GeneratorSpec { base_width: 8, levels: 1, residual_blocks: 1, ..Default::default() },
        discriminator: DiscriminatorSpec { base_width: 8, blocks: 2, ..Default::default() },
        checkpoint_interval: 2,
        sampling: SamplingConfig { labeled_fraction: Some(0.5), flips: true },
        out_dir: out.to_path_buf(),
        ..Default::default()
    }
}

fn stage1_data(c: &Corpus) -> Stage1Data<'_> {
    Stage1Data { a: &c.a, b: &c.b, c: &c.c }
}

fn params_of(g: &Generator<f64>) -> Vec<f64> {
    g.network().params().iter_scalars().collect()
}

#[test]
fn config_defaults_and_toml_round_trip() {
    let cfg = TrainConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.alpha, [[1.0, 0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
    assert_eq!((cfg.beta1, cfg.beta2, cfg.lr_generator), (0.5, 0.999, 2e-4));
    let text = cfg.to_toml().unwrap();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    let partial = TrainConfig::from_toml("stage = 2\nsteps = 7\n[weights]\nlambda_guidance = 3.0\n").unwrap();
    assert_eq!((partial.stage, partial.steps, partial.weights.lambda_guidance), (2, 7, 3.0));
    assert_eq!(partial.weights.lambda_cycle, 10.0);
}

#[test]
fn config_rejects_bad_values() {
    assert!(TrainConfig::from_toml("unknown_key = 1").is_err());
    for bad in [
        TrainConfig { stage: 3, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { lr_generator: -1.0, ..Default::default() },
        TrainConfig { lr_discriminator: f64::NAN, ..Default::default() },
        TrainConfig { beta2: 1.0, ..Default::default() },
        TrainConfig { stain_matrix: Some([[0.0; 3]; 3]), ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_)) | Err(Error::InvalidParameter { .. }) | Err(_)));
    }
    let mut w = TrainConfig::default();
    w.weights.lambda_cycle = -1.0;
    assert!(w.validate().is_err());
}

fn phantom_duplex(index: u64) -> (RgbPatch<f64>, RgbPatch<f64>) {
    let cfg = PhantomConfig { patch_size: 64, ..Default::default() };
    let scene = generate_scene(&cfg, index).unwrap();
    let m = StainMatrix::<f64>::default();
    let mut rng = crate::phantom::noise_rng(0, index);
    let duplex = render_rgb(&render_stains(&scene, StainStyle::Duplex), &m, RenderStyle::Brightfield, 0.0, &mut rng);
    let mono = render_rgb(&render_stains(&scene, StainStyle::Monoplex), &m, RenderStyle::Brightfield, 0.0, &mut rng);
    (duplex.unwrap(), mono.unwrap())
}

#[test]
fn f_ab_with_inverse_pair_and_identity_alpha_is_identity() {
    let m = StainMatrix::<f64>::default();
    let g_ac = DeconvolutionTransform { matrix: m.clone() };
    let g_ca = ReconstructionTransform { matrix: m };
    // concentrations inside [0, 1] so the fluorescence view is not clipped
    let hed: Vec<f64> = (0..16 * 16 * 3).map(|i| 0.45 + 0.4 * (i as f64 * 0.37).sin()).collect();
    let x = crate::stain_space::reconstruct(&StainImage::new(16, 16, hed).unwrap(), &g_ca.matrix);
    let out = compute_f_ab(&[x.clone()], &g_ac, &g_ca, &RestainCoefficients::identity()).unwrap();
    let err = out[0].as_slice().iter().zip(x.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "max error {err}");
}

#[test]
fn f_ab_with_zero_alpha_is_g_ca_of_zero() {
    let m = StainMatrix::<f64>::default();
    let g_ac = DeconvolutionTransform { matrix: m.clone() };
    let g_ca = ReconstructionTransform { matrix: m };
    let (x, _) = phantom_duplex(1);
    let out = compute_f_ab(&[x], &g_ac, &g_ca, &RestainCoefficients::zeros()).unwrap();
    let zero = StainImage::<f64>::zeros(64, 64).unwrap().to_fluorescence();
    let want = g_ca.apply(&[zero]).unwrap();
    assert_eq!(out, want);
    assert!(out[0].as_slice().iter().all(|v| (*v - 1.0).abs() < 1e-12));
}

#[test]
fn f_ab_with_analytic_doubles_matches_monoplex_rendering() {
    let m = StainMatrix::<f64>::default();
    let g_ac = DeconvolutionTransform { matrix: m.clone() };
    let g_ca = ReconstructionTransform { matrix: m };
    for index in 0..4 {
        let (duplex, mono) = phantom_duplex(index);
        let out = compute_f_ab(&[duplex], &g_ac, &g_ca, &RestainCoefficients::default()).unwrap();
        let l1 = out[0].as_slice().iter().zip(mono.as_slice()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / mono.as_slice().len() as f64;
        assert!(l1 < 2.0 / 255.0, "scene {index}: mean L1 {l1}");
    }
}

#[test]
fn stage1_zero_steps_checkpoint_is_initialisation() {
    let c = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { steps: 0, ..tiny_config(out.path()) };
    let fresh = Stage1Trainer::<f64>::new(&cfg).unwrap().checkpoint();
    let ckpt = train_stage1::<f64>(&cfg, stage1_data(&c), None).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.networks, fresh.networks);
    assert!(out.path().join("stage1/step_0").join(CHECKPOINT_FILE).is_file());
}

#[test]
fn stage1_zero_learning_rate_leaves_parameters_unchanged() {
    let c = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { steps: 100, lr_generator: 0.0, lr_discriminator: 0.0, batch_size: 1, ..tiny_config(out.path()) };
    let mut t = Stage1Trainer::<f64>::new(&cfg).unwrap();
    let before = t.checkpoint();
    let after = t.run(stage1_data(&c), &mut |_| {}).unwrap();
    assert_eq!(after.step, 100);
    assert_eq!(after.networks, before.networks);
}

#[test]
fn stage1_logs_every_term_and_checkpoints_on_interval() {
    let c = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(out.path());
    let mut seen = Vec::new();
    let ckpt = Stage1Trainer::<f64>::new(&cfg).unwrap().run(stage1_data(&c), &mut |r| seen.push(r.step)).unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4]);
    assert_eq!(ckpt.step, 4);
    for s in [2, 4] {
        assert!(out.path().join(format!("stage1/step_{s}")).join(CHECKPOINT_FILE).is_file());
    }
    assert!(!out.path().join("stage1/step_1").exists());
    let log = read_log(&out.path().join("stage1").join(LOG_FILE)).unwrap();
    assert_eq!(log.len(), 4);
    for rec in &log {
        for name in ["adversarial", "cycle", "stain_guidance", "eosin_absence"] {
            assert!(rec.term(name).unwrap().is_finite());
        }
        let weighted: f64 = rec.generator.terms.values().map(|t| t.value * t.weight).sum();
        assert!((weighted - rec.generator.total).abs() < 1e-9);
        assert!(rec.discriminators.contains_key("d_a") && rec.discriminators.contains_key("d_c"));
    }
    // half the A patches are labelled and drawn half the time: some batch sees a mask
    assert!(log.iter().any(|r| r.term("sup_e").is_some() || r.term("sup_d").is_some()));
}

#[test]
fn stage1_is_deterministic_for_equal_seeds() {
    let c = corpus(6);
    let run = |seed| {
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { seed, ..tiny_config(out.path()) };
        let mut logs = Vec::new();
        Stage1Trainer::<f64>::new(&cfg).unwrap().run(stage1_data(&c), &mut |r| logs.push(r.clone())).unwrap();
        logs
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn stage1_resume_matches_uninterrupted_run() {
    let c = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(out.path());
    let mut full = Vec::new();
    Stage1Trainer::<f64>::new(&cfg).unwrap().run(stage1_data(&c), &mut |r| full.push(r.clone())).unwrap();

    let out2 = tempfile::tempdir().unwrap();
    let short = TrainConfig { steps: 2, ..tiny_config(out2.path()) };
    train_stage1::<f64>(&short, stage1_data(&c), None).unwrap();
    let ckpt = load_checkpoint(&out2.path().join("stage1/step_2")).unwrap();
    let long = TrainConfig { steps: 4, ..tiny_config(out2.path()) };
    let mut resumed = Stage1Trainer::<f64>::resume(&long, &ckpt).unwrap();
    assert_eq!(resumed.step_index(), 2);
    let mut tail = Vec::new();
    resumed.run(stage1_data(&c), &mut |r| tail.push(r.clone())).unwrap();
    assert_eq!(tail, full[2..].to_vec());
    let log = read_log(&out2.path().join("stage1").join(LOG_FILE)).unwrap();
    assert_eq!(log, full);
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let c = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { steps: 2, ..tiny_config(out.path()) };
    let ckpt = train_stage1::<f32>(&cfg, stage1_data(&c), None).unwrap();
    let path = out.path().join("stage1/step_2").join(CHECKPOINT_FILE);
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let probe: Vec<RgbPatch<f32>> = (0..3).map(|i| c.a.patch(i)).collect();
    let g1: Generator<f32> = ckpt.generator("g_ac").unwrap();
    let g2: Generator<f32> = loaded.generator("g_ac").unwrap();
    assert_eq!(g1.apply(&probe).unwrap(), g2.apply(&probe).unwrap());
    assert!(loaded.generator::<f64>("g_ac").is_err());
    assert!(loaded.generator::<f32>("d_a").is_err());
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let ckpt = Stage1Trainer::<f64>::new(&tiny_config(&out)).unwrap().checkpoint();
    let path = save_checkpoint(&ckpt, dir.path()).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    value["version"] = serde_json::json!(CHECKPOINT_VERSION + 1);
    std::fs::write(&path, value.to_string()).unwrap();
    match load_checkpoint(&path) {
        Err(Error::CheckpointVersion { found, expected }) => {
            assert_eq!((found, expected), (CHECKPOINT_VERSION + 1, CHECKPOINT_VERSION))
        }
        other => panic!("expected a version error, got {other:?}"),
    }
    std::fs::write(&path, "{\"version\": 1, \"stage\": ").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
    std::fs::write(&path, "{\"version\": 1}").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn rng_state_round_trip() {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    rng.set_stream(3);
    for _ in 0..17 {
        rng.next_u32();
    }
    let mut back = RngState::capture(&rng).restore().unwrap();
    for _ in 0..50 {
        assert_eq!(rng.next_u64(), back.next_u64());
    }
    let bad = RngState { seed: "zz".into(), stream: 0, word_pos: "0".into() };
    assert!(bad.restore().is_err());
}

fn stage1_checkpoint(c: &Corpus, out: &Path) -> Checkpoint {
    let cfg = TrainConfig { steps: 2, ..tiny_config(out) };
    train_stage1::<f64>(&cfg, stage1_data(c), None).unwrap()
}

#[test]
fn stage2_never_touches_stage1_parameters() {
    let c = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let s1 = stage1_checkpoint(&c, out.path());
    let cfg = TrainConfig { stage: 2, steps: 5, ..tiny_config(out.path()) };
    let mut t = Stage2Trainer::<f64>::new(&cfg, &s1).unwrap();
    let g_ab0 = params_of(t.g_ab());
    let ckpt = t.run(Stage2Data { a: &c.a, b: &c.b }, &mut |_| {}).unwrap();
    assert_eq!(ckpt.networks["g_ac"], s1.networks["g_ac"]);
    assert_eq!(ckpt.networks["g_ca"], s1.networks["g_ca"]);
    assert_ne!(params_of(t.g_ab()), g_ab0);
    let log = read_log(&out.path().join("stage2").join(LOG_FILE)).unwrap();
    assert_eq!(log.len(), 5);
    assert!(log.iter().all(|r| r.term("guidance").is_some() && r.term("adversarial").is_some()));
}

#[test]
fn stage2_zero_steps_and_stage_checks() {
    let c = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let s1 = stage1_checkpoint(&c, out.path());
    let cfg = TrainConfig { stage: 2, steps: 0, ..tiny_config(out.path()) };
    let fresh = Stage2Trainer::<f64>::new(&cfg, &s1).unwrap().checkpoint();
    let ckpt = train_stage2::<f64>(&cfg, Stage2Data { a: &c.a, b: &c.b }, &s1, None).unwrap();
    assert_eq!(ckpt.networks["g_ab"], fresh.networks["g_ab"]);
    assert!(Stage2Trainer::<f64>::new(&cfg, &ckpt).is_err());
    assert!(Stage1Trainer::<f64>::resume(&cfg, &ckpt).is_err());
}

#[test]
fn stage2_resume_matches_uninterrupted_run() {
    let c = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let s1 = stage1_checkpoint(&c, out.path());
    let data = Stage2Data { a: &c.a, b: &c.b };
    let cfg = TrainConfig { stage: 2, steps: 4, ..tiny_config(out.path()) };
    let mut full = Vec::new();
    Stage2Trainer::<f64>::new(&cfg, &s1).unwrap().run(data, &mut |r| full.push(r.clone())).unwrap();
    let mid = load_checkpoint(&out.path().join("stage2/step_2")).unwrap();
    let mut tail = Vec::new();
    Stage2Trainer::<f64>::resume(&cfg, &mid).unwrap().run(data, &mut |r| tail.push(r.clone())).unwrap();
    assert_eq!(tail, full[2..].to_vec());
}

#[test]
fn stage2_guidance_only_is_monotone_on_a_fixed_batch() {
    let c = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let s1 = stage1_checkpoint(&c, out.path());
    // a single-patch dataset pins the batch
    let one_a = single_patch_dataset(&c.root, out.path());
    let mut cfg = TrainConfig { stage: 2, steps: 100, batch_size: 1, lr_generator: 1e-5, ..tiny_config(out.path()) };
    cfg.weights.lambda_adversarial = 0.0;
    cfg.sampling.flips = false;
    let mut t = Stage2Trainer::<f64>::new(&cfg, &s1).unwrap();
    let mut losses = Vec::new();
    t.run(Stage2Data { a: &one_a, b: &c.b }, &mut |r| losses.push(r.term("guidance").unwrap())).unwrap();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "guidance rose: {} -> {} in {losses:?}", w[0], w[1]);
    }
    assert!(losses[99] < losses[0]);
}

fn single_patch_dataset(root: &Path, scratch: &Path) -> PatchDataset {
    let dir = scratch.join("single_a");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::copy(root.join("train/A/a_000000.png"), dir.join("a_000000.png")).unwrap();
    load_dataset(&dir, Domain::A).unwrap()
}

#[test]
fn divergence_guard_reports_step() {
    let report = LossReport { terms: Default::default(), total: f64::NAN };
    assert!(matches!(check_total(7, &report), Err(Error::Diverged { step: 7, .. })));
    let ok = LossReport { terms: Default::default(), total: 1.0 };
    assert!(check_total(7, &ok).is_ok());
}

#[test]
fn stage1_rejects_empty_or_mismatched_data() {
    let c = corpus(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig { patch_size: 48, nuclei: (2, 3), ..Default::default() };
    let counts = CorpusCounts { duplex: 2, monoplex: 2, fluorescence: 2, eval: 0, segmentation: 0, labeled: 0 };
    export_corpus(&cfg, dir.path(), &counts).unwrap();
    let other_c = load_dataset(dir.path(), Domain::C).unwrap();
    let mut t = Stage1Trainer::<f64>::new(&tiny_config(dir.path())).unwrap();
    let bad = Stage1Data { a: &c.a, b: &c.b, c: &other_c };
    assert!(matches!(t.step(bad), Err(Error::ShapeMismatch(_))));
    assert_eq!(t.step_index(), 0);
}
