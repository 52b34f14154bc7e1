//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any fails.

use std::f64::consts::PI;
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use avqf_core::audio::{mel_spectrogram, waveform_to_clips, MelConfig, Waveform};
use avqf_core::model::{Media, Model, ModelConfig};
use avqf_core::params::ParamStore;
use avqf_core::qformer::{Branch, Modality};
use avqf_core::synth::{scenes, SceneKind, SyntheticScene, ToneScene, Contour};
use avqf_core::{RngState, Tape};
use avqformer::chat::{run_repl, ChatSession};
use avqformer::checkpoint::CheckpointBundle;
use avqformer::dataset::{load_media_file, synth_generate, SynthOptions, SynthOutput};
use avqformer::manifest::{load_manifest, MediaModality, ManifestRecord, RecordBody};
use avqformer::pipeline::{
    build_fixture, entry_bytes, finetune_stage, gradcheck, load_model, prepare_examples, pretrain_stage, BranchKind,
    FixtureConfig, Stage, TrainConfig, FROZEN_PREFIXES,
};
use avqformer::{avvf, sig6};

// Tolerances and budgets.
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_SAMPLES_PER_TENSOR: usize = 32;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const PARAM_BUDGET: usize = 50_000;
const FREEZE_STEPS: usize = 50;
const NS: [usize; 5] = [1, 2, 4, 8, 16];
const MS: [usize; 3] = [1, 2, 4];
const NEUTRAL_TOL: f64 = 1e-5;
const SENSITIVE_MIN: f64 = 1e-3;
const PERMUTATIONS: usize = 10;
const OVERFIT_PAIRS: usize = 16;
const OVERFIT_STEPS: usize = 1000;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_LOSS: f64 = 0.1;
const OVERFIT_EXACT: usize = 14;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const MEL_ROWS: usize = 128;
const MEL_AGREEMENT: f64 = 0.95;
const AUDIO_STEPS: usize = 500;
const AUDIO_REDUCTION: f64 = 0.5;
const RUNNING_WINDOW: usize = 20;
const FINETUNE_STEPS: usize = 500;
const FINETUNE_LOSS: f64 = 0.2;
const BATCH: usize = 8;
const LM_FIXTURE_STEPS: usize = 400;
const DATA_SEED: u64 = 1;
const MODEL_SEED: u64 = 0;

type Outcome = Result<String, String>;

struct Shared {
    _dir: tempfile::TempDir,
    root: PathBuf,
    fixture_path: PathBuf,
    fixture: CheckpointBundle,
    data: SynthOutput,
    stage1: PathBuf,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

fn train_cfg(branch: BranchKind, steps: usize, base: &Path, out: Option<PathBuf>) -> TrainConfig {
    TrainConfig {
        branch,
        steps,
        batch_size: BATCH,
        seed: DATA_SEED,
        log_every: usize::MAX,
        base: Some(base.to_path_buf()),
        out,
        ..TrainConfig::default()
    }
}

/// Per-token loss of every record under the checkpoint's parameters.
fn per_token_loss(bundle: &CheckpointBundle, records: &[ManifestRecord], root: &Path, stage: Stage) -> Result<f64, String> {
    let (model, store) = load_model(bundle).map_err(e)?;
    let examples = prepare_examples(&model, &store, records, root, stage, BranchKind::Vision, None).map_err(e)?;
    let (mut total, mut tokens) = (0.0, 0usize);
    for (_, ex) in &examples {
        let mut tape = Tape::new();
        let l = model.example_loss(&mut tape, &store, Modality::Video, ex).map_err(e)?;
        let n = ex.text.suffix.loss_mask.iter().filter(|&&m| m).count();
        total += tape.scalar(l).map_err(e)? as f64 * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::toy();
    let (_, mut store) = Model::new::<f32>(cfg, MODEL_SEED).map_err(e)?;
    let mut sizes = Vec::new();
    for m in [Modality::Video, Modality::Audio] {
        store.set_trainable(|n| Branch::owns(m, n));
        sizes.push(store.trainable_count());
    }
    let results = gradcheck(cfg, MODEL_SEED, GRAD_STEP, GRAD_SAMPLES_PER_TENSOR).map_err(e)?;
    let elapsed = t.elapsed();
    let parts: Vec<String> = results
        .iter()
        .map(|r| format!("{} max_rel_err={} ({} coords / {} tensors)", r.branch.as_str(), sig6(r.report.max_rel_err), r.report.checked, r.report.tensors))
        .collect();
    let ok = results.len() == 2
        && results.iter().all(|r| r.report.max_rel_err <= GRAD_TOL)
        && sizes.iter().all(|&s| s <= PARAM_BUDGET)
        && elapsed <= GRAD_BUDGET;
    check(ok, format!("{}; trainable params {:?}", parts.join(", "), sizes))
}

fn criterion_2(sh: &Shared) -> Outcome {
    let frozen = entry_bytes(&sh.fixture, &FROZEN_PREFIXES);
    let s1 = sh.root.join("freeze-s1.avqf");
    let s2 = sh.root.join("freeze-s2.avqf");
    let a1 = sh.root.join("freeze-audio.avqf");
    let sink = &mut std::io::sink();
    pretrain_stage(&train_cfg(BranchKind::Vision, FREEZE_STEPS, &sh.fixture_path, Some(s1.clone())), &sh.data.captions, sink).map_err(e)?;
    finetune_stage(&train_cfg(BranchKind::Vision, FREEZE_STEPS, &s1, Some(s2.clone())), &sh.data.instructions, sink).map_err(e)?;
    pretrain_stage(&train_cfg(BranchKind::Audio, FREEZE_STEPS, &sh.fixture_path, Some(a1.clone())), &sh.data.captions, sink).map_err(e)?;
    let mut report = Vec::new();
    let mut ok = !frozen.is_empty();
    for (label, path) in [("stage1", &s1), ("stage2", &s2), ("audio-stage1", &a1)] {
        let after = entry_bytes(&CheckpointBundle::load(path).map_err(e)?, &FROZEN_PREFIXES);
        let same = after == frozen;
        ok &= same;
        report.push(format!("{label}: {}", if same { "identical" } else { "CHANGED" }));
    }
    check(ok, format!("{} frozen entries after {FREEZE_STEPS} steps; {}", frozen.len(), report.join(", ")))
}

fn criterion_3() -> Outcome {
    let mut checked = 0;
    for cfg in [ModelConfig::toy(), ModelConfig::default()] {
        let (model, store) = Model::new::<f32>(cfg, MODEL_SEED).map_err(e)?;
        let d = cfg.lm.d_llm;
        let SyntheticScene::Visual(scene) = scenes(2, 1, SceneKind::Video)[0] else { unreachable!() };
        for n in NS {
            let frames = scene.render(n, cfg.image.frame_size).map_err(e)?;
            let seg = model.segment(&store, Modality::Video, &Media::Frames(frames)).map_err(e)?;
            if seg.vectors.shape() != [cfg.video_qformer.num_queries, d] {
                return Err(format!("video N={n}: {:?}", seg.vectors.shape()));
            }
            checked += 1;
        }
        let tone = ToneScene { base_hz: 500.0, contour: Contour::Rising }.render(4.0, cfg.mel.sample_rate).map_err(e)?;
        for m in MS {
            let clips = waveform_to_clips(&tone, m, &cfg.mel).map_err(e)?;
            let seg = model.segment(&store, Modality::Audio, &Media::Clips(clips)).map_err(e)?;
            if seg.vectors.shape() != [cfg.audio_qformer.num_queries, d] {
                return Err(format!("audio M={m}: {:?}", seg.vectors.shape()));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} shapes exact (toy and default presets, N in {NS:?}, M in {MS:?})"))
}

fn criterion_4(sh: &Shared) -> Outcome {
    let cfg = ModelConfig::toy();
    let (model, store) = load_model(&sh.fixture).map_err(e)?;
    let dir = sh.root.join("images");
    let out = synth_generate(&SynthOptions::for_model(&cfg, DATA_SEED, 6, MediaModality::Image), &dir).map_err(e)?;
    let mut compared = 0;
    for rec in &out.caption_records {
        let img_path = dir.join(&rec.media_path);
        let as_image = load_media_file(&img_path, MediaModality::Image, &cfg).map_err(e)?;
        let vid_path = dir.join(format!("{}-as-video.avvf", rec.id));
        avvf::save(&vid_path, &avvf::load(&img_path).map_err(e)?).map_err(e)?;
        let as_video = load_media_file(&vid_path, MediaModality::Video, &cfg).map_err(e)?;
        let a = model.segment(&store, Modality::Video, &as_image).map_err(e)?;
        let b = model.segment(&store, Modality::Video, &as_video).map_err(e)?;
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(a.vectors.data()) != bits(b.vectors.data()) {
            return Err(format!("{}: image and one-frame video outputs differ", rec.id));
        }
        compared += 1;
    }
    Ok(format!("{compared} images bitwise equal to their one-frame videos"))
}

fn criterion_5() -> Outcome {
    let cfg = ModelConfig::toy();
    let (model, mut store) = Model::new::<f64>(cfg, MODEL_SEED).map_err(e)?;
    let SyntheticScene::Visual(scene) = scenes(5, 1, SceneKind::Video)
        .into_iter()
        .chain(scenes(6, 30, SceneKind::Video))
        .find(|s| matches!(s, SyntheticScene::Visual(v) if v.motion.is_some_and(|m| m != avqf_core::synth::Motion::Static)))
        .unwrap()
    else {
        unreachable!()
    };
    let frames = scene.render(cfg.video_frames, cfg.image.frame_size).map_err(e)?;
    let mut rng = RngState::new(17);
    let perms: Vec<Vec<usize>> = (0..PERMUTATIONS)
        .map(|_| loop {
            let mut p: Vec<usize> = (0..frames.len()).collect();
            rng.shuffle(&mut p);
            if p.iter().enumerate().any(|(i, &j)| i != j) {
                break p;
            }
        })
        .collect();
    let diffs = |store: &ParamStore<f64>| -> Result<Vec<f64>, String> {
        let base = model.segment(store, Modality::Video, &Media::Frames(frames.clone())).map_err(e)?;
        perms
            .iter()
            .map(|p| {
                let shuffled = p.iter().map(|&i| frames[i].clone()).collect();
                let s = model.segment(store, Modality::Video, &Media::Frames(shuffled)).map_err(e)?;
                Ok(base.vectors.max_abs_diff(&s.vectors))
            })
            .collect()
    };
    let random = diffs(&store)?;
    let id = store.id("video_pos.table").map_err(e)?;
    store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    let zero = diffs(&store)?;
    let zero_max = zero.iter().copied().fold(0.0, f64::max);
    let sensitive = random.iter().filter(|&&d| d >= SENSITIVE_MIN).count();
    check(
        zero_max <= NEUTRAL_TOL && sensitive >= 1,
        format!("zero table max diff {}; random table: {sensitive}/{PERMUTATIONS} permutations ≥ {SENSITIVE_MIN} (max {})", sig6(zero_max), sig6(random.iter().copied().fold(0.0, f64::max))),
    )
}

fn criterion_6(sh: &Shared) -> Outcome {
    let t = Instant::now();
    let cfg = train_cfg(BranchKind::Vision, OVERFIT_STEPS, &sh.fixture_path, Some(sh.stage1.clone()));
    let outcome = pretrain_stage(&cfg, &sh.data.captions, &mut std::io::sink()).map_err(e)?;
    let train_time = t.elapsed();
    let records = load_manifest(&sh.data.captions).map_err(e)?;
    let loss = per_token_loss(&outcome.bundle, &records, &sh.root.join("data"), Stage::Pretrain)?;
    let (model, store) = load_model(&outcome.bundle).map_err(e)?;
    let mut exact = 0;
    for rec in &records {
        let media = load_media_file(&sh.root.join("data").join(&rec.media_path), rec.modality, &model.cfg).map_err(e)?;
        let got = avqformer::pipeline::describe(&model, &store, &[(Modality::Video, &media)], 64).map_err(e)?;
        exact += usize::from(Some(got.as_str()) == rec.caption());
    }
    check(
        loss <= OVERFIT_LOSS && exact >= OVERFIT_EXACT && OVERFIT_STEPS <= OVERFIT_MAX_STEPS && t.elapsed() <= OVERFIT_BUDGET,
        format!(
            "{OVERFIT_PAIRS} pairs, {OVERFIT_STEPS} steps: loss {} nats/token, {exact}/{} captions exact; train {:.1}s, total {:.1}s",
            sig6(loss),
            records.len(),
            train_time.as_secs_f64(),
            t.elapsed().as_secs_f64()
        ),
    )
}

mod dft_oracle {
    use super::PI;

    fn mel(hz: f64) -> f64 {
        2595.0 * (1.0 + hz / 700.0).log10()
    }

    fn inv_mel(m: f64) -> f64 {
        700.0 * (10f64.powf(m / 2595.0) - 1.0)
    }

    /// Dominant HTK mel filter per frame from a direct DFT.
    pub fn dominant(x: &[f32], sr: f64, n_fft: usize, hop: usize, n_mels: usize) -> Vec<usize> {
        let top = mel(sr / 2.0);
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| inv_mel(top * i as f64 / (n_mels + 1) as f64)).collect();
        let window: Vec<f64> = (0..n_fft).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n_fft - 1) as f64).cos())).collect();
        let tri = |f: f64, m: usize| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            }
        };
        let mut out = Vec::new();
        let mut start = 0;
        while start + n_fft <= x.len() {
            let power: Vec<f64> = (0..=n_fft / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for i in 0..n_fft {
                        let a = -2.0 * PI * (k * i) as f64 / n_fft as f64;
                        let v = x[start + i] as f64 * window[i];
                        re += v * a.cos();
                        im += v * a.sin();
                    }
                    re * re + im * im
                })
                .collect();
            let energy: Vec<f64> = (0..n_mels)
                .map(|m| power.iter().enumerate().map(|(k, p)| p * tri(k as f64 * sr / n_fft as f64, m)).sum())
                .collect();
            out.push((0..n_mels).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap());
            start += hop;
        }
        out
    }
}

fn criterion_7() -> Outcome {
    let cfg = MelConfig::default();
    let n = cfg.segment_samples();
    let samples = (0..n).map(|i| (0.5 * (2.0 * PI * 440.0 * i as f64 / cfg.sample_rate as f64).sin()) as f32).collect();
    let w = Waveform::new(samples, cfg.sample_rate).map_err(e)?;
    let clip = mel_spectrogram(&w, &cfg).map_err(e)?;
    let want = dft_oracle::dominant(w.samples(), cfg.sample_rate as f64, cfg.n_fft, cfg.hop, cfg.n_mels);
    let agree = (0..clip.n_frames).filter(|&t| want.get(t) == Some(&clip.dominant_mel(t))).count();
    let frac = agree as f64 / clip.n_frames as f64;
    check(
        clip.n_mels == MEL_ROWS && want.len() == clip.n_frames && frac >= MEL_AGREEMENT,
        format!("{} mel rows; dominant filter agrees with DFT oracle on {agree}/{} frames", clip.n_mels, clip.n_frames),
    )
}

fn criterion_8(sh: &Shared) -> Outcome {
    let cfg = train_cfg(BranchKind::Audio, AUDIO_STEPS, &sh.fixture_path, None);
    let outcome = pretrain_stage(&cfg, &sh.data.captions, &mut std::io::sink()).map_err(e)?;
    let mut stray = Vec::new();
    let (mut moved, mut owned) = (0, 0);
    for (before, after) in sh.fixture.entries.iter().zip(&outcome.bundle.entries) {
        let is_audio = Branch::owns(Modality::Audio, &before.name);
        owned += usize::from(is_audio);
        if before.data != after.data {
            if is_audio {
                moved += 1;
            } else {
                stray.push(before.name.clone());
            }
        }
    }
    let (first, last) = outcome.running_loss(RUNNING_WINDOW);
    let reduction = 1.0 - last / first;
    check(
        stray.is_empty() && moved > 0 && reduction >= AUDIO_REDUCTION,
        format!(
            "{moved}/{owned} audio tensors updated, {} others changed {:?}; running loss {} -> {} ({}% lower)",
            stray.len(),
            stray,
            sig6(first),
            sig6(last),
            sig6(100.0 * reduction)
        ),
    )
}

fn criterion_9(sh: &Shared) -> Outcome {
    let out = sh.root.join("stage2.avqf");
    let cfg = train_cfg(BranchKind::Vision, FINETUNE_STEPS, &sh.stage1, Some(out));
    let outcome = finetune_stage(&cfg, &sh.data.instructions, &mut std::io::sink()).map_err(e)?;
    let records = load_manifest(&sh.data.instructions).map_err(e)?;
    let data = sh.root.join("data");
    let loss = per_token_loss(&outcome.bundle, &records, &data, Stage::Finetune)?;

    let (model, store) = load_model(&outcome.bundle).map_err(e)?;
    let mut verbatim = 0;
    for rec in &records {
        let RecordBody::Instruction { instruction, response } = &rec.body else { unreachable!() };
        let mut session = ChatSession::new(&model, &store);
        session.set_media(&data.join(&rec.media_path)).map_err(e)?;
        verbatim += usize::from(session.reply(instruction).map_err(e)? == *response);
    }

    let probe = &records[0];
    let RecordBody::Instruction { instruction, response } = &probe.body else { unreachable!() };
    let script = format!("/media {}\n{instruction}\n/quit\n", data.join(&probe.media_path).display());
    let mut session = ChatSession::new(&model, &store);
    let mut transcript = Vec::new();
    run_repl(&mut session, Cursor::new(script), &mut transcript).map_err(e)?;
    let transcript = String::from_utf8(transcript).map_err(e)?;
    let answer = transcript.lines().nth(1).unwrap_or_default().to_string();
    check(
        loss <= FINETUNE_LOSS && answer == *response,
        format!(
            "{FINETUNE_STEPS} steps: response loss {} nats/token; REPL {instruction:?} -> {answer:?}; {verbatim}/{} held-in pairs verbatim",
            sig6(loss),
            records.len()
        ),
    )
}

fn criterion_10() -> Outcome {
    let run = |dir: &Path| -> Result<Vec<u8>, String> {
        let d = |p: &str| dir.join(p).display().to_string();
        let cmds: [Vec<String>; 3] = [
            vec!["synth".into(), "--preset".into(), "toy".into(), "--n".into(), "8".into(), "--seed".into(), "3".into(), "--out".into(), d("data")],
            vec![
                "pretrain".into(), "--preset".into(), "toy".into(), "--lm-steps".into(), "40".into(), "--manifest".into(), d("data/manifest.jsonl"),
                "--base".into(), d("fixture.avqf"), "--out".into(), d("s1.avqf"), "--steps".into(), "60".into(), "--batch-size".into(), "4".into(), "--seed".into(), "3".into(),
            ],
            vec![
                "finetune".into(), "--manifest".into(), d("data/instructions.jsonl"), "--base".into(), d("s1.avqf"), "--out".into(), d("s2.avqf"),
                "--steps".into(), "60".into(), "--batch-size".into(), "4".into(), "--seed".into(), "3".into(),
            ],
        ];
        for c in cmds {
            let argv: Vec<String> = std::iter::once("avqformer".to_string()).chain(c).collect();
            let (mut out, mut err) = (Vec::new(), Vec::new());
            let code = avqformer::cli::run(&argv, &mut std::io::empty(), &mut out, &mut err);
            if code != 0 {
                return Err(format!("{:?} exited {code}: {}", argv, String::from_utf8_lossy(&err)));
            }
        }
        std::fs::read(dir.join("s2.avqf")).map_err(e)
    };
    let (a, b) = (tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?);
    let (x, y) = (run(a.path())?, run(b.path())?);
    check(x == y, format!("final checkpoints {} bytes each, {}", x.len(), if x == y { "bit-identical" } else { "DIFFERENT" }))
}

fn setup() -> Result<Shared, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let root = dir.path().to_path_buf();
    let cfg = ModelConfig::toy();
    let fixture = build_fixture(&FixtureConfig { lm_steps: LM_FIXTURE_STEPS, ..FixtureConfig::new(cfg, MODEL_SEED) }, &mut std::io::sink()).map_err(e)?;
    let fixture_path = root.join("fixture.avqf");
    fixture.save(&fixture_path).map_err(e)?;
    let data = synth_generate(&SynthOptions::for_model(&cfg, DATA_SEED, OVERFIT_PAIRS, MediaModality::Video), root.join("data")).map_err(e)?;
    let stage1 = root.join("stage1.avqf");
    Ok(Shared { _dir: dir, root, fixture_path, fixture, data, stage1 })
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this suite.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let t = Instant::now();
    let shared = setup();
    println!("setup: LM fixture ({LM_FIXTURE_STEPS} steps) and {OVERFIT_PAIRS}-video corpus in {:.1}s", t.elapsed().as_secs_f64());

    type Criterion<'a> = (usize, &'a str, Box<dyn Fn() -> Outcome + 'a>);
    let needs = |f: fn(&Shared) -> Outcome| {
        let sh = shared.as_ref();
        move || match sh {
            Ok(sh) => f(sh),
            Err(msg) => Err(format!("setup failed: {msg}")),
        }
    };
    let criteria: Vec<Criterion> = vec![
        (1, "gradient fidelity", Box::new(criterion_1)),
        (2, "freeze invariance", Box::new(needs(criterion_2))),
        (3, "fixed-length branch outputs", Box::new(criterion_3)),
        (4, "image equals one-frame video", Box::new(needs(criterion_4))),
        (5, "position-embedding semantics", Box::new(criterion_5)),
        (6, "overfit and regenerate", Box::new(needs(criterion_6))),
        (7, "audio front-end", Box::new(criterion_7)),
        (8, "audio branch on visual data", Box::new(needs(criterion_8))),
        (9, "instruction tuning and chat", Box::new(needs(criterion_9))),
        (10, "end-to-end determinism", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(format!("panicked: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS [{name}] {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL [{name}] {detail} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed, {:.1}s total", 10 - failed, t.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
