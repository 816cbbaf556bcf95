//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line, then exits non-zero if any
//! criterion failed.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};

use avatar_core::audio::{
    align_audio, faa_apply, AlignedAudio, AudioFrameFeatures, FaaParams, AUDIO_TOKENS_PER_FRAME, LATENT_AUDIO_TOKENS,
};
use avatar_core::backbone::{build_model, ConditioningBundle, Model, ModelConfig};
use avatar_core::cli::{
    ablate, cmd_synth_data, cmd_train, eval_sync, load_split, load_train_clips, mask_steering, DatasetManifest,
    RunConfig, Split,
};
use avatar_core::emotion::EmotionRef;
use avatar_core::flow::{interpolate, load_checkpoint, loss, loss_on_tape, velocity_target};
use avatar_core::fusion::{fuse_denoise, plan_segments, FusionConfig, Segment};
use avatar_core::injection::Mechanism;
use avatar_core::latentio::{
    decode_video, encode_video, latent_frames, FaceMaskGrid, ImageLatent, PixelVideo, VideoLatent,
};
use avatar_core::numcore::{ParamStore, SeededRng, Tape, Tensor};
use avatar_core::rope::{apply_rope, image_latent_positions, video_positions, PositionTriple, RotaryTable};

// Tolerances and budgets.
const VAE_BUDGET: Duration = Duration::from_secs(10);
const MASK_BUDGET: Duration = Duration::from_secs(30);
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const ROPE_NORM_TOL: f64 = 1e-6;
const ROPE_RELATIVE_TOL: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const FLOW_FD_TOL: f64 = 1e-9;
const LOSS_RATIO_MAX: f64 = 0.5;
const SYNC_GAP_MIN: f64 = 0.2;
const UNTRAINED_GAP_MAX: f64 = 0.1;
const STEERING_MIN: usize = 7;
const PARAM_RANGE: (usize, usize) = (1_000_000, 2_000_000);
/// Total optimizer steps of the model scored for lip sync and steering.
const SYNC_TRAIN_STEPS: u64 = 1200;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Result<Check> {
    Ok(Check {
        pass,
        detail: detail.into(),
    })
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Result<Check>) -> bool {
    let t0 = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(c)) => (c.pass, c.detail),
        Ok(Err(e)) => (false, format!("error: {e:#}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panic: {msg}"))
        }
    };
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id:>2} {name}: {detail} ({:.1}s)", t0.elapsed().as_secs_f64());
    pass
}

fn main() {
    let work = tempfile::tempdir().expect("tempdir");
    let mut results = vec![
        run(1, "vae roundtrip", vae_roundtrip),
        run(2, "compression arithmetic", compression_arithmetic),
        run(3, "mask locality", mask_locality),
        run(4, "temporal isolation", temporal_isolation),
        run(5, "conditioning off-switches", off_switches),
        run(6, "rotary positions", rotary_positions),
        run(7, "gradient correctness", gradient_correctness),
        run(8, "flow-matching identities", flow_identities),
        run(9, "fusion schedule", fusion_schedule),
        run(10, "fusion tiling equivalence", fusion_tiling),
    ];
    let toy = ToyRun::new(work.path());
    results.push(run(11, "toy training", || toy_training(&toy)));
    results.push(run(12, "sync proxy", || sync_proxy(&toy)));
    results.push(run(13, "mask steering", || steering(&toy)));
    results.push(run(14, "ablation harness", || ablation(work.path())));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- latents

fn vae_roundtrip() -> Result<Check> {
    let t0 = Instant::now();
    let mut rng = SeededRng::new(11);
    let mut frame_counts = vec![1, 5, 129];
    while frame_counts.len() < 100 {
        frame_counts.push(4 * rng.below(12) + 1);
    }
    let mut mismatches = 0;
    for (i, &frames) in frame_counts.iter().enumerate() {
        let spatial = [1, 2, 4][rng.below(3)];
        let (h, w) = (spatial * (1 + rng.below(3)), spatial * (1 + rng.below(3)));
        let c = 1 + rng.below(3);
        let data = (0..frames * h * w * c).map(|_| rng.uniform() as f32).collect();
        let v = PixelVideo::new(frames, h, w, c, data)?;
        let z = encode_video(&v, spatial)?;
        ensure!(z.frames == latent_frames(frames), "case {i}: {} latent frames", z.frames);
        let back = decode_video(&z, spatial)?;
        // bitwise comparison so that -0.0 / NaN payloads would also count
        let same = back.frames == v.frames
            && back.data.len() == v.data.len()
            && back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    let dt = t0.elapsed();
    check(
        mismatches == 0 && dt < VAE_BUDGET,
        format!("{} videos, {mismatches} mismatches, {:.2}s", frame_counts.len(), dt.as_secs_f64()),
    )
}

fn compression_arithmetic() -> Result<Check> {
    let d = 3;
    let mut bad = Vec::new();
    for n_prime in 1..=200usize {
        // groups: frame 0 alone, then every further full block of four
        let mut groups = 1;
        let mut covered = 4;
        while covered <= n_prime {
            groups += 1;
            covered += 4;
        }
        let n = latent_frames(n_prime);
        let g0 = AudioFrameFeatures::new(Tensor::zeros(&[n_prime, AUDIO_TOKENS_PER_FRAME, d]))?;
        let aligned = align_audio(&g0)?;
        if n != groups || aligned.data.shape() != [n + 1, 40, d] {
            bad.push(n_prime);
        }
    }
    let anchor = latent_frames(129);
    check(
        bad.is_empty() && anchor == 33,
        format!("n'=1..200 checked, failures {bad:?}, n'=129 -> n={anchor}"),
    )
}

// ---------------------------------------------------------------- audio adapter

struct FaaCase {
    store: ParamStore<f64>,
    params: FaaParams,
    frames: usize,
    cells: usize,
    d: usize,
    d_audio: usize,
    tokens: Tensor<f64>,
    mask: Tensor<f64>,
}

fn faa_case(seed: u64) -> Result<FaaCase> {
    let mut rng = SeededRng::new(seed);
    let heads = 1 + rng.below(3);
    let d = heads * (2 + 2 * rng.below(3));
    let (frames, cells, d_audio) = (1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(5));
    let mut store = ParamStore::new();
    let alpha = rng.uniform_range(0.2, 1.5);
    let params = FaaParams::new(&mut store, "faa", d, d_audio, heads, alpha, &mut rng)?;
    let rows = frames * cells;
    let mut mask = Tensor::from_fn(&[rows], |_| if rng.below(2) == 0 { 0.0 } else { 1.0 });
    // at least one open and one closed cell
    mask.data_mut()[0] = 1.0;
    if rows > 1 {
        mask.data_mut()[rows - 1] = 0.0;
    }
    Ok(FaaCase {
        tokens: rng.normal_tensor(&[rows, d], 1.0),
        store,
        params,
        frames,
        cells,
        d,
        d_audio,
        mask,
    })
}

impl FaaCase {
    fn audio(&self, rng: &mut SeededRng) -> Tensor<f64> {
        rng.normal_tensor(&[self.frames * LATENT_AUDIO_TOKENS, self.d_audio], 1.0)
    }

    fn apply(&self, audio: &Tensor<f64>, mask: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let t = tape.input(self.tokens.clone())?;
        let a = tape.input(audio.clone())?;
        let m = tape.input(mask.clone())?;
        let y = faa_apply(&mut tape, &self.store, &self.params, t, a, m, self.frames)?;
        Ok(tape.value(y).clone())
    }

    fn row<'a>(&self, t: &'a Tensor<f64>, r: usize) -> &'a [f64] {
        &t.data()[r * self.d..(r + 1) * self.d]
    }
}

fn mask_locality() -> Result<Check> {
    let t0 = Instant::now();
    let mut leaks = 0;
    let mut dead = 0;
    for i in 0..50 {
        let c = faa_case(300 + i)?;
        let mut rng = SeededRng::new(900 + i);
        let (a1, a2) = (c.audio(&mut rng), c.audio(&mut rng));
        let (y1, y2) = (c.apply(&a1, &c.mask)?, c.apply(&a2, &c.mask)?);
        let mut moved_open = false;
        for r in 0..c.frames * c.cells {
            let same = c.row(&y1, r) == c.row(&y2, r);
            if c.mask.data()[r] == 0.0 {
                if !same || c.row(&y1, r) != c.row(&c.tokens, r) {
                    leaks += 1;
                }
            } else if !same {
                moved_open = true;
            }
        }
        if !moved_open {
            dead += 1;
        }
    }
    let dt = t0.elapsed();
    check(
        leaks == 0 && dead == 0 && dt < MASK_BUDGET,
        format!("50 cases, {leaks} masked tokens changed, {dead} cases without response, {:.2}s", dt.as_secs_f64()),
    )
}

fn temporal_isolation() -> Result<Check> {
    let mut failures = 0;
    for i in 0..20 {
        let c = faa_case(500 + i)?;
        let mut rng = SeededRng::new(700 + i);
        let audio = c.audio(&mut rng);
        let k = rng.below(c.frames);
        let mut moved = audio.clone();
        let span = LATENT_AUDIO_TOKENS * c.d_audio;
        for v in &mut moved.data_mut()[k * span..(k + 1) * span] {
            *v += rng.normal();
        }
        let ones = Tensor::ones(&[c.frames * c.cells]);
        let (y1, y2) = (c.apply(&audio, &ones)?, c.apply(&moved, &ones)?);
        let mut ok = true;
        let mut frame_k_moved = false;
        for r in 0..c.frames * c.cells {
            let same = c.row(&y1, r) == c.row(&y2, r);
            if r / c.cells == k {
                frame_k_moved |= !same;
            } else {
                ok &= same;
            }
        }
        if !(ok && frame_k_moved) {
            failures += 1;
        }
    }
    check(failures == 0, format!("20 cases, {failures} failures"))
}

// ---------------------------------------------------------------- full model

fn micro_config(mechanism: Mechanism) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_double: 1,
        n_single: 1,
        latent_width: 2,
        latent_height: 2,
        latent_channels: 6,
        segment_frames: 3,
        text_vocab: 5,
        text_len: 2,
        d_audio: 3,
        mlp_ratio: 2,
        mechanism,
        ..ModelConfig::default()
    }
}

/// Model with every parameter redrawn so no branch is trivially zero; the
/// named gates keep their own values.
fn randomized_model(cfg: &ModelConfig, seed: u64, scale: f64, keep: &[&str]) -> Result<Model<f64>> {
    let mut m = build_model::<f64>(cfg, seed)?;
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    for p in m.store.iter_mut() {
        if keep.iter().any(|k| p.name.ends_with(k)) {
            continue;
        }
        p.value = rng.normal_tensor(p.value.shape(), scale);
    }
    Ok(m)
}

fn random_inputs(cfg: &ModelConfig, rng: &mut SeededRng, n: usize) -> Result<(VideoLatent, ConditioningBundle)> {
    let (w, h, c) = (cfg.latent_width, cfg.latent_height, cfg.latent_channels);
    let z = VideoLatent::new(n, w, h, c, rng.normal_tensor(&[n, h, w, c], 1.0))?;
    let cond = ConditioningBundle {
        reference: ImageLatent {
            width: w,
            height: h,
            channels: c,
            data: rng.normal_tensor(&[h, w, c], 1.0),
        },
        audio: AlignedAudio::new(rng.normal_tensor(&[n + 1, LATENT_AUDIO_TOKENS, cfg.d_audio], 1.0))?,
        mask: FaceMaskGrid::ones(n + 1, w, h),
        emotion: Some(random_emotion(cfg, rng)),
        text: (0..cfg.text_len).map(|_| rng.below(cfg.text_vocab)).collect(),
        t: rng.uniform_range(0.05, 0.95),
    };
    Ok((z, cond))
}

fn random_emotion(cfg: &ModelConfig, rng: &mut SeededRng) -> EmotionRef {
    let (w, h, c) = (cfg.latent_width, cfg.latent_height, cfg.latent_channels);
    EmotionRef {
        width: w,
        height: h,
        channels: c,
        tokens: rng.normal_tensor(&[w * h, c], 1.0),
    }
}

fn set_named(m: &mut Model<f64>, suffix: &str, v: f64) -> usize {
    let mut n = 0;
    for p in m.store.iter_mut() {
        if p.name.ends_with(suffix) {
            p.value = Tensor::full(p.value.shape(), v);
            n += 1;
        }
    }
    n
}

fn off_switches() -> Result<Check> {
    let mut notes = Vec::new();
    let mut pass = true;
    for (i, mechanism) in Mechanism::ALL.into_iter().enumerate() {
        let cfg = ModelConfig {
            faa_in_single: true,
            aem_in_single: true,
            ..micro_config(mechanism)
        };
        let mut rng = SeededRng::new(40 + i as u64);
        let (z, cond) = random_inputs(&cfg, &mut rng, 2)?;
        let other_audio = AlignedAudio::new(rng.normal_tensor(cond.audio.data.shape(), 1.0))?;
        let other_emotion = random_emotion(&cfg, &mut rng);
        let swap_audio = ConditioningBundle {
            audio: other_audio,
            ..cond.clone()
        };
        let swap_emotion = ConditioningBundle {
            emotion: Some(other_emotion),
            ..cond.clone()
        };

        // audio gates at zero
        let mut m = randomized_model(&cfg, 7 + i as u64, 0.3, &[])?;
        let gates = set_named(&mut m, ".alpha", 0.0);
        let audio_off = m.velocity(&z, &cond)? == m.velocity(&z, &swap_audio)?;
        set_named(&mut m, ".alpha", 0.8);
        let audio_on = m.velocity(&z, &cond)? != m.velocity(&z, &swap_audio)?;

        // emotion scales at their zero initialization
        let mut m = randomized_model(&cfg, 17 + i as u64, 0.3, &[".gamma"])?;
        let scales = m.store.iter().filter(|(_, p)| p.name.ends_with(".gamma")).count();
        let emotion_off = m.velocity(&z, &cond)? == m.velocity(&z, &swap_emotion)?;
        set_named(&mut m, ".gamma", 0.8);
        let emotion_on = m.velocity(&z, &cond)? != m.velocity(&z, &swap_emotion)?;

        pass &= audio_off && audio_on && emotion_off && emotion_on && gates > 0 && scales > 0;
        notes.push(format!(
            "{}: audio off/on {audio_off}/{audio_on}, emotion off/on {emotion_off}/{emotion_on}",
            mechanism.key()
        ));
    }
    check(pass, notes.join("; "))
}

// ---------------------------------------------------------------- rotary positions

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotary_positions() -> Result<Check> {
    let table = RotaryTable::new(16, 10_000.0)?;
    let mut rng = SeededRng::new(6);
    let mut pos = || PositionTriple::new(rng.below(40) as i64 - 20, rng.below(40) as i64 - 20, rng.below(40) as i64 - 20);
    let mut positions = Vec::new();
    for _ in 0..300 {
        positions.push(pos());
    }
    let mut rng = SeededRng::new(60);
    let mut worst_norm = 0.0f64;
    let mut worst_rel = 0.0f64;
    for pair in 0..100 {
        let x: Tensor<f64> = rng.normal_tensor(&[2, 16], 1.0);
        let (p1, p2, shift) = (positions[3 * pair], positions[3 * pair + 1], positions[3 * pair + 2]);
        let r = apply_rope(&x, &[p1, p2], &table)?;
        for row in 0..2 {
            let (a, b) = (&x.data()[row * 16..(row + 1) * 16], &r.data()[row * 16..(row + 1) * 16]);
            let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
            worst_norm = worst_norm.max((na - nb).abs() / na);
        }
        let s = apply_rope(&x, &[p1.shifted(shift), p2.shifted(shift)], &table)?;
        let logit = |t: &Tensor<f64>| dot(&t.data()[..16], &t.data()[16..]);
        let (l1, l2) = (logit(&r), logit(&s));
        worst_rel = worst_rel.max((l1 - l2).abs() / l1.abs().max(1.0));
    }
    let mut overlaps = 0;
    for w in 1..=8 {
        for h in 1..=8 {
            let image: HashSet<PositionTriple> = image_latent_positions(w, h).into_iter().collect();
            for frames in 1..=8 {
                overlaps += video_positions(frames, w, h).iter().filter(|p| image.contains(p)).count();
            }
        }
    }
    check(
        worst_norm <= ROPE_NORM_TOL && worst_rel <= ROPE_RELATIVE_TOL && overlaps == 0,
        format!("norm err {worst_norm:.1e}, relative-logit err {worst_rel:.1e}, {overlaps} shared positions"),
    )
}

// ---------------------------------------------------------------- gradients

fn gradient_correctness() -> Result<Check> {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, mechanism) in Mechanism::ALL.into_iter().enumerate() {
        let cfg = micro_config(mechanism);
        let mut model = randomized_model(&cfg, 70 + i as u64, 0.25, &[])?;
        let mut rng = SeededRng::new(80 + i as u64);
        let (z, cond) = random_inputs(&cfg, &mut rng, 2)?;
        let target: Tensor<f64> = rng.normal_tensor(&[z.frames * cfg.cells(), cfg.latent_channels], 1.0);
        let eval_loss = |m: &Model<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let pred = m.forward(&mut tape, &z, &cond)?;
            let l = loss_on_tape(&mut tape, pred, &target)?;
            Ok(tape.value(l).data()[0])
        };
        let mut tape = Tape::new();
        let pred = model.forward(&mut tape, &z, &cond)?;
        let l = loss_on_tape(&mut tape, pred, &target)?;
        let grads = tape.backward(l)?;
        model.store.zero_grads();
        grads.accumulate_into(&mut model.store, 1.0)?;

        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = model.store.value(id).numel();
            let picks: Vec<usize> = if n <= 3 { (0..n).collect() } else { (0..3).map(|_| rng.below(n)).collect() };
            for e in picks {
                let analytic = model.store.get(id).grad.as_ref().map_or(0.0, |g| g.data()[e]);
                let orig = model.store.value(id).data()[e];
                let h = 1e-5;
                let mut bumped = model.clone();
                bumped.store.get_mut(id).value.data_mut()[e] = orig + h;
                let up = eval_loss(&bumped)?;
                bumped.store.get_mut(id).value.data_mut()[e] = orig - h;
                let down = eval_loss(&bumped)?;
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let dt = t0.elapsed();
    check(
        worst <= GRAD_REL_TOL && dt < GRAD_BUDGET,
        format!("{checked} entries over 3 mechanisms, worst relative error {worst:.2e}, {:.1}s", dt.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- flow matching

fn flow_identities() -> Result<Check> {
    let mut rng = SeededRng::new(8);
    let mut pass = true;
    let mut worst_fd = 0.0f64;
    for _ in 0..20 {
        let z0: Tensor<f64> = rng.normal_tensor(&[3, 5], 1.0);
        let z1: Tensor<f64> = rng.normal_tensor(&[3, 5], 1.0);
        pass &= interpolate(&z0, &z1, 0.0)? == z0 && interpolate(&z0, &z1, 1.0)? == z1;
        let u = velocity_target(&z0, &z1)?;
        let expect = Tensor::from_fn(&[3, 5], |i| z1.data()[i] - z0.data()[i]);
        pass &= u == expect;
        let t = rng.uniform_range(0.1, 0.9);
        let h = 1e-3;
        let (a, b) = (interpolate(&z0, &z1, t + h)?, interpolate(&z0, &z1, t - h)?);
        for i in 0..15 {
            let fd = (a.data()[i] - b.data()[i]) / (2.0 * h);
            worst_fd = worst_fd.max((fd - u.data()[i]).abs());
        }
        // loss axioms: zero on equality, positive otherwise, symmetric, matches the taped loss
        let (l01, l10) = (loss(&z0, &z1)?, loss(&z1, &z0)?);
        pass &= loss(&z0, &z0)? == 0.0 && l01 > 0.0 && l01 == l10;
        let mut tape = Tape::new();
        let p = tape.input(z0.clone())?;
        let lt = loss_on_tape(&mut tape, p, &z1)?;
        pass &= (tape.value(lt).data()[0] - l01).abs() <= 1e-12 * l01.max(1.0);
    }
    pass &= loss(&Tensor::<f64>::zeros(&[2]), &Tensor::zeros(&[3])).is_err();
    check(pass && worst_fd <= FLOW_FD_TOL, format!("20 cases, finite-difference err {worst_fd:.1e}"))
}

// ---------------------------------------------------------------- fusion

fn spans(segments: &[Segment]) -> Vec<(usize, usize, usize)> {
    segments.iter().map(|s| (s.k, s.start, s.end)).collect()
}

fn random_fusion(rng: &mut SeededRng) -> FusionConfig {
    let segment = 2 + rng.below(8);
    FusionConfig {
        length: segment + 1 + rng.below(30),
        segment,
        offset: 1 + rng.below(segment - 1),
        steps: 1 + rng.below(12),
    }
}

fn timeline(cfg: &FusionConfig, rng: &mut SeededRng) -> Result<VideoLatent> {
    Ok(VideoLatent::new(cfg.length, 2, 1, 2, rng.normal_tensor(&[cfg.length, 1, 2, 2], 1.0))?)
}

fn fusion_schedule() -> Result<Check> {
    let plan = plan_segments(&FusionConfig {
        length: 10,
        segment: 4,
        offset: 2,
        steps: 2,
    })?;
    let traced = vec![(0, 0, 4), (0, 4, 8), (0, 8, 2), (1, 2, 6), (1, 6, 10), (1, 0, 4)];
    let labels: Vec<usize> = plan.segments.iter().map(|s| s.t).collect();
    let table_ok = spans(&plan.segments) == traced && labels == [2, 2, 2, 1, 1, 1];

    let mut rng = SeededRng::new(9);
    let mut violations = Vec::new();
    for case in 0..200 {
        let cfg = random_fusion(&mut rng);
        let plan = plan_segments(&cfg)?;
        for k in 0..cfg.steps {
            let step: Vec<&Segment> = plan.at_step(k).collect();
            let mut seen = vec![false; cfg.length];
            for s in &step {
                for f in s.frames(cfg.length) {
                    seen[f] = true;
                }
            }
            if !seen.iter().all(|&b| b) {
                violations.push(format!("case {case} step {k}: coverage"));
            }
            if step.len() != cfg.length.div_ceil(cfg.segment) {
                violations.push(format!("case {case} step {k}: {} segments", step.len()));
            }
            if step.first().map(|s| s.start) != Some(k * cfg.offset % cfg.length) {
                violations.push(format!("case {case} step {k}: shift"));
            }
        }
    }

    // instrumented denoiser: each call must see the previous step's buffer
    let mut separation_errors = 0;
    for case in 0..20 {
        let cfg = random_fusion(&mut rng);
        let z = timeline(&cfg, &mut rng)?;
        let mut committed = z.clone();
        let mut pending = z.clone();
        let mut step = 0;
        let fl = z.frame_len();
        let out = fuse_denoise(&z, &cfg, |s, idx, seg| {
            if seg.k != step {
                committed = pending.clone();
                step = seg.k;
            }
            if *s != committed.gather_frames(idx) {
                separation_errors += 1;
            }
            let next = VideoLatent::new(s.frames, s.width, s.height, s.channels, s.data.map(|v| 0.9 * v + 0.1 * (case as f32)))?;
            for (i, &f) in idx.iter().enumerate() {
                pending.data.data_mut()[f * fl..(f + 1) * fl].copy_from_slice(next.frame(i));
            }
            Ok(next)
        })?;
        if out != pending {
            separation_errors += 1;
        }
    }
    check(
        table_ok && violations.is_empty() && separation_errors == 0,
        format!(
            "hand trace {}, 200 configs with {} violations, {separation_errors} read/write errors",
            if table_ok { "matches" } else { "differs" },
            violations.len()
        ),
    )
}

fn fusion_tiling() -> Result<Check> {
    let mut rng = SeededRng::new(10);
    let mut mismatches = 0;
    for _ in 0..50 {
        let segment = 2 + rng.below(6);
        let cfg = FusionConfig {
            length: segment * (2 + rng.below(5)),
            segment,
            offset: 1 + rng.below(segment - 1),
            steps: 1,
        };
        let z = timeline(&cfg, &mut rng)?;
        let (a, b) = (rng.normal() as f32, rng.normal() as f32);
        // linear mock: mixes each frame with its in-tile neighbour
        let denoise = |s: &VideoLatent| -> avatar_core::Result<VideoLatent> {
            let fl = s.frame_len();
            let mut out = s.clone();
            for f in 0..s.frames {
                let g = (f + 1) % s.frames;
                for j in 0..fl {
                    out.data.data_mut()[f * fl + j] = a * s.frame(f)[j] + b * s.frame(g)[j] + 0.25;
                }
            }
            Ok(out)
        };
        let fused = fuse_denoise(&z, &cfg, |s, _, _| denoise(s))?;
        let mut tiled = z.clone();
        let fl = z.frame_len();
        for tile in 0..cfg.length / segment {
            let idx: Vec<usize> = (tile * segment..(tile + 1) * segment).collect();
            let out = denoise(&z.gather_frames(&idx))?;
            tiled.data.data_mut()[tile * segment * fl..(tile + 1) * segment * fl].copy_from_slice(out.data.data());
        }
        if fused != tiled {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("50 configs, {mismatches} mismatches"))
}

// ---------------------------------------------------------------- training runs

/// Dataset, a 200-step default run and its continuation, shared by the
/// training, sync and steering criteria.
struct ToyRun {
    cfg: RunConfig,
    steering_dir: PathBuf,
    setup: std::result::Result<(), String>,
    short: Option<(Vec<f64>, Duration)>,
}

impl ToyRun {
    fn new(root: &Path) -> Self {
        let mut cfg = RunConfig::default();
        cfg.paths.dataset = root.join("data");
        cfg.paths.run_dir = root.join("run");
        let steering_dir = root.join("two_characters");
        let mut run = ToyRun {
            cfg,
            steering_dir,
            setup: Ok(()),
            short: None,
        };
        run.setup = run.prepare().map_err(|e| format!("{e:#}"));
        run
    }

    fn prepare(&mut self) -> Result<()> {
        cmd_synth_data(&self.cfg, &self.cfg.paths.dataset)?;
        let mut two = self.cfg.clone();
        two.data.synth.two_character_fraction = 1.0;
        two.data.clips = 1;
        two.data.seed = 99;
        cmd_synth_data(&two, &self.steering_dir)?;
        let t0 = Instant::now();
        let report = cmd_train(&self.cfg, false)?;
        self.short = Some((report.losses, t0.elapsed()));
        let mut long = self.cfg.clone();
        long.train.steps = SYNC_TRAIN_STEPS;
        cmd_train(&long, true)?;
        Ok(())
    }

    fn ready(&self) -> Result<()> {
        self.setup.clone().map_err(|e| anyhow::anyhow!("training run failed: {e}"))
    }

    fn trained(&self) -> Result<Model<f32>> {
        Ok(load_checkpoint(self.cfg.paths.checkpoint())?.0)
    }

    fn held_out(&self, dir: &Path) -> Result<Vec<avatar_core::cli::LoadedClip>> {
        let manifest = DatasetManifest::read(dir)?;
        let mut clips = load_split(dir, &manifest, Split::Eval)?;
        clips.truncate(self.cfg.eval.clips);
        Ok(clips)
    }
}

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn toy_training(toy: &ToyRun) -> Result<Check> {
    toy.ready()?;
    let (losses, elapsed) = toy.short.as_ref().expect("set when ready");
    let train_clips = DatasetManifest::read(&toy.cfg.paths.dataset)?.split(Split::Train).count();
    ensure!(losses.len() == 200, "{} steps recorded", losses.len());
    let (first, last) = (window_mean(&losses[..10]), window_mean(&losses[190..]));
    let ratio = last / first;
    let params = build_model::<f32>(&toy.cfg.model_config(), 0)?.num_params();
    check(
        ratio <= LOSS_RATIO_MAX
            && *elapsed <= TRAIN_BUDGET
            && train_clips == 64
            && (PARAM_RANGE.0..=PARAM_RANGE.1).contains(&params),
        format!(
            "{params} params, {train_clips} clips, loss {first:.4} -> {last:.4} (ratio {ratio:.3}), {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn sync_proxy(toy: &ToyRun) -> Result<Check> {
    toy.ready()?;
    let clips = toy.held_out(&toy.cfg.paths.dataset)?;
    ensure!(clips.len() == 8, "{} held-out clips", clips.len());
    let untrained = build_model::<f32>(&toy.cfg.model_config(), toy.cfg.seed)?;
    let before = eval_sync(&untrained, &clips, &toy.cfg)?;
    let after = eval_sync(&toy.trained()?, &clips, &toy.cfg)?;
    check(
        after.gap > SYNC_GAP_MIN && before.gap.abs() < UNTRAINED_GAP_MAX,
        format!(
            "trained gap {:.3} (true {:.3}, shuffled {:.3}) after {SYNC_TRAIN_STEPS} steps, untrained gap {:.3}",
            after.gap, after.true_audio, after.shuffled_audio, before.gap
        ),
    )
}

fn steering(toy: &ToyRun) -> Result<Check> {
    toy.ready()?;
    let clips = toy.held_out(&toy.steering_dir)?;
    ensure!(clips.len() == 8 && clips.iter().all(|c| c.info.characters.len() == 2), "need 8 two-character clips");
    let trials = mask_steering(&toy.trained()?, &clips, &toy.cfg)?;
    let hits = trials.iter().filter(|t| t.follows_mask).count();
    check(hits >= STEERING_MIN, format!("{hits}/{} trials follow the mask", trials.len()))
}

fn ablation(root: &Path) -> Result<Check> {
    let mut cfg = RunConfig::default();
    cfg.paths.dataset = root.join("ablation_data");
    cfg.data.clips = 8;
    cfg.data.held_out = 2;
    cfg.train.steps = 12;
    cfg.eval.steps = 4;
    cmd_synth_data(&cfg, &cfg.paths.dataset)?;
    let train = load_train_clips(&cfg, Split::Train)?;
    let manifest = DatasetManifest::read(&cfg.paths.dataset)?;
    let eval = load_split(&cfg.paths.dataset, &manifest, Split::Eval)?;
    let report = ablate(&cfg, &train, &eval)?;
    let mechanisms: Vec<Mechanism> = report.arms.iter().map(|a| a.mechanism).collect();
    let complete = mechanisms == Mechanism::ALL
        && report.arms.iter().all(|a| {
            a.params > 0
                && [a.first_loss, a.final_loss, a.identity_distance, a.motion].iter().all(|v| v.is_finite())
        });
    // the output layer starts at zero, so with identical batches and noise
    // every arm sees exactly the same loss at step 0
    let first = report.arms[0].losses.first().copied();
    let same_seeds = report.arms.iter().all(|a| a.losses.len() == 12 && a.losses.first().copied() == first);
    let json = serde_json::to_value(&report)?;
    let serialized = json["arms"].as_array().is_some_and(|a| a.len() == 3) && json["config_hash"] == cfg.hash();
    let summary: Vec<String> = report
        .arms
        .iter()
        .map(|a| format!("{} {} params loss {:.3}->{:.3}", a.mechanism.key(), a.params, a.first_loss, a.final_loss))
        .collect();
    check(complete && same_seeds && serialized, summary.join("; "))
}
