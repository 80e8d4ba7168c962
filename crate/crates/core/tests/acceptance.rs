// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tracetrust::actv::{
    read_actv, write_actv, ActivationDataset, DatasetMeta, DimensionLabel, HEADER_LEN,
};
use tracetrust::datasets::{make_splits, SplitScheme};
use tracetrust::infotheory::{
    detect_phases, hsic, mi_sweep, pearson, Samples, StepActivations, DEFAULT_SIGMA_GRID,
};
use tracetrust::probes::{fit_probe, probe_dataset, ProbeConfig, ProbeModel};
use tracetrust::proxytune::proxy_generate;
use tracetrust::steering::{
    apply_intervention, steered_probe_score, strength_sweep, InterventionSpec, SteeringVector,
    SweepSettings,
};
use tracetrust::toylm::{
    forward, generate, perplexity, CaptureRequest, ToyLmCheckpoint, ToyLmConfig,
};

use common::{style_pipeline, style_ppl_corpus, StylePipeline, MIDDLE_LAYER};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(took)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

// ---------------------------------------------------------------------------
// ACTV1 round-trip
// ---------------------------------------------------------------------------

fn random_finite_f32(r: &mut ChaCha8Rng) -> f32 {
    loop {
        let v = match r.random_range(0..4) {
            0 => f32::from_bits(r.random()),
            1 => r.random_range(-1e3f32..1e3),
            2 => [0.0, -0.0, f32::MIN_POSITIVE, -f32::MAX, f32::MAX, 1e-45][r.random_range(0..6)],
            _ => normal(r) as f32,
        };
        if v.is_finite() {
            return v;
        }
    }
}

fn random_dataset(r: &mut ChaCha8Rng, index: usize) -> ActivationDataset {
    let n = r.random_range(1..=64usize);
    let d = r.random_range(1..=128usize);
    let data: Vec<f32> = (0..n * d).map(|_| random_finite_f32(r)).collect();
    let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let labels_all = [
        DimensionLabel::Reliability,
        DimensionLabel::Toxicity,
        DimensionLabel::Privacy,
        DimensionLabel::Fairness,
        DimensionLabel::Robustness,
        DimensionLabel::Other,
    ];
    let meta = DatasetMeta {
        balanced: pos.abs_diff(n - pos) <= 1 && r.random_bool(0.5),
        label_semantics: format!("y=1 ✓ row set {index} \"quoted\"\n"),
        ..DatasetMeta::last_token(
            format!("set_{index}_é"),
            labels_all[index % labels_all.len()],
            format!("step_{:06}", r.random_range(0..1_000_000u32)),
            r.random_range(0..64),
        )
    };
    ActivationDataset::new(d, data, labels, meta).expect("valid random dataset")
}

fn bitwise_equal(a: &ActivationDataset, b: &ActivationDataset) -> bool {
    a.n() == b.n()
        && a.d() == b.d()
        && a.labels() == b.labels()
        && a.meta() == b.meta()
        && a.activations()
            .iter()
            .zip(b.activations())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn actv_round_trip() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0xAC71);
    let mut rejected = 0u64;
    let mut streamed = 0u64;
    for i in 0..1000 {
        let ds = random_dataset(&mut r, i);
        let mut bytes = Vec::new();
        let written = write_actv(&ds, &mut bytes).map_err(|e| e.to_string())?;
        ensure(written as usize == bytes.len(), || {
            format!("dataset {i}: byte count mismatch")
        })?;
        let back = read_actv(&mut Cursor::new(&bytes)).map_err(|e| format!("dataset {i}: {e}"))?;
        ensure(bitwise_equal(&ds, &back), || {
            format!("dataset {i}: stream round-trip differs")
        })?;
        let back =
            ActivationDataset::from_bytes(&bytes).map_err(|e| format!("dataset {i}: {e}"))?;
        ensure(bitwise_equal(&ds, &back), || {
            format!("dataset {i}: slice round-trip differs")
        })?;

        // Every single-byte change of every header byte.
        for pos in 0..HEADER_LEN {
            let orig = bytes[pos];
            for v in 0..=255u8 {
                if v == orig {
                    continue;
                }
                bytes[pos] = v;
                ensure(ActivationDataset::from_bytes(&bytes).is_err(), || {
                    format!("dataset {i}: header byte {pos} = {v:#04x} accepted")
                })?;
                rejected += 1;
                if i < 8 {
                    ensure(read_actv(&mut Cursor::new(&bytes)).is_err(), || {
                        format!("dataset {i}: streamed header byte {pos} = {v:#04x} accepted")
                    })?;
                    streamed += 1;
                }
            }
            bytes[pos] = orig;
        }
    }
    let took = within(start, Duration::from_secs(10))?;
    Ok(format!(
        "1000 datasets bit-identical; {rejected} header corruptions rejected ({streamed} also via stream reader); {took:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// Probe correctness
// ---------------------------------------------------------------------------

fn gaussian_dataset(
    r: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    labels: Vec<u8>,
    shift: f64,
) -> ActivationDataset {
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for j in 0..d {
            let center = if j == 0 {
                if y == 1 {
                    shift
                } else {
                    -shift
                }
            } else {
                0.0
            };
            data.push((center + normal(r)) as f32);
        }
    }
    let meta = DatasetMeta::last_token("synthetic", DimensionLabel::Other, "step_000000", 0);
    ActivationDataset::new(d, data, labels, meta).expect("valid synthetic dataset")
}

fn probe_correctness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0xB10B);
    let labels: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
    let blobs = gaussian_dataset(&mut r, 1000, 64, labels, 3.0);
    let (_, rep) = probe_dataset(&blobs, SplitScheme::DevTest, &ProbeConfig::default(), 0)
        .map_err(|e| e.to_string())?;
    ensure(rep.test_accuracy >= 0.99, || {
        format!("blob test accuracy {:.4} < 0.99", rep.test_accuracy)
    })?;

    let mut shuffled = Vec::new();
    for seed in 0..10u64 {
        let mut r = rng(1000 + seed);
        let mut labels: Vec<u8> = (0..2000).map(|i| (i % 2) as u8).collect();
        labels.shuffle(&mut r);
        let ds = gaussian_dataset(&mut r, 2000, 64, labels, 0.0);
        let (_, rep) = probe_dataset(&ds, SplitScheme::DevTest, &ProbeConfig::default(), seed)
            .map_err(|e| e.to_string())?;
        ensure((0.45..=0.55).contains(&rep.test_accuracy), || {
            format!(
                "shuffled seed {seed}: accuracy {:.4} outside [0.45, 0.55]",
                rep.test_accuracy
            )
        })?;
        shuffled.push(rep.test_accuracy);
    }
    let took = within(start, Duration::from_secs(30))?;
    let lo = shuffled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = shuffled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(format!(
        "blobs {:.4}; shuffled labels in [{lo:.3}, {hi:.3}] over 10 seeds; {took:.1?}",
        rep.test_accuracy
    ))
}

// ---------------------------------------------------------------------------
// HSIC oracle equivalence
// ---------------------------------------------------------------------------

/// Textbook estimator: `tr(K H L H) / (n−1)²` with explicit matrices.
fn naive_hsic(x: &[Vec<f64>], y: &[Vec<f64>], sx: f64, sy: f64) -> f64 {
    let n = x.len();
    let gram = |pts: &[Vec<f64>], s: f64| -> Vec<Vec<f64>> {
        pts.iter()
            .map(|a| {
                pts.iter()
                    .map(|b| {
                        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                        (-d2 / (2.0 * s * s)).exp()
                    })
                    .collect()
            })
            .collect()
    };
    let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum())
                    .collect()
            })
            .collect()
    };
    let h: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| f64::from(u8::from(i == j)) - 1.0 / n as f64)
                .collect()
        })
        .collect();
    let k = gram(x, sx);
    let l = gram(y, sy);
    let m = mul(&mul(&k, &h), &mul(&l, &h));
    (0..n).map(|i| m[i][i]).sum::<f64>() / ((n - 1) * (n - 1)) as f64
}

fn random_points(r: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| scale * normal(r)).collect())
        .collect()
}

fn hsic_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0x45_1C);
    let mut worst_rel = 0.0f64;
    let mut worst_perm = 0.0f64;
    for case in 0..100 {
        let n = r.random_range(2..=100usize);
        let dx = r.random_range(1..=16usize);
        let dy = r.random_range(1..=16usize);
        let sx = DEFAULT_SIGMA_GRID[r.random_range(0..DEFAULT_SIGMA_GRID.len())];
        let sy = DEFAULT_SIGMA_GRID[r.random_range(0..DEFAULT_SIGMA_GRID.len())];
        // Spread comparable to the bandwidth so kernels are far from 0 and 1.
        let (fx, fy): (f64, f64) = (r.random_range(0.3..1.5), r.random_range(0.3..1.5));
        let px = random_points(&mut r, n, dx, sx * fx / (dx as f64).sqrt());
        let mut py = random_points(&mut r, n, dy, sy * fy / (dy as f64).sqrt());
        // Half the cases carry dependence between x and y.
        if case % 2 == 0 {
            for (a, b) in py.iter_mut().zip(&px) {
                a[0] += b[0];
            }
        }
        let x = Samples::from_rows(&px).map_err(|e| e.to_string())?;
        let y = Samples::from_rows(&py).map_err(|e| e.to_string())?;
        let fast = hsic(&x, &y, sx, sy).map_err(|e| e.to_string())?.raw;
        let oracle = naive_hsic(&px, &py, sx, sy);
        let rel = (fast - oracle).abs() / oracle.abs();
        ensure(rel <= 1e-10, || {
            format!("case {case}: optimized {fast:e} vs oracle {oracle:e} (rel {rel:e})")
        })?;
        worst_rel = worst_rel.max(rel);

        let c = Samples::from_rows(&vec![vec![7.5; dy]; n]).map_err(|e| e.to_string())?;
        let hc = hsic(&x, &c, sx, sy).map_err(|e| e.to_string())?;
        ensure(hc.value <= 1e-12 && hc.raw.abs() <= 1e-12, || {
            format!("case {case}: HSIC with constant = {:e}", hc.raw)
        })?;

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let permuted = hsic(&x.permuted(&perm), &y.permuted(&perm), sx, sy)
            .map_err(|e| e.to_string())?
            .raw;
        let diff = (permuted - fast).abs();
        ensure(diff <= 1e-12, || {
            format!("case {case}: permutation changed HSIC by {diff:e}")
        })?;
        worst_perm = worst_perm.max(diff);
    }
    let took = within(start, Duration::from_secs(30))?;
    Ok(format!(
        "100 pairs, max relative error {worst_rel:.1e}; constant input 0; max permutation change {worst_perm:.1e}; {took:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// Two-phase detection
// ---------------------------------------------------------------------------

const STAGE_STEPS: usize = 5;

fn to_dataset(rows: &[Vec<f64>], labels: &[u8], step: u64, layer: u32) -> ActivationDataset {
    let rows32: Vec<Vec<f32>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| v as f32).collect())
        .collect();
    let meta = DatasetMeta::last_token(
        "staged",
        DimensionLabel::Other,
        format!("step_{step:06}"),
        layer,
    );
    ActivationDataset::from_rows(&rows32, labels.to_vec(), meta).expect("finite fixture")
}

/// Random `T`, then `T = X`, then `T = f(Y)`; `STAGE_STEPS` checkpoints each.
fn staged_trajectory(seed: u64) -> Vec<StepActivations> {
    let (n, d) = (64usize, 8usize);
    let mut r = rng(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut r);
    let sign = |y: u8| if y == 1 { 1.0 } else { -1.0 };
    let x: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            (0..d)
                .map(|j| 100.0 * normal(&mut r) + if j == 0 { 80.0 * sign(y) } else { 0.0 })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for stage in 0..3 {
        for k in 0..STAGE_STEPS {
            let step = ((stage * STAGE_STEPS + k) * 10) as u64;
            let t: Vec<Vec<f64>> = match stage {
                0 => random_points(&mut r, n, d, 100.0),
                1 => x
                    .iter()
                    .map(|row| row.iter().map(|v| v + normal(&mut r)).collect())
                    .collect(),
                _ => labels
                    .iter()
                    .map(|&y| {
                        (0..d)
                            .map(|j| {
                                5.0 * normal(&mut r) + if j == 0 { 150.0 * sign(y) } else { 0.0 }
                            })
                            .collect()
                    })
                    .collect(),
            };
            out.push(StepActivations {
                step,
                first: to_dataset(&x, &labels, step, 0),
                target: to_dataset(&t, &labels, step, 3),
            });
        }
    }
    out
}

fn two_phase_detection() -> Outcome {
    let start = Instant::now();
    let mut peaks = Vec::new();
    for seed in 0..10u64 {
        let steps = staged_trajectory(seed);
        let trace = mi_sweep(&steps, 3, 0, &DEFAULT_SIGMA_GRID).map_err(|e| e.to_string())?;
        let report = detect_phases(&trace, 3).map_err(|e| e.to_string())?;
        let middle = (STAGE_STEPS..2 * STAGE_STEPS).contains(&report.peak_index);
        ensure(middle, || {
            format!(
                "seed {seed}: peak at index {} (step {}) outside the middle stage",
                report.peak_index, report.peak_step
            )
        })?;
        let i_ty = trace.i_ty();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&i_ty[..STAGE_STEPS]), mean(&i_ty[2 * STAGE_STEPS..]));
        ensure(last > first, || {
            format!("seed {seed}: stage-3 I(T,Y) {last:e} <= stage-1 {first:e}")
        })?;
        peaks.push(report.peak_step);
    }
    let took = within(start, Duration::from_secs(60))?;
    Ok(format!("10/10 seeds peak in the middle stage (steps {peaks:?}); stage-3 I(T,Y) above stage 1; {took:.1?}"))
}

// ---------------------------------------------------------------------------
// Toy model criteria
// ---------------------------------------------------------------------------

/// Probe trained on the train rows and a steering vector from the
/// development rows of one checkpoint's middle-layer dataset, plus the
/// test rows to use as prompts.
struct SteeringSetup {
    probe: ProbeModel,
    vector: SteeringVector,
    test_rows: Vec<usize>,
}

fn steering_setup(p: &StylePipeline, ckpt: &ToyLmCheckpoint) -> Result<SteeringSetup, String> {
    let ds = p.dataset(ckpt, MIDDLE_LAYER);
    let plan = make_splits(ds.n(), 0).map_err(|e| e.to_string())?;
    let train = ds.select(&plan.train).map_err(|e| e.to_string())?;
    let dev = ds.select(&plan.dev()).map_err(|e| e.to_string())?;
    let probe = fit_probe(&train, &ProbeConfig::default(), 0).map_err(|e| e.to_string())?;
    let vector = SteeringVector::from_dataset(&dev).map_err(|e| e.to_string())?;
    // Extraction skipped no rows, so dataset rows are corpus rows.
    Ok(SteeringSetup {
        probe,
        vector,
        test_rows: plan.test,
    })
}

fn end_to_end(ctx: &mut Option<StylePipeline>) -> Outcome {
    let start = Instant::now();
    let p = style_pipeline(500, 1000);
    ensure(p.report.skipped.is_empty(), || {
        "extraction skipped rows".into()
    })?;
    ensure(p.ckpts.len() == 11, || {
        format!("expected 11 checkpoints, got {}", p.ckpts.len())
    })?;

    let mut accs = Vec::new();
    let mut scores = Vec::new();
    for ckpt in &p.ckpts {
        let ds = p.dataset(ckpt, MIDDLE_LAYER);
        let (_, rep) = probe_dataset(&ds, SplitScheme::DevTest, &ProbeConfig::default(), 0)
            .map_err(|e| e.to_string())?;
        accs.push(rep.test_accuracy);
        let s = steering_setup(&p, ckpt)?;
        let prompts: Vec<Vec<u32>> = s.test_rows.iter().take(100).map(|&i| p.prompt(i)).collect();
        let spec = InterventionSpec::new(s.vector, 1.0);
        let score = steered_probe_score(ckpt, MIDDLE_LAYER, Some(&spec), &prompts, &s.probe, 4)
            .map_err(|e| e.to_string())?;
        scores.push(score);
    }
    let gain = accs[accs.len() - 1] - accs[0];
    ensure(gain >= 0.15, || {
        format!(
            "middle-layer accuracy {:.3} -> {:.3}, gain {gain:.3} < 0.15",
            accs[0],
            accs[accs.len() - 1]
        )
    })?;
    let layer0 = {
        let ds = p.dataset(&p.ckpts[0], 0);
        probe_dataset(&ds, SplitScheme::DevTest, &ProbeConfig::default(), 0)
            .map_err(|e| e.to_string())?
            .1
            .test_accuracy
    };
    let last = accs[accs.len() - 1];
    ensure(last > layer0, || {
        format!(
            "final middle-layer accuracy {last:.3} not above step-0 layer-0 accuracy {layer0:.3}"
        )
    })?;
    let r = pearson(&accs, &scores).map_err(|e| format!("correlation failed: {e}"))?;
    ensure(r.is_finite(), || "correlation is not finite".into())?;
    let took = within(start, Duration::from_secs(300))?;
    *ctx = Some(p);
    Ok(format!(
        "layer {MIDDLE_LAYER} accuracy {:.3} (step 0) -> {last:.3} (step 500), gain {gain:.3}; step-0 layer-0 {layer0:.3}; pearson(accuracy, steered score) = {r:.3}; {took:.1?}",
        accs[0]
    ))
}

fn intervention_contract(ctx: &mut Option<StylePipeline>) -> Outcome {
    let p = ctx.as_ref().ok_or("trained toy pipeline unavailable")?;
    let start = Instant::now();
    let ckpt = p.final_ckpt();
    let s = steering_setup(p, ckpt)?;
    let prompts: Vec<Vec<u32>> = s.test_rows.iter().take(120).map(|&i| p.prompt(i)).collect();
    let template = InterventionSpec::new(s.vector.clone(), 0.0);

    for prompt in &prompts {
        let plain = generate(ckpt, prompt, 8, None).map_err(|e| e.to_string())?;
        let zero = generate(ckpt, prompt, 8, Some(&template)).map_err(|e| e.to_string())?;
        ensure(plain == zero, || {
            "alpha = 0 generation differs from unsteered generation".into()
        })?;
    }

    let ppl = style_ppl_corpus(100);
    let sweep = strength_sweep(
        ckpt,
        &template,
        &[0.0, 1.0, 2.0],
        &prompts,
        &ppl,
        &s.probe,
        &SweepSettings::default(),
    )
    .map_err(|e| e.to_string())?;
    let row_scores: Vec<f64> = sweep.rows.iter().map(|r| r.mean_probe_score).collect();
    ensure(
        sweep.rows[0].mean_probe_score == sweep.baseline_score
            && sweep.rows[0].perplexity == sweep.baseline_perplexity,
        || "alpha = 0 row differs from the unsteered baseline".into(),
    )?;
    ensure(row_scores.windows(2).all(|w| w[0] <= w[1]), || {
        format!("mean probe logit not non-decreasing: {row_scores:?}")
    })?;

    // Locality and the captured value at the steered layer.
    let caps: Vec<CaptureRequest> = (0..=ckpt.config().n_layers)
        .map(CaptureRequest::last_token)
        .collect();
    let spec = template.with_alpha(2.0);
    for prompt in &prompts {
        let plain = forward(ckpt, prompt, &caps, None).map_err(|e| e.to_string())?;
        let steered = forward(ckpt, prompt, &caps, Some(&spec)).map_err(|e| e.to_string())?;
        for l in 0..MIDDLE_LAYER {
            let same = plain.captures[l]
                .iter()
                .zip(&steered.captures[l])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || {
                format!("capture at layer {l} changed by an intervention at layer {MIDDLE_LAYER}")
            })?;
        }
        let h: Vec<f64> = plain.captures[MIDDLE_LAYER]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let expected: Vec<f32> = apply_intervention(&h, &spec)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|&v| v as f32)
            .collect();
        ensure(expected == steered.captures[MIDDLE_LAYER], || {
            "steered capture is not h + alpha * v".into()
        })?;
    }
    let took = within(start, Duration::from_secs(120))?;
    Ok(format!(
        "alpha=0 token-identical on {} prompts; mean probe logit {:?} for alpha 0,1,2; locality bitwise; {took:.1?} (reuses the trained model)",
        prompts.len(),
        row_scores.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    ))
}

fn proxy_identities(ctx: &mut Option<StylePipeline>) -> Outcome {
    let p = ctx.as_ref().ok_or("trained toy pipeline unavailable")?;
    let start = Instant::now();
    let (base, tuned, untuned) = (&p.ckpts[10], &p.ckpts[5], &p.ckpts[2]);
    let mut checked = 0;
    for row in 0..40 {
        let prompt = p.prompt(row);
        let prompt = &prompt[..1 + row % 20];
        let base_gen = generate(base, prompt, 10, None).map_err(|e| e.to_string())?;
        let tuned_gen = generate(tuned, prompt, 10, None).map_err(|e| e.to_string())?;
        let a = proxy_generate(base, tuned, tuned, prompt, 10).map_err(|e| e.to_string())?;
        ensure(a == base_gen, || {
            format!("row {row}: tuned == untuned did not reproduce the base generation")
        })?;
        let b = proxy_generate(untuned, tuned, untuned, prompt, 10).map_err(|e| e.to_string())?;
        ensure(b == tuned_gen, || {
            format!("row {row}: base == untuned did not reproduce the tuned generation")
        })?;
        checked += 1;
    }
    let took = start.elapsed();
    Ok(format!(
        "{checked} prompts: both identities hold token-for-token; {took:.1?}"
    ))
}

fn perplexity_sanity(ctx: &mut Option<StylePipeline>) -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for vocab in [32usize, 258] {
        let cfg = ToyLmConfig {
            vocab_size: vocab,
            ..ToyLmConfig::default()
        };
        let ckpt = ToyLmCheckpoint::init(cfg).map_err(|e| e.to_string())?;
        let mut r = rng(vocab as u64);
        let corpus: Vec<Vec<u32>> = (0..80)
            .map(|_| (0..128).map(|_| r.random_range(0..vocab as u32)).collect())
            .collect();
        let predicted: usize = corpus.iter().map(|s| s.len() - 1).sum();
        ensure(predicted >= 10_000, || "corpus too small".into())?;
        let ppl = perplexity(&ckpt, &corpus, None).map_err(|e| e.to_string())?;
        let rel = (ppl - vocab as f64).abs() / vocab as f64;
        ensure(rel <= 0.10, || {
            format!(
                "vocab {vocab}: untrained perplexity {ppl:.3} is {:.1}% off",
                rel * 100.0
            )
        })?;
        ensure(ppl >= 1.0, || format!("perplexity {ppl} < 1"))?;
        parts.push(format!("V={vocab}: {ppl:.2} on {predicted} tokens"));
    }
    if let Some(p) = ctx.as_ref() {
        let held = style_ppl_corpus(50);
        let mut lowest = f64::INFINITY;
        for ckpt in &p.ckpts {
            let ppl = perplexity(ckpt, &held, None).map_err(|e| e.to_string())?;
            ensure(ppl >= 1.0, || {
                format!("{}: perplexity {ppl} < 1", ckpt.checkpoint_id())
            })?;
            lowest = lowest.min(ppl);
        }
        parts.push(format!("trained checkpoints >= 1 (lowest {lowest:.3})"));
    }
    let took = start.elapsed();
    Ok(format!("{}; {took:.1?}", parts.join("; ")))
}

// ---------------------------------------------------------------------------

fn main() {
    let mut ctx: Option<StylePipeline> = None;
    type Criterion = fn(&mut Option<StylePipeline>) -> Outcome;
    let criteria: [(&str, Criterion); 8] = [
        ("ACTV1 round-trip", |_| actv_round_trip()),
        ("Probe correctness", |_| probe_correctness()),
        ("HSIC oracle equivalence", |_| hsic_oracle()),
        ("Two-phase detection", |_| two_phase_detection()),
        ("End-to-end toy pipeline", end_to_end),
        ("Intervention contract", intervention_contract),
        ("Proxy-tuning identities", proxy_identities),
        ("Perplexity sanity", perplexity_sanity),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut ctx))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
