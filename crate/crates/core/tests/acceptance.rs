//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always print.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use maskprompt::corpus::StyleLabel;
use maskprompt::embed::{EmbeddingMatrix, Origin, RowMeta};
use maskprompt::lingua::{analyze, mask_caption, LexiconTagger, MaskedCaption, PosTag};
use maskprompt::metrics::{diversity_groups, mmd_rbf, pairwise_diversity, ssim, DiversityMetric, GrayImage, SsimParams};
use maskprompt::mock::{self, write_mock_dataset, MockCounts};
use maskprompt::pipeline::{run_experiment, Backends, ExperimentConfig};
use maskprompt::probe::{adamw_step, ce_loss, combined_loss, train_probe, AdamState, Batch, Grads, Params, TrainConfig};
use maskprompt::promptkit::{validate_completion, PromptStrategy, ValidationPolicy};
use maskprompt::rng::SplitRng;
use maskprompt::synth::SyntheticSample;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// masking

const SEVEN: &str = "a red dress with white lace, black boots and a hat";

fn masking() -> Outcome {
    let tc = analyze(SEVEN, &LexiconTagger::builtin()).map_err(|e| e.to_string())?;
    let positions = tc.maskable_positions();
    if positions.len() != 7 {
        let words: Vec<&str> = positions.iter().map(|&p| tc.tokens[p].surface.as_str()).collect();
        return Err(format!("fixture caption has maskable tokens {words:?}, want 7"));
    }
    let start = Instant::now();
    let mut counts = vec![0usize; tc.tokens.len()];
    for seed in 0..10_000u64 {
        let mc = mask_caption(&tc, 0.5, seed).map_err(|e| e.to_string())?;
        if mc.mask_positions.len() != 4 {
            return Err(format!("seed {seed} masked {} tokens", mc.mask_positions.len()));
        }
        for &p in &mc.mask_positions {
            counts[p] += 1;
        }
    }
    let elapsed = start.elapsed();
    let expected = 4.0 / 7.0;
    let max_dev = positions
        .iter()
        .map(|&p| (counts[p] as f64 / 10_000.0 - expected).abs())
        .fold(0.0, f64::max);
    let stray = counts.iter().enumerate().any(|(i, &c)| c > 0 && !positions.contains(&i));
    check(
        !stray && max_dev <= 0.02 && elapsed < Duration::from_secs(5),
        format!("max |freq - 4/7| = {max_dev:.4}, {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// objective

fn random_instance(rng: &mut SplitRng, c: usize, d: usize) -> (Params, Batch, Batch) {
    let mut p = Params::zeros(c, d);
    p.w.iter_mut().for_each(|w| *w = rng.standard_normal() * 0.5);
    p.b.iter_mut().for_each(|b| *b = rng.standard_normal() * 0.5);
    let n_real = 1 + rng.below(8) as usize;
    let n_syn = 1 + rng.below(32) as usize;
    let mut batch = |n: usize| Batch {
        d,
        x: (0..n * d).map(|_| rng.standard_normal()).collect(),
        y: (0..n).map(|_| rng.below(c as u64) as usize).collect(),
    };
    let real = batch(n_real);
    let syn = batch(n_syn);
    (p, real, syn)
}

/// Mean negative log softmax probability, computed directly from probabilities.
fn naive_ce(p: &Params, b: &Batch) -> f64 {
    let mut total = 0.0;
    for i in 0..b.len() {
        let x = b.row(i);
        let z: Vec<f64> = (0..p.c)
            .map(|k| p.b[k] + (0..p.d).map(|j| p.w[k * p.d + j] * x[j]).sum::<f64>())
            .collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        total += -(z[b.y[i]].exp() / denom).ln();
    }
    total / b.len() as f64
}

fn objective_oracle() -> Outcome {
    let mut rng = SplitRng::new(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (p, real, syn) = random_instance(&mut rng, 13, 16);
        let (loss, _) = combined_loss(&p, &real, &syn).map_err(|e| e.to_string())?;
        let oracle = naive_ce(&p, &real) + naive_ce(&p, &syn);
        let separate = ce_loss(&p, &real, "real").unwrap().0 + ce_loss(&p, &syn, "synthetic").unwrap().0;
        worst = worst.max((loss - oracle).abs()).max((loss - separate).abs());
    }
    check(worst < 1e-6, format!("max |delta| = {worst:.3e}"))
}

fn gradient_check() -> Outcome {
    let mut rng = SplitRng::new(12);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (p, real, syn) = random_instance(&mut rng, 13, 16);
        let (_, g) = combined_loss(&p, &real, &syn).map_err(|e| e.to_string())?;
        let loss_at = |q: &Params| combined_loss(q, &real, &syn).map(|r| r.0).unwrap();
        let n_w = p.w.len();
        for i in 0..n_w + p.b.len() {
            let (mut up, mut dn) = (p.clone(), p.clone());
            if i < n_w {
                up.w[i] += h;
                dn.w[i] -= h;
            } else {
                up.b[i - n_w] += h;
                dn.b[i - n_w] -= h;
            }
            let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
            let an = if i < n_w { g.w[i] } else { g.b[i - n_w] };
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    check(worst < 1e-4, format!("max relative error = {worst:.3e}"))
}

fn adamw() -> Outcome {
    let cfg = TrainConfig::default();
    let mut p = Params {
        c: 1,
        d: 1,
        w: vec![1.0],
        b: vec![0.0],
    };
    let mut s = AdamState::new(&p);
    let g = Grads { w: vec![1.0], b: vec![0.0] };
    adamw_step(&mut p, &mut s, &g, &cfg).map_err(|e| e.to_string())?;
    let first = p.w[0];

    // hand-rolled recursion
    let (lr, b1, b2, eps, wd) = (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        m = b1 * m + (1.0 - b1);
        v = b2 * v + (1.0 - b2);
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w = w - lr * mh / (vh.sqrt() + eps) - lr * wd * w;
    }
    adamw_step(&mut p, &mut s, &g, &cfg).map_err(|e| e.to_string())?;
    let second = p.w[0];
    check(
        (first - 0.999899).abs() <= 1e-9 && (second - w).abs() <= 1e-12,
        format!("step1 = {first:.9}, step2 = {second:.12} (oracle {w:.12})"),
    )
}

// ---------------------------------------------------------------------------
// probe fixtures

fn meta(i: usize, label: StyleLabel, origin: Origin) -> RowMeta {
    RowMeta {
        id: format!("{origin:?}-{i}"),
        label,
        origin,
    }
}

/// `per_class` draws from N(e_c, sigma^2 I) for each class.
fn gaussian_set(rng: &mut SplitRng, classes: &[StyleLabel], d: usize, per_class: usize, sigma: f64, origin: Origin) -> EmbeddingMatrix {
    let mut rows = Vec::new();
    let mut manifest = Vec::new();
    for (c, &label) in classes.iter().enumerate() {
        for _ in 0..per_class {
            let row: Vec<f32> = (0..d)
                .map(|j| (if j == c { 1.0 } else { 0.0 } + sigma * rng.standard_normal()) as f32)
                .collect();
            manifest.push(meta(rows.len(), label, origin));
            rows.push(row);
        }
    }
    EmbeddingMatrix::from_rows(d, rows, manifest, false).expect("consistent rows")
}

fn test_accuracy(model: &maskprompt::probe::ProbeModel, test: &EmbeddingMatrix) -> f64 {
    let pred = model.predict(test).unwrap();
    let truth = test.labels();
    pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

fn run_styles() -> Vec<StyleLabel> {
    StyleLabel::ALL.iter().copied().filter(|s| *s != StyleLabel::Girlish).collect()
}

fn separable() -> Outcome {
    let classes = run_styles();
    let d = 16;
    let start = Instant::now();
    let mut rng = SplitRng::new(21);
    let real = gaussian_set(&mut rng, &classes, d, 1, 0.01, Origin::Real);
    let syn = gaussian_set(&mut rng, &classes, d, 64, 0.01, Origin::Synthetic);
    let val = gaussian_set(&mut rng, &classes, d, 1, 0.01, Origin::Real);
    let test = gaussian_set(&mut rng, &classes, d, 20, 0.01, Origin::Real);
    let cfg = TrainConfig {
        max_epochs: 50,
        ..TrainConfig::default()
    };
    let (model, history) = train_probe(&real, Some(&syn), &val, &classes, &cfg).map_err(|e| e.to_string())?;
    let acc = test_accuracy(&model, &test);
    let elapsed = start.elapsed();
    check(
        acc == 1.0 && history.epochs.len() <= 50 && elapsed < Duration::from_secs(30),
        format!("accuracy {acc:.4} after {} epochs, {:.2}s", history.epochs.len(), elapsed.as_secs_f64()),
    )
}

/// Full mock pipeline with MLP prompts: the mock embedder places each image
/// at its style's basis vector plus N(0, 0.4^2) noise.
fn directional() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    let counts = MockCounts { train: 2, val: 2, test: 30 };
    write_mock_dataset(&data, &StyleLabel::ALL, counts, 32, 77).map_err(|e| e.to_string())?;
    let config = serde_json::json!({
        "dataset_root": data,
        "output_dir": tmp.path().join("out"),
        "strategy": "mlp",
        "n_shots": [1],
        "seeds": [0, 1, 2, 3, 4],
        "generation": {"samples_per_style": 64, "width": 32, "height": 32},
        "training": {"lr": 0.01},
        "metrics": {"ssim": false},
        "backends": {"mock": true, "mock_embed_dim": 16, "mock_embed_sigma": 0.4}
    });
    let cfg = ExperimentConfig::from_json_str(&config.to_string()).map_err(|e| e.to_string())?;
    let backends = Backends::from_config(&cfg.backends).map_err(|e| e.to_string())?;
    let report = run_experiment(&cfg, &backends, false).map_err(|e| e.to_string())?;
    if let Some(c) = report.failed().first() {
        return Err(format!("cell failed: {:?}", c.error));
    }
    let mean = |method: &str| report.accuracy.iter().find(|r| r.method == method).and_then(|r| r.mean);
    let (r, a) = (mean("Real Only").ok_or("no Real Only row")?, mean("MLP").ok_or("no MLP row")?);
    check(a - r >= 0.05, format!("real only {r:.4}, real + MLP {a:.4}, gain {:.4}", a - r))
}

// ---------------------------------------------------------------------------
// metrics

fn random_image(rng: &mut SplitRng, w: u32, h: u32) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| rng.below(256) as f64).collect())
}

/// Window statistics computed straight from the definition.
fn brute_ssim(a: &GrayImage, b: &GrayImage, p: &SsimParams) -> f64 {
    let win = p.win_size;
    let n = (win * win) as f64;
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0.0;
    for y0 in 0..=(a.height as usize - win) {
        for x0 in 0..=(a.width as usize - win) {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for dy in 0..win {
                for dx in 0..win {
                    xs.push(a.at(x0 + dx, y0 + dy));
                    ys.push(b.at(x0 + dx, y0 + dy));
                }
            }
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (n - 1.0);
            let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (n - 1.0);
            let cxy = xs.iter().zip(&ys).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / (n - 1.0);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

fn ssim_checks() -> Outcome {
    let p = SsimParams::default();
    let mut rng = SplitRng::new(31);
    let a = random_image(&mut rng, 32, 32);
    let b = random_image(&mut rng, 32, 32);
    let s = |x: &GrayImage, y: &GrayImage| ssim(x, y, &p).unwrap();
    let identity = s(&a, &a);
    let asym = (s(&a, &b) - s(&b, &a)).abs();
    let mut brute_err: f64 = 0.0;
    for _ in 0..5 {
        let x = random_image(&mut rng, 32, 32);
        let y = random_image(&mut rng, 32, 32);
        brute_err = brute_err.max((s(&x, &y) - brute_ssim(&x, &y, &p)).abs());
    }
    let (ca, cb) = (80.0, 200.0);
    let c1 = (p.k1 * p.data_range).powi(2);
    let closed = (2.0 * ca * cb + c1) / (ca * ca + cb * cb + c1);
    let const_err = (s(&GrayImage::new(16, 16, vec![ca; 256]), &GrayImage::new(16, 16, vec![cb; 256])) - closed).abs();
    check(
        identity == 1.0 && asym < 1e-9 && brute_err < 1e-7 && const_err < 1e-12,
        format!("identity {identity}, asymmetry {asym:.1e}, brute force {brute_err:.1e}, constant {const_err:.1e}"),
    )
}

fn matrix(rows: Vec<Vec<f32>>) -> EmbeddingMatrix {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let manifest = (0..rows.len()).map(|i| meta(i, StyleLabel::Mode, Origin::Real)).collect();
    EmbeddingMatrix::from_rows(d, rows, manifest, false).unwrap()
}

fn mmd_checks() -> Outcome {
    let (sigma, scale) = (10.0, 1000.0);
    let mut rng = SplitRng::new(41);
    let rand_set = |rng: &mut SplitRng, n: usize, d: usize, shift: f64| {
        matrix(
            (0..n)
                .map(|_| (0..d).map(|_| (rng.standard_normal() * 5.0 + shift) as f32).collect())
                .collect(),
        )
    };
    let x = rand_set(&mut rng, 12, 8, 0.0);
    let self_mmd = mmd_rbf(&x, &x, sigma, scale).unwrap().abs();
    let single = mmd_rbf(&matrix(vec![vec![0.0, 0.0]]), &matrix(vec![vec![10.0, 10.0]]), sigma, scale).unwrap();
    let expected = scale * (2.0 - 2.0 * (-1.0f64).exp());
    let mut min_val = f64::INFINITY;
    for _ in 0..1000 {
        let n = 1 + rng.below(6) as usize;
        let m = 1 + rng.below(6) as usize;
        let shift = rng.standard_normal() * 3.0;
        let a = rand_set(&mut rng, n, 4, 0.0);
        let b = rand_set(&mut rng, m, 4, shift);
        min_val = min_val.min(mmd_rbf(&a, &b, sigma, scale).unwrap());
    }
    check(
        self_mmd < 1e-9 * scale && (single - expected).abs() < 1e-9 && min_val >= 0.0,
        format!("self {self_mmd:.1e}, singleton {single:.12} (want {expected:.12}), min over 1000 pairs {min_val:.3e}"),
    )
}

fn sample(id: String, label: StyleLabel, reference: Option<String>) -> SyntheticSample {
    SyntheticSample {
        image_path: format!("{id}.png").into(),
        id,
        label,
        strategy: PromptStrategy::Class,
        prompt: String::new(),
        reference_id: reference,
        completion: None,
        backend_seed: 0,
    }
}

fn diversity_checks() -> Outcome {
    let mut rng = SplitRng::new(51);
    let mut worst: f64 = 0.0;
    for m in 0..=8usize {
        let vecs: Vec<Vec<f32>> = (0..m).map(|_| (0..6).map(|_| rng.standard_normal() as f32).collect()).collect();
        let f = |a: &Vec<f32>, b: &Vec<f32>| a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
        let report = pairwise_diversity(&[("g".to_string(), vecs.clone())], DiversityMetric::FeatureDistance, f);
        let mut naive = Vec::new();
        for i in 0..m {
            for j in 0..m {
                if i < j {
                    naive.push(f(&vecs[i], &vecs[j]));
                }
            }
        }
        match (report.global_mean, naive.is_empty()) {
            (None, true) => {}
            (Some(v), false) => worst = worst.max((v - naive.iter().sum::<f64>() / naive.len() as f64).abs()),
            _ => return Err(format!("group of {m}: skip behaviour disagrees with oracle")),
        }
    }
    for n in [0usize, 31, 32, 33, 64, 100, 512] {
        let samples: Vec<SyntheticSample> = (0..n)
            .map(|i| sample(format!("class-mode-{i:05}"), StyleLabel::Mode, None))
            .collect();
        let groups = diversity_groups(&samples, PromptStrategy::Class, 32);
        if groups.len() != n / 32 || groups.iter().any(|(_, g)| g.len() != 32) {
            return Err(format!("N = {n}: {} groups", groups.len()));
        }
    }
    check(worst < 1e-12, format!("max |mean - naive| = {worst:.1e}; class groups exact"))
}

// ---------------------------------------------------------------------------
// end to end

fn run_mock(bin: &Path, dir: &Path, out: &str) -> Result<std::path::PathBuf, String> {
    let cfg = dir.join(format!("{out}.json"));
    let text = serde_json::json!({
        "dataset_root": dir.join("data"),
        "output_dir": dir.join(out),
        "run_id": "det",
        "n_shots": [1, 2],
        "seeds": [0, 1],
        "generation": {"samples_per_style": 4, "width": 32, "height": 32},
    });
    std::fs::write(&cfg, text.to_string()).map_err(|e| e.to_string())?;
    let status = Command::new(bin)
        .args(["run", "--mock", "--config"])
        .arg(&cfg)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("run failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    Ok(dir.join(out).join("det"))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let counts = MockCounts { train: 3, val: 2, test: 2 };
    write_mock_dataset(&tmp.path().join("data"), &StyleLabel::ALL, counts, 32, 5).map_err(|e| e.to_string())?;
    let bin = Path::new(env!("CARGO_BIN_EXE_maskprompt"));
    let a = run_mock(bin, tmp.path(), "a")?;
    let b = run_mock(bin, tmp.path(), "b")?;
    let mut compared = 0;
    for rel in ["report.json", "n1_s0/mlp/manifest.jsonl", "n1_s1/mlp/manifest.jsonl", "n2_s0/mlp/manifest.jsonl", "n2_s1/mlp/manifest.jsonl"] {
        let x = std::fs::read(a.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        let y = std::fs::read(b.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        if x != y {
            return Err(format!("{rel} differs"));
        }
        compared += 1;
    }
    check(true, format!("{compared} files byte-identical across two runs"))
}

/// A masked caption, fill words for its masks, and a mutation target.
#[derive(Debug, Clone)]
struct Case {
    style: usize,
    caption_seed: u64,
    mask_seed: u64,
    ratio: f64,
    fills: Vec<usize>,
    victim: usize,
    replacement: String,
    delete: bool,
}

fn case_strategy() -> impl Strategy<Value = Case> {
    (
        0..StyleLabel::ALL.len(),
        any::<u64>(),
        any::<u64>(),
        0.05f64..1.0,
        proptest::collection::vec(any::<usize>(), 16),
        any::<usize>(),
        "[a-z]{3,9}",
        any::<bool>(),
    )
        .prop_map(|(style, caption_seed, mask_seed, ratio, fills, victim, replacement, delete)| Case {
            style,
            caption_seed,
            mask_seed,
            ratio,
            fills,
            victim,
            replacement,
            delete,
        })
}

fn build(case: &Case, lex: &LexiconTagger) -> MaskedCaption {
    let style = StyleLabel::ALL[case.style];
    let caption = mock::caption_for(Some(style), case.caption_seed);
    let tc = analyze(&caption, lex).unwrap();
    mask_caption(&tc, case.ratio, case.mask_seed).unwrap()
}

/// Words of the completed caption, with masks filled from the lexicon.
fn fill(mc: &MaskedCaption, case: &Case, vocab: &[&str]) -> Vec<(String, bool)> {
    let mut k = 0;
    mc.source
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if mc.is_masked(i) {
                let w = vocab[case.fills[k % case.fills.len()] % vocab.len()].to_string();
                k += 1;
                (w, true)
            } else {
                (t.surface.clone(), false)
            }
        })
        .collect()
}

fn join(words: &[(String, bool)]) -> String {
    words.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(" ")
}

fn completion_validation() -> Outcome {
    let lex = LexiconTagger::builtin();
    let mut vocab: Vec<&str> = lex.words(PosTag::Noun);
    vocab.extend(lex.words(PosTag::Adj));
    vocab.retain(|w| !w.contains(' '));
    let policy = ValidationPolicy::default();
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let result = runner.run(&case_strategy(), |case| {
        let mc = build(&case, &lex);
        let words = fill(&mc, &case, &vocab);
        let text = join(&words);
        prop_assert!(validate_completion(&mc, &text, &policy).is_accepted(), "fill rejected: {text}");

        let candidates: Vec<usize> = words
            .iter()
            .enumerate()
            .filter(|(_, (w, masked))| !masked && w.chars().any(char::is_alphanumeric))
            .map(|(i, _)| i)
            .collect();
        prop_assume!(!candidates.is_empty());
        let victim = candidates[case.victim % candidates.len()];
        let mut broken = words.clone();
        if case.delete {
            broken.remove(victim);
        } else {
            prop_assume!(broken[victim].0.to_lowercase() != case.replacement);
            broken[victim].0 = case.replacement.clone();
        }
        let text = join(&broken);
        prop_assert!(!validate_completion(&mc, &text, &policy).is_accepted(), "mutation accepted: {text}");
        Ok(())
    });
    match result {
        Ok(()) => check(true, "1000 cases: fills accepted, mutations rejected".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn embv1_round_trip() -> Outcome {
    let mut rng = SplitRng::new(61);
    for i in 0..100 {
        let n = if i == 0 { 0 } else { rng.below(20) as usize };
        let d = 1 + rng.below(40) as usize;
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| f32::from_bits(rng.next_u64() as u32)).collect())
            .collect();
        let manifest = (0..n).map(|k| meta(k, StyleLabel::ALL[k % 14], Origin::Synthetic)).collect();
        let m = EmbeddingMatrix::from_rows(d, rows, manifest, false).map_err(|e| e.to_string())?;
        let bytes = m.to_bytes();
        let back = EmbeddingMatrix::from_bytes(&bytes).map_err(|e| e.to_string())?;
        let same_bits = back.n == m.n
            && back.d == m.d
            && back.data.iter().map(|v| v.to_bits()).eq(m.data.iter().map(|v| v.to_bits()));
        if !same_bits || back.to_bytes() != bytes {
            return Err(format!("matrix {i} ({n}x{d}) not bit-exact"));
        }
    }
    check(true, "100 matrices bit-exact, including n = 0".into())
}

fn main() {
    let checks: Vec<(&str, fn() -> Outcome)> = vec![
        ("masking", masking),
        ("objective_oracle", objective_oracle),
        ("gradient_check", gradient_check),
        ("adamw", adamw),
        ("separable_fixture", separable),
        ("directional_effect", directional),
        ("ssim", ssim_checks),
        ("mmd", mmd_checks),
        ("diversity", diversity_checks),
        ("determinism", determinism),
        ("completion_validation", completion_validation),
        ("embv1_round_trip", embv1_round_trip),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
