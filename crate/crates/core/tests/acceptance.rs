//! Acceptance suite. Trains the default model and embedder once, then checks
//! each criterion and prints one PASS/FAIL line per criterion. Exits nonzero
//! if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;

use maskguide::cli::{self, RunConfig};
use maskguide::rejection::{proxy_class_score, run_trials, score_trials, ProxyEmbedder};
use maskguide::rng::{derive_seed, rng_from_seed};
use maskguide::sampler::{
    mask_schedule, maskgit_sample, masksketch_sample, masksketch_sample_observed, sample_mask, SamplerConfig,
};
use maskguide::structure::{jeffreys, structure_scores_for};
use maskguide::tokens::dataset::load_dataset;
use maskguide::tokens::{decode_tokens, encode_raster, Codebook, Raster, ShapeSample, Split, TokenGrid};
use maskguide::training::grad_check_probes;
use maskguide::transformer::{ArchConfig, LayerSet, TransformerModel};

// tolerances and budgets
const JEFFREYS_ZERO_TOL: f64 = 1e-6;
const JEFFREYS_ORACLE_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-2;
const GRAD_EPS: f64 = 1e-3;
const GUMBEL_FREQ_TOL: f64 = 0.01;
const RECON_WIN_RATE: f64 = 0.8;
const DIVERSITY_RATIO: f64 = 2.0;
const SIGN_TEST_P: f64 = 0.05;
const TRAIN_MARGIN: f64 = 0.15;
const IDENTITY_BUDGET: Duration = Duration::from_secs(120);
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const RECON_BUDGET: Duration = Duration::from_secs(15 * 60);
const TRAIN_BUDGET: Duration = Duration::from_secs(10 * 60);

// sampler lengths used by the desk-scale experiments
const IDENTITY_ITERATIONS: usize = 8;
const EXPERIMENT_ITERATIONS: usize = 16;
const RECON_ITERATIONS: usize = 64;
const EARLY: &[usize] = &[1];
const LATE: &[usize] = &[7, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Fixture {
    root: PathBuf,
    config: RunConfig,
    model: TransformerModel<f32>,
    embedder: ProxyEmbedder,
    held_out: Vec<ShapeSample>,
    train_time: Duration,
    train_accuracy: f64,
    train_baseline: f64,
}

fn fixture(root: &Path) -> Fixture {
    let mut config = RunConfig::default();
    config.paths.data_dir = root.join("data");
    config.paths.model = root.join("train/model.ckpt");
    config.paths.embedder = root.join("train-embedder/embedder.ckpt");
    config.paths.out_dir = root.to_path_buf();
    cli::cmd_gen_data(&config, None).unwrap();
    let start = Instant::now();
    let acc = cli::cmd_train(&config, None).unwrap();
    let train_time = start.elapsed();
    let emb = cli::cmd_train_embedder(&config, None).unwrap();
    println!(
        "setup: trained in {:.0}s; embedder held-out accuracy {:.3}, mean true-class probability {:.3}",
        train_time.as_secs_f64(),
        emb.accuracy,
        emb.mean_true_class_probability
    );
    Fixture {
        root: root.to_path_buf(),
        model: TransformerModel::load(&config.paths.model).unwrap(),
        embedder: ProxyEmbedder::load(&config.paths.embedder).unwrap(),
        held_out: load_dataset(&config.paths.data_dir, Some(Split::Test)).unwrap(),
        config,
        train_time,
        train_accuracy: acc.accuracy,
        train_baseline: acc.majority_accuracy,
    }
}

fn sampler(iterations: usize, lambda_s: f64) -> SamplerConfig {
    SamplerConfig {
        iterations,
        lambda_s,
        ..SamplerConfig::default()
    }
}

fn encode(raster: &Raster, class_label: usize) -> TokenGrid {
    encode_raster(raster, &Codebook::binary4(), class_label).unwrap()
}

fn raster_of(grid: &TokenGrid) -> Raster {
    decode_tokens(grid, &Codebook::binary4()).unwrap()
}

fn pixel_diversity(rasters: &[Raster]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..rasters.len() {
        for j in i + 1..rasters.len() {
            let d: f64 = rasters[i]
                .pixels
                .iter()
                .zip(&rasters[j].pixels)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum();
            total += d / rasters[i].pixels.len() as f64;
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn criterion_1(f: &Fixture) -> Outcome {
    let start = Instant::now();
    let cfg = sampler(IDENTITY_ITERATIONS, 0.0);
    let mut mismatches = 0;
    for seed in 0..100u64 {
        let s = &f.held_out[seed as usize % f.held_out.len()];
        let sketch = encode(&s.sketch, s.class_label);
        let guided = masksketch_sample(&f.model, &sketch, s.class_label, &cfg, &mut rng_from_seed(seed)).unwrap();
        let base = maskgit_sample(&f.model, s.class_label, &cfg, &mut rng_from_seed(seed)).unwrap();
        mismatches += (guided != base) as usize;
    }
    let took = start.elapsed();
    outcome(
        mismatches == 0 && took < IDENTITY_BUDGET,
        format!("{mismatches}/100 seeds differ, {:.0}s", took.as_secs_f64()),
    )
}

fn criterion_2(f: &Fixture) -> Outcome {
    let mut rng = rng_from_seed(2);
    let n = f.model.seq_len();
    let mut checked = 0;
    let mut bad = Vec::new();
    for run in 0..20 {
        let lambda_s: f64 = rng.gen_range(0.0..=1.0);
        let gamma_end: f64 = rng.gen_range(0.05..0.5);
        let gamma_start: f64 = rng.gen_range(0.55..=1.0);
        let iterations = rng.gen_range(2..=6);
        let cfg = SamplerConfig {
            gamma_start,
            gamma_end,
            ..sampler(iterations, lambda_s)
        };
        let s = &f.held_out[run];
        let sketch = encode(&s.sketch, s.class_label);
        masksketch_sample_observed(&f.model, &sketch, s.class_label, &cfg, &mut rng_from_seed(run as u64), &mut |step| {
            let t = step.record.t;
            let gamma = gamma_end + (gamma_start - gamma_end) * t as f64 / (iterations - 1) as f64;
            let ks = (lambda_s * gamma * n as f64).floor() as usize;
            let kc = ((1.0 - lambda_s) * gamma * n as f64).floor() as usize;
            let ps = step.masks.structure.iter().filter(|&&b| b).count();
            let pc = step.masks.confidence.iter().filter(|&&b| b).count();
            let union = step
                .masks
                .structure
                .iter()
                .zip(&step.masks.confidence)
                .filter(|(a, b)| **a || **b)
                .count();
            checked += 1;
            if ps != ks || pc != kc || union > ps + pc {
                bad.push(format!("run {run} t {t}: {ps}/{ks} {pc}/{kc} union {union}"));
            }
        })
        .unwrap();
    }
    outcome(bad.is_empty(), format!("{checked} iterations checked, {} violations {:?}", bad.len(), bad))
}

/// Two-way KL averaged, summed term by term.
fn jeffreys_oracle(u: &[f64], v: &[f64]) -> f64 {
    let su: f64 = u.iter().sum();
    let sv: f64 = v.iter().sum();
    let mut kl_uv = 0.0;
    let mut kl_vu = 0.0;
    for i in 0..u.len() {
        let (a, b) = (u[i] / su, v[i] / sv);
        kl_uv += a * ((a + 1e-8).ln() - (b + 1e-8).ln());
        kl_vu += b * ((b + 1e-8).ln() - (a + 1e-8).ln());
    }
    0.5 * (kl_uv + kl_vu)
}

fn criterion_3() -> Outcome {
    let mut rng = rng_from_seed(3);
    let mut worst_oracle: f64 = 0.0;
    let mut failures = 0;
    let dist = |rng: &mut maskguide::rng::Rng, n: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.1) { 0.0 } else { -rng.gen::<f64>().max(1e-300).ln() })
            .collect();
        let s: f64 = raw.iter().sum();
        if s == 0.0 {
            let mut one = vec![0.0; n];
            one[0] = 1.0;
            return one;
        }
        raw.iter().map(|x| x / s).collect()
    };
    for _ in 0..10_000 {
        let n = rng.gen_range(2..=64);
        let u = dist(&mut rng, n);
        let v = dist(&mut rng, n);
        let uv = jeffreys(&u, &v).unwrap();
        let vu = jeffreys(&v, &u).unwrap();
        let uu = jeffreys(&u, &u).unwrap();
        let equal = u == v;
        let zero_ok = uu.abs() <= JEFFREYS_ZERO_TOL && (equal || uv > 0.0);
        let oracle = (uv - jeffreys_oracle(&u, &v)).abs();
        worst_oracle = worst_oracle.max(oracle);
        if uv < 0.0 || uv.to_bits() != vu.to_bits() || !zero_ok || oracle > JEFFREYS_ORACLE_TOL {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("10000 pairs, {failures} failures, worst oracle gap {worst_oracle:.2e}"),
    )
}

fn criterion_4(f: &Fixture) -> Outcome {
    let mut rng = rng_from_seed(4);
    let n = f.model.seq_len();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=f.model.vocab() as u32)).collect();
        let class_label = rng.gen_range(0..f.model.num_classes());
        let (_, stack) = f.model.forward_tokens(&tokens, class_label).unwrap();
        for layer in 1..=stack.num_layers() {
            for head in 0..stack.num_heads {
                for row in stack.head(layer, head).chunks(n) {
                    let s: f64 = row.iter().map(|&p| p as f64).sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
    }
    outcome(worst <= ROW_SUM_TOL, format!("worst row-sum deviation {worst:.2e}"))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let cfg = ArchConfig {
        num_layers: 2,
        num_heads: 2,
        width: 8,
        init_std: 0.3,
        ..ArchConfig::default()
    };
    let model = TransformerModel::<f32>::init(cfg.clone(), &mut rng_from_seed(5)).unwrap();
    let mut rng = rng_from_seed(6);
    let tokens = (0..cfg.seq_len()).map(|_| rng.gen_range(0..cfg.vocab as u32)).collect();
    let grid = TokenGrid::new(cfg.grid_height, cfg.grid_width, cfg.vocab, tokens, 1).unwrap();
    let err = grad_check_probes(&model, &grid, GRAD_EPS, 50, 7).unwrap();
    let took = start.elapsed();
    outcome(
        err < GRAD_REL_TOL && took < GRAD_BUDGET,
        format!("max relative error {err:.2e} over 50 parameters, {:.1}s", took.as_secs_f64()),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = rng_from_seed(8);
    let mut exact = true;
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let k = rng.gen_range(0..=n);
        // coarse values so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut want = vec![false; n];
        for &i in &order[..k] {
            want[i] = true;
        }
        exact &= sample_mask(&scores, k, 0.0, &mut rng).unwrap() == want;
    }

    let scores = [0.9, -0.4, 0.3, 1.5];
    let w: Vec<f64> = scores.iter().map(|s: &f64| s.exp()).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / z).collect();
    let expected: Vec<f64> = (0..4)
        .map(|i| p[i] + (0..4).filter(|&j| j != i).map(|j| p[j] * p[i] / (1.0 - p[j])).sum::<f64>())
        .collect();
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        for (i, m) in sample_mask(&scores, 2, 1.0, &mut rng).unwrap().iter().enumerate() {
            counts[i] += *m as usize;
        }
    }
    let worst = (0..4)
        .map(|i| (counts[i] as f64 / draws as f64 - expected[i]).abs())
        .fold(0.0, f64::max);
    outcome(
        exact && worst <= GUMBEL_FREQ_TOL,
        format!("temperature 0 exact: {exact}; worst inclusion-frequency gap {worst:.4}"),
    )
}

fn criterion_7(f: &Fixture) -> Outcome {
    let start = Instant::now();
    let early = LayerSet::new(EARLY.iter().copied(), f.model.config.num_layers).unwrap();
    let guided_cfg = SamplerConfig {
        layers: EARLY.to_vec(),
        ..sampler(RECON_ITERATIONS, 1.0)
    };
    let base_cfg = SamplerConfig {
        layers: EARLY.to_vec(),
        ..sampler(RECON_ITERATIONS, 0.0)
    };
    let runs = 50;
    let mut wins = 0;
    let (mut dg_sum, mut db_sum) = (0.0, 0.0);
    for k in 0..runs {
        let s = &f.held_out[k % f.held_out.len()];
        let guide = encode(&s.filled, s.class_label);
        let seed = derive_seed(70, k as u64);
        let g = masksketch_sample(&f.model, &guide, s.class_label, &guided_cfg, &mut rng_from_seed(seed)).unwrap();
        let b = masksketch_sample(&f.model, &guide, s.class_label, &base_cfg, &mut rng_from_seed(seed)).unwrap();
        let dg = structure_scores_for(&f.model, &guide, &g, &early).unwrap().mean();
        let db = structure_scores_for(&f.model, &guide, &b, &early).unwrap().mean();
        wins += (dg < db) as usize;
        dg_sum += dg;
        db_sum += db;
    }
    let win_rate = wins as f64 / runs as f64;

    let (guides, seeds) = (10, 3);
    let (mut div_early, mut div_late) = (0.0, 0.0);
    for k in 0..guides {
        let s = &f.held_out[k];
        let guide = encode(&s.filled, s.class_label);
        let outputs = |layers: &[usize]| -> Vec<Raster> {
            let cfg = SamplerConfig {
                layers: layers.to_vec(),
                ..sampler(RECON_ITERATIONS, 1.0)
            };
            (0..seeds)
                .map(|j| {
                    let mut rng = rng_from_seed(derive_seed(71, (k * seeds + j) as u64));
                    raster_of(&masksketch_sample(&f.model, &guide, s.class_label, &cfg, &mut rng).unwrap())
                })
                .collect()
        };
        div_early += pixel_diversity(&outputs(EARLY)) / guides as f64;
        div_late += pixel_diversity(&outputs(LATE)) / guides as f64;
    }
    let ratio = div_late / div_early;
    let took = start.elapsed();
    outcome(
        win_rate >= RECON_WIN_RATE && ratio >= DIVERSITY_RATIO && took < RECON_BUDGET,
        format!(
            "guided closer in {wins}/{runs} (mean {:.4} vs {:.4}); diversity late {div_late:.4} / early {div_early:.4} = {ratio:.2}; {:.0}s",
            dg_sum / runs as f64,
            db_sum / runs as f64,
            took.as_secs_f64()
        ),
    )
}

fn spearman3(y: [f64; 3]) -> f64 {
    // x = 0, 1, 2; ties in y get averaged ranks
    let rank = |i: usize| -> f64 {
        let less = y.iter().filter(|&&v| v < y[i]).count() as f64;
        let equal = y.iter().filter(|&&v| v == y[i]).count() as f64;
        less + (equal - 1.0) / 2.0
    };
    let r = [rank(0), rank(1), rank(2)];
    let mean = 1.0;
    let cov: f64 = (0..3).map(|i| (i as f64 - mean) * (r[i] - mean)).sum();
    let var_r: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum();
    if var_r == 0.0 {
        0.0
    } else {
        cov / (2.0f64.sqrt() * var_r.sqrt())
    }
}

/// One-sided sign test: P(X >= positives) for X ~ Binomial(positives + negatives, 1/2).
fn sign_test(correlations: &[f64]) -> (usize, usize, f64) {
    let pos = correlations.iter().filter(|&&c| c > 0.0).count();
    let neg = correlations.iter().filter(|&&c| c < 0.0).count();
    let n = pos + neg;
    let mut tail = 0.0;
    let mut binom = 1.0;
    for k in 0..=n {
        if k > 0 {
            binom = binom * (n - k + 1) as f64 / k as f64;
        }
        if k >= pos {
            tail += binom;
        }
    }
    (pos, neg, tail / 2f64.powi(n as i32))
}

fn criterion_8(f: &Fixture) -> Outcome {
    let betas = [0.0, 0.25, 0.5];
    let sketches = 30;
    let mut class_mean = [0.0; 3];
    let mut dist_mean = [0.0; 3];
    let mut class_rho = Vec::new();
    let mut dist_rho = Vec::new();
    for k in 0..sketches {
        let s = &f.held_out[k % f.held_out.len()];
        let sketch = encode(&s.sketch, s.class_label);
        let (mut c, mut d) = ([0.0; 3], [0.0; 3]);
        for (b, &beta) in betas.iter().enumerate() {
            let cfg = SamplerConfig {
                guidance_scale: beta,
                ..sampler(EXPERIMENT_ITERATIONS, SamplerConfig::default().lambda_s)
            };
            let mut rng = rng_from_seed(derive_seed(80, k as u64));
            let r = raster_of(&masksketch_sample(&f.model, &sketch, s.class_label, &cfg, &mut rng).unwrap());
            c[b] = proxy_class_score(s.class_label, &r, &f.embedder).unwrap();
            d[b] = feature_l1(&f.embedder, &s.sketch, &r);
            class_mean[b] += c[b] / sketches as f64;
            dist_mean[b] += d[b] / sketches as f64;
        }
        class_rho.push(spearman3(c));
        dist_rho.push(spearman3(d));
    }
    let class_monotone = class_mean.windows(2).all(|w| w[1] >= w[0]);
    // more guidance trades structure fidelity for realism: distance may only grow
    let dist_monotone = dist_mean.windows(2).all(|w| w[1] >= w[0]);
    let (cp, cn, c_p) = sign_test(&class_rho);
    let (dp, dn, d_p) = sign_test(&dist_rho);
    outcome(
        class_monotone && dist_monotone && c_p < SIGN_TEST_P && d_p < SIGN_TEST_P,
        format!(
            "class score {class_mean:.4?} (rho +{cp}/-{cn}, p={c_p:.3}); structure distance {dist_mean:.4?} (rho +{dp}/-{dn}, p={d_p:.3})"
        ),
    )
}

/// Proxy structure distance recomputed from the feature block.
fn feature_l1(e: &ProxyEmbedder, a: &Raster, b: &Raster) -> f64 {
    let fa = e.features(a).unwrap();
    let fb = e.features(b).unwrap();
    fa.iter().zip(&fb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / fa.len() as f64
}

/// Independent selection: explicit min-max, squared fidelity, first index wins ties.
fn brute_force_best(structure: &[f64], class_score: &[f64]) -> usize {
    let norm = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 }).collect()
    };
    let (s, r) = (norm(structure), norm(class_score));
    let mut best = 0;
    for i in 1..s.len() {
        if (1.0 - s[i]) * (1.0 - s[i]) * r[i] > (1.0 - s[best]) * (1.0 - s[best]) * r[best] {
            best = i;
        }
    }
    best
}

fn criterion_9(f: &Fixture) -> Outcome {
    let sketches = 30;
    let codebook = Codebook::binary4();
    let cfg = sampler(EXPERIMENT_ITERATIONS, SamplerConfig::default().lambda_s);
    let scales = &f.config.rejection.guidance_scales;
    let (mut selected, mut all) = (0.0, 0.0);
    let mut mismatches = 0;
    for k in 0..sketches {
        let s = &f.held_out[k % f.held_out.len()];
        let sketch = encode(&s.sketch, s.class_label);
        let trials = run_trials(&f.model, &sketch, s.class_label, &cfg, scales, None, derive_seed(90, k as u64)).unwrap();
        let sel = score_trials(&trials, &s.sketch, s.class_label, &f.embedder, &codebook, 2.0).unwrap();
        let rasters: Vec<Raster> = trials.trials.iter().map(|t| raster_of(&t.grid)).collect();
        let structure: Vec<f64> = rasters.iter().map(|r| feature_l1(&f.embedder, &s.sketch, r)).collect();
        let class_score: Vec<f64> = rasters
            .iter()
            .map(|r| f.embedder.class_probs(r).unwrap()[s.class_label])
            .collect();
        mismatches += (brute_force_best(&structure, &class_score) != sel.best) as usize;
        selected += structure[sel.best] / sketches as f64;
        all += structure.iter().sum::<f64>() / (structure.len() * sketches) as f64;
    }
    outcome(
        selected <= all && mismatches == 0,
        format!(
            "R={}: selected {selected:.4} vs all {all:.4}; {mismatches}/{sketches} selection mismatches",
            scales.len()
        ),
    )
}

fn criterion_10() -> Outcome {
    let d = SamplerConfig::default();
    let t = d.iterations;
    let last = mask_schedule(t - 1, t, d.gamma_start, d.gamma_end).unwrap();
    let first = mask_schedule(0, t, d.gamma_start, d.gamma_end).unwrap();
    outcome(
        last == 0.95 && first == 0.25,
        format!("gamma(T-1) = {last}, gamma(0) = {first}"),
    )
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_11(f: &Fixture) -> Outcome {
    let mut config = f.config.clone();
    config.output.trace = true;
    config.output.png = true;
    let s = &f.held_out[0];
    let sketch = f.root.join("sketch.pgm");
    maskguide::tokens::raster::save_pgm(&s.sketch, &sketch).unwrap();
    let a = f.root.join("sample-a");
    let b = f.root.join("sample-b");
    cli::cmd_sample(&config, &sketch, s.class_label, Some(&a)).unwrap();
    cli::cmd_sample(&config, &sketch, s.class_label, Some(&b)).unwrap();
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    let bytes: usize = ta.values().map(Vec::len).sum();
    outcome(
        ta == tb && !ta.is_empty(),
        format!("{} files, {bytes} bytes, identical: {}", ta.len(), ta == tb),
    )
}

fn criterion_12(f: &Fixture) -> Outcome {
    let margin = f.train_accuracy - f.train_baseline;
    outcome(
        margin >= TRAIN_MARGIN && f.train_time < TRAIN_BUDGET,
        format!(
            "held-out accuracy {:.4} vs majority {:.4} (+{:.1} points), {:.0}s",
            f.train_accuracy,
            f.train_baseline,
            100.0 * margin,
            f.train_time.as_secs_f64()
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(tmp.path());
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let checks: Vec<(&str, Check)> = vec![
        ("reduction identity", Box::new(|| criterion_1(&f))),
        ("mask arithmetic", Box::new(|| criterion_2(&f))),
        ("divergence properties", Box::new(criterion_3)),
        ("attention rows", Box::new(|| criterion_4(&f))),
        ("gradient check", Box::new(criterion_5)),
        ("gumbel top-k", Box::new(criterion_6)),
        ("early-layer reconstruction", Box::new(|| criterion_7(&f))),
        ("trade-off direction", Box::new(|| criterion_8(&f))),
        ("rejection selection", Box::new(|| criterion_9(&f))),
        ("schedule endpoints", Box::new(criterion_10)),
        ("reproducibility", Box::new(|| criterion_11(&f))),
        ("training sanity", Box::new(|| criterion_12(&f))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        failed += !o.pass as usize;
        println!(
            "criterion {:>2} {} {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
