use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use maskguide::cli::{self, pairwise_diversity, RunConfig};
use maskguide::rejection::{EmbedderArch, ProxyEmbedder};
use maskguide::rng::rng_from_seed;
use maskguide::tokens::raster::save_pgm;
use maskguide::tokens::{generate_dataset, Raster};
use maskguide::transformer::TransformerModel;
use maskguide::Error;

const BIN: &str = env!("CARGO_BIN_EXE_maskguide");

fn tiny_config(root: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 11
[paths]
data_dir = "{0}/data"
model = "{0}/model.ckpt"
embedder = "{0}/embedder.ckpt"
out_dir = "{0}/runs"
[data]
num_samples = 20
[model]
num_layers = 2
num_heads = 2
width = 8
init_std = 0.5
[sampler]
iterations = 5
layers = [1, 2]
[sweep]
layer_sets = [[1], [2]]
seeds = 2
[tradeoff]
seeds = 2
[eval]
num_sketches = 2
[output]
trace = true
"#,
        root.display()
    );
    RunConfig::from_toml(&text, &[]).unwrap()
}

/// Writes random-init checkpoints and a sketch; returns the sketch path.
fn setup(root: &Path, config: &RunConfig) -> PathBuf {
    let model = TransformerModel::<f32>::init(config.model.clone(), &mut rng_from_seed(1)).unwrap();
    model.save(&config.paths.model).unwrap();
    let arch = EmbedderArch {
        side: 64,
        pool: 4,
        hidden: 8,
        num_classes: config.data.num_classes,
    };
    ProxyEmbedder::init(arch, 0.1, &mut rng_from_seed(2)).unwrap().save(&config.paths.embedder).unwrap();
    let sample = &generate_dataset(&config.data, 5).unwrap()[2];
    let path = root.join("sketch.pgm");
    save_pgm(&sample.sketch, &path).unwrap();
    path
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

#[test]
fn sample_on_random_init_model_emits_every_trial() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let sketch = setup(tmp.path(), &config);
    let out = tmp.path().join("out");
    let s = cli::cmd_sample(&config, &sketch, 2, Some(&out)).unwrap();
    let r = config.rejection.guidance_scales.len();
    assert_eq!(s.selection.score.len(), r);
    for i in 0..r {
        assert!(out.join(format!("trial_{i:02}.pgm")).exists());
        assert!(out.join(format!("trace_{i:02}.jsonl")).exists());
    }
    for f in ["selected.pgm", "montage.pgm", "scores.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), r + 1);

    // the echoed config reloads to the one used
    let echo = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert_eq!(RunConfig::from_toml(&echo, &[]).unwrap(), config);
}

#[test]
fn sample_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let sketch = setup(tmp.path(), &config);
    cli::cmd_sample(&config, &sketch, 1, Some(&tmp.path().join("a"))).unwrap();
    cli::cmd_sample(&config, &sketch, 1, Some(&tmp.path().join("b"))).unwrap();
    let a = read_tree(&tmp.path().join("a"));
    assert!(a.len() > 5);
    assert_eq!(a, read_tree(&tmp.path().join("b")));

    let other = RunConfig { seed: 12, ..config.clone() };
    cli::cmd_sample(&other, &sketch, 1, Some(&tmp.path().join("c"))).unwrap();
    let c = read_tree(&tmp.path().join("c"));
    assert_ne!(a.get(Path::new("scores.csv")), c.get(Path::new("scores.csv")));
}

#[test]
fn sweep_tradeoff_and_eval_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let sketch = setup(tmp.path(), &config);
    let rows = cli::cmd_layer_sweep(&config, &sketch, 0, None).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(config.paths.out_dir.join("layer-sweep/summary.csv").exists());

    let rows = cli::cmd_tradeoff(&config, &sketch, 0, None).unwrap();
    assert_eq!(rows.len(), 3);
    let curve = std::fs::read_to_string(config.paths.out_dir.join("tradeoff/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    cli::cmd_gen_data(&config, None).unwrap();
    let report = cli::cmd_eval(&config, maskguide::tokens::Split::Train, None).unwrap();
    assert_eq!(report.sketches, 2);
    assert!(report.diversity >= 0.0);
    assert!(config.paths.out_dir.join("eval/report.json").exists());
}

#[test]
fn diversity_of_a_constant_generator_is_zero() {
    let r = Raster::from_pixels(4, 4, vec![0.5; 16]).unwrap();
    assert_eq!(pairwise_diversity(&vec![r.clone(); 5]).unwrap(), 0.0);
    assert_eq!(pairwise_diversity(&[r.clone()]).unwrap(), 0.0);
    let mut other = r.clone();
    other.pixels[0] = 1.0;
    assert!((pairwise_diversity(&[r, other]).unwrap() - 0.5 / 16.0).abs() < 1e-12);
}

#[test]
fn missing_inputs_are_path_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let sketch = setup(tmp.path(), &config);
    let err = cli::cmd_sample(&config, &tmp.path().join("nope.pgm"), 0, None).unwrap_err();
    assert!(matches!(err, Error::Path { .. }), "{err}");
    assert!(err.to_string().contains("nope.pgm"));
    let mut no_model = config.clone();
    no_model.paths.model = tmp.path().join("absent.ckpt");
    let err = cli::cmd_sample(&no_model, &sketch, 0, None).unwrap_err();
    assert!(err.to_string().contains("absent.ckpt"));
    assert!(matches!(cli::cmd_sample(&config, &sketch, 9, None), Err(Error::Input(_))));
}

fn run(args: &[&str], dir: &Path) -> (i32, String) {
    let out = Command::new(BIN).args(args).current_dir(dir).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(run(&["show-config"], dir).0, 0);
    assert_eq!(run(&["show-config", "--sampler.lambda-s=0.5"], dir).0, 0);

    // usage errors
    assert_eq!(run(&["no-such-command"], dir).0, 2);
    assert_eq!(run(&["show-config", "--seed=1", "--seed=2"], dir).0, 2);
    assert_eq!(run(&["show-config", "--sampler.iterations"], dir).0, 2);

    // configuration errors
    let (code, err) = run(&["show-config", "--sampler.bogus=1"], dir);
    assert_eq!(code, 3, "{err}");
    assert_eq!(run(&["show-config", "--sampler.lambda-s=2"], dir).0, 3);
    std::fs::write(dir.join("bad.toml"), "[nonsense]\nx = 1\n").unwrap();
    assert_eq!(run(&["show-config", "--config", "bad.toml"], dir).0, 3);

    // missing files
    let (code, err) = run(&["sample", "--sketch", "missing.pgm", "--class", "0"], dir);
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("model.ckpt"), "{err}");
    assert_eq!(run(&["show-config", "--config", "absent.toml"], dir).0, 4);
}

#[test]
fn overrides_reach_the_echoed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["show-config", "--sampler.lambda-s=0.25", "--seed", "9", "--sweep.layer-sets=[[3]]"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    let c = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap(), &[]).unwrap();
    assert_eq!(c.sampler.lambda_s, 0.25);
    assert_eq!(c.seed, 9);
    assert_eq!(c.sweep.layer_sets, vec![vec![3]]);
}
