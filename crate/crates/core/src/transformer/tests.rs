use super::*;
use crate::rng::rng_from_seed;

fn tiny(layers: usize, heads: usize, width: usize) -> ArchConfig {
    ArchConfig {
        vocab: 6,
        num_classes: 3,
        grid_height: 3,
        grid_width: 4,
        num_layers: layers,
        num_heads: heads,
        width,
        ffn_mult: 2,
        init_std: 0.3,
    }
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = crate::rng::splitmix64(s);
            (s % (vocab as u64 + 1)) as u32
        })
        .collect()
}

/// Straight-line reimplementation of the forward pass with nested loops.
fn naive_forward(c: &ArchConfig, p: &Params<f64>, tokens: &[u32], class: usize) -> Vec<f64> {
    let n = c.seq_len();
    let d = c.width;
    let f = c.ffn_width();
    let dh = d / c.num_heads;
    let ln = |x: &Vec<Vec<f64>>, g: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                (0..d)
                    .map(|j| (row[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    };
    let mm = |x: &Vec<Vec<f64>>, w: &[f64], b: &[f64], din: usize, dout: usize| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..dout)
                    .map(|o| b[o] + (0..din).map(|i| row[i] * w[i * dout + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..d)
                .map(|j| {
                    p.tok_emb[tokens[i] as usize * d + j] + p.pos_emb[i * d + j] + p.cls_emb[class * d + j]
                })
                .collect()
        })
        .collect();
    for lp in &p.layers {
        let a = ln(&x, &lp.ln1_g, &lp.ln1_b);
        let q = mm(&a, &lp.wq, &lp.bq, d, d);
        let k = mm(&a, &lp.wk, &lp.bk, d, d);
        let v = mm(&a, &lp.wv, &lp.bv, d, d);
        let mut o = vec![vec![0.0; d]; n];
        for h in 0..c.num_heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|e| q[i][h * dh + e] * k[j][h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..n {
                    let pij = (scores[j] - m).exp() / z;
                    for e in 0..dh {
                        o[i][h * dh + e] += pij * v[j][h * dh + e];
                    }
                }
            }
        }
        let att = mm(&o, &lp.wo, &lp.bo, d, d);
        for i in 0..n {
            for j in 0..d {
                x[i][j] += att[i][j];
            }
        }
        let b = ln(&x, &lp.ln2_g, &lp.ln2_b);
        let u = mm(&b, &lp.w1, &lp.b1, d, f);
        let g: Vec<Vec<f64>> = u
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&t| 0.5 * t * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (t + 0.044715 * t.powi(3))).tanh()))
                    .collect()
            })
            .collect();
        let ff = mm(&g, &lp.w2, &lp.b2, f, d);
        for i in 0..n {
            for j in 0..d {
                x[i][j] += ff[i][j];
            }
        }
    }
    let z = ln(&x, &p.lnf_g, &p.lnf_b);
    mm(&z, &p.w_out, &p.b_out, d, c.vocab).into_iter().flatten().collect()
}

#[test]
fn same_seed_same_parameters() {
    let a = TransformerModel::<f32>::init(tiny(2, 2, 8), &mut rng_from_seed(5)).unwrap();
    let b = TransformerModel::<f32>::init(tiny(2, 2, 8), &mut rng_from_seed(5)).unwrap();
    assert_eq!(a, b);
    let c = TransformerModel::<f32>::init(tiny(2, 2, 8), &mut rng_from_seed(6)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn width_not_divisible_by_heads() {
    let r = TransformerModel::<f32>::init(tiny(1, 4, 33), &mut rng_from_seed(0));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn init_std_within_twenty_percent() {
    let config = ArchConfig::default();
    let model = TransformerModel::<f32>::init(config.clone(), &mut rng_from_seed(1)).unwrap();
    for (spec, t) in param_specs(&config).iter().zip(model.params.tensors()) {
        if spec.init != InitKind::Normal {
            continue;
        }
        let n = t.len() as f64;
        let mean = t.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (t.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let rel = (std - config.init_std).abs() / config.init_std;
        assert!(rel < 0.2, "{}: std {std}", spec.name);
    }
}

#[test]
fn logits_match_naive_oracle() {
    let config = ArchConfig {
        num_layers: 2,
        num_heads: 1,
        width: 8,
        ..tiny(2, 1, 8)
    };
    let model = TransformerModel::<f64>::init(config.clone(), &mut rng_from_seed(9)).unwrap();
    for seed in 0..5 {
        let tokens = random_tokens(config.seq_len(), config.vocab, seed);
        let class = seed as usize % config.num_classes;
        let got = model.logits(&tokens, class).unwrap();
        let want = naive_forward(&config, &model.params, &tokens, class);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }
}

#[test]
fn multi_head_matches_naive_oracle() {
    let config = tiny(2, 2, 8);
    let model = TransformerModel::<f64>::init(config.clone(), &mut rng_from_seed(19)).unwrap();
    let tokens = random_tokens(config.seq_len(), config.vocab, 4);
    let got = model.logits(&tokens, 1).unwrap();
    let want = naive_forward(&config, &model.params, &tokens, 1);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-10);
    }
}

#[test]
fn swapping_identical_tokens_without_positions() {
    let config = tiny(2, 2, 8);
    let mut model = TransformerModel::<f64>::init(config.clone(), &mut rng_from_seed(3)).unwrap();
    model.params.pos_emb.iter_mut().for_each(|v| *v = 0.0);
    let mut tokens = random_tokens(config.seq_len(), config.vocab, 1);
    tokens[2] = 4;
    tokens[7] = 4;
    let logits = model.logits(&tokens, 0).unwrap();
    let k = config.vocab;
    assert_eq!(&logits[2 * k..3 * k], &logits[7 * k..8 * k]);
}

#[test]
fn attention_rows_are_stochastic() {
    let config = tiny(3, 2, 8);
    let model = TransformerModel::<f32>::init(config.clone(), &mut rng_from_seed(2)).unwrap();
    let tokens = random_tokens(config.seq_len(), config.vocab, 8);
    let (_, stack) = model.forward_tokens(&tokens, 2).unwrap();
    assert_eq!(stack.num_layers(), 3);
    for l in 1..=3 {
        for h in 0..2 {
            for row in stack.head(l, h).chunks(config.seq_len()) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn attn_map_single_head_is_raw_map() {
    let config = tiny(2, 1, 8);
    let model = TransformerModel::<f32>::init(config.clone(), &mut rng_from_seed(2)).unwrap();
    let grid = TokenGrid::new(3, 4, 6, random_tokens(12, 6, 1), 1).unwrap();
    let (_, stack) = model.forward(&grid, 1).unwrap();
    let maps = model.attn_map(&grid, &LayerSet::new([1, 2], 2).unwrap()).unwrap();
    assert_eq!(maps[0], stack.head(1, 0));
    assert_eq!(maps[1], stack.head(2, 0));
}

#[test]
fn attn_map_averages_heads() {
    let config = tiny(2, 4, 8);
    let model = TransformerModel::<f32>::init(config.clone(), &mut rng_from_seed(2)).unwrap();
    let grid = TokenGrid::new(3, 4, 6, random_tokens(12, 6, 5), 0).unwrap();
    let (_, stack) = model.forward(&grid, 0).unwrap();
    let maps = model.attn_map(&grid, &LayerSet::new([2], 2).unwrap()).unwrap();
    assert_eq!(maps[0], stack.averaged(2));
    for row in maps[0].chunks(12) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_set_validation() {
    assert!(matches!(LayerSet::new([], 8), Err(Error::Config(_))));
    assert!(matches!(LayerSet::new([9], 8), Err(Error::Config(_))));
    assert!(LayerSet::new([0], 8).is_err());
    assert_eq!(LayerSet::new([8, 1, 1], 8).unwrap().ids(), &[1, 8]);
}

#[test]
fn class_changes_logits_not_attention_shapes() {
    let config = tiny(2, 2, 8);
    let model = TransformerModel::<f32>::init(config.clone(), &mut rng_from_seed(4)).unwrap();
    let tokens = random_tokens(12, 6, 2);
    let (l0, a0) = model.forward_tokens(&tokens, 0).unwrap();
    let (l1, a1) = model.forward_tokens(&tokens, 1).unwrap();
    assert_ne!(l0, l1);
    assert_eq!(a0.layers.len(), a1.layers.len());
    for (x, y) in a0.layers.iter().zip(&a1.layers) {
        assert_eq!(x.len(), y.len());
    }
    // deterministic
    assert_eq!(model.forward_tokens(&tokens, 0).unwrap().0, l0);
}

#[test]
fn out_of_range_inputs() {
    let config = tiny(1, 1, 8);
    let model = TransformerModel::<f32>::init(config, &mut rng_from_seed(0)).unwrap();
    let mut tokens = vec![0u32; 12];
    tokens[0] = 7;
    assert!(matches!(model.logits(&tokens, 0), Err(Error::Input(_))));
    assert!(matches!(model.logits(&[0; 12], 3), Err(Error::Input(_))));
    assert!(matches!(model.logits(&[0; 11], 0), Err(Error::Shape(_))));
    // the MASK index itself is a valid input
    assert!(model.logits(&[6; 12], 0).is_ok());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = TransformerModel::<f32>::init(tiny(2, 2, 8), &mut rng_from_seed(1)).unwrap();
    model.save(&path).unwrap();
    assert_eq!(TransformerModel::<f32>::load(&path).unwrap(), model);
    let c = model.to_container();
    let mut wrong = c.clone();
    wrong.kind = "embedder".into();
    assert!(TransformerModel::<f32>::from_container(&wrong).is_err());
    let mut short = c;
    short.tensors.pop();
    assert!(TransformerModel::<f32>::from_container(&short).is_err());
}
