mod common;

use candle_core::{DType, Tensor, Var};
use common::*;
use harmonize_core::contrastive::*;
use harmonize_core::gradcheck::{check_var, DEFAULT_STEP};
use harmonize_core::nn::ParamStore;
use harmonize_core::HarmonizeError;
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Direct evaluation of the averaged pair loss from its dot products.
fn pair_oracle(pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let sum_neg: f64 = neg.iter().map(|n| (n / tau).exp()).sum();
    pos.iter()
        .map(|p| (sum_neg * (-p / tau).exp()).ln_1p())
        .sum::<f64>()
        / pos.len() as f64
}

fn moco_oracle(pos: f64, neg: &[f64], tau: f64) -> f64 {
    let sum_neg: f64 = neg.iter().map(|n| (n / tau).exp()).sum();
    (sum_neg * (-pos / tau).exp()).ln_1p()
}

fn rows(vs: &[Vec<f64>]) -> Tensor {
    let d = vs[0].len();
    tensor(vs.concat(), &[vs.len(), d])
}

fn basis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

/// Unit vector whose dot product with e1 is `a`.
fn with_dot(a: f64) -> Vec<f64> {
    vec![a, (1.0 - a * a).sqrt(), 0.0]
}

fn small_cfg() -> ContrastiveConfig {
    ContrastiveConfig {
        k: 4,
        tau: 0.07,
        patch_size: 2,
        downsample_factor: 2,
        embed_dim: 6,
        hidden_dim: 5,
        seed: 0,
    }
}

fn head(cfg: &ContrastiveConfig, seed: u64) -> EmbeddingHead {
    let mut store = ParamStore::new(seed, DType::F64);
    EmbeddingHead::new(&mut store, "head", cfg).unwrap()
}

fn full_map(image: Tensor) -> SamplingMap {
    let (_, h, w) = image.dims3().unwrap();
    let mask = Tensor::ones((1, h, w), DType::F64, &candle_core::Device::Cpu).unwrap();
    build_sampling_map(&image, &mask, 1, Origin::HarmonizedForeground).unwrap()
}

#[test]
fn uniform_logits_give_log_one_plus_k() {
    for k in [1usize, 2, 256] {
        let v = basis(3, 0);
        let p = rows(&vec![basis(3, 1); k]);
        let n = rows(&vec![basis(3, 2); k]);
        let t = tensor(v.clone(), &[3]);
        let loss = scalar(&contrastive_pair_loss(&t, &t, &p, &n, 0.07).unwrap());
        assert!((loss - ((1 + k) as f64).ln()).abs() <= 1e-12, "K={k}: {loss}");
        let moco = scalar(&moco_infonce(&t, &tensor(basis(3, 1), &[3]), &n, 0.07).unwrap());
        assert!((moco - ((1 + k) as f64).ln()).abs() <= 1e-12);
    }
    let t = tensor(basis(3, 0), &[3]);
    let p = rows(&vec![basis(3, 1); 256]);
    let loss = scalar(&contrastive_pair_loss(&t, &t, &p, &p, 0.07).unwrap());
    assert!((loss - 5.5491).abs() < 1e-4);
}

#[test]
fn saturated_case_is_nearly_zero() {
    let v = tensor(basis(3, 0), &[3]);
    let p = rows(&vec![basis(3, 0); 4]);
    let n = rows(&vec![vec![-1.0, 0.0, 0.0]; 4]);
    let loss = scalar(&contrastive_pair_loss(&v, &v, &p, &n, 0.07).unwrap());
    assert!(loss > 0.0 && loss < 1e-6, "{loss}");
}

#[test]
fn two_patch_example_matches_scalar_evaluation() {
    let v = tensor(basis(3, 0), &[3]);
    let p = rows(&[with_dot(0.5), with_dot(0.2)]);
    let n = rows(&[with_dot(0.1), with_dot(-0.3)]);
    let loss = scalar(&contrastive_pair_loss(&v, &v, &p, &n, 1.0).unwrap());
    let e = f64::exp;
    let want = 0.5
        * (-(e(0.5) / (e(0.5) + e(0.1) + e(-0.3))).ln() - (e(0.2) / (e(0.2) + e(0.1) + e(-0.3))).ln());
    assert!((loss - want).abs() < 1e-14);
    let moco = scalar(&moco_infonce(&v, &tensor(with_dot(0.5), &[3]), &n, 1.0).unwrap());
    assert!((moco - -(e(0.5) / (e(0.5) + e(0.1) + e(-0.3))).ln()).abs() < 1e-14);
}

#[test]
fn moco_without_negatives_is_zero() {
    let q = tensor(basis(3, 0), &[3]);
    let empty = Tensor::zeros((0, 3), DType::F64, &candle_core::Device::Cpu).unwrap();
    assert_eq!(scalar(&moco_infonce(&q, &q, &empty, 0.07).unwrap()), 0.0);
}

#[test]
fn pair_loss_is_the_mean_of_single_positive_infonce() {
    let mut r = rng(1);
    let q: Vec<f64> = unit(&mut r, 5);
    let p: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut r, 5)).collect();
    let n: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut r, 5)).collect();
    let qt = tensor(q.clone(), &[5]);
    let pair = scalar(&contrastive_pair_loss(&qt, &qt, &rows(&p), &rows(&n), 0.2).unwrap());
    let mean: f64 = p
        .iter()
        .map(|pi| scalar(&moco_infonce(&qt, &tensor(pi.clone(), &[5]), &rows(&n), 0.2).unwrap()))
        .sum::<f64>()
        / 4.0;
    assert!((pair - mean).abs() < 1e-13);

    // Putting every positive into the denominator is a different quantity.
    let all_pos: f64 = p.iter().map(|pi| (dot(&q, pi) / 0.2).exp()).sum();
    let sum_neg: f64 = n.iter().map(|ni| (dot(&q, ni) / 0.2).exp()).sum();
    let crowded: f64 = p
        .iter()
        .map(|pi| -((dot(&q, pi) / 0.2).exp() / (all_pos + sum_neg)).ln())
        .sum::<f64>()
        / 4.0;
    assert!((pair - crowded).abs() > 1e-3);
    let dots_p: Vec<f64> = p.iter().map(|pi| dot(&q, pi)).collect();
    let dots_n: Vec<f64> = n.iter().map(|ni| dot(&q, ni)).collect();
    assert!((pair - pair_oracle(&dots_p, &dots_n, 0.2)).abs() < 1e-13);
}

#[test]
fn extreme_logits_stay_finite() {
    let v = tensor(basis(3, 0), &[3]);
    let p = rows(&vec![vec![-1.0, 0.0, 0.0]; 8]);
    let n = rows(&vec![basis(3, 0); 8]);
    let loss = scalar(&contrastive_pair_loss(&v, &v, &p, &n, 0.07).unwrap());
    assert!(loss.is_finite());
    assert!((loss - pair_oracle(&[-1.0; 8], &[1.0; 8], 0.07)).abs() / loss < 1e-12);
}

#[test]
fn invalid_inputs_are_rejected() {
    let v = tensor(basis(3, 0), &[3]);
    let p = rows(&[basis(3, 1)]);
    assert!(matches!(
        contrastive_pair_loss(&v, &v, &p, &p, 0.0),
        Err(HarmonizeError::Config(_))
    ));
    let bad = tensor(vec![f64::NAN, 0.0, 0.0], &[3]);
    assert!(matches!(
        contrastive_pair_loss(&bad, &v, &p, &p, 0.07),
        Err(HarmonizeError::Numeric { .. })
    ));
    let wide = rows(&[vec![1.0, 0.0, 0.0, 0.0]]);
    assert!(matches!(
        contrastive_pair_loss(&v, &v, &p, &wide, 0.07),
        Err(HarmonizeError::Shape(_))
    ));
}

#[test]
fn pair_loss_gradients_match_finite_differences() {
    let mut r = rng(2);
    for case in 0..5 {
        let vars: Vec<Var> = [vec![4], vec![4], vec![3, 4], vec![3, 4]]
            .iter()
            .map(|s| Var::from_tensor(&random(&mut r, s)).unwrap())
            .collect();
        let f = || contrastive_pair_loss(vars[0].as_tensor(), vars[1].as_tensor(), vars[2].as_tensor(), vars[3].as_tensor(), 0.3);
        for v in &vars {
            let g = check_var(f, v, DEFAULT_STEP, None, case).unwrap();
            assert!(g.passes(1e-4), "{g:?}");
        }
    }
}

#[test]
fn sampling_map_sizes_and_trivial_cases() {
    let mut r = rng(3);
    let image = random(&mut r, &[3, 256, 256]);
    let ones = Tensor::ones((1, 256, 256), DType::F64, &candle_core::Device::Cpu).unwrap();
    let m = build_sampling_map(&image, &ones, 4, Origin::HarmonizedForeground).unwrap();
    assert_eq!(m.size().unwrap(), (64, 64));

    let zeros = ones.zeros_like().unwrap();
    let m = build_sampling_map(&image, &zeros, 4, Origin::GroundTruthBackground).unwrap();
    assert!(vec(&m.map).iter().all(|&v| v == 0.0));
    assert!(vec(&m.region_mask).iter().all(|&v| v == 0.0));

    let constant = (Tensor::ones((3, 16, 16), DType::F64, &candle_core::Device::Cpu).unwrap() * 0.375).unwrap();
    let full = Tensor::ones((1, 16, 16), DType::F64, &candle_core::Device::Cpu).unwrap();
    let m = build_sampling_map(&constant, &full, 4, Origin::HarmonizedForeground).unwrap();
    assert!(vec(&m.map).iter().all(|&v| v == 0.375));

    let odd = random(&mut r, &[3, 10, 10]);
    let odd_mask = Tensor::ones((1, 10, 10), DType::F64, &candle_core::Device::Cpu).unwrap();
    assert!(matches!(
        build_sampling_map(&odd, &odd_mask, 4, Origin::HarmonizedForeground),
        Err(HarmonizeError::Argument(_))
    ));
}

#[test]
fn sampling_map_is_area_average_of_masked_image() {
    let mut r = rng(4);
    let img = uniform(&mut r, 3 * 8 * 8, 0.0, 1.0);
    let mask = vec(&binary_mask(&mut r, &[1, 8, 8], 0.5));
    let m = build_sampling_map(&tensor(img.clone(), &[3, 8, 8]), &tensor(mask.clone(), &[1, 8, 8]), 2, Origin::HarmonizedForeground).unwrap();
    let got = vec(&m.map);
    let got_mask = vec(&m.region_mask);
    for c in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                let (mut s, mut ms) = (0.0, 0.0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let p = (2 * y + dy) * 8 + 2 * x + dx;
                    s += img[c * 64 + p] * mask[p];
                    ms += mask[p];
                }
                assert!((got[c * 16 + y * 4 + x] - s / 4.0).abs() < 1e-15);
                assert!((got_mask[y * 4 + x] - ms / 4.0).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn full_mask_sampling_keeps_windows_in_bounds() {
    let mut r = rng(5);
    let map = full_map(random(&mut r, &[3, 64, 64]));
    let locs = sample_patch_locations(&map, 256, 8, &mut rng(0)).unwrap();
    assert_eq!(locs.len(), 256);
    assert!(locs.iter().all(|&(y, x)| y + 8 <= 64 && x + 8 <= 64));
    let distinct: std::collections::BTreeSet<_> = locs.iter().collect();
    assert!(distinct.len() > 200);
}

#[test]
fn single_active_pixel_is_drawn_with_replacement() {
    let mut mask = vec![0.0; 16 * 16];
    mask[15 * 16 + 15] = 1.0;
    let image = Tensor::ones((3, 16, 16), DType::F64, &candle_core::Device::Cpu).unwrap();
    let map = build_sampling_map(&image, &tensor(mask, &[1, 16, 16]), 1, Origin::HarmonizedForeground).unwrap();
    let locs = sample_patch_locations(&map, 4, 8, &mut rng(1)).unwrap();
    assert_eq!(locs, vec![(8, 8); 4]);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let mut r = rng(6);
    let map = full_map(random(&mut r, &[3, 32, 32]));
    let a = sample_patch_locations(&map, 16, 4, &mut rng(9)).unwrap();
    let b = sample_patch_locations(&map, 16, 4, &mut rng(9)).unwrap();
    let c = sample_patch_locations(&map, 16, 4, &mut rng(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn empty_region_and_oversized_patch_are_signalled() {
    let image = Tensor::ones((3, 8, 8), DType::F64, &candle_core::Device::Cpu).unwrap();
    let zeros = Tensor::zeros((1, 8, 8), DType::F64, &candle_core::Device::Cpu).unwrap();
    let map = build_sampling_map(&image, &zeros, 1, Origin::GroundTruthBackground).unwrap();
    assert!(matches!(
        sample_patch_locations(&map, 4, 2, &mut rng(0)),
        Err(HarmonizeError::EmptyRegion(_))
    ));
    let map = full_map(image);
    assert!(matches!(
        sample_patch_locations(&map, 4, 9, &mut rng(0)),
        Err(HarmonizeError::Argument(_))
    ));
}

#[test]
fn crops_match_loop_window_copy() {
    let mut r = rng(7);
    let data = uniform(&mut r, 3 * 12 * 10, -1.0, 1.0);
    let map = tensor(data.clone(), &[3, 12, 10]);
    let locs = [(0, 0), (4, 7), (9, 2)];
    let got = vec(&crop_patches(&map, &locs, 3).unwrap());
    let mut want = Vec::new();
    for &(y, x) in &locs {
        for c in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    want.push(data[c * 120 + (y + dy) * 10 + x + dx]);
                }
            }
        }
    }
    assert_eq!(got, want);
    let corner = vec(&crop_patches(&map, &[(0, 0)], 8).unwrap());
    assert_eq!(corner[..8], data[..8]);
    assert!(crop_patches(&map, &[(10, 0)], 3).is_err());
}

#[test]
fn embeddings_are_unit_norm_and_shared() {
    let cfg = ContrastiveConfig::toy();
    let h = head(&cfg, 11);
    let mut r = rng(8);
    let patch = random(&mut r, &[1, 3, 4, 4]);
    let batch = Tensor::cat(&[&patch, &random(&mut r, &[5, 3, 4, 4]), &patch], 0).unwrap();
    let e = h.embed(&batch).unwrap();
    assert_eq!(e.dims(), &[7, cfg.embed_dim]);
    for row in 0..7 {
        let v = vec(&e.get(row).unwrap());
        assert!((dot(&v, &v).sqrt() - 1.0).abs() <= 1e-5);
    }
    assert_eq!(vec(&e.get(0).unwrap()), vec(&e.get(6).unwrap()));
    assert!(matches!(h.embed(&random(&mut r, &[2, 3, 3, 3])), Err(HarmonizeError::Shape(_))));
}

#[test]
fn toy_head_matches_matrix_arithmetic() {
    let cfg = ContrastiveConfig {
        patch_size: 1,
        hidden_dim: 2,
        embed_dim: 2,
        ..ContrastiveConfig::toy()
    };
    let h = head(&cfg, 0);
    h.fc1.weight.set(&tensor(vec![1.0, -1.0, 0.5, 0.0, 2.0, 1.0], &[2, 3])).unwrap();
    h.fc1.bias.set(&tensor(vec![0.1, -5.0], &[2])).unwrap();
    h.fc2.weight.set(&tensor(vec![1.0, 2.0, -1.0, 1.0], &[2, 2])).unwrap();
    h.fc2.bias.set(&tensor(vec![0.0, 0.5], &[2])).unwrap();
    let x = [0.2, 0.4, 0.6];
    let got = vec(&h.embed(&tensor(x.to_vec(), &[1, 3, 1, 1])).unwrap());
    let h1 = (x[0] - x[1] + 0.5 * x[2] + 0.1f64).max(0.0);
    let h2 = (2.0 * x[1] + x[2] - 5.0f64).max(0.0);
    let o = [h1 + 2.0 * h2, -h1 + h2 + 0.5];
    let n = (o[0] * o[0] + o[1] * o[1]).sqrt();
    assert!(max_abs_diff(&got, &[o[0] / n, o[1] / n]) < 1e-15);
}

#[test]
fn query_cases() {
    let mut r = rng(9);
    let e = unit(&mut r, 5);
    let q = vec(&region_query(&rows(&vec![e.clone(); 3])).unwrap());
    assert!(max_abs_diff(&q, &e) < 1e-15);

    let anti: Vec<f64> = e.iter().map(|v| -v).collect();
    assert!(matches!(
        region_query(&rows(&[e.clone(), anti])),
        Err(HarmonizeError::DegenerateQuery(_))
    ));

    let vs: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut r, 5)).collect();
    let mean: Vec<f64> = (0..5).map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / 4.0).collect();
    let n = dot(&mean, &mean).sqrt();
    let want: Vec<f64> = mean.iter().map(|m| m / n).collect();
    assert!(max_abs_diff(&vec(&region_query(&rows(&vs)).unwrap()), &want) < 1e-15);
}

fn toy_batch(seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let h = random(&mut r, &[2, 3, 8, 8]);
    let gt = random(&mut r, &[2, 3, 8, 8]);
    let m: Vec<f64> = (0..2 * 64)
        .map(|i| if (i % 64) / 8 < 4 && i % 8 < 5 { 1.0 } else { 0.0 })
        .collect();
    (h, gt, tensor(m, &[2, 1, 8, 8]))
}

fn embed_oracle(head: &EmbeddingHead, patch: &[f64]) -> Vec<f64> {
    let w1 = vec(head.fc1.weight.as_tensor());
    let b1 = vec(head.fc1.bias.as_tensor());
    let w2 = vec(head.fc2.weight.as_tensor());
    let b2 = vec(head.fc2.bias.as_tensor());
    let hid: Vec<f64> = (0..b1.len())
        .map(|j| (b1[j] + dot(&w1[j * patch.len()..(j + 1) * patch.len()], patch)).max(0.0))
        .collect();
    let out: Vec<f64> = (0..b2.len())
        .map(|j| b2[j] + dot(&w2[j * hid.len()..(j + 1) * hid.len()], &hid))
        .collect();
    let n = dot(&out, &out).sqrt();
    out.iter().map(|v| v / n).collect()
}

fn normalized_mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let d = vs[0].len();
    let mean: Vec<f64> = (0..d).map(|j| vs.iter().map(|v| v[j]).sum::<f64>()).collect();
    let n = dot(&mean, &mean).sqrt();
    mean.iter().map(|v| v / n).collect()
}

/// Loop-based reimplementation of the batch loss on the realized locations.
fn batch_oracle(
    h: &Tensor,
    gt: &Tensor,
    m: &Tensor,
    head: &EmbeddingHead,
    cfg: &ContrastiveConfig,
    outcome: &ContrastiveOutcome,
) -> f64 {
    let (n, _, hh, ww) = h.dims4().unwrap();
    let (hv, gv, mv) = (vec(h), vec(gt), vec(m));
    let f = cfg.downsample_factor;
    let (sh, sw) = (hh / f, ww / f);
    let pooled = |img: &[f64], fg: bool, s: usize| -> Vec<f64> {
        let mut out = vec![0.0; 3 * sh * sw];
        for c in 0..3 {
            for y in 0..sh {
                for x in 0..sw {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            let p = (y * f + dy) * ww + x * f + dx;
                            let mk = mv[s * hh * ww + p];
                            let w = if fg { mk } else { 1.0 - mk };
                            acc += img[s * 3 * hh * ww + c * hh * ww + p] * w;
                        }
                    }
                    out[c * sh * sw + y * sw + x] = acc / (f * f) as f64;
                }
            }
        }
        out
    };
    let patch = |map: &[f64], (y, x): (usize, usize)| -> Vec<f64> {
        let p = cfg.patch_size;
        let mut v = Vec::new();
        for c in 0..3 {
            for dy in 0..p {
                for dx in 0..p {
                    v.push(map[c * sh * sw + (y + dy) * sw + x + dx]);
                }
            }
        }
        v
    };
    let mut total = 0.0;
    let mut used = 0;
    for s in 0..n {
        let d = &outcome.diagnostics[s];
        if d.status != SampleStatus::Used {
            continue;
        }
        let s_fg = pooled(&hv, true, s);
        let s_bg = pooled(&gv, false, s);
        let negs: Vec<Vec<f64>> = d.fg_locations.iter().map(|&l| embed_oracle(head, &patch(&s_fg, l))).collect();
        let poss: Vec<Vec<f64>> = d.bg_locations.iter().map(|&l| embed_oracle(head, &patch(&s_bg, l))).collect();
        let (v_fg, v_bg) = (normalized_mean(&negs), normalized_mean(&poss));
        let pd: Vec<f64> = poss.iter().map(|p| dot(&v_bg, p)).collect();
        let nd: Vec<f64> = negs.iter().map(|q| dot(&v_fg, q)).collect();
        total += pair_oracle(&pd, &nd, cfg.tau);
        used += 1;
    }
    total / used as f64
}

#[test]
fn batch_loss_matches_end_to_end_oracle() {
    let cfg = small_cfg();
    let hd = head(&cfg, 21);
    let (h, gt, m) = toy_batch(22);
    let out = harmonization_contrastive_loss(&h, &gt, &m, &hd, &cfg, &mut rng(23)).unwrap();
    assert_eq!((out.used, out.skipped, out.all_degenerate), (2, 0, false));
    let want = batch_oracle(&h, &gt, &m, &hd, &cfg, &out);
    assert!((scalar(&out.loss) - want).abs() < 1e-12, "{} vs {want}", scalar(&out.loss));

    // The recorded locations are the ones a replayed generator draws.
    let mut replay = rng(23);
    for (s, d) in out.diagnostics.iter().enumerate() {
        let mask = m.get(s).unwrap();
        let fg = build_sampling_map(&h.get(s).unwrap(), &mask, 2, Origin::HarmonizedForeground).unwrap();
        let bg = build_sampling_map(&gt.get(s).unwrap(), &(1.0 - &mask).unwrap(), 2, Origin::GroundTruthBackground).unwrap();
        assert_eq!(sample_patch_locations(&fg, cfg.k, cfg.patch_size, &mut replay).unwrap(), d.fg_locations);
        assert_eq!(sample_patch_locations(&bg, cfg.k, cfg.patch_size, &mut replay).unwrap(), d.bg_locations);
    }
}

#[test]
fn identical_constant_styles_use_realized_patch_oracle() {
    let cfg = small_cfg();
    let hd = head(&cfg, 31);
    let c = (Tensor::ones((2, 3, 8, 8), DType::F64, &candle_core::Device::Cpu).unwrap() * 0.6).unwrap();
    let (_, _, m) = toy_batch(0);
    let out = harmonization_contrastive_loss(&c, &c, &m, &hd, &cfg, &mut rng(1)).unwrap();
    let want = batch_oracle(&c, &c, &m, &hd, &cfg, &out);
    assert!((scalar(&out.loss) - want).abs() < 1e-12);
}

#[test]
fn batch_loss_is_bit_reproducible() {
    let cfg = small_cfg();
    let hd = head(&cfg, 41);
    let (h, gt, m) = toy_batch(42);
    let a = harmonization_contrastive_loss(&h, &gt, &m, &hd, &cfg, &mut rng(5)).unwrap();
    let b = harmonization_contrastive_loss(&h, &gt, &m, &hd, &cfg, &mut rng(5)).unwrap();
    assert_eq!(scalar(&a.loss).to_bits(), scalar(&b.loss).to_bits());
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn gradients_reach_harmonized_image_and_head_only() {
    let cfg = small_cfg();
    let hd = head(&cfg, 51);
    let (h, gt, m) = toy_batch(52);
    let hv = Var::from_tensor(&h).unwrap();
    let gv = Var::from_tensor(&gt).unwrap();
    let out = harmonization_contrastive_loss(hv.as_tensor(), gv.as_tensor(), &m, &hd, &cfg, &mut rng(3)).unwrap();
    let grads = out.loss.backward().unwrap();
    assert!(grads.get(gv.as_tensor()).is_none());
    let gh = vec(grads.get(hv.as_tensor()).unwrap());
    assert!(gh.iter().any(|v| *v != 0.0));
    // only foreground pixels feed the negatives
    let mv = vec(&m);
    for (i, g) in gh.iter().enumerate() {
        let (s, p) = (i / 192, i % 64);
        if mv[s * 64 + p] == 0.0 {
            assert_eq!(*g, 0.0);
        }
    }
    for w in [&hd.fc1.weight, &hd.fc2.weight] {
        assert!(vec(grads.get(w.as_tensor()).unwrap()).iter().any(|v| *v != 0.0));
    }
}

#[test]
fn empty_regions_are_skipped() {
    let cfg = small_cfg();
    let hd = head(&cfg, 61);
    let (h, gt, m) = toy_batch(62);
    let mut mv = vec(&m);
    mv[..64].fill(0.0);
    let m = tensor(mv.clone(), &[2, 1, 8, 8]);
    let out = harmonization_contrastive_loss(&h, &gt, &m, &hd, &cfg, &mut rng(0)).unwrap();
    assert_eq!((out.used, out.skipped), (1, 1));
    assert_eq!(
        out.diagnostics[0].status,
        SampleStatus::EmptyRegion { origin: Origin::HarmonizedForeground }
    );
    let want = batch_oracle(&h, &gt, &m, &hd, &cfg, &out);
    assert!((scalar(&out.loss) - want).abs() < 1e-12);

    mv[64..].fill(1.0);
    let m = tensor(mv, &[2, 1, 8, 8]);
    let out = harmonization_contrastive_loss(&h, &gt, &m, &hd, &cfg, &mut rng(0)).unwrap();
    assert!(out.all_degenerate);
    assert_eq!(scalar(&out.loss), 0.0);
    assert_eq!(
        out.diagnostics[1].status,
        SampleStatus::EmptyRegion { origin: Origin::GroundTruthBackground }
    );
}

#[test]
fn empty_batch_is_an_error() {
    let cfg = small_cfg();
    let hd = head(&cfg, 0);
    let e = Tensor::zeros((0, 3, 8, 8), DType::F64, &candle_core::Device::Cpu).unwrap();
    let m = Tensor::zeros((0, 1, 8, 8), DType::F64, &candle_core::Device::Cpu).unwrap();
    assert!(harmonization_contrastive_loss(&e, &e, &m, &hd, &cfg, &mut rng(0)).is_err());
}

#[test]
fn config_validation() {
    assert!(ContrastiveConfig::default().validate().is_ok());
    for bad in [
        ContrastiveConfig { k: 0, ..Default::default() },
        ContrastiveConfig { tau: -1.0, ..Default::default() },
        ContrastiveConfig { tau: f64::NAN, ..Default::default() },
        ContrastiveConfig { patch_size: 0, ..Default::default() },
        ContrastiveConfig { downsample_factor: 0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(HarmonizeError::Config(_))));
    }
    let d = ContrastiveConfig::default();
    assert_eq!((d.k, d.tau, d.patch_size, d.downsample_factor, d.embed_dim), (256, 0.07, 8, 4, 256));
}

type Instance = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn instance(r: &mut ChaCha8Rng, k: usize, d: usize) -> Instance {
    let vb = unit(r, d);
    let vf = unit(r, d);
    let p = (0..k).map(|_| unit(r, d)).collect();
    let n = (0..k).map(|_| unit(r, d)).collect();
    (vb, vf, p, n)
}

fn pair_loss_of(vb: &[f64], vf: &[f64], p: &[Vec<f64>], n: &[Vec<f64>], tau: f64) -> f64 {
    let d = vb.len();
    scalar(
        &contrastive_pair_loss(&tensor(vb.to_vec(), &[d]), &tensor(vf.to_vec(), &[d]), &rows(p), &rows(n), tau)
            .unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_match_scalar_oracles(seed in 0u64..100_000, k in 1usize..=8, d in 2usize..6, tau in 0.05f64..2.0) {
        let mut r = rng(seed);
        let (vb, vf, p, n) = instance(&mut r, k, d);
        let pd: Vec<f64> = p.iter().map(|x| dot(&vb, x)).collect();
        let nd: Vec<f64> = n.iter().map(|x| dot(&vf, x)).collect();
        let got = pair_loss_of(&vb, &vf, &p, &n, tau);
        let want = pair_oracle(&pd, &nd, tau);
        prop_assert!(((got - want) / want).abs() <= 1e-10, "{got} vs {want}");
        prop_assert!(got > 0.0);

        let moco = scalar(&moco_infonce(&tensor(vb.clone(), &[d]), &tensor(p[0].clone(), &[d]), &rows(&n), tau).unwrap());
        let nq: Vec<f64> = n.iter().map(|x| dot(&vb, x)).collect();
        let want = moco_oracle(pd[0], &nq, tau);
        prop_assert!(((moco - want) / want).abs() <= 1e-10);
    }

    #[test]
    fn loss_falls_with_positive_and_rises_with_negative_similarity(
        seed in 0u64..100_000, k in 1usize..=8, i in 0usize..8, step in 0.05f64..0.5,
    ) {
        let mut r = rng(seed);
        let (vb, vf, p, n) = instance(&mut r, k, 4);
        let i = i % k;
        let base = pair_loss_of(&vb, &vf, &p, &n, 0.5);
        let toward = |x: &[f64], target: &[f64]| -> Vec<f64> {
            let y: Vec<f64> = x.iter().zip(target).map(|(a, b)| a + step * b).collect();
            let norm = dot(&y, &y).sqrt();
            y.into_iter().map(|v| v / norm).collect()
        };
        let mut p2 = p.clone();
        p2[i] = toward(&p[i], &vb);
        prop_assume!(dot(&p2[i], &vb) > dot(&p[i], &vb) + 1e-6);
        prop_assert!(pair_loss_of(&vb, &vf, &p2, &n, 0.5) < base);
        let mut n2 = n.clone();
        n2[i] = toward(&n[i], &vf);
        prop_assume!(dot(&n2[i], &vf) > dot(&n[i], &vf) + 1e-6);
        prop_assert!(pair_loss_of(&vb, &vf, &p, &n2, 0.5) > base);
    }

    #[test]
    fn large_temperature_uniformizes(seed in 0u64..100_000, k in 1usize..=8) {
        let mut r = rng(seed);
        let (vb, vf, p, n) = instance(&mut r, k, 3);
        let loss = pair_loss_of(&vb, &vf, &p, &n, 1e4);
        prop_assert!((loss - ((1 + k) as f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn windows_always_fit(seed in 0u64..100_000, h in 4usize..20, w in 4usize..20, p in 1usize..4, k in 1usize..40) {
        let mut r = rng(seed);
        let mask = binary_mask(&mut r, &[1, h, w], 0.3);
        prop_assume!(vec(&mask).iter().any(|&v| v > 0.0));
        let image = random(&mut r, &[3, h, w]);
        let map = build_sampling_map(&image, &mask, 1, Origin::GroundTruthBackground).unwrap();
        let locs = sample_patch_locations(&map, k, p, &mut r).unwrap();
        prop_assert_eq!(locs.len(), k);
        prop_assert!(locs.iter().all(|&(y, x)| y + p <= h && x + p <= w));
    }
}
