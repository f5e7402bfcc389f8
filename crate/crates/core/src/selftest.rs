//! Built-in oracle suite: scalar references for the contrastive losses,
//! closed forms, finite-difference gradient checks, architecture shape
//! conformance and metric identities.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contrastive::{contrastive_pair_loss, moco_infonce, validate_tau};
use crate::error::Result;
use crate::gradcheck::{check_var, GradCheck, DEFAULT_STEP};
use crate::metrics::{fmse, mse, psnr, ssim, Image, PSNR_CAP_DB};
use crate::model::{Network, NetworkConfig};
use crate::nn::{Mode, ParamStore};
use crate::objectives::l_pixel;
use crate::style_fusion::{
    fuse_psi, membership, normalize_phi, region_channel_moments, region_stats, style_fusion_layer,
    FusionLayerParams, FusionMode, STATS_EPS,
};

pub const ORACLE_TOL: f64 = 1e-10;
pub const CLOSED_FORM_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-3;
pub const FUSION_TOL: f64 = 1e-4;
/// Reported generator size at full scale, and the accepted relative band.
pub const REFERENCE_PARAMS: f64 = 28.37e6;
pub const PARAM_BAND: f64 = 0.15;

/// Output size after each traced layer of the full-size network at 256x256.
pub const REFERENCE_OUTPUT_SIZES: [(&str, usize); 25] = [
    ("enc0", 256),
    ("enc0.pool", 128),
    ("enc1", 128),
    ("enc1.pool", 64),
    ("enc2", 64),
    ("enc2.pool", 32),
    ("enc3", 32),
    ("enc3.pool", 16),
    ("inter", 16),
    ("dec0.up", 32),
    ("dec0.s2am", 32),
    ("dec0.fusion", 32),
    ("dec0", 32),
    ("dec1.up", 64),
    ("dec1.s2am", 64),
    ("dec1.fusion", 64),
    ("dec1", 64),
    ("dec2.up", 128),
    ("dec2.s2am", 128),
    ("dec2.fusion", 128),
    ("dec2", 128),
    ("dec3.up", 256),
    ("dec3.s2am", 256),
    ("dec3.fusion", 256),
    ("dec3", 256),
];

#[derive(Debug, Clone)]
pub struct SelfTestOptions {
    /// Temperature fed to the loss checks; anything but a positive finite
    /// value must make the temperature check fail.
    pub tau: f64,
    pub seed: u64,
    pub oracle_instances: usize,
    pub grad_instances: usize,
    /// Includes the full-size forward shape trace.
    pub full_scale: bool,
}

impl Default for SelfTestOptions {
    fn default() -> Self {
        Self {
            tau: 0.07,
            seed: 0,
            oracle_instances: 100,
            grad_instances: 20,
            full_scale: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(sum(exp(xs)))` by a shifted loop.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log(e^a / (e^a + e^b))` for scalars, via `ln_1p`.
fn neg_log_share(a: f64, b: f64) -> f64 {
    let z = b - a;
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Float64 loop evaluation of the pair loss.
pub fn pair_loss_reference(v_bg: &[f64], v_fg: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
    let n: Vec<f64> = neg.iter().map(|k| dot(v_fg, k) / tau).collect();
    let lse = log_sum_exp(&n);
    pos.iter().map(|p| neg_log_share(dot(v_bg, p) / tau, lse)).sum::<f64>() / pos.len() as f64
}

/// Float64 loop evaluation of InfoNCE with one positive key.
pub fn infonce_reference(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], tau: f64) -> f64 {
    if k_negs.is_empty() {
        return 0.0;
    }
    let ln: Vec<f64> = k_negs.iter().map(|k| dot(q, k) / tau).collect();
    neg_log_share(dot(q, k_pos) / tau, log_sum_exp(&ln))
}

fn unit<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn t1(v: &[f64]) -> Result<Tensor> {
    Ok(Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu)?)
}

fn t2(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Largest relative deviation of both losses from their loop references.
pub fn loss_oracle_error(instances: usize, tau: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let v_bg = unit(d, &mut rng);
        let v_fg = unit(d, &mut rng);
        let pos: Vec<Vec<f64>> = (0..k).map(|_| unit(d, &mut rng)).collect();
        let neg: Vec<Vec<f64>> = (0..k).map(|_| unit(d, &mut rng)).collect();
        let got = scalar(&contrastive_pair_loss(&t1(&v_bg)?, &t1(&v_fg)?, &t2(&pos)?, &t2(&neg)?, tau)?)?;
        worst = worst.max(rel(got, pair_loss_reference(&v_bg, &v_fg, &pos, &neg, tau)));
        let got = scalar(&moco_infonce(&t1(&v_fg)?, &t1(&pos[0])?, &t2(&neg)?, tau)?)?;
        worst = worst.max(rel(got, infonce_reference(&v_fg, &pos[0], &neg, tau)));
    }
    Ok(worst)
}

/// Largest deviation from `log(1 + K)` when every logit is equal.
pub fn uniform_logit_error(ks: &[usize], tau: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &k in ks {
        let v = t1(&[1.0, 0.0])?;
        let rows = t2(&vec![vec![1.0, 0.0]; k])?;
        let expected = (1.0 + k as f64).ln();
        let pair = scalar(&contrastive_pair_loss(&v, &v, &rows, &rows, tau)?)?;
        let moco = scalar(&moco_infonce(&v, &v, &rows, tau)?)?;
        worst = worst.max((pair - expected).abs()).max((moco - expected).abs());
    }
    Ok(worst)
}

fn rand4<R: Rng>(shape: (usize, usize, usize, usize), rng: &mut R) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Rectangular hard mask covering part of each (h, w) plane, never all of it.
fn rect_mask<R: Rng>(n: usize, h: usize, w: usize, rng: &mut R) -> Result<Tensor> {
    let mut v = vec![0.0; n * h * w];
    for s in 0..n {
        let (y0, x0) = (rng.random_range(0..h - 1), rng.random_range(0..w - 1));
        let y1 = rng.random_range(y0 + 1..h);
        let x1 = rng.random_range(x0 + 1..=w);
        for y in y0..y1 {
            for x in x0..x1 {
                v[s * h * w + y * w + x] = 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(v, (n, 1, h, w), &Device::Cpu)?)
}

fn fusion_params(c: usize, seed: u64, random_heads: bool) -> Result<(ParamStore, FusionLayerParams)> {
    let mut store = ParamStore::new(seed, DType::F64);
    let p = FusionLayerParams::new(&mut store, "f", c, 0)?;
    if random_heads {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in [&p.scale_head.weight, &p.scale_head.bias, &p.bias_head.weight, &p.bias_head.bias] {
            let n = v.elem_count();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            v.set(&Tensor::from_vec(data, v.dims(), &Device::Cpu)?)?;
        }
    }
    Ok((store, p))
}

/// Worst gradient-check result per function over `instances` random cases.
pub fn gradient_checks(instances: usize, tau: f64, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    let mut out: Vec<(&'static str, Option<GradCheck>)> = vec![
        ("phi", None),
        ("psi", None),
        ("style_fusion_layer", None),
        ("contrastive_pair_loss", None),
        ("l_pixel", None),
    ];
    let mut merge = |slot: usize, g: GradCheck| {
        out[slot].1 = Some(match out[slot].1 {
            Some(prev) => prev.merge(g),
            None => g,
        });
    };
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        let (n, c, hh, ww) = (2, 3, 5, 5);
        let mask = rect_mask(n, hh, ww, &mut rng)?;
        let (fg, bg) = membership(&mask)?;
        let weights = rand4((n, c, hh, ww), &mut rng)?;

        let x = Var::from_tensor(&rand4((n, c, hh, ww), &mut rng)?)?;
        let phi = || {
            let stats = region_stats(x.as_tensor(), &(1.0 - &mask)?, STATS_EPS)?;
            Ok((normalize_phi(x.as_tensor(), &stats, &bg)? * &weights)?.sum_all()?)
        };
        merge(0, check_var(phi, &x, h, None, s)?);

        let (_store, params) = fusion_params(c, s, true)?;
        let psi = || Ok((fuse_psi(x.as_tensor(), &fg, &params)? * &weights)?.sum_all()?);
        merge(1, check_var(psi, &x, h, None, s)?);

        let e = rand4((n, c, hh, ww), &mut rng)?;
        let layer = || {
            let y = style_fusion_layer(x.as_tensor(), &e, &mask, &params, FusionMode::External)?;
            Ok((y * &weights)?.sum_all()?)
        };
        merge(2, check_var(layer, &x, h, None, s)?);
        let ev = Var::from_tensor(&e)?;
        let layer_e = || {
            let y = style_fusion_layer(x.as_tensor(), ev.as_tensor(), &mask, &params, FusionMode::External)?;
            Ok((y * &weights)?.sum_all()?)
        };
        merge(2, check_var(layer_e, &ev, h, None, s)?);

        let k = rng.random_range(1..=8);
        let d = rng.random_range(2..=8);
        let pos = Var::from_tensor(&t2(&(0..k).map(|_| unit(d, &mut rng)).collect::<Vec<_>>())?)?;
        let neg = Var::from_tensor(&t2(&(0..k).map(|_| unit(d, &mut rng)).collect::<Vec<_>>())?)?;
        let v_bg = Var::from_tensor(&t1(&unit(d, &mut rng))?)?;
        let v_fg = Var::from_tensor(&t1(&unit(d, &mut rng))?)?;
        let pair = || contrastive_pair_loss(v_bg.as_tensor(), v_fg.as_tensor(), pos.as_tensor(), neg.as_tensor(), tau);
        for v in [&pos, &neg, &v_bg, &v_fg] {
            merge(3, check_var(pair, v, h, None, s)?);
        }

        let target = rand4((n, c, hh, ww), &mut rng)?;
        let soft = mask.affine(0.5, 0.25)?;
        let lp = || l_pixel(x.as_tensor(), &target, &soft);
        merge(4, check_var(lp, &x, h, None, s)?);
    }
    Ok(out
        .into_iter()
        .map(|(n, g)| {
            (
                n,
                g.unwrap_or(GradCheck {
                    rel_error: 0.0,
                    max_abs_error: 0.0,
                    entries: 0,
                }),
            )
        })
        .collect())
}

/// Worst (|mean|, |std - 1|) over background channels after fusion with
/// zero-initialized heads.
pub fn fusion_background_stats(instances: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_mean, mut worst_std): (f64, f64) = (0.0, 0.0);
    for i in 0..instances {
        let (n, c, h, w) = (2, 4, 8, 8);
        let mask = rect_mask(n, h, w, &mut rng)?;
        let (_, bg) = membership(&mask)?;
        let bg_count: f64 = bg.sum_all()?.to_scalar::<f64>()? / n as f64;
        if bg_count < 16.0 {
            continue;
        }
        let scale = rng.random_range(0.5..5.0);
        let d = (rand4((n, c, h, w), &mut rng)? * scale)?;
        let e = rand4((n, c, h, w), &mut rng)?;
        let (_store, params) = fusion_params(c, seed + i as u64, false)?;
        let y = style_fusion_layer(&d, &e, &mask, &params, FusionMode::External)?;
        for per in region_channel_moments(&y, &bg)? {
            for (m, s) in per {
                worst_mean = worst_mean.max(m.abs());
                worst_std = worst_std.max((s - 1.0).abs());
            }
        }
    }
    Ok((worst_mean, worst_std))
}

/// Traced output sizes of a network that differ from `REFERENCE_OUTPUT_SIZES`.
pub fn shape_mismatches(net: &Network) -> Result<Vec<String>> {
    let s = net.config().image_size;
    let x = Tensor::zeros((1, 3, s, s), net.dtype(), &Device::Cpu)?;
    let m = Tensor::zeros((1, 1, s, s), net.dtype(), &Device::Cpu)?;
    let (out, _, _, trace) = net.forward_traced(&x, &m, Mode::Eval)?;
    let mut bad = Vec::new();
    for (label, size) in REFERENCE_OUTPUT_SIZES {
        match trace.iter().find(|t| t.label == label) {
            Some(t) if t.dims.get(2) == Some(&size) && t.dims.get(3) == Some(&size) => {}
            Some(t) => bad.push(format!("{label}: {:?}, expected {size}", t.dims)),
            None => bad.push(format!("{label}: missing")),
        }
    }
    if out.dims() != [1, 3, s, s] {
        bad.push(format!("out: {:?}", out.dims()));
    }
    Ok(bad)
}

/// (MSE, PSNR, SSIM) identities plus the 16-level residual and full-mask fMSE.
pub fn metric_identity_failures() -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, h, w) = (3, 24, 24);
    let a: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(0.2..0.8)).collect();
    let img = Image::new(c, h, w, a.clone())?;
    let shifted = Image::new(c, h, w, a.iter().map(|v| v + 16.0 / 255.0).collect())?;
    let full = Image::new(1, h, w, vec![1.0; h * w])?;
    let mut bad = Vec::new();
    if mse(&img, &img)? != 0.0 {
        bad.push("identical MSE != 0".to_string());
    }
    if psnr(&img, &img)? != PSNR_CAP_DB {
        bad.push("identical PSNR != cap".to_string());
    }
    if ssim(&img, &img)? != 100.0 {
        bad.push("identical SSIM != 100".to_string());
    }
    let m = mse(&img, &shifted)?;
    if (m - 256.0).abs() > 1e-6 {
        bad.push(format!("16-level MSE {m}"));
    }
    let p = psnr(&img, &shifted)?;
    let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
    if (p - expected).abs() > 1e-3 {
        bad.push(format!("16-level PSNR {p}"));
    }
    if fmse(&img, &shifted, &full)? != m {
        bad.push("full-mask fMSE != MSE".to_string());
    }
    Ok(bad)
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

pub fn run_selftest(opts: &SelfTestOptions) -> Vec<CheckResult> {
    let tau = opts.tau;
    let mut out = vec![timed("temperature validation", || {
        validate_tau(tau)?;
        Ok((true, format!("tau = {tau}")))
    })];
    out.push(timed("loss scalar oracles", || {
        let e = loss_oracle_error(opts.oracle_instances, tau, opts.seed)?;
        Ok((e <= ORACLE_TOL, format!("max rel error {e:.2e} over {} instances", opts.oracle_instances)))
    }));
    out.push(timed("uniform-logit closed form", || {
        let e = uniform_logit_error(&[1, 2, 256], tau)?;
        Ok((e <= CLOSED_FORM_TOL, format!("max abs error {e:.2e}")))
    }));
    match gradient_checks(opts.grad_instances, tau, opts.seed) {
        Ok(checks) => {
            for (name, g) in checks {
                out.push(CheckResult {
                    name: format!("gradient: {name}"),
                    passed: g.passes(GRAD_TOL),
                    detail: format!("max rel error {:.2e} ({} entries)", g.rel_error, g.entries),
                    seconds: 0.0,
                });
            }
        }
        Err(e) => out.push(CheckResult {
            name: "gradient checks".into(),
            passed: false,
            detail: format!("error: {e}"),
            seconds: 0.0,
        }),
    }
    out.push(timed("style fusion background statistics", || {
        let (m, s) = fusion_background_stats(20, opts.seed)?;
        Ok((m <= FUSION_TOL && s <= FUSION_TOL, format!("|mean| {m:.2e}, |std-1| {s:.2e}")))
    }));
    out.push(timed("parameter count", || {
        let net = Network::new(NetworkConfig::full(), opts.seed, DType::F32)?;
        let n = net.num_params() as f64;
        let dev = (n - REFERENCE_PARAMS) / REFERENCE_PARAMS;
        let mut detail = format!("{:.2}M ({:+.1}% vs {:.2}M)", n / 1e6, dev * 100.0, REFERENCE_PARAMS / 1e6);
        let mut ok = dev.abs() <= PARAM_BAND;
        if opts.full_scale {
            let bad = shape_mismatches(&net)?;
            ok &= bad.is_empty();
            if !bad.is_empty() {
                detail.push_str(&format!("; shape mismatches: {}", bad.join(", ")));
            } else {
                detail.push_str("; all output sizes match");
            }
        }
        Ok((ok, detail))
    }));
    out.push(timed("metric identities", || {
        let bad = metric_identity_failures()?;
        Ok((bad.is_empty(), if bad.is_empty() { "ok".into() } else { bad.join("; ") }))
    }));
    out
}

pub fn format_results(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<width$}  {}  {:>6.2}s  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        ));
    }
    s
}
