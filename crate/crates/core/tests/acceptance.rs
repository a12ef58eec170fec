use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;

use csi_djscc::data_gen::{generate_dataset, ChannelScenario, CsiDataset, CsiSamplePair};
use csi_djscc::evaluation::{cliff_metric, ResultSet, SweepResult, REPORT_FILE, RESULTS_FILE};
use csi_djscc::experiments::{preset_text, run_experiment, ExperimentConfig, RunPaths};
use csi_djscc::model::{Backbone, Model, Side, TransformKind};
use csi_djscc::nn::{zero_grads, Param, ParamFn, Real, Tensor};
use csi_djscc::phy::{apply_awgn, apply_fading_mrc, snr_to_noise_power, ChannelConfig, FeedbackSymbols, SnrDb};
use csi_djscc::pipelines::{mse_loss, InputMap, Link, Pipeline, PipelineConfig, Variant};
use csi_djscc::quant::{envelope, ideal_dimension, QuantizerSpec};
use csi_djscc::transforms::{ad_to_sf, sf_to_ad, truncate, TruncationSpec};
use csi_djscc::{rng, ComplexMatrix, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> ComplexMatrix {
    let mut r = rng::stream(seed, &[]);
    ComplexMatrix::from_fn(rows, cols, |_, _| Complex64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
}

/// Direct double sum: inverse DFT over subcarriers, forward DFT over antennas.
fn dft_oracle(h: &ComplexMatrix) -> ComplexMatrix {
    let (nc, nt) = h.shape();
    let scale = 1.0 / ((nc * nt) as f64).sqrt();
    ComplexMatrix::from_fn(nc, nt, |d, a| {
        let mut acc = Complex64::new(0.0, 0.0);
        for n in 0..nc {
            for t in 0..nt {
                let phase = 2.0 * std::f64::consts::PI * ((n * d) as f64 / nc as f64 - (t * a) as f64 / nt as f64);
                acc += h.get(n, t) * Complex64::from_polar(1.0, phase);
            }
        }
        acc * scale
    })
}

fn transforms() -> Result<Outcome> {
    let (mut round, mut parseval, mut oracle) = (0f64, 0f64, 0f64);
    for i in 0..100 {
        let h = random_matrix(256, 32, 1000 + i);
        let f = sf_to_ad(&h);
        round = round.max(ad_to_sf(&f)?.max_abs_diff(&h)?);
        parseval = parseval.max((f.values.frobenius_sq() - h.frobenius_sq()).abs() / h.frobenius_sq());
        if i < 3 {
            oracle = oracle.max(dft_oracle(&h).max_abs_diff(&f.values)?);
        }
    }
    Ok(outcome(
        round < 1e-10 && parseval < 1e-10 && oracle < 1e-8,
        format!("round trip {round:.1e}, Parseval {parseval:.1e} (< 1e-10); DFT oracle {oracle:.1e} (< 1e-8)"),
    ))
}

fn sparsity() -> Result<Outcome> {
    let d = generate_dataset(&ChannelScenario::full(), 1000, 1, 1, 2)?;
    let spec = TruncationSpec::new(32, 256, 32)?;
    let mut kept = 0.0;
    for p in &d.train {
        let f = sf_to_ad(&p.h_down);
        kept += truncate(&f, &spec)?.values.frobenius_sq() / f.values.frobenius_sq();
    }
    kept /= d.train.len() as f64;
    Ok(outcome(kept >= 0.99, format!("mean retained energy {:.4} over 1000 samples (>= 0.99)", kept)))
}

fn calibration(desk: &CsiDataset) -> Result<Outcome> {
    let mut worst_var: f64 = 0.0;
    let mut worst_snr: f64 = 0.0;
    for mu in [-10.0, 0.0, 10.0] {
        let snr = SnrDb::new(mu)?;
        let sigma2 = snr_to_noise_power(snr);
        let zeros = FeedbackSymbols(vec![Complex64::new(0.0, 0.0); 1000]);
        let mut acc = 0.0;
        for seed in 0..1000 {
            acc += apply_awgn(&zeros, snr, seed).iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        worst_var = worst_var.max((acc / 1e6 / sigma2 - 1.0).abs());

        let cfg = ChannelConfig { equalize_mrc: false, ..ChannelConfig::default() };
        let k = 16;
        let ones = FeedbackSymbols(vec![Complex64::new(1.0, 0.0); k]);
        let mut ratio = 0.0;
        let calls = 100_000 / k;
        for c in 0..calls {
            let p = &desk.train[c % desk.train.len()];
            let y = apply_fading_mrc(&ones, &p.h_up, snr, &cfg, rng::derive_seed(9, &[c as u64]))?;
            for (i, yi) in y.iter().enumerate() {
                let g2: f64 = p.h_up.row(i).iter().map(|z| z.norm_sqr()).sum();
                ratio += (yi - g2.sqrt()).norm_sqr() / sigma2;
            }
        }
        let draws = calls * k;
        // measured SNR = |h|^2 / noise; theory |h|^2 10^(mu/10): their ratio is sigma^2 / noise
        worst_snr = worst_snr.max((1.0 / (ratio / draws as f64) - 1.0).abs());
    }
    Ok(outcome(
        worst_var < 0.02 && worst_snr < 0.03,
        format!("noise variance error {:.2}% (< 2%), post-MRC SNR error {:.2}% (< 3%)", 100.0 * worst_var, 100.0 * worst_snr),
    ))
}

fn pipeline<T: Real>(pcfg: &PipelineConfig, d: &CsiDataset, seed: u64) -> Result<Pipeline<T>> {
    let spec = pcfg.arch(d.scenario(), None)?;
    let map = InputMap::new(&spec, InputMap::fit_stats(&spec, &d.train)?)?;
    Pipeline::new(pcfg.clone(), Model::new(&spec, seed)?, map)
}

fn adjscc_config() -> PipelineConfig {
    PipelineConfig {
        variant: Variant::Adjscc,
        backbone: Backbone::Csinet,
        k: 16,
        channel: ChannelConfig::default(),
        transform: TransformKind::Nonlinear,
        quantizer: QuantizerSpec::default(),
        af_hidden: None,
    }
}

fn links<'a>(pairs: &[&'a CsiSamplePair], seed: u64) -> Result<Vec<Link<'a>>> {
    let mut r = rng::stream(seed, &[]);
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(Link {
                h_up: &p.h_up,
                snr: SnrDb::new(r.gen_range(-10.0..10.0))?,
                noise_seed: seed + i as u64,
            })
        })
        .collect()
}

fn power(desk: &CsiDataset) -> Result<Outcome> {
    let mut p = pipeline::<f32>(&adjscc_config(), desk, 3)?;
    let pairs: Vec<_> = desk.train.iter().take(1000).collect();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (b, chunk) in pairs.chunks(100).enumerate() {
        let x = p.inputs(chunk)?;
        p.forward(&x, &links(chunk, 40 + b as u64)?, false)?;
        for e in &p.channel.energies {
            worst = worst.max((e - 16.0).abs());
            count += 1;
        }
    }
    Ok(outcome(count == 1000 && worst <= 1e-4, format!("{count} codewords, max |sum|s|^2 - k| = {worst:.2e} (<= 1e-4)")))
}

fn loss_at(p: &mut Pipeline<f64>, x: &Tensor<f64>, l: &[Link]) -> Result<f64> {
    let y = p.forward(x, l, true)?;
    Ok(mse_loss(&y, x)?.0)
}

/// Analytic gradients of every network, in visit order.
fn analytic<T: Real>(p: &mut Pipeline<T>, x: &Tensor<T>, l: &[Link]) -> Result<Vec<(String, Vec<f64>)>> {
    let y = p.forward(x, l, true)?;
    let (_, dy) = mse_loss(&y, x)?;
    for net in p.model.networks(true, true, false) {
        zero_grads(net);
    }
    p.backward(&dy);
    let mut grads = Vec::new();
    for net in p.model.networks(true, true, false) {
        net.visit("", false, &mut ParamFn(|name: &str, q: &mut Param<T>, _| {
            grads.push((name.to_string(), q.grad.iter().map(|g| g.as_f64()).collect()));
        }));
    }
    Ok(grads)
}

/// Overwrites one parameter entry and returns its previous value.
fn poke(p: &mut Pipeline<f64>, tensor: usize, j: usize, value: f64) -> f64 {
    let mut k = 0;
    let mut old = 0.0;
    for net in p.model.networks(true, true, false) {
        net.visit("", false, &mut ParamFn(|_: &str, q: &mut Param<f64>, _| {
            if k == tensor {
                old = std::mem::replace(&mut q.value[j], value);
            }
            k += 1;
        }));
    }
    old
}

fn gradients(desk: &CsiDataset) -> Result<Outcome> {
    let pcfg = adjscc_config();
    let mut p32 = pipeline::<f32>(&pcfg, desk, 11)?;
    // move off the initialization so the zeroed residual convs pass gradient
    let mut r = rng::stream(13, &[]);
    for net in p32.model.networks(true, true, false) {
        net.visit("", false, &mut ParamFn(|_: &str, q: &mut Param<f32>, _| {
            for v in &mut q.value {
                *v += r.gen_range(-0.05..0.05);
            }
        }));
    }
    let spec = pcfg.arch(desk.scenario(), None)?;
    let map = InputMap::new(&spec, InputMap::fit_stats(&spec, &desk.train)?)?;
    let mut p64 = Pipeline::new(pcfg.clone(), p32.model.cast::<f64>(), map)?;
    let pairs: Vec<_> = desk.train.iter().take(4).collect();
    let l = links(&pairs, 77)?;
    let x64 = p64.inputs(&pairs)?;
    let x32 = p32.inputs(&pairs)?;
    let g64 = analytic(&mut p64, &x64, &l)?;
    let g32 = analytic(&mut p32, &x32, &l)?;

    let mut r = rng::stream(12, &[]);
    let mut probes = Vec::new();
    for (t, (_, g)) in g64.iter().enumerate() {
        for _ in 0..4 {
            probes.push((t, r.gen_range(0..g.len())));
        }
    }
    let n: usize = g64.iter().map(|(_, g)| g.len()).sum();
    let rms = (g64.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let floor = 1e-3 * rms;
    // biases feeding batch norm have identically zero gradient; there the
    // error is measured against the gradient scale of the whole model
    let zero: Vec<bool> = g64.iter().map(|(_, g)| g.iter().all(|v| v.abs() <= 1e-9 * rms)).collect();
    let (mut e64, mut e32): (f64, f64) = (0.0, 0.0);
    let (mut w64, mut w32) = (String::new(), String::new());
    let h = 1e-3;
    // differentiate the linear piece of every rectifier that holds at this point
    loss_at(&mut p64, &x64, &l)?;
    p64.model.pin_rectifiers(true);
    for &(t, j) in &probes {
        let w = poke(&mut p64, t, j, 0.0);
        let mut at = |d: f64| -> Result<f64> {
            poke(&mut p64, t, j, w + d);
            loss_at(&mut p64, &x64, &l)
        };
        let (lp, lm, lp2, lm2) = (at(h)?, at(-h)?, at(h / 2.0)?, at(-h / 2.0)?);
        poke(&mut p64, t, j, w);
        // Richardson extrapolation of two central differences
        let fd = (4.0 * (lp2 - lm2) / h - (lp - lm) / (2.0 * h)) / 3.0;
        let rel = |a: f64| (a - fd).abs() / if zero[t] { rms } else { a.abs().max(fd.abs()).max(floor) };
        let (a64, a32) = (rel(g64[t].1[j]), rel(g32[t].1[j]));
        if a64 > e64 {
            e64 = a64;
            w64 = g64[t].0.clone();
        }
        if a32 > e32 {
            e32 = a32;
            w32 = g32[t].0.clone();
        }
    }
    p64.model.pin_rectifiers(false);
    Ok(outcome(
        probes.len() >= 200 && e32 < 1e-3 && e64 < 1e-5,
        format!(
            "{} probes over {} tensors ({} identically zero), worst relative error f32 {e32:.1e} at {w32} (< 1e-3), f64 {e64:.1e} at {w64} (< 1e-5)",
            probes.len(),
            g64.len(),
            zero.iter().filter(|&&z| z).count()
        ),
    ))
}

fn quantizer() -> Result<Outcome> {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut fixed = true;
    for bits in 2..=6 {
        let q = QuantizerSpec::new(bits, QuantizerSpec::default().companding_mu)?;
        for i in 0..=20_000 {
            let x = -1.0 + i as f64 * 1e-4;
            let idx = q.quantize_value(x);
            let err = (q.level(idx) - x).abs();
            worst_excess = worst_excess.max(err - q.cell_error_bound(idx));
        }
        for idx in 0..q.levels() {
            fixed &= q.quantize_value(q.level(idx)) == idx;
        }
    }
    Ok(outcome(
        worst_excess <= 1e-12 && fixed,
        format!("max(error - cell bound) {worst_excess:.1e} (<= 0) for B = 2..6; level centres fixed: {fixed}"),
    ))
}

fn ideal_baseline() -> Result<Outcome> {
    let m0 = ideal_dimension(32, SnrDb::new(0.0)?, 5)?;
    let m10 = ideal_dimension(32, SnrDb::new(10.0)?, 5)?;
    let expect10 = (32.0 * 11f64.log2() / 5.0).ceil() as usize;
    let mut r = rng::stream(21, &[]);
    let mut env_ok = true;
    for trial in 0..50 {
        let grid: Vec<f64> = (0..7).map(|i| i as f64 * 2.0 - 6.0).collect();
        let n = 1 + trial % 5;
        let curves: Vec<SweepResult> = (0..n)
            .map(|c| SweepResult::new(format!("c{c}"), grid.clone(), grid.iter().map(|_| r.gen_range(-20.0..5.0)).collect()))
            .collect::<Result<_>>()?;
        let env = envelope(&curves, "env")?;
        for i in 0..grid.len() {
            let oracle = curves.iter().map(|c| c.nmse_db[i]).fold(f64::INFINITY, f64::min);
            env_ok &= env.nmse_db[i] == oracle;
        }
    }
    Ok(outcome(
        m0 == 7 && m10 == 23 && expect10 == 23 && env_ok,
        format!("ideal_dimension 0 dB -> {m0} (7), 10 dB -> {m10} (23); envelope equals pointwise min: {env_ok}"),
    ))
}

fn equivalence(desk: &CsiDataset) -> Result<Outcome> {
    let mut adj = pipeline::<f32>(&adjscc_config(), desk, 4)?;
    let mut dj = pipeline::<f32>(&PipelineConfig { variant: Variant::Djscc, ..adjscc_config() }, desk, 4)?;
    adj.model.force_identity_gates();
    let pairs: Vec<_> = desk.test.iter().take(16).collect();
    let l = links(&pairs, 5)?;
    let x = adj.inputs(&pairs)?;
    let same = adj.forward(&x, &l, true)?.data == dj.forward(&x, &l, true)?.data;

    let conv = |cin: usize, cout: usize, kh: usize, kw: usize| cin * cout * kh * kw + cout;
    let dense = |nin: usize, nout: usize| nin * nout + nout;
    let bn = |c: usize| 2 * c;
    let af = |c: usize| dense(c + 1, c) + dense(c, c);
    let mut counts_ok = true;
    for b in Backbone::ALL {
        for m in [32, 64] {
            let (enc, enc_af, block, block_af) = match b {
                Backbone::Csinet => (
                    conv(2, 2, 3, 3) + bn(2),
                    af(2),
                    conv(2, 8, 3, 3) + conv(8, 16, 3, 3) + conv(16, 2, 3, 3) + bn(8) + bn(16) + bn(2),
                    af(8) + af(16),
                ),
                Backbone::CsinetPlus => (
                    2 * (conv(2, 2, 7, 7) + bn(2)),
                    2 * af(2),
                    conv(2, 8, 7, 7) + conv(8, 16, 7, 7) + conv(16, 2, 7, 7) + bn(8) + bn(16) + bn(2),
                    af(8) + af(16),
                ),
                Backbone::Crnet => (
                    conv(2, 2, 3, 3) + conv(2, 2, 1, 9) + conv(2, 2, 9, 1) + conv(2, 2, 3, 3) + 4 * bn(2) + conv(4, 2, 1, 1) + bn(2),
                    af(2),
                    conv(2, 8, 3, 3) + conv(2, 8, 1, 9) + conv(8, 8, 9, 1) + conv(16, 2, 1, 1) + 3 * bn(8) + bn(2),
                    3 * af(8),
                ),
            };
            // analog codewords carry m = 2k reals, so m is set through k
            let full = ChannelScenario::full();
            let code = 2 * full.n_trunc * full.n_tx;
            let pcfg = PipelineConfig { backbone: b, transform: TransformKind::TruncatedAd, k: m / 2, ..adjscc_config() };
            let spec = pcfg.arch(&full, None)?;
            let mut model = Model::<f32>::new(&spec, 0)?;
            counts_ok &= model.count_params(Side::Ue) == enc + enc_af + dense(code, m);
            counts_ok &= model.count_params(Side::Bs) == dense(m, code) + 2 * (block + block_af);
        }
    }
    Ok(outcome(
        same && counts_ok,
        format!("identity-gate adjscc == djscc bitwise: {same}; parameter counts match closed form (3 backbones x m 32/64): {counts_ok}"),
    ))
}

fn preset(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_json(preset_text(name).expect("built-in preset"))
}

fn wall_time_s(v: &serde_json::Value) -> f64 {
    match v {
        serde_json::Value::Object(m) => m
            .iter()
            .map(|(k, x)| if k == "wall_time_s" { x.as_f64().unwrap_or(0.0) } else { wall_time_s(x) })
            .sum(),
        serde_json::Value::Array(a) => a.iter().map(wall_time_s).sum(),
        _ => 0.0,
    }
}

fn report_time(path: &Path) -> f64 {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .map(|v| wall_time_s(&v))
        .unwrap_or(0.0)
}

fn dir_names(dir: &Path) -> BTreeSet<PathBuf> {
    std::fs::read_dir(dir)
        .map(|it| it.flatten().map(|e| e.path()).collect())
        .unwrap_or_default()
}

/// Runs a preset, restricted to the `keep` labels when given; returns
/// results, paths and minutes spent. Models taken from the cache count at the
/// training time recorded in their reports.
fn run(name: &str, root: &Path, keep: Option<&[&str]>) -> Result<(ResultSet, RunPaths, f64)> {
    let mut cfg = preset(name)?;
    if let Some(keep) = keep {
        let dropped: Vec<String> = cfg.models.iter().map(|e| e.label.clone()).filter(|l| !keep.contains(&l.as_str())).collect();
        cfg.models.retain(|e| keep.contains(&e.label.as_str()));
        for f in &mut cfg.figures {
            f.curves.retain(|c| !dropped.contains(c));
        }
    }
    let paths = RunPaths::new(&cfg, root);
    let before = dir_names(&root.join("cache"));
    let t = Instant::now();
    let r = run_experiment(&cfg, None, &paths)?;
    let own = t.elapsed().as_secs_f64();
    let fresh: f64 = dir_names(&root.join("cache"))
        .difference(&before)
        .map(|d| report_time(&d.join("train_report.json")))
        .sum();
    let recorded: f64 = dir_names(&paths.run.join("models"))
        .iter()
        .map(|d| report_time(&d.join("train_report.json")))
        .sum();
    Ok((r, paths, (own - fresh + recorded) / 60.0))
}

fn curve<'a>(r: &'a ResultSet, label: &str) -> &'a SweepResult {
    r.curve(label).unwrap_or_else(|| panic!("curve {label} missing"))
}

fn validity(root: &Path) -> Result<(Outcome, Outcome)> {
    let (r, _, minutes) = run("validity", root, None)?;
    let trained = curve(&r, "adjscc");
    let untrained = curve(&r, "adjscc-untrained");
    let sscc = curve(&r, "sscc-ideal");
    let gain = untrained.mean_db() - trained.mean_db();
    let lo = trained.at(-10.0).unwrap();
    let hi = trained.at(10.0).unwrap();
    let cliff = cliff_metric(trained)?;
    let sscc_cliff = cliff_metric(sscc)?;
    let eight = outcome(
        gain >= 8.0 && hi <= lo - 2.0 && cliff <= 2.0 && minutes <= 30.0,
        format!(
            "(a) gain over untrained {gain:.2} dB (>= 8); (b) NMSE(+10) {hi:.2} vs NMSE(-10) {lo:.2} dB (need <= {:.2}); (c) cliff {cliff:.2} dB (<= 2); {minutes:.1} min (<= 30)",
            lo - 2.0
        ),
    );
    let nine = outcome(
        sscc_cliff >= 5.0 && cliff <= 2.0,
        format!("sscc_ideal cliff {sscc_cliff:.2} dB (>= 5); adjscc cliff {cliff:.2} dB (<= 2)"),
    );
    Ok((eight, nine))
}

fn adaptability(root: &Path) -> Result<Outcome> {
    let (r, paths, minutes) = run("adaptability", root, Some(&["adjscc", "djscc@-8dB", "djscc@0dB", "djscc@8dB"]))?;
    let adj = curve(&r, "adjscc");
    let (grid_lo, grid_hi) = (adj.snr_grid_db[0], *adj.snr_grid_db.last().unwrap());
    let mut margins = Vec::new();
    let mut dominance = true;
    for mu in [-8.0, 0.0, 8.0] {
        let dj = curve(&r, &format!("djscc@{mu}dB"));
        margins.push(format!("{mu}: {:+.2}", adj.at(mu).unwrap() - dj.at(mu).unwrap()));
        let far: Vec<f64> = if mu < 0.0 {
            vec![grid_hi]
        } else if mu > 0.0 {
            vec![grid_lo]
        } else {
            vec![grid_lo, grid_hi]
        };
        for f in far {
            dominance &= adj.at(f).unwrap() < dj.at(f).unwrap();
        }
    }
    let margin_ok = [-8.0, 0.0, 8.0]
        .iter()
        .all(|&mu| adj.at(mu).unwrap() - curve(&r, &format!("djscc@{mu}dB")).at(mu).unwrap() <= 1.5);
    let report = paths.run.join(REPORT_FILE).is_file();
    Ok(outcome(
        dominance && report && minutes <= 90.0,
        format!(
            "opposite-extreme dominance {dominance}; margin at own SNR adjscc - djscc [{}] dB (within 1.5: {margin_ok}, reported); report written {report}; {minutes:.1} min (<= 90)",
            margins.join(", ")
        ),
    ))
}

fn ablation(root: &Path) -> Result<Outcome> {
    let (r, _, minutes) = run("ablation", root, None)?;
    let nl = curve(&r, "adjscc").mean_db();
    let tad = curve(&r, "adjscc-tad").mean_db();
    Ok(outcome(
        nl <= tad && minutes <= 60.0,
        format!("mean NMSE nonlinear {nl:.2} dB vs truncated AD {tad:.2} dB (<=); {minutes:.1} min (<= 60)"),
    ))
}

fn determinism(root: &Path) -> Result<Outcome> {
    let mut cfg = preset("smoke")?;
    cfg.reuse_models = false;
    let mut bytes = Vec::new();
    for rerun in ["first", "second"] {
        let paths = RunPaths::new(&cfg, &root.join("determinism").join(rerun));
        run_experiment(&cfg, None, &paths)?;
        bytes.push(std::fs::read(paths.run.join(RESULTS_FILE)).unwrap_or_default());
    }
    Ok(outcome(bytes[0] == bytes[1], format!("results.json identical across two full reruns: {}", bytes[0] == bytes[1])))
}

fn main() {
    let root = std::env::var_os("CSI_DJSCC_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let desk = generate_dataset(&ChannelScenario::desk(), 1000, 10, 50, 3).expect("desk data");

    // numeric arguments select criteria; anything else (libtest flags) is ignored
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| only.is_empty() || only.contains(&id);

    let mut results: Vec<(u32, Result<Outcome>)> = Vec::new();
    let mut timed = |id: u32, name: &str, f: &mut dyn FnMut() -> Result<Outcome>| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let o = f();
        let s = t.elapsed().as_secs_f64();
        match &o {
            Ok(o) => println!("{} {id:>2} {name}: {} [{s:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => println!("FAIL {id:>2} {name}: error: {e} [{s:.1}s]"),
        }
        results.push((id, o));
    };
    timed(1, "transform exactness", &mut transforms);
    timed(2, "sparsity premise", &mut sparsity);
    timed(3, "channel calibration", &mut || calibration(&desk));
    timed(4, "power constraint", &mut || power(&desk));
    timed(5, "gradient integrity", &mut || gradients(&desk));
    timed(6, "quantizer bound", &mut quantizer);
    timed(7, "ideal-baseline arithmetic", &mut ideal_baseline);
    let mut nine = None;
    if wanted(8) || wanted(9) {
        let (eight, n) = match validity(&root) {
            Ok((a, b)) => (Ok(a), Ok(b)),
            Err(e) => (Err(csi_djscc::Error::Config(format!("validity run: {e}"))), Err(e)),
        };
        let mut eight = Some(eight);
        nine = Some(n);
        timed(8, "scaled training", &mut || eight.take().unwrap());
    }
    timed(9, "cliff-effect contrast", &mut || nine.take().unwrap());
    timed(10, "adaptability", &mut || adaptability(&root));
    timed(11, "ablation direction", &mut || ablation(&root));
    timed(12, "equivalence and accounting", &mut || equivalence(&desk));
    timed(13, "determinism", &mut || determinism(&root));

    let passed = results.iter().filter(|r| matches!(&r.1, Ok(o) if o.pass)).count();
    println!("acceptance: {passed}/{} criteria pass (outputs under {})", results.len(), root.display());
    let errored = results.iter().any(|r| r.1.is_err());
    if errored {
        std::process::exit(1);
    }
}
