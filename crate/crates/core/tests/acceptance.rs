//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! to the real stdout (bypassing libtest capture) and then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{gaussian, median, mlp, norm_rel_err, random_symmetric, rel_err, uniform_point};
use curvlab::cure::{cure_param_gradient, cure_penalty};
use curvlab::curvature::hvp;
use curvlab::harness::{run_experiment, ExperimentConfig, Manifest, Stage};
use curvlab::model::{Activation, Network};
use curvlab::objective::{GraphLoss, InputLoss, LabeledLoss};
use curvlab::rng;
use curvlab::tape::finite_diff_gradient;
use curvlab::theory::{bound_curve, log_grid, sandwich_sweep, ModelRanges};
use curvlab::Tensor;
use rand::Rng;

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "{} criterion {id} ({name}) [{:.1}s]: {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn finish(id: u32, name: &str, start: Instant, limit: Option<Duration>, pass: bool, detail: String) {
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let detail = if in_time {
        detail
    } else {
        format!("{detail}; exceeded time limit {limit:?}")
    };
    report(id, name, pass && in_time, elapsed, &detail);
    assert!(pass && in_time, "criterion {id}: {detail}");
}

const MINUTE: Duration = Duration::from_secs(60);

fn random_net(seed: u64) -> Network {
    let mut r = rng::rng(rng::derive_seed(seed, "arch"));
    let acts = [Activation::Tanh, Activation::Relu, Activation::Softplus];
    let act = acts[r.random_range(0..acts.len())];
    let mut dims = vec![r.random_range(2..=8)];
    for _ in 0..r.random_range(1..=2) {
        dims.push(r.random_range(3..=12));
    }
    dims.push(r.random_range(2..=4));
    mlp(&dims, act, seed)
}

#[test]
fn criterion_1_reverse_mode_gradients() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for s in 0..100u64 {
        let net = random_net(s);
        let d = net.input_dim();
        let x = uniform_point(d, -1.0, 1.0, 1000 + s);
        let y = (s as usize) % net.num_classes();
        let lg = net.loss_grads(&x, y).unwrap();
        let fd = finite_diff_gradient(|p| net.xent_loss(p, y), &x, 1e-5).unwrap();
        worst = worst.max(rel_err(lg.input.data(), fd.data(), 1e-8));
        for (pi, param) in net.params().iter().enumerate() {
            let fd = finite_diff_gradient(
                |p| {
                    let mut n2 = net.clone();
                    *n2.param_mut(&param.name).unwrap() = p.clone();
                    n2.xent_loss(&x, y)
                },
                &param.value,
                1e-5,
            )
            .unwrap();
            worst = worst.max(rel_err(lg.params[pi].data(), fd.data(), 1e-8));
        }
    }
    finish(
        1,
        "gradient correctness",
        start,
        Some(MINUTE),
        worst < 1e-6,
        format!("100 nets, worst relative error {worst:.2e} (< 1e-6)"),
    );
}

/// `H v` with `H` assembled column by column from central differences of the
/// analytic gradient.
fn brute_force_hv(loss: &dyn InputLoss, x: &Tensor, v: &Tensor, delta: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for j in 0..d {
        let e = Tensor::basis(d, j);
        let col = loss
            .grad(&x.axpy(delta, &e))
            .unwrap()
            .sub(&loss.grad(&x.axpy(-delta, &e)).unwrap())
            .scale(0.5 / delta);
        for (o, c) in out.iter_mut().zip(col.data()) {
            *o += c * v.data()[j];
        }
    }
    out
}

#[test]
fn criterion_2_hessian_vector_products() {
    let start = Instant::now();
    let mut worst_net = 0.0f64;
    for s in 0..20u64 {
        let d = [2, 8, 16, 32][s as usize % 4];
        let act = if s % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Softplus
        };
        let net = mlp(&[d, 16, 3], act, s);
        let loss = LabeledLoss::new(&net, (s % 3) as usize);
        let x = uniform_point(d, -1.0, 1.0, 200 + s);
        let z = gaussian(d, 300 + s);
        let z = z.scale(1.0 / z.norm2());
        let got = hvp(&loss, &x, &z, 1e-5).unwrap();
        worst_net = worst_net.max(norm_rel_err(got.data(), &brute_force_hv(&loss, &x, &z, 1e-5)));
    }
    let mut worst_quad = 0.0f64;
    for s in 0..20u64 {
        let d = 2 + (s as usize % 31);
        let a = random_symmetric(d, 400 + s);
        let loss = GraphLoss::quadratic(&a, d).unwrap();
        let x = uniform_point(d, -1.0, 1.0, 500 + s);
        let z = gaussian(d, 600 + s);
        let z = z.scale(1.0 / z.norm2());
        let az: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| a[i * d + j] * z.data()[j]).sum())
            .collect();
        for h in [1e-3, 0.1, 1.0] {
            worst_quad = worst_quad.max(norm_rel_err(hvp(&loss, &x, &z, h).unwrap().data(), &az));
        }
    }
    finish(
        2,
        "HVP correctness",
        start,
        Some(2 * MINUTE),
        worst_net < 1e-3 && worst_quad < 1e-10,
        format!("nets d ≤ 32 worst {worst_net:.2e} (< 1e-3); quadratics worst {worst_quad:.2e} (< 1e-10)"),
    );
}

#[test]
fn criterion_3_distance_sandwich() {
    let start = Instant::now();
    let ranges = ModelRanges::default();
    let sweep = sandwich_sweep(10_000, 2024, &ranges, false).unwrap();
    let all_ok = sweep.rows.iter().all(|(_, _, r)| r.passed());
    let collinear = sandwich_sweep(1_000, 7, &ranges, true).unwrap();
    let gap = collinear
        .rows
        .iter()
        .map(|(_, _, r)| (r.lower - r.exact).abs().max((r.upper - r.exact).abs()))
        .fold(0.0, f64::max);
    let pass = sweep.models == 10_000 && sweep.counterexamples.is_empty() && all_ok && gap < 1e-9;
    finish(
        3,
        "distance sandwich",
        start,
        Some(5 * MINUTE),
        pass,
        format!(
            "{} models, {} violations ({} hard cases); collinear max |bound − exact| {gap:.1e} (< 1e-9)",
            sweep.models,
            sweep.counterexamples.len(),
            sweep.hard_cases
        ),
    );
}

#[test]
fn criterion_4_bound_curve() {
    let start = Instant::now();
    let nus = log_grid(1e-3, 1e3, 300);
    let rows = bound_curve(1.0, 1.0, 0.5, &nus).unwrap();
    let monotone = rows
        .windows(2)
        .all(|w| w[1].lower < w[0].lower && w[1].upper < w[0].upper);
    let lim = bound_curve(1.0, 1.0, 0.5, &[1e-9]).unwrap()[0];
    let (dl, du) = ((lim.lower - 1.0).abs(), (lim.upper - 2.0).abs());
    finish(
        4,
        "bound curve",
        start,
        None,
        monotone && dl < 1e-6 && du < 1e-6,
        format!(
            "strictly decreasing over {} ν values: {monotone}; ν→0 limits off by ({dl:.1e}, {du:.1e})",
            nus.len()
        ),
    );
}

#[test]
fn criterion_5_penalty_parameter_gradient() {
    let start = Instant::now();
    let nets = [
        (vec![2, 12, 8, 2], Activation::Tanh),
        (vec![2, 12, 8, 2], Activation::Softplus),
        (vec![4, 14, 6, 3], Activation::Tanh),
        (vec![6, 20, 2], Activation::Softplus),
    ];
    let mut worst = 0.0f64;
    let mut max_params = 0;
    for (k, (dims, act)) in nets.iter().enumerate() {
        for s in 0..3u64 {
            let seed = 10 * k as u64 + s;
            let net = mlp(dims, *act, seed);
            let n_params: usize = net.params().iter().map(|p| p.value.len()).sum();
            max_params = max_params.max(n_params);
            let x = uniform_point(dims[0], -1.0, 1.0, 700 + seed);
            let y = (seed as usize) % dims[dims.len() - 1];
            let h = 0.1;
            let got: Vec<f64> = cure_param_gradient(&net, &x, y, h, Some(1e-5))
                .unwrap()
                .params
                .iter()
                .flat_map(|t| t.data().to_vec())
                .collect();
            let mut oracle = Vec::new();
            for p in net.params() {
                for i in 0..p.value.len() {
                    let eval = |step: f64| {
                        let mut n2 = net.clone();
                        n2.param_mut(&p.name).unwrap().data_mut()[i] += step;
                        cure_penalty(&LabeledLoss::new(&n2, y), &x, h).unwrap()
                    };
                    oracle.push((eval(1e-5) - eval(-1e-5)) / 2e-5);
                }
            }
            worst = worst.max(norm_rel_err(&got, &oracle));
        }
    }
    finish(
        5,
        "penalty gradient",
        start,
        Some(2 * MINUTE),
        worst < 1e-2 && max_params <= 200,
        format!("12 nets of ≤ {max_params} parameters, worst relative error {worst:.2e} (< 1e-2)"),
    );
}

struct SeedRun {
    summary: BTreeMap<String, f64>,
    hz_initial: f64,
    hz_final: f64,
}

fn pipeline_config(seed: u64, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::two_moons(&format!("moons-{seed}"), seed, dir);
    cfg.stages = vec![Stage::Train, Stage::Attack, Stage::Cure, Stage::Attack, Stage::Export];
    cfg
}

fn hz_column(csv: &str) -> (f64, f64) {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "hz_norm").unwrap();
    let vals: Vec<f64> = lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    (vals[0], *vals.last().unwrap())
}

struct Pipeline {
    runs: Vec<SeedRun>,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

/// The two-moons train → attack → fine-tune → attack → export pipeline for
/// seeds 0–4, run once and shared.
fn pipeline() -> &'static Pipeline {
    static CELL: OnceLock<Pipeline> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let runs = (0..5u64)
            .map(|seed| {
                let out = run_experiment(&pipeline_config(seed, &dir.path().join(seed.to_string()))).unwrap();
                let m: Manifest =
                    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
                let (hz_initial, hz_final) = hz_column(&std::fs::read_to_string(out.join("cure_history.csv")).unwrap());
                SeedRun {
                    summary: m.summary,
                    hz_initial,
                    hz_final,
                }
            })
            .collect();
        Pipeline {
            runs,
            elapsed: start.elapsed(),
            _dir: dir,
        }
    })
}

fn per_seed(f: impl Fn(&SeedRun) -> f64) -> Vec<f64> {
    pipeline().runs.iter().map(f).collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn criterion_6_curvature_and_robustness_trend() {
    let p = pipeline();
    let ratio = per_seed(|r| r.summary["cure.history.final_frobenius"] / r.summary["cure.history.initial_frobenius"]);
    let gain = per_seed(|r| 100.0 * (r.summary["cure.pgd-20"] - r.summary["baseline.pgd-20"]));
    let (mr, mg) = (median(ratio.clone()), median(gain.clone()));
    report_with_elapsed(
        6,
        "curvature-robustness trend",
        p.elapsed,
        10 * MINUTE,
        mr < 0.5 && mg >= 10.0,
        format!(
            "median Frobenius ratio {mr:.3} (< 0.5) [{}]; median PGD(20) gain {mg:.1} points (≥ 10) [{}]",
            fmt(&ratio),
            fmt(&gain)
        ),
    );
}

fn report_with_elapsed(id: u32, name: &str, elapsed: Duration, limit: Duration, pass: bool, detail: String) {
    let in_time = elapsed < limit;
    let detail = if in_time {
        detail
    } else {
        format!("{detail}; exceeded time limit {limit:?}")
    };
    report(id, name, pass && in_time, elapsed, &detail);
    assert!(pass && in_time, "criterion {id}: {detail}");
}

#[test]
fn criterion_7_attack_gap() {
    let start = Instant::now();
    let base = per_seed(|r| 100.0 * (r.summary["baseline.fgsm"] - r.summary["baseline.pgd-20"]));
    let cure = per_seed(|r| 100.0 * (r.summary["cure.fgsm"] - r.summary["cure.pgd-20"]));
    let (mb, mc) = (median(base.clone()), median(cure.clone()));
    finish(
        7,
        "attack gap",
        start,
        None,
        mb >= 5.0 && mc < mb,
        format!(
            "median FGSM − PGD(20) gap {mb:.1} points before (≥ 5) [{}], {mc:.1} after (smaller) [{}]",
            fmt(&base),
            fmt(&cure)
        ),
    );
}

#[test]
fn criterion_8_gradient_masking() {
    let start = Instant::now();
    let pearson = per_seed(|r| r.summary["cure.spsa_pgd_pearson"]);
    let extra = per_seed(|r| r.summary["cure.spsa_only"]);
    let pass = pearson.iter().all(|&c| c > 0.7) && extra.iter().all(|&e| e <= 0.1);
    finish(
        8,
        "gradient masking",
        start,
        None,
        pass,
        format!(
            "200 points per seed, SPSA/PGD(100) Pearson [{}] (> 0.7), SPSA-only fraction [{}] (≤ 0.1)",
            fmt(&pearson),
            fmt(&extra)
        ),
    );
}

#[test]
fn fine_tuning_halves_curvature_along_the_penalty_direction() {
    let start = Instant::now();
    let ratio = per_seed(|r| r.hz_final / r.hz_initial);
    let m = median(ratio.clone());
    let elapsed = start.elapsed();
    let line = format!(
        "{} check ‖Hz‖ reduction [{:.1}s]: median final/initial {m:.3} (< 0.5) [{}]\n",
        if m < 0.5 { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        fmt(&ratio)
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(m < 0.5, "{line}");
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.insert(PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::two_moons("determinism", 3, tmp.path().join("a"));
    cfg.train.epochs = 200;
    cfg.cure.epochs = 5;
    cfg.adversarial.epochs = 3;
    cfg.theory.models = 200;
    let mut all_same = true;
    let mut files = 0;
    let mut details = Vec::new();
    for stages in [cfg.stages.clone(), vec![Stage::Train, Stage::Probe, Stage::Export]] {
        let mut a = cfg.clone();
        a.stages = stages;
        let mut b = a.clone();
        a.output_dir = tmp.path().join(format!("a{}", a.stages.len()));
        b.output_dir = tmp.path().join(format!("b{}", b.stages.len()));
        run_experiment(&a).unwrap();
        run_experiment(&b).unwrap();
        let (fa, fb) = (csv_files(&a.output_dir), csv_files(&b.output_dir));
        files += fa.len();
        let differing: Vec<_> = fa
            .iter()
            .filter(|(k, v)| fb.get(*k) != Some(*v))
            .map(|(k, _)| k.display().to_string())
            .collect();
        all_same &= fa.keys().eq(fb.keys()) && differing.is_empty() && !fa.is_empty();
        details.extend(differing);
    }
    finish(
        9,
        "determinism",
        start,
        None,
        all_same,
        if details.is_empty() {
            format!("{files} CSV files byte-identical across reruns of 2 configs")
        } else {
            format!("differing files: {}", details.join(", "))
        },
    );
}
