mod common;

use common::{affine_binary, gaussian, mlp, uniform_point};
use curvlab::attack::{
    adversarial_accuracy, clean_accuracy, deepfool, deepfool_attack, fgsm, margin_loss, pgd, pgd_ascent, spsa,
    spsa_gradient, AttackSpec, DeepFoolNorm,
};
use curvlab::data::{gen_gaussians, gen_two_moons, Dataset, ValueRange};
use curvlab::harness::{train_baseline, TrainSpec};
use curvlab::model::{arch, Activation, LayerSpec, Network};
use curvlab::objective::{margin_from_logits, DifferentiableModel, GraphLoss, InputLoss, LogitModel};
use curvlab::{rng, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Convex quadratic with an off-centre minimum.
fn convex_quadratic(d: usize, seed: u64) -> GraphLoss {
    let mut r = rng::rng(seed);
    let b: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| b[i][k] * b[j][k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
        }
    }
    GraphLoss::quadratic(&a, d).unwrap()
}

fn fgsm_point(loss: &dyn InputLoss, x: &Tensor, eps: f64) -> Tensor {
    let g = loss.grad(x).unwrap();
    x.zip_map(&g, |xv, gv| xv + eps * sign(gv))
}

#[test]
fn pgd_reaches_at_least_the_fgsm_loss_on_convex_quadratics() {
    for s in 0..20u64 {
        let loss = convex_quadratic(5, s);
        let x = uniform_point(5, -1.0, 1.0, 40 + s);
        let eps = 0.3;
        let f = loss.value(&fgsm_point(&loss, &x, eps)).unwrap();
        let a = pgd_ascent(&loss, &x, eps, 20, 2.5 * eps / 20.0, None, None).unwrap();
        assert!(a.best_loss >= f - 1e-12, "seed {s}: pgd {} < fgsm {f}", a.best_loss);
    }
}

#[test]
fn pgd_matches_dense_grid_search_in_two_dimensions() {
    // A convex quadratic can have several locally maximal corners, so PGD is
    // checked against the grid maximum near its own answer on every case and
    // against the global grid maximum on most.
    let eps = 0.5;
    let n = 401;
    let cases = 30;
    let mut r = rng::rng(31);
    let mut global = 0;
    for s in 0..cases {
        let (p, q) = (r.random_range(0.2f64..2.0), r.random_range(0.2f64..2.0));
        let c = r.random_range(-0.9..0.9) * (p * q).sqrt();
        let loss = GraphLoss::quadratic(&[p, c, c, q], 2).unwrap();
        let x0 = uniform_point(2, -1.0, 1.0, 80 + s);
        let a = pgd_ascent(&loss, &x0, eps, 20, 2.5 * eps / 20.0, Some(s), None).unwrap();
        assert!(a.x_best.sub(&x0).norm_inf() <= eps + 1e-12);
        let (mut grid_max, mut local_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            for j in 0..n {
                let pt = Tensor::from_vec(vec![
                    x0.data()[0] - eps + 2.0 * eps * i as f64 / (n - 1) as f64,
                    x0.data()[1] - eps + 2.0 * eps * j as f64 / (n - 1) as f64,
                ]);
                let v = loss.value(&pt).unwrap();
                grid_max = grid_max.max(v);
                if pt.sub(&a.x_best).norm_inf() <= 0.25 * eps {
                    local_max = local_max.max(v);
                }
            }
        }
        assert!(
            a.best_loss >= 0.99 * local_max,
            "seed {s}: pgd {} vs nearby grid {local_max}",
            a.best_loss
        );
        if a.best_loss >= 0.99 * grid_max {
            global += 1;
        }
    }
    assert!(global * 5 >= cases * 4, "global maximum found on {global} of {cases}");
}

#[test]
fn pgd_on_linear_loss_lands_on_the_sign_corner() {
    let w = [0.7, -1.2, 0.05, 2.0, -0.3];
    let loss = GraphLoss::linear(&w).unwrap();
    let x = uniform_point(5, -1.0, 1.0, 3);
    let eps = 0.25;
    for steps in [7usize, 20] {
        let a = pgd_ascent(&loss, &x, eps, steps, 2.5 * eps / steps as f64, Some(11), None).unwrap();
        let corner = fgsm_point(&loss, &x, eps);
        assert!(a.x_best.max_abs_diff(&corner) < 1e-12);
    }
}

fn train_on_moons(layers: &[LayerSpec]) -> (Network, Dataset) {
    let ds = gen_two_moons(500, 0.1, 5).unwrap();
    let spec = TrainSpec {
        epochs: 100,
        ..TrainSpec::default()
    };
    (train_baseline(layers, &ds, &spec, 1).unwrap(), ds)
}

/// Smallest `t` along a unit direction that changes the prediction, by
/// bracketing on a coarse grid and bisecting.
fn flip_distance(net: &Network, x: &Tensor, dir: &Tensor, t_max: f64) -> Option<f64> {
    let orig = net.predict(x).unwrap();
    let flips = |t: f64| net.predict(&x.axpy(t, dir)).unwrap() != orig;
    let n = 400;
    let mut prev = 0.0;
    for k in 1..=n {
        let t = t_max * k as f64 / n as f64;
        if flips(t) {
            let (mut lo, mut hi) = (prev, t);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if flips(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(hi);
        }
        prev = t;
    }
    None
}

/// Smallest crossing distance over 100 random unit directions.
fn random_direction_search(net: &Network, x: &Tensor, seed: u64) -> f64 {
    (0..100u64)
        .filter_map(|k| {
            let u = gaussian(2, seed * 1000 + k);
            flip_distance(net, x, &u.scale(1.0 / u.norm2()), 10.0)
        })
        .fold(f64::INFINITY, f64::min)
}

/// `(‖r‖₂ / line-search distance)` per point; checks the overshoot flip.
fn deepfool_ratios(net: &Network, ds: &Dataset, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = &ds.inputs[i];
            let res = deepfool(net, x, DeepFoolNorm::L2, 50).unwrap();
            assert_ne!(net.predict(&x.axpy(1.02, &res.r)).unwrap(), net.predict(x).unwrap());
            res.r.norm2() / random_direction_search(net, x, i as u64)
        })
        .collect()
}

#[test]
fn deepfool_beats_random_directions_on_a_trained_linear_model() {
    let (net, ds) = train_on_moons(&[LayerSpec::affine(2, 2)]);
    let ratios = deepfool_ratios(&net, &ds, 60);
    assert!(ratios.iter().all(|&r| r <= 1.0 + 1e-9), "{ratios:?}");
}

#[test]
fn deepfool_stays_near_the_boundary_on_a_trained_relu_net() {
    // Iterative linearization is exact inside one activation region, so on
    // points whose region reaches the boundary DeepFool matches the search;
    // elsewhere a single linear step can overshoot the nearest crossing.
    let (net, ds) = train_on_moons(&arch::mlp_2d(Activation::Relu));
    let ratios = deepfool_ratios(&net, &ds, 60);
    let exact = ratios.iter().filter(|&&r| r <= 1.0).count();
    assert!(exact >= 6, "only {exact} of 60 points at or below the line search");
    assert!(ratios.iter().all(|&r| r < 4.0), "{ratios:?}");
}

#[test]
fn spsa_gradient_points_along_the_true_gradient() {
    let d = 10;
    let net = mlp(&[d, 16, 3], Activation::Tanh, 2);
    let x = uniform_point(d, -1.0, 1.0, 3);
    let y = 1;
    let f = |p: &Tensor| margin_loss(&net, p, y);
    let coeff = {
        let z = net.logits(&x).unwrap();
        let j = curvlab::objective::runner_up(&z, y);
        let mut c = Tensor::zeros(&[3]);
        c.data_mut()[y] = 1.0;
        c.data_mut()[j] = -1.0;
        c
    };
    let (_, g) = net.logit_combination_grad(&x, &coeff).unwrap();
    let mean_cos = (0..50u64)
        .map(|s| {
            let est = spsa_gradient(f, &x, 1e-4, 256, &mut rng::rng(s)).unwrap();
            est.dot(&g) / (est.norm2() * g.norm2())
        })
        .sum::<f64>()
        / 50.0;
    assert!(mean_cos > 0.9, "{mean_cos}");
}

/// Two-class model with logits `(0, q(x))`, `q(x) = c + bᵀx + ½xᵀAx`.
struct QuadClassifier {
    a: Vec<f64>,
    b: Vec<f64>,
    c: f64,
}

impl QuadClassifier {
    fn q_and_grad(&self, x: &Tensor) -> (f64, Tensor) {
        let d = self.b.len();
        let xs = x.data();
        let mut g = self.b.clone();
        let mut q = self.c;
        for i in 0..d {
            let ax: f64 = (0..d).map(|j| self.a[i * d + j] * xs[j]).sum();
            g[i] += ax;
            q += self.b[i] * xs[i] + 0.5 * xs[i] * ax;
        }
        (q, Tensor::from_vec(g))
    }
}

impl LogitModel for QuadClassifier {
    fn input_dim(&self) -> usize {
        self.b.len()
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn logits(&self, x: &Tensor) -> curvlab::Result<Tensor> {
        Ok(Tensor::from_vec(vec![0.0, self.q_and_grad(x).0]))
    }
}

impl DifferentiableModel for QuadClassifier {
    fn loss_grad(&self, x: &Tensor, y: usize) -> curvlab::Result<(f64, Tensor)> {
        let (q, gq) = self.q_and_grad(x);
        // ℓ = log(1 + e^{∓q}); dℓ/dq = ∓σ(∓q)
        let s = if y == 1 { -1.0 } else { 1.0 };
        let t = s * q;
        let loss = t.max(0.0) + (-t.abs()).exp().ln_1p();
        let sig = 1.0 / (1.0 + (-t).exp());
        Ok((loss, gq.scale(s * sig)))
    }
    fn logit_combination_grad(&self, x: &Tensor, coeff: &Tensor) -> curvlab::Result<(f64, Tensor)> {
        let (q, gq) = self.q_and_grad(x);
        Ok((coeff.data()[1] * q, gq.scale(coeff.data()[1])))
    }
}

#[test]
fn spsa_reaches_the_pgd_margin_on_a_quadratic_classifier() {
    let d = 4;
    let model = QuadClassifier {
        a: vec![
            1.0, 0.2, 0.0, 0.1, //
            0.2, -0.5, 0.3, 0.0, //
            0.0, 0.3, 0.8, -0.2, //
            0.1, 0.0, -0.2, 0.4,
        ],
        b: vec![0.5, -0.3, 0.8, 0.2],
        c: 3.0,
    };
    let x = Tensor::zeros(&[d]);
    let eps = 0.5;
    let clean = margin_loss(&model, &x, 1).unwrap();
    let p = pgd(&model, &x, 1, &AttackSpec::pgd(eps, 100, 1), None).unwrap();
    let s = spsa(&model, &x, 1, &AttackSpec::spsa(eps, 2.0, 2), None).unwrap();
    let gain_pgd = clean - p.margin;
    let gain_spsa = clean - s.margin;
    assert!(gain_pgd > 0.5);
    assert!(
        (gain_spsa - gain_pgd).abs() <= 0.1 * gain_pgd,
        "spsa {gain_spsa} vs pgd {gain_pgd}"
    );
    assert_eq!(s.queries.gradients, 0);
}

#[test]
fn margin_sign_agrees_with_argmax() {
    let mut r = rng::rng(17);
    for _ in 0..1000 {
        let k = r.random_range(2..6usize);
        let z = Tensor::from_vec((0..k).map(|_| r.random_range(-5.0..5.0)).collect());
        let y = r.random_range(0..k);
        assert_eq!(margin_from_logits(&z, y) < 0.0, z.argmax() != y);
    }
}

fn constant_network(logits: &[f64]) -> Network {
    let mut net = mlp(&[2, 8, logits.len()], Activation::Relu, 0);
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    for v in net.param_values_mut() {
        *v = v.scale(0.0);
    }
    *net.param_mut(names.last().unwrap()).unwrap() = Tensor::from_slice(logits);
    net
}

#[test]
fn constant_network_is_never_broken() {
    let net = constant_network(&[0.3, -0.1, 0.5]);
    let ds = gen_gaussians(60, 3, 0.5, 2).unwrap();
    let clean = clean_accuracy(&net, &ds).unwrap();
    for spec in [
        AttackSpec::fgsm(0.5),
        AttackSpec::pgd(0.5, 10, 1),
        AttackSpec::deepfool_linf(0.5),
        AttackSpec::spsa(0.5, 4.0, 1),
    ] {
        assert_eq!(
            adversarial_accuracy(&net, &ds, &spec).unwrap(),
            clean,
            "{}",
            spec.label()
        );
    }
}

#[test]
fn affine_margin_matches_closed_form_threshold() {
    let w = [1.0, -2.0, 0.5];
    let net = affine_binary(&w, 1.0);
    let x = Tensor::from_vec(vec![0.2, -0.1, 0.4]);
    let margin = 1.0 + w.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>();
    assert!((margin_loss(&net, &x, 1).unwrap() - margin).abs() < 1e-12);
    let threshold = margin / w.iter().map(|v| v.abs()).sum::<f64>();
    for (eps, broken) in [(0.99 * threshold, false), (1.01 * threshold, true)] {
        assert_eq!(fgsm(&net, &x, 1, eps, None).unwrap().success, broken);
        assert_eq!(
            pgd(&net, &x, 1, &AttackSpec::pgd(eps, 20, 3), None).unwrap().success,
            broken
        );
        let df = deepfool_attack(&net, &x, 1, DeepFoolNorm::Linf, eps, None).unwrap();
        assert_eq!(df.success, broken);
    }
    let r = deepfool(&net, &x, DeepFoolNorm::Linf, 50).unwrap();
    assert_eq!(r.iterations, 1);
    assert!((r.r.norm_inf() - threshold).abs() < 1e-12);
}

#[test]
fn accuracy_never_rises_with_the_budget_on_an_affine_model() {
    let net = affine_binary(&[1.5, -0.7], 0.2);
    let inputs: Vec<Tensor> = (0..80).map(|s| uniform_point(2, -1.0, 1.0, 900 + s)).collect();
    let labels: Vec<usize> = inputs.iter().map(|x| net.predict(x).unwrap()).collect();
    let ds = Dataset::new(inputs, labels, 2, None, "affine").unwrap();
    for make in [
        AttackSpec::fgsm as fn(f64) -> AttackSpec,
        |e| AttackSpec::pgd(e, 10, 4),
        AttackSpec::deepfool_linf,
    ] {
        let accs: Vec<f64> = [0.0, 0.05, 0.1, 0.2, 0.4, 0.8]
            .iter()
            .map(|&e| adversarial_accuracy(&net, &ds, &make(e)).unwrap())
            .collect();
        assert_eq!(accs[0], 1.0);
        assert!(accs.windows(2).all(|w| w[1] <= w[0]), "{accs:?}");
        assert!(accs[5] < accs[0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attacks_respect_budget_and_box(
        seed in 0u64..1000,
        eps in 0.0f64..0.4,
        xs in prop::collection::vec(0.0f64..1.0, 2),
        y in 0usize..2,
    ) {
        let net = curvlab::model::build_network(&arch::mlp_2d(Activation::Tanh), seed).unwrap();
        let x = Tensor::from_vec(xs);
        let range = Some(ValueRange { lo: 0.0, hi: 1.0 });
        let results = [
            fgsm(&net, &x, y, eps, range).unwrap(),
            pgd(&net, &x, y, &AttackSpec::pgd(eps, 7, seed), range).unwrap(),
            deepfool_attack(&net, &x, y, DeepFoolNorm::Linf, eps, range).unwrap(),
            deepfool_attack(&net, &x, y, DeepFoolNorm::L2, eps, range).unwrap(),
            spsa(&net, &x, y, &AttackSpec { steps: 5, ..AttackSpec::spsa(eps, 1.0, seed) }, range).unwrap(),
        ];
        for r in results {
            prop_assert!(r.x_adv.sub(&x).norm_inf() <= eps + 1e-12);
            prop_assert!(r.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn best_iterate_loss_grows_with_steps(seed in 0u64..1000, k in 1usize..15, extra in 1usize..10) {
        let net = mlp(&[3, 8, 2], Activation::Tanh, seed);
        let loss = curvlab::objective::LabeledLoss::new(&net, (seed % 2) as usize);
        let x = gaussian(3, seed + 7);
        let short = pgd_ascent(&loss, &x, 0.3, k, 0.05, Some(seed), None).unwrap();
        let long = pgd_ascent(&loss, &x, 0.3, k + extra, 0.05, Some(seed), None).unwrap();
        prop_assert!(long.best_loss >= short.best_loss);
    }
}
