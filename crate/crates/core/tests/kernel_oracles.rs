//! Kernel primitives against direct re-derivations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redistill::align::plan;
use redistill::ir::{model_zoo, ZooModel};
use redistill::kernel::ops::{conv2d, conv2d_backward, ConvGeom};
use redistill::kernel::{
    ddpm_noise, diffusion_loss, insert_red_blocks, kd_loss, red_backward, red_forward, red_loss, BnMode, DiffusionSchedule, KlDirection, Model,
    RedAblation, RedBlockParams, RedDistance, Tensor,
};
use redistill::rewrite::{rewrite_aggressive, RewriteConfig};

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Textbook six-loop convolution with zero padding and channel groups.
fn naive_conv(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, g: ConvGeom) -> Tensor {
    let [n, c, h, wd] = x.dims();
    let [oc, cg, kh, kw] = w.dims();
    let oh = (h + 2 * g.pad - kh) / g.stride + 1;
    let ow = (wd + 2 * g.pad - kw) / g.stride + 1;
    let og = oc / g.groups;
    assert_eq!(cg * g.groups, c);
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            let grp = o / og;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ci in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                let ix = (xo * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, ci, ky, kx) * x.at(b, grp * cg + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((b * oc + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::from_vec([n, oc, oh, ow], out).unwrap()
}

fn random_conv(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Vec<f64>, ConvGeom) {
    let groups = [1, 2, 3][rng.random_range(0..3)];
    let cg = rng.random_range(1..3);
    let og = rng.random_range(1..3);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let geom = ConvGeom { stride: rng.random_range(1..4), pad: rng.random_range(0..=k / 2), groups };
    let h = rng.random_range(k..k + 6);
    let x = Tensor::randn([rng.random_range(1..3), cg * groups, h, h + 1], rng);
    let w = Tensor::randn([og * groups, cg, k, k], rng);
    let b = (0..og * groups).map(|_| rng.random_range(-1.0..1.0)).collect();
    (x, w, b, geom)
}

#[test]
fn conv_matches_the_six_loop_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let (x, w, b, geom) = random_conv(&mut rng);
        let fast = conv2d(&x, &w, Some(&b), geom).unwrap();
        assert!(max_diff(&fast, &naive_conv(&x, &w, Some(&b), geom)) < 1e-12, "{geom:?}");
        let plain = conv2d(&x, &w, None, geom).unwrap();
        assert!(max_diff(&plain, &naive_conv(&x, &w, None, geom)) < 1e-12);
    }
}

/// Convolution is bilinear, so `<dy, conv(x, w)> = <dx, x> = <dw, w>`.
#[test]
fn conv_backward_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let (x, w, _, geom) = random_conv(&mut rng);
        let y = naive_conv(&x, &w, None, geom);
        let dy = Tensor::randn(y.dims(), &mut rng);
        let g = conv2d_backward(&x, &w, &dy, geom).unwrap();
        let reference = dy.dot(&y);
        let scale = reference.abs().max(1.0);
        assert!((g.dx.dot(&x) - reference).abs() < 1e-10 * scale);
        assert!((g.dw.dot(&w) - reference).abs() < 1e-10 * scale);
        for (o, db) in g.db.iter().enumerate() {
            let plane = y.h() * y.w();
            let expect: f64 = (0..dy.n()).map(|n| dy.sample(n)[o * plane..(o + 1) * plane].iter().sum::<f64>()).sum();
            assert!((db - expect).abs() < 1e-10);
        }
    }
}

fn logits(v: &[f64]) -> Tensor {
    Tensor::from_vec([1, v.len(), 1, 1], v.to_vec()).unwrap()
}

/// Two-class KD loss written with the logistic function.
fn two_class_kd(zs: f64, zt: f64, t: f64) -> f64 {
    let sig = |z: f64| 1.0 / (1.0 + (-z / t).exp());
    let (ps, pt) = (sig(zs), sig(zt));
    t * t * (pt * (pt / ps).ln() + (1.0 - pt) * ((1.0 - pt) / (1.0 - ps)).ln())
}

#[test]
fn kd_loss_two_class_closed_form() {
    for (zs, zt, t) in [(1.0, -2.0, 1.0), (0.3, 2.5, 4.0), (-3.0, 3.0, 2.0), (5.0, 5.0, 7.0)] {
        let v = kd_loss(&logits(&[zs, 0.0]), &logits(&[zt, 0.0]), t, KlDirection::TeacherStudent).unwrap().value;
        assert!((v - two_class_kd(zs, zt, t)).abs() < 1e-12, "{zs} {zt} {t}");
    }
    let same = kd_loss(&logits(&[1.0, 2.0, -1.0]), &logits(&[1.0, 2.0, -1.0]), 3.0, KlDirection::TeacherStudent).unwrap();
    assert!(same.value.abs() < 1e-15 && same.grad.max_abs() < 1e-15);
}

/// With the t² factor the loss does not vanish as t grows: for two classes it
/// tends to (z_s − z_t)²/8, a logit-matching term.
#[test]
fn kd_loss_high_temperature_limit_is_finite() {
    let (zs, zt) = (1.5, -0.5);
    let v = kd_loss(&logits(&[zs, 0.0]), &logits(&[zt, 0.0]), 1e3, KlDirection::TeacherStudent).unwrap().value;
    let limit = (zs - zt) * (zs - zt) / 8.0;
    assert!((v - limit).abs() < 1e-4 * limit, "{v} vs {limit}");
    // Without the t² factor the divergence itself does fall monotonically to 0.
    let kl = |t: f64| kd_loss(&logits(&[0.0, 2.0]), &logits(&[2.0, 0.0]), t, KlDirection::TeacherStudent).unwrap().value / (t * t);
    let (k1, k4, k16) = (kl(1.0), kl(4.0), kl(16.0));
    assert!(k1 > k4 && k4 > k16 && k16 < 1e-2 * k1, "{k1} {k4} {k16}");
}

#[test]
fn kd_loss_swapped_logits() {
    // Teacher [2, 0], student [0, 2] at t = 1: KL = (p − q)·ln(p/q) with p = σ(2), q = σ(−2).
    let (p, q) = (1.0 / (1.0 + (-2.0f64).exp()), 1.0 / (1.0 + 2.0f64.exp()));
    let expect = p * (p / q).ln() + q * (q / p).ln();
    let v = kd_loss(&logits(&[0.0, 2.0]), &logits(&[2.0, 0.0]), 1.0, KlDirection::TeacherStudent).unwrap().value;
    assert!((v - expect).abs() < 1e-12);
    assert!((expect - (p - q) * (p / q).ln()).abs() < 1e-15);
}

#[test]
fn red_loss_reference_geometries() {
    let map = |v: &[f64]| Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap();
    let loss = |a: &[f64], b: &[f64]| red_loss(&map(a), &map(b), RedDistance::Cosine).unwrap().value;
    assert!((loss(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
    assert!((loss(&[1.0, -3.0], &[-1.0, 3.0]) - 2.0).abs() < 1e-15);
    assert!(loss(&[0.2, 0.4], &[0.2, 0.4]).abs() < 1e-15);
    // A zero map contributes 1 and no gradient.
    let z = red_loss(&map(&[0.0, 0.0]), &map(&[1.0, 2.0]), RedDistance::Cosine).unwrap();
    assert_eq!(z.value, 1.0);
    assert_eq!(z.grad.max_abs(), 0.0);
}

#[test]
fn schedule_is_a_running_product() {
    let s = DiffusionSchedule::standard();
    assert_eq!(s.steps(), 1000);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(1000) - 0.02).abs() < 1e-15);
    assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    let mut prod = 1.0;
    for t in 1..=1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        prod *= 1.0 - beta;
        assert!((s.alpha_bar(t) - prod).abs() < 1e-14, "t = {t}");
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    let x = Tensor::zeros([1, 1, 2, 2]);
    assert!(ddpm_noise(&x, 0, &s, &x).is_err());
    assert!(ddpm_noise(&x, 1001, &s, &x).is_err());
}

#[test]
fn zero_predictor_pays_the_noise_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let eps = Tensor::randn([64, 3, 8, 8], &mut rng);
    let l = diffusion_loss(&eps, &Tensor::zeros(eps.dims())).unwrap();
    let per_sample = 3.0 * 8.0 * 8.0;
    assert!((l.value - eps.dot(&eps) / 64.0).abs() < 1e-9);
    assert!((l.value / per_sample - 1.0).abs() < 0.05, "{}", l.value);

    let k = 37;
    let ones = Tensor::full([1, 1, 1, k], 1.0);
    assert_eq!(diffusion_loss(&Tensor::zeros(ones.dims()), &ones).unwrap().value, k as f64);
    let pred = Tensor::randn(eps.dims(), &mut rng);
    let oracle: f64 = eps.data().iter().zip(pred.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0;
    assert!((diffusion_loss(&eps, &pred).unwrap().value - oracle).abs() < 1e-7);
    assert_eq!(diffusion_loss(&eps, &eps).unwrap().value, 0.0);
}

#[test]
fn zeroed_red_block_halves_its_input_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::randn([3, 4, 6, 6], &mut rng);
    let p = RedBlockParams::zeros(4, 3);
    for mode in [BnMode::Train, BnMode::Eval] {
        let (y, _) = red_forward(&p, &x, RedAblation::Full, mode).unwrap();
        assert!(max_diff(&y, &x.map(|v| 0.5 * v)) <= 1e-12);
    }
}

#[test]
fn inserted_blocks_match_the_standalone_block() {
    let teacher = model_zoo(ZooModel::ToyCnn, &ZooModel::ToyCnn.default_config()).unwrap();
    let (student, _) = rewrite_aggressive(&teacher, &RewriteConfig::new(2)).unwrap();
    let p = plan(&teacher, &student).unwrap();
    let (graph, ins) = insert_red_blocks(&student, &p, RedAblation::Full, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut model = Model::new(graph.clone(), &mut rng).unwrap();
    // Move batch norm off the identity so every parameter matters.
    for (name, t) in model.params().names().to_vec().into_iter().zip(0..) {
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with("gate.conv.bias") {
            let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            for v in model.params_mut().tensors_mut()[t].data_mut() {
                *v = base + rng.random_range(-0.5..0.5);
            }
        }
    }
    let s = graph.input_shape();
    let x = Tensor::randn([2, s.c as usize, s.h as usize, s.w as usize], &mut rng);
    let pass = model.forward(&x, BnMode::Train).unwrap();
    for block in &ins {
        let tap = pass.output(graph.index_of(&block.tap).unwrap());
        let out_idx = graph.index_of(&block.output).unwrap();
        let params = RedBlockParams::from_store(model.params(), &block.prefix, tap.c(), 3);
        let (f_d, cache) = red_forward(&params, tap, RedAblation::Full, BnMode::Train).unwrap();
        assert!(max_diff(&f_d, pass.output(out_idx)) < 1e-12, "{}", block.prefix);

        let seed = Tensor::randn(f_d.dims(), &mut rng);
        let g = red_backward(&params, &cache, &seed).unwrap();
        let pg = model.backward(&pass, vec![(out_idx, seed)]).unwrap();
        let by_name = |suffix: &str| {
            let k = model.params().names().iter().position(|n| *n == format!("{}.{suffix}", block.prefix)).unwrap();
            pg.params[k].data().to_vec()
        };
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
        assert!(close(&by_name("gate.conv.weight"), g.logit_w.data()));
        assert!(close(&by_name("gate.conv.bias"), &g.logit_b));
        assert!(close(&by_name("gate.bn.gamma"), &g.logit_gamma));
        assert!(close(&by_name("gate.bn.beta"), &g.logit_beta));
        assert!(close(&by_name("re.conv.weight"), g.re_w.data()));
        assert!(close(&by_name("re.conv.bias"), &g.re_b));
        assert!(close(&by_name("re.bn.gamma"), &g.re_gamma));
        assert!(close(&by_name("re.bn.beta"), &g.re_beta));
    }
}

fn nonneg(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor {
    Tensor::randn(dims, rng).map(|v| v.max(0.0) * 3.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn red_output_stays_in_its_envelope(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = RedBlockParams::init(4, 3, &mut rng);
        let f_s = nonneg(&mut rng, [2, 4, 5, 5]);
        let (full, _) = red_forward(&p, &f_s, RedAblation::Full, BnMode::Train).unwrap();
        for (d, s) in full.data().iter().zip(f_s.data()) {
            prop_assert!(*d >= 0.0 && *d <= 6.0 + s + 1e-12);
        }
        let (enc, _) = red_forward(&p, &f_s, RedAblation::NoShortcut, BnMode::Train).unwrap();
        prop_assert!(enc.data().iter().all(|v| (0.0..=6.0).contains(v)));
        let (gated, _) = red_forward(&p, &f_s, RedAblation::NoResidualEncoder, BnMode::Train).unwrap();
        for (d, s) in gated.data().iter().zip(f_s.data()) {
            prop_assert!(*d >= 0.0 && *d <= *s);
        }
        let (same, _) = red_forward(&p, &f_s, RedAblation::NoRedBlock, BnMode::Train).unwrap();
        prop_assert_eq!(same, f_s);
    }

    #[test]
    fn cosine_loss_ignores_positive_scale(seed in any::<u64>(), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f_t = Tensor::randn([3, 5, 4, 4], &mut rng);
        let f_d = Tensor::randn([3, 2, 4, 4], &mut rng);
        let base = red_loss(&f_t, &f_d, RedDistance::Cosine).unwrap();
        let scaled = red_loss(&f_t.map(|v| a * v), &f_d.map(|v| b * v), RedDistance::Cosine).unwrap();
        prop_assert!((base.value - scaled.value).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&base.value));
        // The gradient with respect to f_D shrinks by 1/b.
        let g = scaled.grad.map(|v| v * b);
        prop_assert!(max_diff(&g, &base.grad) < 1e-9 * base.grad.max_abs().max(1e-12));
        let self_loss = red_loss(&f_d, &f_d, RedDistance::Cosine).unwrap().value;
        prop_assert!(self_loss.abs() < 1e-12);
    }

    #[test]
    fn euclidean_loss_is_a_squared_distance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f_t = Tensor::randn([2, 3, 4, 4], &mut rng);
        let f_d = Tensor::randn([2, 3, 4, 4], &mut rng);
        let l = red_loss(&f_t, &f_d, RedDistance::Euclidean).unwrap().value;
        prop_assert!(l >= 0.0);
        prop_assert!(red_loss(&f_t, &f_t, RedDistance::Euclidean).unwrap().value.abs() < 1e-15);
        let shifted = red_loss(&f_t, &f_t.map(|v| v + 1.0), RedDistance::Euclidean).unwrap().value;
        prop_assert!((shifted - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noised_samples_have_the_scheduled_variance(t in 1usize..=1000, seed in any::<u64>()) {
        let s = DiffusionSchedule::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::randn([1, 1, 128, 128], &mut rng);
        let eps = Tensor::randn([1, 1, 128, 128], &mut rng);
        let xt = ddpm_noise(&x0, t, &s, &eps).unwrap();
        let n = xt.len() as f64;
        let mean = xt.sum() / n;
        let var = xt.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // Unit-variance x_0 and ε give unit variance at every step.
        prop_assert!((var - 1.0).abs() < 0.05, "{}", var);
        let pure = ddpm_noise(&Tensor::zeros(x0.dims()), t, &s, &eps).unwrap();
        let k = (1.0 - s.alpha_bar(t)).sqrt();
        prop_assert!(max_diff(&pure, &eps.map(|v| k * v)) < 1e-12);
    }
}
