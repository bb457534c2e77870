use super::*;
use crate::autograd::Graph;
use crate::image::ImageBatch;
use crate::nn::ParamSet;
use crate::rng::rng;
use crate::tensor::Tensor;
use rand::Rng as _;

/// log|det A| by partial-pivot LU.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        assert!(d != 0.0, "singular Jacobian");
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / d;
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    acc
}

/// Central-difference Jacobian of a map on flat vectors.
fn numeric_jacobian(x: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let eps = 1e-6;
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        xp[j] += eps;
        let mut xm = x.to_vec();
        xm[j] -= eps;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..m {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    jac
}

fn single_coupling(mask: CouplingMask, levels: usize, seed: u64, jitter: f64) -> (CouplingLayer, ParamSet<f64>) {
    let mut ps = ParamSet::new();
    let mut r = rng(seed);
    let [_, h, w] = mask.shape();
    let widths = SubnetConfig { levels, base_width: 4, max_width: 8 }.widths_for(h, w);
    let layer = CouplingLayer::new(mask, widths, 0, 3.0, "c", &mut ps, &mut r).unwrap();
    if jitter > 0.0 {
        ps.jitter(jitter, &mut r);
    }
    (layer, ps)
}

fn run_coupling(layer: &CouplingLayer, ps: &ParamSet<f64>, z: &Tensor<f64>, inverse: bool) -> (Tensor<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let p = ps.bind(&mut g, false);
    let zv = g.input(z.clone());
    let (y, ld) = if inverse {
        layer.inverse(&mut g, &p, zv, None).unwrap()
    } else {
        layer.forward(&mut g, &p, zv, None).unwrap()
    };
    (g.value(y).clone(), g.value(ld).data().to_vec())
}

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn set_param(ps: &mut ParamSet<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let names: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).collect();
    let i = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = &mut ps.tensors_mut()[i];
    for (k, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(k);
    }
}

fn checker(c: usize, h: usize, w: usize, parity: bool) -> CouplingMask {
    CouplingMask::new(MaskKind::Checkerboard, parity, c, h, w).unwrap()
}

#[test]
fn fresh_coupling_is_identity() {
    let (layer, ps) = single_coupling(checker(1, 4, 4, false), 2, 1, 0.0);
    let z = random_tensor([2, 1, 4, 4], 2);
    let (y, ld) = run_coupling(&layer, &ps, &z, false);
    assert_eq!(y, z);
    assert_eq!(ld, vec![0.0, 0.0]);
}

#[test]
fn constant_log2_scale_doubles_partition_b() {
    let (layer, mut ps) = single_coupling(checker(1, 4, 4, false), 2, 1, 0.0);
    // amp = 3·sigmoid(ρ); choose the raw scale so amp·tanh(raw) = ln 2.
    let rho = ps.iter().find(|(n, _)| *n == "c.amp").unwrap().1.data()[0];
    let amp = 3.0 / (1.0 + (-rho).exp());
    let raw = (std::f64::consts::LN_2 / amp).atanh();
    set_param(&mut ps, "c.net.head.b", |k| if k == 0 { raw } else { 0.0 });
    let z = random_tensor([1, 1, 4, 4], 3);
    let (y, ld) = run_coupling(&layer, &ps, &z, false);
    let bits = layer.mask().bits();
    assert_eq!(layer.mask().transformed_count(), 8);
    for i in 0..16 {
        let expect = if bits[i] { z.data()[i] } else { 2.0 * z.data()[i] };
        assert!((y.data()[i] - expect).abs() < 1e-12);
    }
    assert!((ld[0] - 8.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn constant_shift_inverse_subtracts() {
    let (layer, mut ps) = single_coupling(checker(1, 4, 4, true), 2, 5, 0.0);
    set_param(&mut ps, "c.net.head.b", |k| if k == 1 { 0.75 } else { 0.0 });
    let y = random_tensor([1, 1, 4, 4], 6);
    let (z, ld) = run_coupling(&layer, &ps, &y, true);
    let bits = layer.mask().bits();
    for i in 0..16 {
        let expect = if bits[i] { y.data()[i] } else { y.data()[i] - 0.75 };
        assert!((z.data()[i] - expect).abs() < 1e-12);
    }
    assert_eq!(ld[0], 0.0);
}

#[test]
fn coupling_logdet_matches_numeric_jacobian() {
    for (mask, seed) in [
        (checker(1, 4, 4, false), 11),
        (checker(1, 4, 4, true), 12),
        (CouplingMask::new(MaskKind::Channel, false, 4, 2, 2).unwrap(), 13),
    ] {
        let shape = {
            let [c, h, w] = mask.shape();
            [1, c, h, w]
        };
        let (layer, ps) = single_coupling(mask, 3, seed, 0.3);
        let z = random_tensor(shape, seed + 100);
        let (_, ld) = run_coupling(&layer, &ps, &z, false);
        let jac = numeric_jacobian(z.data(), |v| {
            let t = Tensor::from_vec(shape, v.to_vec()).unwrap();
            run_coupling(&layer, &ps, &t, false).0.into_vec()
        });
        let oracle = log_abs_det(jac);
        assert!(ld[0].abs() > 1e-3, "jittered layer should not be volume preserving");
        assert!((ld[0] - oracle).abs() <= 1e-4 * oracle.abs().max(1.0), "analytic {} vs oracle {oracle}", ld[0]);
    }
}

#[test]
fn coupling_inverse_round_trip_and_logdet_antisymmetry() {
    let (layer, ps) = single_coupling(checker(1, 8, 8, false), 3, 21, 0.3);
    let z = random_tensor([3, 1, 8, 8], 22);
    let (y, ld_f) = run_coupling(&layer, &ps, &z, false);
    let (zr, ld_i) = run_coupling(&layer, &ps, &y, true);
    assert!(zr.max_abs_diff(&z) < 1e-5);
    for (a, b) in ld_f.iter().zip(&ld_i) {
        assert!((a + b).abs() < 1e-6);
    }
}

#[test]
fn coupling_rejects_mismatched_shape() {
    let (layer, ps) = single_coupling(checker(1, 4, 4, false), 2, 1, 0.0);
    let mut g = Graph::new();
    let p = ps.bind(&mut g, false);
    let z = g.input(Tensor::zeros([1, 1, 4, 8]));
    assert!(matches!(layer.forward(&mut g, &p, z, None), Err(crate::error::Error::InvalidArgument(_))));
}

fn continuous(t: Tensor<f64>) -> ImageBatch<f64> {
    ImageBatch::continuous(t).unwrap()
}

#[test]
fn empty_model_is_standard_gaussian() {
    let model = FlowModel::<f64>::new(FlowConfig::empty(2, 2), 0).unwrap();
    let zero = continuous(Tensor::zeros([1, 1, 2, 2]));
    let (z, ld) = model.forward(&zero, 0).unwrap();
    assert_eq!(z, *zero.tensor());
    assert_eq!(ld, vec![0.0]);
    let ll = model.log_likelihood(&zero, 0).unwrap();
    assert!((ll[0] + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

    let x = random_tensor([3, 1, 2, 2], 4);
    let ll = model.log_likelihood(&continuous(x.clone()), 0).unwrap();
    for (s, l) in ll.iter().enumerate() {
        let closed: f64 = x.sample(s).iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
        assert!((l - closed).abs() < 1e-12);
    }
}

#[test]
fn single_squeeze_is_volume_preserving_rearrangement() {
    let mut cfg = FlowConfig::empty(4, 4);
    cfg.stages.push(StageConfig { squeeze: true, layers: 0, mask: MaskKind::Channel });
    let model = FlowModel::<f64>::new(cfg, 0).unwrap();
    let x = random_tensor([2, 1, 4, 4], 5);
    let (z, ld) = model.forward(&continuous(x.clone()), 0).unwrap();
    assert_eq!(z.shape(), [2, 4, 2, 2]);
    assert_eq!(ld, vec![0.0, 0.0]);
    assert_eq!(z.at([0, 1, 0, 0]), x.at([0, 0, 0, 1]));
    assert_eq!(z.at([1, 2, 1, 0]), x.at([1, 0, 3, 0]));
}

fn reduced_model(h: usize, w: usize, seed: u64) -> FlowModel<f64> {
    let mut cfg = FlowConfig::compact(h, w, 2, 3, 4);
    cfg.dequantization = None;
    let mut m = FlowModel::<f64>::new(cfg, seed).unwrap();
    m.params_mut().jitter(0.2, &mut rng(seed ^ 0xabc));
    m
}

#[test]
fn full_architecture_conserves_dimensions() {
    let model = FlowModel::<f32>::new(FlowConfig::compact(16, 16, 2, 4, 4), 3).unwrap();
    let x = ImageBatch::<f32>::discrete(Tensor::full([1, 1, 16, 16], 7.0)).unwrap();
    let (z, _) = model.forward(&x, 9).unwrap();
    assert_eq!(z.shape(), [1, 16, 4, 4]);
    assert_eq!(z.len(), 256);
}

#[test]
fn full_model_logdet_matches_numeric_jacobian() {
    let model = reduced_model(4, 4, 31);
    let x = random_tensor([1, 1, 4, 4], 32);
    let (_, ld) = model.forward(&continuous(x.clone()), 0).unwrap();
    let jac = numeric_jacobian(x.data(), |v| {
        let t = Tensor::from_vec([1, 1, 4, 4], v.to_vec()).unwrap();
        model.forward(&continuous(t), 0).unwrap().0.into_vec()
    });
    let oracle = log_abs_det(jac);
    assert!((ld[0] - oracle).abs() <= 1e-4 * oracle.abs().max(1.0), "analytic {} vs oracle {oracle}", ld[0]);
}

#[test]
fn full_model_round_trip() {
    let model = reduced_model(8, 8, 41);
    let x = random_tensor([2, 1, 8, 8], 42);
    let (z, _) = model.forward(&continuous(x.clone()), 0).unwrap();
    let xr = model.inverse(&z).unwrap();
    assert!(xr.max_abs_diff(&x) < 1e-5);
}

#[test]
fn density_integrates_to_one_on_a_grid() {
    let (layer, ps) = single_coupling(checker(1, 1, 2, false), 1, 51, 0.5);
    let model = FlowModel::from_parts(FlowConfig::empty(1, 2), vec![Transform::Coupling(layer)], ps);
    let (lo, hi, n) = (-14.0, 14.0, 700);
    let step = (hi - lo) / n as f64;
    let mut total = 0.0;
    let pts: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * step).collect();
    for &a in &pts {
        let data: Vec<f64> = pts.iter().flat_map(|&b| [a, b]).collect();
        let x = continuous(Tensor::from_vec([n, 1, 1, 2], data).unwrap());
        total += model.log_likelihood(&x, 0).unwrap().iter().map(|l| l.exp()).sum::<f64>();
    }
    total *= step * step;
    assert!((total - 1.0).abs() < 0.02, "integral {total}");
}

#[test]
fn loglik_gradient_matches_central_differences() {
    let mut model = reduced_model(4, 4, 61);
    let x = random_tensor([2, 1, 4, 4], 62);
    let eval = |m: &FlowModel<f64>| -> f64 { m.log_likelihood(&continuous(x.clone()), 0).unwrap().iter().sum() };
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let xv = g.input(x.clone());
    let ll = model.log_likelihood_graph(&mut g, &p, xv, false, None).unwrap();
    let total = g.sum_all(ll);
    let grads = p.gradients(&g, &g.backward(total));
    let mut r = rng(63);
    let mut checked = 0;
    while checked < 25 {
        let ti = r.random_range(0..grads.len());
        let ei = r.random_range(0..grads[ti].len());
        let an = grads[ti].data()[ei];
        let eps = 1e-5;
        let orig = model.params().tensors()[ti].data()[ei];
        model.params_mut().tensors_mut()[ti].data_mut()[ei] = orig + eps;
        let fp = eval(&model);
        model.params_mut().tensors_mut()[ti].data_mut()[ei] = orig - eps;
        let fm = eval(&model);
        model.params_mut().tensors_mut()[ti].data_mut()[ei] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        if fd.abs() < 1e-4 && an.abs() < 1e-4 {
            continue;
        }
        assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()), "param {ti}[{ei}]: fd {fd} vs analytic {an}");
        checked += 1;
    }
}

#[test]
fn uniform_dequantization_correction_is_level_scaling() {
    let mut cfg = FlowConfig::empty(4, 4);
    cfg.dequantization = Some(DequantConfig {
        mode: DequantMode::Uniform,
        layers: 0,
        subnet: SubnetConfig { levels: 1, base_width: 1, max_width: 1 },
    });
    let model = FlowModel::<f64>::new(cfg, 0).unwrap();
    let x = ImageBatch::discrete(Tensor::zeros([2, 1, 4, 4])).unwrap();
    let (xc, corr) = model.dequantize(&x, 3).unwrap();
    for c in corr {
        assert!((c + 16.0 * 256f64.ln()).abs() < 1e-9);
    }
    assert!(xc.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0 / 256.0));
}

#[test]
fn variational_dequantization_stays_in_unit_interval() {
    let mut model = FlowModel::<f32>::new(FlowConfig::compact(8, 8, 2, 2, 4), 7).unwrap();
    model.params_mut().jitter(0.5, &mut rng(8));
    let data: Vec<f32> = (0..128).map(|i| if i % 3 == 0 { 255.0 } else if i % 3 == 1 { 0.0 } else { 128.0 }).collect();
    let x = ImageBatch::discrete(Tensor::from_vec([2, 1, 8, 8], data).unwrap()).unwrap();
    let (xc, _) = model.dequantize(&x, 1).unwrap();
    for (&v, &k) in xc.tensor().data().iter().zip(x.tensor().data()) {
        assert!(v > 0.0 && v < 1.0);
        assert!(v > k / 256.0 && v < (k + 1.0) / 256.0);
    }
    let (xc2, _) = model.dequantize(&x, 2).unwrap();
    assert_ne!(xc, xc2);
}

#[test]
fn variational_noise_density_matches_jacobian() {
    let mut cfg = FlowConfig::compact(4, 4, 2, 2, 4);
    cfg.stages.clear();
    let mut model = FlowModel::<f64>::new(cfg, 71).unwrap();
    model.params_mut().jitter(0.3, &mut rng(72));
    let levels: Vec<f64> = (0..16).map(|i| ((i * 37) % 256) as f64).collect();
    let x = ImageBatch::discrete(Tensor::from_vec([1, 1, 4, 4], levels.clone()).unwrap()).unwrap();
    let deq = model.dequantizer().unwrap();
    let eps = deq.sample_noise::<f64>([1, 1, 4, 4], 5);
    let q_of = |e: &[f64]| -> (Vec<f64>, f64) {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let xv = g.input(x.tensor().clone());
        let noise = Tensor::from_vec([1, 1, 4, 4], e.to_vec()).unwrap();
        let (xc, corr) = deq.dequantize(&mut g, &p, xv, &noise).unwrap();
        let q: Vec<f64> = g.value(xc).data().iter().zip(&levels).map(|(v, k)| v * 256.0 - k).collect();
        (q, g.value(corr).data()[0])
    };
    let (_, corr) = q_of(eps.data());
    let log_q = -corr - 16.0 * 256f64.ln();
    let jac = numeric_jacobian(eps.data(), |e| q_of(e).0);
    let base: f64 = eps.data().iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
    let oracle = base - log_abs_det(jac);
    assert!((log_q - oracle).abs() <= 1e-4 * oracle.abs().max(1.0), "log q {log_q} vs oracle {oracle}");
}

#[test]
fn overflow_reports_transform_index() {
    let (layer, mut ps) = single_coupling(checker(1, 2, 2, false), 1, 81, 0.0);
    set_param(&mut ps, "c.net.head.b", |k| if k == 0 { 50.0 } else { 0.0 });
    let mut cfg = FlowConfig::empty(2, 2);
    cfg.stages.push(StageConfig { squeeze: false, layers: 1, mask: MaskKind::Checkerboard });
    let model = FlowModel::from_parts(cfg, vec![Transform::Coupling(layer)], ps);
    let x = continuous(Tensor::full([1, 1, 2, 2], 1e308));
    match model.log_likelihood(&x, 0) {
        Err(crate::error::Error::NonFiniteTransform { transform }) => assert_eq!(transform, 0),
        other => panic!("expected numeric failure, got {other:?}"),
    }
}

#[test]
fn bits_per_dim_definition() {
    assert_eq!(bits_per_dim(-16.0 * std::f64::consts::LN_2, 16), 1.0);
    assert_eq!(bits_per_dim(0.0f64, 16), 0.0);
}

#[test]
fn indivisible_input_is_rejected() {
    assert!(FlowModel::<f32>::new(FlowConfig::standard(18, 16), 0).is_err());
    let model = FlowModel::<f32>::new(FlowConfig::compact(16, 16, 1, 2, 4), 0).unwrap();
    let x = ImageBatch::<f32>::discrete(Tensor::zeros([1, 1, 8, 8])).unwrap();
    assert!(model.log_likelihood(&x, 0).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn squeeze_is_a_permutation(c in 1usize..3, h in 1usize..4, w in 1usize..4, seed: u64) {
            let x = random_tensor([1, c, 2 * h, 2 * w], seed);
            let z = crate::autograd::space_to_depth(&x);
            let mut a = x.data().to_vec();
            let mut b = z.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_architecture_guard() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.json");
    let mut model = FlowModel::<f32>::new(FlowConfig::compact(8, 8, 1, 2, 4), 3).unwrap();
    model.params_mut().jitter(0.1, &mut rng(4));
    model.save(&path).unwrap();
    let loaded = FlowModel::<f32>::load(&path).unwrap();
    assert_eq!(loaded.params().checksum(), model.params().checksum());
    assert_eq!(loaded.config(), model.config());

    let mut ck = crate::checkpoint::Checkpoint::load(&path).unwrap();
    ck.architecture_tag = FlowConfig::compact(8, 8, 2, 2, 4).tag();
    ck.save(&path).unwrap();
    assert!(matches!(FlowModel::<f32>::load(&path), Err(crate::error::Error::ArchitectureMismatch { .. })));
}

#[test]
fn continuous_bpd_is_on_the_level_scale() {
    let model = FlowModel::<f64>::new(FlowConfig::empty(2, 2), 0).unwrap();
    let x = continuous(Tensor::zeros([1, 1, 2, 2]));
    let ll = model.log_likelihood(&x, 0).unwrap()[0];
    let bpd = model.bits_per_dim(&x, 0).unwrap()[0];
    assert!((bpd - (bits_per_dim(ll, 4) + 8.0)).abs() < 1e-12);
}
