use dkmpp::diff::{central_difference, relative_error};
use dkmpp::domain::{build_representative_set, CovariateGrid, EventSequence, Window};
use dkmpp::estimators::{dsm_loss, dsm_loss_grad, mle_loss, mle_loss_grad, perturb, sm_loss, sm_loss_grad, CompensatorMode};
use dkmpp::intensity::{Link, MixtureModel, MixtureStructure};
use dkmpp::kernels::BaseKernelKind;
use dkmpp::IntensityModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(kernel: BaseKernelKind, link: Link, seed: u64) -> MixtureModel {
    let w = Window::default();
    let grid = CovariateGrid::from_fn(
        [vec![0.0, 5.0, 10.0], vec![0.0, 1.0], vec![0.0, 1.0]],
        1,
        |p| vec![(p[1] - 0.5).powi(2) + p[0] / 10.0],
    )
    .unwrap();
    let rep = build_representative_set(&w, [3, 3, 3], &grid).unwrap();
    let st = MixtureStructure::dkmpp(w, [3, 3, 3], 1, kernel, link, 5, 1, 3).unwrap();
    randomize(MixtureModel::new(st, rep, 2.0, seed).unwrap(), seed)
}

/// Moves every parameter off its initial value so no ReLU sits at its kink.
fn randomize(mut m: MixtureModel, seed: u64) -> MixtureModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    let v: Vec<f64> = m.params().values().iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
    m.set_params(&v).unwrap();
    m
}

fn dmpp(seed: u64) -> MixtureModel {
    let w = Window::default();
    let grid = CovariateGrid::from_fn([vec![0.0, 10.0], vec![0.0, 1.0], vec![0.0, 1.0]], 1, |p| vec![p[2]]).unwrap();
    let rep = build_representative_set(&w, [3, 2, 2], &grid).unwrap();
    let st = MixtureStructure::dmpp(w, [3, 2, 2], 1, BaseKernelKind::Rbf, 4, 1).unwrap();
    randomize(MixtureModel::new(st, rep, 3.0, seed).unwrap(), seed)
}

fn batch(seed: u64) -> Vec<EventSequence> {
    let w = Window::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|k| {
            let n = 2 + k;
            EventSequence::new(format!("s{k}"), (0..n).map(|_| w.sample_uniform(&mut rng)).collect(), &w).unwrap()
        })
        .collect()
}

fn check<F: Fn(&MixtureModel) -> f64>(m: &MixtureModel, grad: &[f64], f: F, label: &str) {
    let coords: Vec<usize> = (0..grad.len()).collect();
    let fd = central_difference(
        |x| {
            let mut probe = m.clone();
            probe.set_params(x).unwrap();
            f(&probe)
        },
        m.params().values(),
        &coords,
        1e-5,
    );
    // entries that vanish by symmetry are compared against the gradient scale
    let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    for i in 0..grad.len() {
        let err = (grad[i] - fd[i]).abs() / grad[i].abs().max(fd[i].abs()).max(1e-6 * scale);
        assert!(err < 1e-4, "{label} entry {i} ({:?}): analytic {} fd {}", m.params().owner(i), grad[i], fd[i]);
    }
}

#[test]
fn sm_gradient_matches_finite_differences() {
    for (k, link) in [
        (BaseKernelKind::Rbf, Link::Softplus),
        (BaseKernelKind::Rq, Link::Exponential),
        (BaseKernelKind::Ou, Link::Softplus),
    ] {
        let m = model(k, link, 3);
        let b = batch(1);
        let (v, g) = sm_loss_grad(&m, &b).unwrap();
        assert!(relative_error(v, sm_loss(&m, &b).unwrap()) < 1e-12);
        check(&m, &g, |p| sm_loss(p, &b).unwrap(), &format!("sm {k}"));
    }
}

#[test]
fn dsm_gradient_matches_finite_differences() {
    let m = model(BaseKernelKind::Rbf, Link::Softplus, 5);
    let noisy = perturb(&batch(2), 0.01, 4).unwrap();
    let (_, g) = dsm_loss_grad(&m, &noisy).unwrap();
    check(&m, &g, |p| dsm_loss(p, &noisy).unwrap(), "dsm");
}

#[test]
fn mle_gradient_matches_finite_differences() {
    let m = model(BaseKernelKind::Rq, Link::Softplus, 7);
    let b = batch(3);
    let w = Window::default();
    let (_, g) = mle_loss_grad(&m, &b, &w, 50, 9, CompensatorMode::Mc).unwrap();
    check(&m, &g, |p| mle_loss(p, &b, &w, 50, 9).unwrap(), "mle");
}

#[test]
fn dmpp_exact_gradient_matches_finite_differences() {
    let m = dmpp(1);
    let b = batch(4);
    let w = Window::default();
    let (_, g) = mle_loss_grad(&m, &b, &w, 1, 0, CompensatorMode::Exact).unwrap();
    check(
        &m,
        &g,
        |p| {
            let (v, _) = mle_loss_grad(p, &b, &w, 1, 0, CompensatorMode::Exact).unwrap();
            v
        },
        "dmpp exact",
    );
}
