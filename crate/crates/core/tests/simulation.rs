use dkmpp::domain::{load_covariate_grid, load_sequences, Window};
use dkmpp::intensity::compensator_mc;
use dkmpp::metrics::export_intensity_grid;
use dkmpp::simulator::{generate_dataset, sample_sequences, thinning_sample_detailed, SyntheticScenario, ThinningConfig};
use dkmpp::{Error, HomoPoissonModel, IntensityFn, Point};

#[test]
fn acceptance_rate_tracks_mean_intensity() {
    let w = Window::default();
    let lam = |p: &Point| 1.0 + 3.0 * p[1] * p[2];
    let lambda_max = 6.0;
    let (mut accepted, mut proposed) = (0usize, 0usize);
    for i in 0..400 {
        let o = thinning_sample_detailed(&lam, &w, lambda_max, 900 + i, 0, "s").unwrap();
        accepted += o.sequence.len();
        proposed += o.candidates;
    }
    // mean intensity 1 + 3/4
    let expected = 1.75 / lambda_max;
    let rate = accepted as f64 / proposed as f64;
    assert!((rate - expected).abs() / expected < 0.05, "rate {rate} expected {expected}");
}

#[test]
fn bound_violation_is_reported_when_retries_run_out() {
    let w = Window::default();
    let lam = |_: &Point| 4.0;
    match thinning_sample_detailed(&lam, &w, 1.0, 1, 0, "s") {
        Err(Error::BoundViolation { retries, .. }) => assert_eq!(retries, 0),
        other => panic!("expected a bound violation, got {other:?}"),
    }
    let o = thinning_sample_detailed(&lam, &w, 1.0, 1, 3, "s").unwrap();
    assert!(o.lambda_max >= 4.0);
    assert_eq!(o.retries, 2);
}

#[test]
fn same_seed_same_sequences() {
    let m = HomoPoissonModel::new(2.0).unwrap();
    let w = Window::default();
    let cfg = ThinningConfig::default();
    let a = sample_sequences(&m, &w, 20, 5, &cfg).unwrap();
    let b = sample_sequences(&m, &w, 20, 5, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, sample_sequences(&m, &w, 20, 6, &cfg).unwrap());
}

#[test]
fn dataset_files_reload() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = SyntheticScenario::default();
    sc.covariate_grid = [6, 6, 6];
    let (data, truth) = generate_dataset(&sc, 12, 8, Some(dir.path())).unwrap();
    let back = load_sequences(dir.path().join("events.csv"), &sc.window).unwrap();
    assert_eq!(back.n_events(), data.n_events());
    let grid = load_covariate_grid(dir.path().join("covariates.csv")).unwrap();
    assert_eq!(grid.n_cells(), 216);
    let reloaded = SyntheticScenario::load(dir.path().join("scenario.toml")).unwrap();
    assert_eq!(reloaded.window, sc.window);
    let p = [3.0, 0.2, 0.7];
    assert_eq!(reloaded.ground_truth().unwrap().intensity(&p), truth.intensity(&p));
}

#[test]
fn truth_peaks_sit_on_the_spatial_lattice() {
    let sc = SyntheticScenario::default();
    let truth = sc.ground_truth().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.csv");
    export_intensity_grid(&truth, &sc.window, 10.0, (40, 40), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<[f64; 3]> = text
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect();
    assert_eq!(rows.len(), 1600);
    let best = rows.iter().max_by(|a, b| a[2].total_cmp(&b[2])).unwrap();
    let cell = 1.0 / 40.0;
    let near = |x: f64| (0..5).map(|i| (x - i as f64 * 0.25).abs()).fold(f64::INFINITY, f64::min) <= cell;
    assert!(near(best[0]) && near(best[1]), "peak at {best:?}");
}

#[test]
fn homogeneous_compensator_is_rate_times_volume() {
    let m = HomoPoissonModel::new(2.5).unwrap();
    let w = Window::new((0.0, 4.0), (0.0, 2.0), (1.0, 2.0)).unwrap();
    assert!((compensator_mc(&m, &w, 100, 3).unwrap() - 20.0).abs() < 1e-12);
}
