use point2::config::RunConfig;
use point2::imaging::Image;
use point2::phantom::PhantomSpec;
use point2::pipeline::train::{init_params, sample_gradients, train_stage, TrainingImages};
use point2::pipeline::{
    ablation_mpd, eval_metrics, make_dataset, register, register_cases, train, Dataset,
    DatasetConfig, RegisterInput, Stage, TrackerKind, TrainConfig, Tracker,
};
use point2::{Error, ImagingGeometry, Result, Vec2};

fn small_config() -> DatasetConfig {
    DatasetConfig {
        n_volumes: 3,
        n_test_volumes: 1,
        cases_per_train_volume: 2,
        cases_per_test_volume: 2,
        phantom: PhantomSpec {
            dims: [24, 24, 24],
            spacing_mm: 5.0,
            n_blobs: 4,
            ..PhantomSpec::default()
        },
        geometry: ImagingGeometry {
            det_px: [32, 32],
            pixel_spacing_mm: 6.0,
            ..ImagingGeometry::default()
        },
        pois_per_volume: 12,
        landmarks_per_volume: 6,
        poi_margin_mm: 10.0,
        ..DatasetConfig::default()
    }
}

fn small_train(epochs: (usize, usize)) -> TrainConfig {
    TrainConfig {
        stage1_epochs: epochs.0,
        stage2_epochs: epochs.1,
        poi_subset: 6,
        ..TrainConfig::default()
    }
}

fn small_dataset() -> Dataset {
    make_dataset(&small_config()).unwrap()
}

#[test]
fn datasets_are_a_pure_function_of_the_config() {
    let (a, b) = (small_dataset(), small_dataset());
    assert_eq!(a.volumes, b.volumes);
    assert_eq!(a.pois, b.pois);
    for (x, y) in a.cases.iter().zip(&b.cases) {
        assert_eq!(x.xrays, y.xrays);
        assert_eq!(x.gt_pose, y.gt_pose);
    }
    assert_eq!((a.train.len(), a.test.len()), (4, 2));
    // Held-out cases come from held-out volumes only.
    assert!(a.test.iter().all(|&c| a.cases[c].volume == 2));
    assert!(a.train.iter().all(|&c| a.cases[c].volume < 2));
}

#[test]
fn oracle_registration_recovers_every_pose_in_one_pass() {
    let ds = small_dataset();
    let all: Vec<usize> = (0..ds.cases.len()).collect();
    let records = register_cases(&ds, &all, &TrackerKind::Oracle).unwrap();
    for r in &records {
        assert_eq!(r.pose_evaluations, 1);
        assert!(r.mtre_final < 1e-6, "{}: {}", r.case_id, r.mtre_final);
        assert!(r.mtre_initial > 0.0);
    }
    let m = eval_metrics(&records).unwrap();
    assert_eq!((m.count, m.gfr), (records.len(), 0.0));
}

struct Failing;

impl Tracker for Failing {
    fn track(&self, _: usize, _: &Image, _: &Image, pois: &[Vec2]) -> Result<Vec<Result<Vec2>>> {
        Ok(pois.iter().map(|_| Err(Error::DegenerateHeatmap(0.0))).collect())
    }
}

#[test]
fn losing_every_poi_fails_registration() {
    let ds = small_dataset();
    let c = &ds.cases[0];
    let input = RegisterInput {
        volume: &ds.volumes[c.volume],
        ct_pois: &ds.pois[c.volume],
        xrays: &c.xrays,
        views: &ds.config.views,
        geometry: &ds.config.geometry,
        ray: ds.ray_config(c.volume),
        current_pose: c.initial_pose,
    };
    assert!(matches!(register(&input, &Failing), Err(Error::RegistrationFailed(_))));
}

#[test]
fn training_is_deterministic_and_moves_the_parameters() {
    let ds = small_dataset();
    let cfg = small_train((1, 1));
    let a = train(&ds, &cfg).unwrap();
    let b = train(&ds, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.curve.len(), 2);
    assert_eq!((a.curve[0].stage, a.curve[1].stage), (1, 2));
    assert!(a.curve.iter().all(|r| r.loss.is_finite()));
    let fresh = init_params(cfg.network, 2, cfg.seed);
    assert_ne!(a.stage1_params, fresh);
    assert_ne!(a.params, a.stage1_params);
}

#[test]
fn one_epoch_on_one_case_lowers_its_loss() {
    let mut ds = small_dataset();
    ds.train.truncate(1);
    let cfg = TrainConfig {
        poi_subset: 12,
        ..small_train((0, 0))
    };
    let images = TrainingImages::new(&ds, &cfg.preprocess).unwrap();
    let mut params = init_params(cfg.network, 2, cfg.seed);
    let subset: Vec<usize> = (0..12).collect();
    let before = sample_gradients(&params, &ds, &images, ds.train[0], &subset, Stage::Tracking, &cfg).unwrap();
    train_stage(&mut params, &ds, &images, Stage::Tracking, 1, cfg.lr1, &cfg, |_| {}).unwrap();
    let after = sample_gradients(&params, &ds, &images, ds.train[0], &subset, Stage::Tracking, &cfg).unwrap();
    assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
}

#[test]
fn the_joint_loss_reaches_the_networks_through_triangulation() {
    let ds = small_dataset();
    let mut cfg = small_train((0, 0));
    let images = TrainingImages::new(&ds, &cfg.preprocess).unwrap();
    let params = init_params(cfg.network, 2, cfg.seed);
    let subset: Vec<usize> = (0..6).collect();
    let case = ds.train[0];
    cfg.w = 0.0;
    let bce_only = sample_gradients(&params, &ds, &images, case, &subset, Stage::Joint, &cfg).unwrap();
    cfg.w = 1.0;
    let joint = sample_gradients(&params, &ds, &images, case, &subset, Stage::Joint, &cfg).unwrap();
    assert!(joint.tri > 0.0);
    assert!((joint.loss - bce_only.loss - joint.tri / 2.0).abs() < 1e-9 * joint.loss.abs().max(1.0));
    // The 3D term changes the gradient of both views' networks.
    for v in 0..2 {
        let diff: f64 = joint.grads[v]
            .iter()
            .zip(&bce_only.grads[v])
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .sum();
        assert!(diff > 0.0, "view {v}");
    }
}

#[test]
fn ablation_mpd_is_the_flat_mean_distance() {
    let tracked = vec![
        vec![vec![Vec2::new(0.0, 0.0), Vec2::new(3.0, 4.0)], vec![Vec2::new(1.0, 1.0)]],
        vec![vec![], vec![Vec2::new(2.0, 2.0)]],
    ];
    let gt = vec![
        vec![vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0)], vec![Vec2::new(1.0, 2.0)]],
        vec![vec![], vec![Vec2::new(2.0, 4.0)]],
    ];
    // Distances 0, 5, 1, 2 px at 0.5 mm/px.
    assert!((ablation_mpd(&tracked, &gt, 0.5).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn bad_configurations_name_the_field() {
    let field = |e: Error| match e {
        Error::Validation { field, .. } => field,
        other => panic!("unexpected {other}"),
    };
    let mut c = small_config();
    c.n_test_volumes = 4;
    assert_eq!(field(make_dataset(&c).unwrap_err()), "dataset.n_test_volumes");
    let mut c = small_config();
    c.landmarks_per_volume = 2;
    assert_eq!(field(make_dataset(&c).unwrap_err()), "dataset.landmarks_per_volume");

    let ds = small_dataset();
    let mut t = small_train((1, 0));
    t.batch_size = 0;
    assert_eq!(field(train(&ds, &t).err().unwrap()), "train.batch_size");

    let mut r = RunConfig::default();
    r.dataset.noise_sigma = -1.0;
    assert_eq!(field(r.validate().unwrap_err()), "dataset.noise_sigma");
}
