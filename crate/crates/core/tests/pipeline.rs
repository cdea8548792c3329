//! Cross-module checks on small configurations.

use u3s::config::Config;
use u3s::geometry::SpiralSchedule;
use u3s::harness::{run_comparison, Method, MethodSet, Scene};
use u3s::io::{load_image, load_sinogram, save_image, save_sinogram};
use u3s::metrics::dice;
use u3s::unmix::threshold_mask;

fn tiny() -> Config {
    let mut cfg = Config::default();
    cfg.image.side = 24;
    cfg.geometry.num_elements_sparse = 5;
    cfg.geometry.num_elements_dense = 16;
    cfg.acquisition.num_slices = 7;
    cfg.network.width = 16;
    cfg.network.depth = 3;
    cfg.training.embed_iterations = 5;
    cfg.training.iterations = 3;
    cfg
}

#[test]
fn schedule_rotates_by_the_interlacing_step() {
    let mut cfg = Config::default();
    cfg.geometry.num_elements_sparse = 21;
    let table = cfg.schedule().unwrap().to_table();
    let schedule = SpiralSchedule::from_table(&table).unwrap();
    let step = schedule.records[1].theta_deg - schedule.records[0].theta_deg;
    assert!((step - 2.571).abs() < 5e-4, "{step}");
    assert!(schedule.records.windows(2).all(|w| w[1].z_mm > w[0].z_mm));
}

#[test]
fn unmixing_the_true_stack_recovers_the_phantom() {
    let scene = Scene::new(&tiny()).unwrap();
    let truth = scene.truth().unwrap();
    let maps = scene.phantom.concentrations(scene.center_z(), &scene.grid).unwrap();
    let out = scene.unmix(&truth).unwrap();
    for (x, y) in out
        .hbo2
        .data
        .iter()
        .zip(&maps.hbo2.data)
        .chain(out.hb.data.iter().zip(&maps.hb.data))
    {
        assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "{x} vs {y}");
    }
    let frac = scene.config.evaluation.mask_fraction;
    assert_eq!(
        dice(&threshold_mask(&out.hb, frac), &threshold_mask(&maps.hb, frac)).unwrap(),
        1.0
    );
}

#[test]
fn prior_window_interlaces_all_sparse_angles() {
    let scene = Scene::new(&tiny()).unwrap();
    let sinos = scene.acquire().unwrap();
    assert_eq!(sinos.len(), 7);
    let fused = scene.fuse(&sinos).unwrap();
    assert_eq!(fused.num_angles(), 5 * 5);
    let prior = scene.prior(&sinos).unwrap();
    assert_eq!(prior.min_max(), (0.0, 1.0));
}

#[test]
fn artefacts_survive_a_disk_round_trip() {
    let scene = Scene::new(&tiny()).unwrap();
    let sinos = scene.acquire().unwrap();
    let dir = std::env::temp_dir().join(format!("u3s-pipeline-{}", std::process::id()));
    save_sinogram(&dir.join("s.u3ssino"), &sinos[3]).unwrap();
    assert_eq!(load_sinogram(&dir.join("s.u3ssino")).unwrap(), sinos[3]);
    let prior = scene.prior(&sinos).unwrap();
    let meta = vec![("slice".to_string(), 4.0)];
    save_image(&dir.join("p.u3simg"), &prior, &meta).unwrap();
    let (img, back) = load_image(&dir.join("p.u3simg")).unwrap();
    assert_eq!(img, prior);
    assert_eq!(back, meta);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sparse_baseline_is_plain_back_projection() {
    let cfg = tiny();
    let cmp = run_comparison(
        &cfg,
        MethodSet {
            sparse: true,
            spiral: false,
            no_prior: false,
        },
    )
    .unwrap();
    let scene = Scene::new(&cfg).unwrap();
    let expected = scene.sparse_baseline().unwrap();
    assert_eq!(cmp.images(Method::Sparse).unwrap(), expected.as_slice());
    assert!(cmp.losses.is_empty());
}

#[test]
fn spiral_runs_are_reproducible() {
    let cfg = tiny();
    let a = run_comparison(&cfg, MethodSet::SPIRAL_ONLY).unwrap();
    let b = run_comparison(&cfg, MethodSet::SPIRAL_ONLY).unwrap();
    assert_eq!(a.images(Method::Spiral), b.images(Method::Spiral));
    assert_eq!(a.losses, b.losses);
    let mut other = cfg.clone();
    other.seed = 1;
    let c = run_comparison(&other, MethodSet::SPIRAL_ONLY).unwrap();
    assert_ne!(a.images(Method::Spiral), c.images(Method::Spiral));
}
