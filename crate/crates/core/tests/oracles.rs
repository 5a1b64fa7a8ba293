//! Independent recomputations checked against the library.

use vti::cli::{Pipeline, RunConfig};
use vti::model::{HookSet, ModelConfig, ToyLvlm};
use vti::numerics::{feature_stats, Tensor};
use vti::perturb::{make_mask_set, Perturbation, PerturbationSpec};
use vti::scenes::{render_scene, Scene, SceneObject};
use vti::steering::{visual_delta, MaskOptions};

#[test]
fn red_square_matches_reference_raster() {
    let fixture = include_str!("fixtures/red_square_cell0.txt");
    let scene = Scene::new(1, vec![SceneObject { shape: 0, color: 0, cell: 0 }]).unwrap();
    let image = render_scene(&scene);
    let rows: Vec<&str> = fixture.lines().collect();
    assert_eq!((rows.len(), image.height(), image.width()), (32, 32, 32));
    for (y, row) in rows.iter().enumerate() {
        for (x, ch) in row.chars().enumerate() {
            let want = match ch {
                'R' => [0.9, 0.1, 0.1],
                '.' => [0.0, 0.0, 0.0],
                other => panic!("unexpected fixture character {other:?}"),
            };
            assert_eq!(image.pixel(y, x), want, "pixel ({y}, {x})");
        }
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + c
}

#[test]
fn visual_delta_matches_materialized_average() {
    let model = ToyLvlm::init(ModelConfig::default(), 17).unwrap();
    let p = Pipeline::new(RunConfig::default()).unwrap();
    let image = p.data.pool[0].image();
    let opts = MaskOptions::new(&model.config(), 2024);
    assert_eq!((opts.masks, opts.mask_ratio), (50, 0.99));
    let got = visual_delta(&model, &image, &opts).unwrap();

    let none = HookSet::new();
    let masks = make_mask_set(32, 32, 0.99, 4, 50, opts.seed).unwrap();
    let traces: Vec<Tensor> = masks
        .iter()
        .map(|m| model.encode_image(&m.apply(&image).unwrap(), &none).unwrap().1.states)
        .collect();
    let (_, clean) = model.encode_image(&image, &none).unwrap();
    let mut worst = 0.0f64;
    for (i, (&g, &c)) in got.data().iter().zip(clean.states.data()).enumerate() {
        let mean = compensated_sum(traces.iter().map(|t| f64::from(t.data()[i]))) / 50.0;
        worst = worst.max((f64::from(g) - (mean - f64::from(c))).abs());
    }
    assert!(worst <= 1e-5, "max deviation {worst:e}");
}

#[test]
fn feature_stats_match_direct_formulas() {
    let rows: Vec<Vec<f32>> = (0..7)
        .map(|i| (0..5).map(|j| ((i * 31 + j * 7) % 13) as f32 * 0.25 - 1.0).collect())
        .collect();
    let (mean, var) = feature_stats(&Tensor::from_rows(&rows).unwrap()).unwrap();
    for j in 0..5 {
        let col: Vec<f64> = rows.iter().map(|r| f64::from(r[j])).collect();
        let mu = col.iter().sum::<f64>() / 7.0;
        let v = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 6.0;
        assert!((f64::from(mean.data()[j]) - mu).abs() < 1e-6);
        assert!((f64::from(var.data()[j]) - v).abs() < 1e-6);
    }
}

#[test]
fn heavily_averaged_features_lose_probe_accuracy() {
    let mut config = RunConfig::default();
    config.eval.probe_scenes = 120;
    let p = Pipeline::new(config).unwrap();
    let model = ToyLvlm::init(ModelConfig::default(), 4).unwrap();
    let heavy = PerturbationSpec::new(
        Perturbation::PatchMask {
            mask_ratio: 0.99,
            patch_size: 4,
        },
        6,
    );
    let clean = p.embedding_probe(&model).unwrap();
    let averaged = p.averaged_probe(&model, &heavy, 20).unwrap();
    assert!(averaged < clean, "averaged {averaged} vs clean {clean}");
}
