mod common;

use patchmap::clustering::DEFAULT_PICK_EPSILON;
use patchmap::dino::{
    collapse_stats, ema_update, extract_features, preprocess, train, train_step, Optimizer,
};
use patchmap::synth::{gaussian_blobs, gen_texture};
use patchmap::*;

#[test]
fn loss_decreases_over_training() {
    let (_, patches, _) = common::texture_corpus(4, 1);
    let out = train::<f32>(&patches, &common::toy_vit(), &common::toy_dino(4, 30)).unwrap();
    let window = out.losses.len() / 10;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first = mean(&out.losses[..window]);
    let last = mean(&out.losses[out.losses.len() - window..]);
    assert!(last < first, "loss went from {first} to {last}");
    assert!(out.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn zero_epochs_returns_initial_state() {
    let (_, patches, _) = common::texture_corpus(2, 1);
    let vit = common::toy_vit();
    let out = train::<f32>(&patches, &vit, &common::toy_dino(9, 0)).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(out.state, DinoState::new(&vit, 9).unwrap());
}

#[test]
fn training_is_deterministic() {
    let (_, patches, _) = common::texture_corpus(3, 1);
    let patches = &patches[..40];
    let vit = common::toy_vit();
    let a = train::<f32>(patches, &vit, &common::toy_dino(5, 2)).unwrap();
    let b = train::<f32>(patches, &vit, &common::toy_dino(5, 2)).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.state, b.state);
    let c = train::<f32>(patches, &vit, &common::toy_dino(6, 2)).unwrap();
    assert_ne!(a.state, c.state);
}

#[test]
fn default_settings_do_not_collapse() {
    let (_, patches, _) = common::texture_corpus(4, 1);
    let vit = common::toy_vit();
    let cfg = common::toy_dino(4, 10);
    let out = train::<f32>(&patches, &vit, &cfg).unwrap();
    let bases: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| preprocess(&p.to_image(), vit.input_size).unwrap())
        .collect();
    let stats = collapse_stats(&out.state, &vit, &cfg, &bases).unwrap();
    assert!(stats.distinct_argmax > 1, "{stats:?}");
    assert!(stats.argmax_std > 0.0, "{stats:?}");
}

#[test]
fn teacher_moves_only_by_ema() {
    let vit = common::gradcheck_vit();
    let cfg = DinoConfig {
        batch_size: 2,
        ..DinoConfig::default()
    };
    let img = gen_texture(8, 8, &TextureSpec::new(TextureKind::Checker { cell: 2 }, 1)).unwrap();
    let base = preprocess(&img, vit.input_size).unwrap();
    let mut state = DinoState::<f64>::new(&vit, 1).unwrap();
    state.teacher = ViTParams::init(&vit, 2).unwrap();
    let before = state.teacher.clone();
    let mut opt = Optimizer::new(&state.student);
    train_step(&mut state, &mut opt, &vit, &cfg, &[&base, &base], 0.1, 0.9, 0).unwrap();
    assert_eq!(state.teacher, ema_update(&before, &state.student, 0.9).unwrap());

    // with λ = 1 the teacher is frozen no matter what the student does
    let frozen = state.teacher.clone();
    train_step(&mut state, &mut opt, &vit, &cfg, &[&base, &base], 0.1, 1.0, 1).unwrap();
    assert_eq!(state.teacher, frozen);
}

#[test]
fn identical_patches_give_identical_rows() {
    let vit = common::toy_vit();
    let (_, patches, _) = common::texture_corpus(1, 1);
    let twice = vec![patches[3].clone(), patches[7].clone(), patches[3].clone()];
    let state = DinoState::<f32>::new(&vit, 3).unwrap();
    let x = extract_features(&state, &vit, &twice, FeatureSource::Teacher).unwrap();
    assert_eq!(x.n(), 3);
    assert_eq!(x.d(), vit.embed_dim);
    assert_eq!(x.row(0), x.row(2));
    assert_ne!(x.row(0), x.row(1));
}

#[test]
fn full_width_embeddings_are_768_wide() {
    let full = ViTConfig::full();
    assert_eq!(full.embed_dim, 768);
    // one block and a small head keep the forward pass cheap; width is set by embed_dim
    let vit = ViTConfig {
        depth: 1,
        proto_dim: 16,
        ..full
    };
    let params = ViTParams::<f32>::init(&vit, 0).unwrap();
    let input = vec![0.5f32; vit.input_size * vit.input_size];
    let (emb, logits) = vit_forward(&params, &vit, &input).unwrap();
    assert_eq!(emb.len(), 768);
    assert_eq!(logits.len(), 16);
    assert!(emb.iter().all(|v| v.is_finite()));
}

#[test]
fn sweep_finds_three_blobs() {
    let (x, truth) = gaussian_blobs(3, 60, 5, 12.0, 1.0, 8).unwrap();
    let sweep = sweep_k(&x, &SweepConfig::new(2, 7, 0)).unwrap();
    assert_eq!(sweep.best().unwrap().k, 3);
    assert_eq!(pick_k(&sweep, DEFAULT_PICK_EPSILON, PickRule::NearMaxSmallest), Some(3));
    let (_, a) = kmeans_fit(&x, &KMeansConfig::new(3, 0)).unwrap();
    assert_eq!(adjusted_rand_index(&a.labels, &truth).unwrap(), 1.0);
}

#[test]
fn assign_matches_brute_force() {
    let (x, _) = gaussian_blobs(4, 30, 3, 4.0, 2.0, 2).unwrap();
    let (model, fitted) = kmeans_fit(&x, &KMeansConfig::new(4, 1)).unwrap();
    let a = assign(&x, &model.centroids).unwrap();
    assert_eq!(a, fitted);
    for (row, &label) in x.to_f64_rows().iter().zip(&a.labels) {
        let d: Vec<f64> = model
            .centroids
            .iter()
            .map(|c| c.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(d[label], best);
        assert_eq!(d.iter().position(|&v| v == best), Some(label));
    }
}

#[test]
fn severity_histogram_matches_recount() {
    let img = GrayImage::filled(300, 200, 100).unwrap();
    let spec = TileSpec::new(64, 32, 16).unwrap();
    let grid = spec.grid(300, 200).unwrap();
    let labels: Vec<usize> = (0..grid.len()).map(|i| (i * 7 + i / 3) % 5).collect();
    let map = ClusterMap::new(grid, labels).unwrap();
    let pl = pixel_labels(&map, ResolveMode::Majority);
    let mut ann = AnnotationSet::default();
    ann.set(0, Annotation { name: "ok".into(), color: Color::Code(Severity::Green) });
    ann.set(1, Annotation { name: "bad".into(), color: Color::Code(Severity::Red) });
    ann.set(2, Annotation { name: "odd".into(), color: "#102030".parse().unwrap() });
    let hist = severity_histogram(&pl, &ann);

    let mut counts = std::collections::HashMap::new();
    for y in 0..pl.height {
        for x in 0..pl.width {
            let key = match pl.get(x, y) {
                0 => "green",
                1 => "red",
                2 => "#102030",
                _ => "neutral",
            };
            *counts.entry(key).or_insert(0usize) += 1;
        }
    }
    let total = (pl.width * pl.height) as f64;
    for (key, n) in counts {
        let entry = hist.entries.iter().find(|e| e.0 == key).unwrap();
        assert_eq!(entry.1, n, "{key}");
        assert!((hist.fraction(key) - n as f64 / total).abs() < 1e-12);
    }
    assert_eq!(hist.entries.iter().map(|e| e.1).sum::<usize>(), 300 * 200);

    let overlay = render_overlay(&img, &pl, &ann, &RenderOptions::default(), None).unwrap();
    assert_eq!(overlay.dimensions(), (300, 200));
}
