use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use patchmap::clustering::ClusterModel;
use patchmap::dino::{extract_features, train_with};
use patchmap::fsutil::write_atomic;
use patchmap::overlay::encode_png;
use patchmap::synth::{gaussian_blobs, gen_image, Rect};
use patchmap::*;

use crate::args::*;
use crate::project::{self, Project, CHECKPOINT_FILE, FEATURES_FILE, MAPS_DIR, MODEL_FILE, OVERLAYS_DIR, SWEEP_FILE};

pub fn tile(dir: &Path, a: &TileArgs) -> Result<()> {
    let mut p = Project::open(dir)?;
    let spec = TileSpec::new(
        a.patch.unwrap_or(p.manifest.tile.patch_size),
        a.stride.unwrap_or(p.manifest.tile.stride),
        a.pad.unwrap_or(p.manifest.tile.pad),
    )?;
    let spec_changed = spec != p.manifest.tile;
    p.manifest.tile = spec;

    let mut targets = Vec::new();
    if let Some(input) = &a.input {
        let img = GrayImage::load(input).with_context(|| format!("reading {}", input.display()))?;
        let id = match &a.id {
            Some(id) => id.clone(),
            None => project::file_stem_id(input)?,
        };
        p.manifest.upsert_image(ImageEntry {
            id: id.clone(),
            path: p.record_path(input)?,
            width: img.width(),
            height: img.height(),
            grid: None,
            first_patch: 0,
            cluster_map: None,
        });
        targets.push(id);
    } else if let Some(id) = &a.id {
        p.image_entry(id)?;
        targets.push(id.clone());
    }
    if spec_changed || targets.is_empty() {
        targets = p.manifest.images.iter().map(|i| i.id.clone()).collect();
    }
    ensure!(!targets.is_empty(), "nothing to tile; pass --in <image>");

    for id in &targets {
        let entry = p.image_entry(id)?;
        let grid = spec.grid(entry.width, entry.height).with_context(|| format!("tiling image {id:?}"))?;
        let idx = p.manifest.images.iter().position(|i| &i.id == id).expect("entry exists");
        p.manifest.images[idx].grid = Some(grid);
        println!("{id}: {}x{} grid, {} patches", grid.rows, grid.cols, grid.len());
    }
    p.manifest.reindex_patches();
    p.invalidate_features();
    p.save()?;
    println!("project: {} images, {} patches", p.manifest.images.len(), p.manifest.total_patches());
    Ok(())
}

fn vit_config(a: &TrainArgs) -> ViTConfig {
    let base = match a.preset {
        Preset::Toy => ViTConfig::toy(),
        Preset::Full => ViTConfig::full(),
    };
    ViTConfig {
        input_size: a.input_size.unwrap_or(base.input_size),
        token_patch: a.token_patch.unwrap_or(base.token_patch),
        embed_dim: a.embed_dim.unwrap_or(base.embed_dim),
        depth: a.depth.unwrap_or(base.depth),
        heads: a.heads.unwrap_or(base.heads),
        mlp_ratio: a.mlp_ratio.unwrap_or(base.mlp_ratio),
        proto_dim: a.proto_dim.unwrap_or(base.proto_dim),
    }
}

pub fn train(dir: &Path, a: &TrainArgs) -> Result<()> {
    let mut p = Project::open_existing(dir)?;
    let vit = vit_config(a);
    vit.validate()?;
    let d = DinoConfig::default();
    let dino = DinoConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        ema_momentum: a.ema.unwrap_or(d.ema_momentum),
        student_temp: a.student_temp.unwrap_or(d.student_temp),
        teacher_temp: a.teacher_temp.unwrap_or(d.teacher_temp),
        local_crops: a.local_crops.unwrap_or(d.local_crops),
        seed: a.seed,
        ..d
    };
    dino.validate()?;
    let patches = p.all_patches()?;
    eprintln!(
        "training on {} patches: {} parameters, {} epochs",
        patches.len(),
        vit.param_count(),
        dino.epochs
    );
    let per_epoch = patches.len().div_ceil(dino.batch_size);
    let mut epoch_loss = 0.0;
    let outcome = train_with::<f32>(&patches, &vit, &dino, |r| {
        epoch_loss += r.loss;
        if (r.step + 1) % per_epoch == 0 {
            eprintln!("epoch {:>4}  loss {:.5}  lr {:.5}", r.epoch + 1, epoch_loss / per_epoch as f64, r.learning_rate);
            epoch_loss = 0.0;
        }
    })?;
    let ckpt = Checkpoint {
        vit,
        dino,
        state: outcome.state,
    };
    let out = a.out.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    ckpt.save(&out)?;
    p.manifest.checkpoint = Some(p.record_path(&out)?);
    p.invalidate_features();
    p.save()?;
    println!("checkpoint: {}", out.display());
    Ok(())
}

pub fn extract(dir: &Path, a: &ExtractArgs) -> Result<()> {
    let mut p = Project::open_existing(dir)?;
    let Some(ck_path) = &p.manifest.checkpoint else {
        bail!("no checkpoint in the manifest; run `patchmap train`");
    };
    let ck = Checkpoint::load(p.path(ck_path))?;
    let source = a.source.map(FeatureSource::from).unwrap_or(ck.dino.feature_source);
    let mut parts = Vec::with_capacity(p.manifest.images.len());
    for entry in &p.manifest.images {
        let patches = p.patches(entry)?;
        parts.push(extract_features(&ck.state, &ck.vit, &patches, source)?);
        eprintln!("{}: {} patches embedded", entry.id, patches.len());
    }
    ensure!(!parts.is_empty(), "the project has no images");
    let x = FeatureMatrix::concat(&parts)?;
    let out = a.out.clone().unwrap_or_else(|| dir.join(FEATURES_FILE));
    save_features(&x, &out)?;
    p.manifest.features = Some(p.record_path(&out)?);
    p.invalidate_clusters();
    p.save()?;
    println!("features: {} x {} -> {}", x.n(), x.d(), out.display());
    Ok(())
}

fn project_features(p: &Project, override_path: Option<&Path>) -> Result<FeatureMatrix> {
    let path = match (override_path, &p.manifest.features) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(f)) => p.path(f),
        (None, None) => bail!("no features in the manifest; run `patchmap extract`"),
    };
    load_features(&path).with_context(|| format!("loading features {}", path.display()))
}

fn run_sweep(x: &FeatureMatrix, kmin: usize, kmax: usize, restarts: usize, seed: u64) -> Result<KSweepResult> {
    ensure!(2 <= kmin && kmin <= kmax, "need 2 <= kmin <= kmax (got {kmin}..{kmax})");
    ensure!(kmax < x.n(), "kmax {kmax} needs more than {} points", x.n());
    let mut cfg = SweepConfig::new(kmin, kmax, seed);
    cfg.restarts = restarts;
    Ok(sweep_k(x, &cfg)?)
}

pub fn cluster(dir: &Path, a: &ClusterArgs) -> Result<()> {
    let mut p = Project::open_existing(dir)?;
    let x = project_features(&p, None)?;
    let total = p.manifest.total_patches();
    ensure!(
        total == 0 || total == x.n(),
        "feature file has {} rows but the manifest has {total} patches; re-run `patchmap extract`",
        x.n()
    );
    let k = match a.k {
        Some(k) => k,
        None => {
            let sweep = run_sweep(&x, a.kmin, a.kmax.min(x.n() - 1), a.restarts, a.seed)?;
            let k = pick_k(&sweep, a.epsilon, PickRule::NearMaxSmallest).context("empty sweep")?;
            eprintln!("picked k = {k} from silhouette sweep {}..{}", a.kmin, a.kmax);
            k
        }
    };
    let (model, assignment) = kmeans_fit(&x, &KMeansConfig::new(k, a.seed).restarts(a.restarts))?;
    let model_path = dir.join(MODEL_FILE);
    model.save(&model_path)?;
    p.manifest.model = Some(p.record_path(&model_path)?);

    std::fs::create_dir_all(dir.join(MAPS_DIR))?;
    for i in 0..p.manifest.images.len() {
        let entry = &p.manifest.images[i];
        let Some(grid) = entry.grid else { continue };
        let labels = assignment.labels[entry.first_patch..entry.first_patch + grid.len()].to_vec();
        let rel = Path::new(MAPS_DIR).join(format!("{}.map", entry.id));
        ClusterMap::new(grid, labels)?.save(dir.join(&rel))?;
        p.manifest.images[i].cluster_map = Some(rel);
    }
    p.save()?;
    let counts = assignment.counts(k);
    println!("k = {k}, inertia {:.6e}", model.inertia);
    for (c, n) in counts.iter().enumerate() {
        println!("cluster {c}: {n} patches");
    }
    Ok(())
}

pub fn sweep(dir: &Path, a: &SweepArgs) -> Result<()> {
    let p = Project::open(dir)?;
    let x = project_features(&p, a.features.as_deref())?;
    let result = run_sweep(&x, a.kmin, a.kmax, a.restarts, a.seed)?;
    let csv = result.to_csv();
    let out = a.out.clone().unwrap_or_else(|| dir.join(SWEEP_FILE));
    write_atomic(&out, csv.as_bytes())?;
    print!("{csv}");
    if let Some(k) = pick_k(&result, patchmap::clustering::DEFAULT_PICK_EPSILON, PickRule::NearMaxSmallest) {
        eprintln!("best silhouette at k = {}, picked k = {k}", result.best().map_or(0, |e| e.k));
    }
    Ok(())
}

pub fn overlay(dir: &Path, a: &OverlayArgs) -> Result<()> {
    let p = Project::open_existing(dir)?;
    let ann = AnnotationSet::load_or_default(p.path(&p.manifest.annotations))?;
    let mode = a.resolve.unwrap_or(p.manifest.resolve);
    let entries: Vec<&ImageEntry> = match &a.image {
        Some(id) => vec![p.image_entry(id)?],
        None => p.manifest.images.iter().collect(),
    };
    ensure!(a.out.is_none() || a.image.is_some(), "--out needs --image");
    ensure!(!entries.is_empty(), "the project has no images");
    let opts = RenderOptions {
        alpha: a.alpha,
        draw_grid: a.grid,
        draw_numbers: a.numbers,
    };
    std::fs::create_dir_all(dir.join(OVERLAYS_DIR))?;
    for entry in entries {
        let map = p.cluster_map(entry)?;
        let img = p.load_image(entry)?;
        let pl = pixel_labels(&map, mode);
        let rgb = render_overlay(&img, &pl, &ann, &opts, Some(&map.grid))?;
        let out = a.out.clone().unwrap_or_else(|| dir.join(OVERLAYS_DIR).join(format!("{}.png", entry.id)));
        write_atomic(&out, &encode_png(&rgb)?)?;
        let hist_path = out.with_extension("histogram.csv");
        write_atomic(&hist_path, severity_histogram(&pl, &ann).to_csv().as_bytes())?;
        println!("{}: {}", entry.id, out.display());
    }
    Ok(())
}

fn regions(width: usize, height: usize, textures: &[TextureSpec], seed: u64) -> Result<Vec<(Rect, TextureSpec)>> {
    let defaults;
    let specs = if textures.is_empty() {
        defaults = TextureSpec::default_classes(seed);
        &defaults[..]
    } else {
        textures
    };
    match specs.len() {
        1 => Ok(vec![(Rect::new(0, 0, width, height), specs[0])]),
        4 => {
            let (hw, hh) = (width / 2, height / 2);
            ensure!(hw > 0 && hh > 0, "image too small for four quadrants");
            Ok(vec![
                (Rect::new(0, 0, hw, hh), specs[0]),
                (Rect::new(hw, 0, width - hw, hh), specs[1]),
                (Rect::new(0, hh, hw, height - hh), specs[2]),
                (Rect::new(hw, hh, width - hw, height - hh), specs[3]),
            ])
        }
        n => bail!("give one texture or four (got {n})"),
    }
}

pub fn synth(dir: &Path, a: &SynthArgs) -> Result<()> {
    match &a.what {
        SynthKind::Image {
            out,
            width,
            height,
            textures,
            labels,
            register,
            seed,
        } => {
            let textures: Vec<TextureSpec> = textures
                .iter()
                .enumerate()
                .map(|(i, &kind)| TextureSpec::new(kind, seed.wrapping_add(i as u64)))
                .collect();
            let (img, label_map) = gen_image(*width, *height, &regions(*width, *height, &textures, *seed)?)?;
            write_atomic(out, &img.encode_png()?)?;
            if let Some(l) = labels {
                write_atomic(l, &label_map.encode_png()?)?;
            }
            if let Some(id) = register {
                let mut p = Project::open(dir)?;
                p.manifest.upsert_image(ImageEntry {
                    id: id.clone(),
                    path: p.record_path(out)?,
                    width: *width,
                    height: *height,
                    grid: None,
                    first_patch: 0,
                    cluster_map: None,
                });
                p.manifest.reindex_patches();
                p.invalidate_features();
                p.save()?;
            }
            println!("{}x{} image -> {}", width, height, out.display());
        }
        SynthKind::Blobs {
            k,
            per_cluster,
            dim,
            separation,
            sigma,
            out,
            truth,
            seed,
        } => {
            let (x, labels) = gaussian_blobs(*k, *per_cluster, *dim, *separation, *sigma, *seed)?;
            let mut p = Project::open(dir)?;
            let out: PathBuf = out.clone().unwrap_or_else(|| dir.join(FEATURES_FILE));
            save_features(&x, &out)?;
            if let Some(t) = truth {
                let mut text = String::new();
                labels.iter().for_each(|l| writeln!(text, "{l}").expect("string write"));
                write_atomic(t, text.as_bytes())?;
            }
            p.invalidate_clusters();
            p.manifest.features = Some(p.record_path(&out)?);
            p.save()?;
            println!("{} x {} blob features -> {}", x.n(), x.d(), out.display());
        }
    }
    Ok(())
}

/// Loads a cluster model written by `cluster`, for the service.
pub fn load_model(p: &Project) -> Result<Option<ClusterModel>> {
    match &p.manifest.model {
        Some(m) => Ok(Some(ClusterModel::load(p.path(m))?)),
        None => Ok(None),
    }
}
