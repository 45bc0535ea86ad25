//! Annotation service: cluster listing, exemplar thumbnails, annotation edits and
//! live overlays over one project directory.
//!
//! Bodies are UTF-8 key=value records (see `patchmap::kv`), rasters are PNG.
//! Annotation writes go through a single writer lock and are persisted atomically
//! before the in-memory state changes; every accepted change bumps `revision`.
//! A PUT may carry `If-Match: <revision>`, and a stale revision is refused with 409.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::Router;
use base64::Engine as _;
use patchmap::kv::{self, Record};
use patchmap::overlay::{encode_png, NEUTRAL_RGB};
use patchmap::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::sync::RwLock;

use crate::commands::load_model;
use crate::project::Project;

const KV_TYPE: &str = "text/plain; charset=utf-8";
pub const DEFAULT_EXEMPLARS: usize = 8;

struct ServedImage {
    id: String,
    width: usize,
    height: usize,
    image: GrayImage,
    padded: GrayImage,
    grid: PatchGrid,
    first_patch: usize,
    pixels: PixelLabelMap,
}

struct Annotations {
    set: AnnotationSet,
    revision: u64,
}

pub struct AppState {
    annotations_path: PathBuf,
    images: Vec<ServedImage>,
    /// Cluster label of every patch, in manifest row order.
    labels: Vec<usize>,
    counts: Vec<usize>,
    annotations: RwLock<Annotations>,
    overlays: Mutex<HashMap<usize, (u64, Arc<Vec<u8>>)>>,
}

impl AppState {
    /// Loads a project that has been clustered.
    pub fn load(dir: &FsPath) -> anyhow::Result<Self> {
        let p = Project::open_existing(dir)?;
        let mode = p.manifest.resolve;
        let mut images = Vec::with_capacity(p.manifest.images.len());
        let mut labels = vec![0; p.manifest.total_patches()];
        for entry in &p.manifest.images {
            let map = p.cluster_map(entry)?;
            if Some(map.grid) != entry.grid {
                bail!("cluster map of {:?} does not match its grid; re-run `patchmap cluster`", entry.id);
            }
            labels[entry.first_patch..entry.first_patch + map.labels.len()].copy_from_slice(&map.labels);
            let image = p.load_image(entry)?;
            images.push(ServedImage {
                id: entry.id.clone(),
                width: entry.width,
                height: entry.height,
                padded: mirror_pad(&image, map.grid.spec.pad)?,
                image,
                grid: map.grid,
                first_patch: entry.first_patch,
                pixels: pixel_labels(&map, mode),
            });
        }
        if images.is_empty() {
            bail!("the project has no images to serve");
        }
        let k = match load_model(&p)? {
            Some(m) => m.k,
            None => labels.iter().max().map_or(0, |m| m + 1),
        };
        let mut counts = vec![0; k];
        for &l in &labels {
            if l >= k {
                bail!("patch label {l} outside the model's {k} clusters");
            }
            counts[l] += 1;
        }
        let annotations_path = p.path(&p.manifest.annotations);
        let set = AnnotationSet::load_or_default(&annotations_path).context("loading annotations")?;
        Ok(Self {
            annotations_path,
            images,
            labels,
            counts,
            annotations: RwLock::new(Annotations { set, revision: 0 }),
            overlays: Mutex::new(HashMap::new()),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/palette", get(palette))
        .route("/clusters", get(clusters))
        .route("/clusters/{id}/exemplars", get(exemplars))
        .route("/clusters/{id}/annotation", put(put_annotation))
        .route("/images", get(images))
        .route("/images/{id}/overlay.png", get(overlay))
        .with_state(state)
}

/// Binds, prints the bound address on stdout and serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    let bound = listener.local_addr()?;
    println!("listening on http://{bound}");
    use std::io::Write as _;
    std::io::stdout().flush()?;
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = kv::encode_one(&Record::new().with("error", self.1));
        (self.0, [(header::CONTENT_TYPE, KV_TYPE)], body).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn kv_response(records: &[Record]) -> Response {
    ([(header::CONTENT_TYPE, KV_TYPE)], kv::encode(records)).into_response()
}

fn cluster_id(state: &AppState, raw: &str) -> ApiResult<usize> {
    raw.parse::<usize>()
        .ok()
        .filter(|&id| id < state.counts.len())
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no cluster {raw:?}")))
}

fn cluster_record(state: &AppState, ann: &Annotations, id: usize) -> Record {
    let mut r = Record::new().with("id", id).with("patches", state.counts[id]);
    if let Some(a) = ann.set.get(id) {
        r.push("name", &a.name);
        r.push("color", a.color);
    }
    r
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    kv_response(&[Record::new()
        .with("status", "ok")
        .with("clusters", state.counts.len())
        .with("images", state.images.len())])
}

async fn palette() -> Response {
    let hex = |c: [u8; 3]| format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]);
    let mut records: Vec<Record> = Severity::ALL
        .iter()
        .map(|s| {
            Record::new()
                .with("color", s.name())
                .with("rgb", hex(s.rgb()))
                .with("meaning", s.meaning())
        })
        .collect();
    records.push(
        Record::new()
            .with("color", "neutral")
            .with("rgb", hex(NEUTRAL_RGB))
            .with("meaning", "not annotated"),
    );
    kv_response(&records)
}

async fn clusters(State(state): State<Arc<AppState>>) -> Response {
    let ann = state.annotations.read().await;
    let mut records = vec![Record::new()
        .with("revision", ann.revision)
        .with("clusters", state.counts.len())
        .with("patches", state.labels.len())];
    records.extend((0..state.counts.len()).map(|id| cluster_record(&state, &ann, id)));
    kv_response(&records)
}

#[derive(serde::Deserialize)]
struct ExemplarQuery {
    n: Option<usize>,
    seed: Option<u64>,
}

async fn exemplars(
    State(state): State<Arc<AppState>>,
    Path(raw): Path<String>,
    Query(q): Query<ExemplarQuery>,
) -> ApiResult<Response> {
    let id = cluster_id(&state, &raw)?;
    let seed = q.seed.unwrap_or(0);
    let members: Vec<usize> = (0..state.labels.len()).filter(|&i| state.labels[i] == id).collect();
    let n = q.n.unwrap_or(DEFAULT_EXEMPLARS).min(members.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, members.len(), n).into_vec();

    let state2 = state.clone();
    let records = tokio::task::spawn_blocking(move || -> Result<Vec<Record>, String> {
        let mut out = vec![Record::new()
            .with("cluster", id)
            .with("total", members.len())
            .with("returned", picks.len())
            .with("seed", seed)];
        for &pick in &picks {
            let row = members[pick];
            let img = state2
                .images
                .iter()
                .find(|i| (i.first_patch..i.first_patch + i.grid.len()).contains(&row))
                .ok_or("patch row outside every image")?;
            let (r, c) = img.grid.position(row - img.first_patch);
            let s = img.grid.spec;
            let patch = img
                .padded
                .crop(c * s.stride, r * s.stride, s.patch_size, s.patch_size)
                .map_err(|e| e.to_string())?;
            let png = patch.encode_png().map_err(|e| e.to_string())?;
            out.push(
                Record::new()
                    .with("patch", row)
                    .with("image", &img.id)
                    .with("row", r)
                    .with("col", c)
                    .with("png", base64::engine::general_purpose::STANDARD.encode(png)),
            );
        }
        Ok(out)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(kv_response(&records))
}

fn parse_annotation(body: &str) -> ApiResult<Annotation> {
    let bad = |m: String| ApiError(StatusCode::UNPROCESSABLE_ENTITY, m);
    let r = kv::decode_one(body).map_err(|e| bad(e.to_string()))?;
    if let Some((k, _)) = r.fields.iter().find(|(k, _)| k != "name" && k != "color") {
        return Err(bad(format!("unknown field {k:?}")));
    }
    let name = r.require("name").map_err(|e| bad(e.to_string()))?.trim();
    if name.is_empty() {
        return Err(bad("name must not be empty".into()));
    }
    let color: Color = r
        .require("color")
        .map_err(|e| bad(e.to_string()))?
        .parse()
        .map_err(|e: patchmap::Error| bad(e.to_string()))?;
    Ok(Annotation {
        name: name.to_string(),
        color,
    })
}

async fn put_annotation(
    State(state): State<Arc<AppState>>,
    Path(raw): Path<String>,
    headers: HeaderMap,
    body: String,
) -> ApiResult<Response> {
    let id = cluster_id(&state, &raw)?;
    let annotation = parse_annotation(&body)?;
    let expected = match headers.get(header::IF_MATCH) {
        Some(v) => Some(
            v.to_str()
                .ok()
                .map(|s| s.trim().trim_matches('"'))
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "If-Match must be a revision number".into()))?,
        ),
        None => None,
    };

    let mut ann = state.annotations.write().await;
    if let Some(rev) = expected {
        if rev != ann.revision {
            return Err(ApiError(
                StatusCode::CONFLICT,
                format!("revision {rev} is stale; current revision is {}", ann.revision),
            ));
        }
    }
    if ann.set.get(id) != Some(&annotation) {
        let mut next = ann.set.clone();
        next.set(id, annotation);
        next.save(&state.annotations_path)
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        ann.set = next;
        ann.revision += 1;
    }
    let mut record = cluster_record(&state, &ann, id);
    record.push("revision", ann.revision);
    let etag = ann.revision.to_string();
    drop(ann);
    let mut resp = kv_response(&[record]);
    resp.headers_mut().insert(header::ETAG, etag.parse().expect("numeric header"));
    Ok(resp)
}

async fn images(State(state): State<Arc<AppState>>) -> Response {
    let records: Vec<Record> = state
        .images
        .iter()
        .map(|i| {
            Record::new()
                .with("id", &i.id)
                .with("width", i.width)
                .with("height", i.height)
                .with("rows", i.grid.rows)
                .with("cols", i.grid.cols)
                .with("patches", i.grid.len())
                .with("first_patch", i.first_patch)
                .with("overlay", format!("/images/{}/overlay.png", i.id))
        })
        .collect();
    kv_response(&records)
}

async fn overlay(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let idx = state
        .images
        .iter()
        .position(|i| i.id == id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no image {id:?}")))?;
    let (revision, set) = {
        let ann = state.annotations.read().await;
        (ann.revision, ann.set.clone())
    };
    let cached = state.overlays.lock().expect("overlay cache").get(&idx).cloned();
    let png = match cached {
        Some((rev, png)) if rev == revision => png,
        _ => {
            let s = state.clone();
            let png = tokio::task::spawn_blocking(move || -> patchmap::Result<Vec<u8>> {
                let img = &s.images[idx];
                encode_png(&render_overlay(&img.image, &img.pixels, &set, &RenderOptions::default(), None)?)
            })
            .await
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            let png = Arc::new(png);
            let mut cache = state.overlays.lock().expect("overlay cache");
            // a slower render of an older revision must not replace a newer one
            if cache.get(&idx).is_none_or(|(r, _)| *r <= revision) {
                cache.insert(idx, (revision, png.clone()));
            }
            png
        }
    };
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::ETAG, revision.to_string()),
        ],
        png.as_ref().clone(),
    )
        .into_response())
}
