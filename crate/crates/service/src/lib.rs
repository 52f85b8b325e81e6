//! HTTP service over the curation loop. All state lives in one process; reads
//! see an immutable snapshot and learn jobs replace it atomically.

pub mod config;
pub mod error;
pub mod jobs;
pub mod snapshot;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use dleng::continual::train_head_with_progress;
use dleng::io::manifest::read_bundle;
use dleng::io::state::{load_state, save_state, StateManifest, STATE_FILE};
use dleng::pipeline::{balanced_seed_cells, build_state, object_cells, seed_miou, LoopConfig, LoopState};
use dleng::retrieval::{to_f64, Modality};
use dleng::synth::ScenarioBundle;
use dleng::{ClassOrigin, Samples};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::ServiceConfig;
pub use error::ServiceError;
use jobs::{Histogram, JobResult, JobState, JobTable, LearnJob};
use snapshot::Snapshot;

pub const SCHEMA_VERSION: u32 = 1;

const HISTOGRAM_BINS: usize = 20;

struct Inner {
    config: LoopConfig,
    bundle: ScenarioBundle,
    state_dir: PathBuf,
    snapshot: RwLock<Arc<Snapshot>>,
    jobs: Mutex<JobTable>,
    /// Serializes commits so generations stay consecutive.
    commit: Mutex<()>,
}

#[derive(Clone)]
pub struct App {
    inner: Arc<Inner>,
}

impl App {
    /// Loads the bundle from `data_dir` and the persisted state, building and
    /// persisting a fresh state on first start.
    pub fn open(config: &ServiceConfig) -> Result<App, ServiceError> {
        let bundle = read_bundle(&config.data_dir)?;
        App::with_bundle(bundle, config.loop_config.clone(), &config.state_dir)
    }

    pub fn with_bundle(bundle: ScenarioBundle, config: LoopConfig, state_dir: &Path) -> Result<App, ServiceError> {
        let (state, generation) = if state_dir.join(STATE_FILE).exists() {
            let (state, manifest) = load_state(state_dir)?;
            tracing::info!(generation = manifest.generation, "loaded persisted state");
            (state, manifest.generation)
        } else {
            tracing::info!("building state from the scenario bundle");
            let state = build_state(&bundle, &config)?;
            save_state(&state, 0, state_dir)?;
            (state, 0)
        };
        let snapshot = Snapshot::build(state, generation, &bundle, &config)?;
        Ok(App {
            inner: Arc::new(Inner {
                config,
                bundle,
                state_dir: state_dir.to_path_buf(),
                snapshot: RwLock::new(Arc::new(snapshot)),
                jobs: Mutex::new(JobTable::default()),
                commit: Mutex::new(()),
            }),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.inner.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/api/state", get(get_state))
            .route("/api/candidates", get(get_candidates))
            .route("/api/clusters", get(get_clusters))
            .route("/api/query", post(post_query))
            .route("/api/learn", post(post_learn))
            .route("/api/jobs/{id}", get(get_job))
            .route("/api/metrics", get(get_metrics))
            .with_state(self.clone())
    }
}

/// Binds `config.bind` and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let bind = config.bind;
    let app = tokio::task::spawn_blocking(move || App::open(&config))
        .await
        .map_err(|e| ServiceError::Config(e.to_string()))??;
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| ServiceError::Config(format!("bind {bind}: {e}")))?;
    tracing::info!(%bind, "listening");
    axum::serve(listener, app.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Config(e.to_string()))
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Config(e.to_string()))?
}

async fn get_state(State(app): State<App>) -> impl IntoResponse {
    let snap = app.snapshot();
    Json(snap.state_view(&app.inner.config, &app.inner.bundle))
}

#[derive(Serialize)]
struct CandidatesView<'a> {
    schema_version: u32,
    generation: u64,
    tau: f64,
    candidates: &'a [snapshot::Candidate],
}

async fn get_candidates(State(app): State<App>) -> impl IntoResponse {
    let snap = app.snapshot();
    Json(serde_json::to_value(CandidatesView {
        schema_version: SCHEMA_VERSION,
        generation: snap.generation,
        tau: app.inner.config.detect.tau,
        candidates: &snap.candidates,
    })
    .expect("candidates serialize"))
}

async fn get_clusters(State(app): State<App>) -> impl IntoResponse {
    Json(app.snapshot().clusters())
}

async fn get_metrics(State(app): State<App>) -> Result<impl IntoResponse, ServiceError> {
    let snap = app.snapshot();
    let metrics = blocking(move || Ok(snap.metrics(&app.inner.bundle, &app.inner.config)?)).await?;
    Ok(Json(metrics))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub modality: Modality,
    #[serde(default)]
    pub vector: Option<Vec<f64>>,
    /// Objects whose summed embeddings form the query.
    #[serde(default)]
    pub reference_ids: Option<Vec<u64>>,
    pub n: usize,
    /// Lists to probe; the index default when absent.
    #[serde(default)]
    pub nprobe: Option<usize>,
}

#[derive(Debug, Serialize)]
struct QueryHit {
    object_id: u64,
    cosine: f64,
    in_band: bool,
    frame_id: String,
    label: Option<dleng::ClassId>,
}

#[derive(Debug, Serialize)]
struct QueryView {
    schema_version: u32,
    generation: u64,
    modality: Modality,
    band: (f64, f64),
    nprobe: usize,
    scanned: usize,
    probed_lists: usize,
    hits: Vec<QueryHit>,
}

async fn post_query(State(app): State<App>, body: Bytes) -> Result<impl IntoResponse, ServiceError> {
    let req: QueryRequest = parse_body(&body)?;
    let snap = app.snapshot();
    let index = match req.modality {
        Modality::Image => &snap.state.image_index,
        Modality::Text => &snap.state.text_index,
    };
    let query = match (&req.vector, &req.reference_ids) {
        (Some(v), None) => v.clone(),
        (None, Some(ids)) if !ids.is_empty() => {
            let mut q = vec![0.0; index.dim];
            for &id in ids {
                let r = index
                    .get(id)
                    .ok_or_else(|| ServiceError::NotFound(format!("object {id} in the {} index", req.modality.as_str())))?;
                for (a, b) in q.iter_mut().zip(to_f64(&r.vector)) {
                    *a += b;
                }
            }
            q
        }
        _ => return Err(ServiceError::BadRequest("exactly one of vector or a non-empty reference_ids is required".into())),
    };
    let nprobe = req.nprobe.unwrap_or_else(|| index.config.default_nprobe());
    let band = app.inner.config.bands.band(req.modality)?;
    let outcome = index.query_topn(&query, req.n, nprobe)?;
    let hits = outcome
        .hits
        .iter()
        .map(|h| {
            let r = index.get(h.object_id).expect("hit comes from the index");
            QueryHit {
                object_id: h.object_id,
                cosine: h.cosine,
                in_band: band.contains(h.cosine),
                frame_id: r.provenance.frame_id.clone(),
                label: r.label,
            }
        })
        .collect();
    Ok(Json(QueryView {
        schema_version: SCHEMA_VERSION,
        generation: snap.generation,
        modality: req.modality,
        band: (band.lower, band.upper),
        nprobe,
        scanned: outcome.scanned,
        probed_lists: outcome.probed_lists,
        hits,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnRequest {
    pub class_name: String,
    pub sample_ids: Vec<u64>,
}

async fn post_learn(State(app): State<App>, body: Bytes) -> Result<impl IntoResponse, ServiceError> {
    let req: LearnRequest = parse_body(&body)?;
    let name = req.class_name.trim().to_string();
    if name.is_empty() || req.sample_ids.is_empty() {
        return Err(ServiceError::BadRequest("class_name and sample_ids must be non-empty".into()));
    }
    let positives = object_cells(&app.inner.bundle, &req.sample_ids)?;
    let job = {
        let mut jobs = app.inner.jobs.lock().expect("job lock");
        if let Some(active) = jobs.active_for(&name) {
            return Err(ServiceError::Conflict(format!("job {} is already learning {name:?}", active.job_id)));
        }
        if app.snapshot().state.registry.id_of(&name).is_some() {
            return Err(ServiceError::Conflict(format!("class {name:?} is already registered")));
        }
        jobs.create(&name, req.sample_ids.clone())
    };
    let job_id = job.job_id.clone();
    let worker = app.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = worker.run_job(&job_id, &name, &positives);
        worker.update_job(&job_id, |j| match outcome {
            Ok(result) => {
                j.state = JobState::Succeeded;
                j.progress = 1.0;
                j.result = Some(result);
            }
            Err(e) => {
                tracing::warn!(job = %j.job_id, error = %e, "learn job failed");
                j.state = JobState::Failed;
                j.error = Some(e.to_string());
            }
        });
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(app): State<App>, UrlPath(id): UrlPath<String>) -> Result<impl IntoResponse, ServiceError> {
    let jobs = app.inner.jobs.lock().expect("job lock");
    let job = jobs.get(&id).cloned().ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
    Ok(Json(job))
}

impl App {
    fn update_job(&self, job_id: &str, f: impl FnOnce(&mut LearnJob)) {
        self.inner.jobs.lock().expect("job lock").update(job_id, f);
    }

    fn run_job(&self, job_id: &str, name: &str, positives: &Samples) -> Result<JobResult, ServiceError> {
        let inner = &self.inner;
        let config = &inner.config;
        self.update_job(job_id, |j| j.state = JobState::Running);
        let base = self.snapshot();
        let negatives = balanced_seed_cells(&inner.bundle, config.max_negative_cells, config.seed);
        let mut progress = |p: f64| self.update_job(job_id, |j| j.progress = p.min(0.99));
        let outcome = train_head_with_progress(
            positives,
            &negatives,
            base.state.registry.next_id(),
            name,
            &base.state.model,
            &base.state.heads,
            &config.continual,
            &mut progress,
        )?;

        let _guard = inner.commit.lock().expect("commit lock");
        let current = self.snapshot();
        let mut state: LoopState = current.state.clone();
        let class_id = state.registry.register(name, ClassOrigin::Incremental)?;
        let mut head = outcome.head;
        let mut report = outcome.report;
        // another job may have committed while this one trained
        head.class_id = class_id;
        report.class_id = class_id;
        state.heads.push(head);

        let generation = current.generation + 1;
        let next = Snapshot::build(state, generation, &inner.bundle, config)?;
        save_state(&next.state, generation, &inner.state_dir)?;
        let before = scores(&current.state, positives)?;
        let after = scores(&next.state, positives)?;
        let (hb, ha) = Histogram::pair(&before, &after, HISTOGRAM_BINS);
        let result = JobResult {
            report,
            generation,
            seed_miou_before: seed_miou(&current.state, &inner.bundle.test)?,
            seed_miou_after: seed_miou(&next.state, &inner.bundle.test)?,
            mean_score_before: mean(&before),
            mean_score_after: mean(&after),
            score_histogram_before: hb,
            score_histogram_after: ha,
        };
        *inner.snapshot.write().expect("snapshot lock") = Arc::new(next);
        tracing::info!(class = name, generation, "learned class committed");
        Ok(result)
    }

    pub fn persisted_manifest(&self) -> Result<StateManifest, ServiceError> {
        Ok(StateManifest::read(&self.inner.state_dir)?)
    }
}

fn scores(state: &LoopState, samples: &Samples) -> Result<Vec<f64>, ServiceError> {
    Ok(samples
        .rows()
        .map(|x| dleng::ood::ood_score(x, &state.scorer, &state.model, &state.heads))
        .collect::<dleng::Result<Vec<f64>>>()?)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
