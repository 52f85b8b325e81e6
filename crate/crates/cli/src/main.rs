mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dleng::continual::merged_predict;
use dleng::io::container::{
    read_heads, read_index, read_label_grids, read_model, read_scorer, write_index, write_label_grids, write_model,
    write_scorer,
};
use dleng::io::manifest::{pretty_json, read_bundle, write_bundle};
use dleng::io::state::{load_state, save_state};
use dleng::io::store::read_store;
use dleng::metrics::miou_frames;
use dleng::ood::detect_components;
use dleng::pipeline::{build_index, demo_spec, fit_bundle_scorer, fit_seed_model, learn_objects, run_demo, LoopConfig};
use dleng::retrieval::{normalized, select_k_elbow, to_f64};
use dleng::synth::{generate_scenario, ScenarioSpec, Split};
use dleng::{AdaptiveHead, IndexConfig, LabelGrid, Modality, Samples};
use dleng_service::ServiceConfig;
use serde_json::json;

use output::{emit, fmt4, CliError, CliResult, Table};

#[derive(Parser)]
#[command(name = "dleng", version, about = "Perception data loop: fit, detect, retrieve, learn, evaluate")]
struct Cli {
    /// Suppress logs and the human-readable table.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario bundle.
    Gen {
        /// Scenario spec, JSON or TOML by extension; defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the seed-class model on the training split.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the OoD scorer on seed cells and the bundle's known unknowns.
    FitOod {
        #[arg(long)]
        model: PathBuf,
        /// Bundle whose unknowns split holds the known-unknown frames.
        #[arg(long)]
        unknowns: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract OoD components from one split.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        heads: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        #[arg(long, default_value_t = 5)]
        min_size: usize,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write merged predictions of one split as a label file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        heads: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a clustered index over an embedding store.
    Index {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Pick k at the elbow of the k-means inertia curve.
        #[arg(long)]
        auto_k: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-n cosine search, flagged by the modality's similarity band.
    Query {
        #[arg(long)]
        index: PathBuf,
        /// JSON array holding the query vector.
        #[arg(long, conflicts_with = "ref", required_unless_present = "ref")]
        vector: Option<PathBuf>,
        /// Comma-separated object ids whose embeddings are summed.
        #[arg(long = "ref", value_delimiter = ',')]
        r#ref: Option<Vec<u64>>,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        nprobe: Option<usize>,
        #[arg(long)]
        band: Modality,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build the servable state (model, scorer, indexes) for a bundle.
    Init {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a new class from object ids; writes a new state directory.
    Learn {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// mIoU of predicted against ground-truth label files.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        state_dir: Option<PathBuf>,
    },
    /// Scripted end-to-end loop on the demo scenario.
    Demo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if !cli.quiet {
        tracing_subscriber::fmt()
            .json()
            .with_writer(std::io::stderr)
            .with_env_filter(
                tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
            )
            .init();
    }
    match run(cli.command, cli.quiet) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn loop_config(path: Option<&Path>) -> CliResult<LoopConfig> {
    Ok(match path {
        Some(p) => ServiceConfig::from_file(p)?.loop_config,
        None => LoopConfig::default(),
    })
}

fn split_of(name: &str) -> CliResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        "unknowns" => Ok(Split::Unknowns),
        other => Err(CliError::validation(format!("unknown split {other:?}"))),
    }
}

fn heads_or_empty(path: Option<&Path>) -> CliResult<Vec<AdaptiveHead>> {
    Ok(match path {
        Some(p) => read_heads(p)?,
        None => Vec::new(),
    })
}

fn write_report(path: &Path, report: &impl serde::Serialize) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, pretty_json(report)?)?;
    Ok(())
}

fn run(command: Command, quiet: bool) -> CliResult {
    match command {
        Command::Gen { spec, seed, out } => {
            let mut spec: ScenarioSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    if p.extension().is_some_and(|e| e == "toml") {
                        toml::from_str(&text).map_err(|e| CliError::validation(e.to_string()))?
                    } else {
                        serde_json::from_str(&text)?
                    }
                }
                None => ScenarioSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let bundle = generate_scenario(&spec)?;
            let manifest = write_bundle(&bundle, &out)?;
            let table = Table::new("gen")
                .row("dataset", &manifest.dataset)
                .row("seed", spec.seed)
                .row("classes", manifest.classes.len())
                .row("objects", bundle.objects.len())
                .row("out", out.display());
            emit(&table, &json!({ "schema_version": 1, "command": "gen", "seed": spec.seed, "manifest": manifest }), quiet)
        }
        Command::Fit { data, config, out } => {
            let config = loop_config(config.as_deref())?;
            let bundle = read_bundle(&data)?;
            let model = fit_seed_model(&bundle, &config)?;
            write_model(&out, &model)?;
            let table = Table::new("fit")
                .row("classes", model.class_count())
                .row("input dim", model.input_dim())
                .row("digest", model.digest());
            emit(
                &table,
                &json!({ "schema_version": 1, "command": "fit", "classes": model.class_count(), "model_digest": model.digest(), "decoder": config.decoder }),
                quiet,
            )
        }
        Command::FitOod { model, unknowns, config, out } => {
            let config = loop_config(config.as_deref())?;
            let model = read_model(&model)?;
            let bundle = read_bundle(&unknowns)?;
            if model.input_dim() != bundle.spec.dim {
                return Err(dleng::Error::DimensionMismatch { expected: model.input_dim(), got: bundle.spec.dim }.into());
            }
            let scorer = fit_bundle_scorer(&bundle, &config)?;
            write_scorer(&out, &scorer)?;
            let table = Table::new("fit-ood")
                .row("latent dim", config.ood.latent_dim)
                .row("inlier term", format!("{:?}", scorer.inlier_term))
                .row("digest", scorer.digest());
            emit(
                &table,
                &json!({ "schema_version": 1, "command": "fit-ood", "scorer_digest": scorer.digest(), "ood": config.ood }),
                quiet,
            )
        }
        Command::Detect { model, scorer, heads, data, tau, min_size, split, out } => {
            let model = read_model(&model)?;
            let scorer = read_scorer(&scorer)?;
            let heads = heads_or_empty(heads.as_deref())?;
            let bundle = read_bundle(&data)?;
            let detect = dleng::ood::DetectConfig { tau, min_component_size: min_size };
            let mut frames = Vec::new();
            let mut total = 0;
            for f in bundle.frames(split_of(&split)?) {
                let scores = scorer.score_grid(&f.features, &model, &heads)?;
                let comps = detect_components(&scores, Some(&f.features), &detect)?;
                total += comps.len();
                frames.push(json!({ "frame_id": f.features.frame_id, "components": comps }));
            }
            let report = json!({
                "schema_version": 1,
                "command": "detect",
                "thresholds": { "tau": tau, "min_component_size": min_size },
                "split": split,
                "component_count": total,
                "frames": frames,
            });
            write_report(&out, &report)?;
            let table = Table::new("detect")
                .row("tau", tau)
                .row("frames", frames.len())
                .row("components", total)
                .row("out", out.display());
            emit(&table, &json!({ "schema_version": 1, "command": "detect", "component_count": total, "out": out }), quiet)
        }
        Command::Predict { model, heads, data, split, out } => {
            let model = read_model(&model)?;
            let heads = heads_or_empty(heads.as_deref())?;
            let bundle = read_bundle(&data)?;
            let preds = bundle
                .frames(split_of(&split)?)
                .iter()
                .map(|f| Ok(merged_predict(&f.features, &model, &heads)?.labels))
                .collect::<dleng::Result<Vec<LabelGrid>>>()?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("{split}.labels"));
            write_label_grids(&path, &preds)?;
            let table = Table::new("predict").row("frames", preds.len()).row("out", path.display());
            emit(&table, &json!({ "schema_version": 1, "command": "predict", "frames": preds.len(), "out": path }), quiet)
        }
        Command::Index { store, alpha, k, auto_k, seed, out } => {
            let (dim, records) = read_store(&store, None)?;
            let modality = records.first().map(|r| r.modality).ok_or(dleng::Error::Empty("embedding store"))?;
            let k = if auto_k {
                let mut samples = Samples::new(dim);
                for r in &records {
                    samples.data.extend(normalized(&to_f64(&r.vector))?);
                }
                let k_max = (records.len() / 20).clamp(2, 32);
                select_k_elbow(&samples, 1, k_max, seed)?
            } else {
                k
            };
            let config = IndexConfig { k, alpha, seed, ..IndexConfig::default() };
            let index = build_index(&records, modality, &config)?;
            write_index(&out, &index)?;
            let sizes: Vec<usize> = index.cluster_members().iter().map(|m| m.len()).collect();
            let table = Table::new("index")
                .row("records", index.len())
                .row("k", k)
                .row("alpha", alpha)
                .row("list sizes", format!("{sizes:?}"));
            emit(
                &table,
                &json!({ "schema_version": 1, "command": "index", "records": index.len(), "k": k, "auto_k": auto_k, "alpha": alpha, "list_sizes": sizes }),
                quiet,
            )
        }
        Command::Query { index, vector, r#ref, n, nprobe, band, config } => {
            let config = loop_config(config.as_deref())?;
            let index = read_index(&index)?;
            let query: Vec<f64> = match (vector, r#ref) {
                (Some(p), None) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                (None, Some(ids)) => {
                    let mut q = vec![0.0; index.dim];
                    for id in ids {
                        let r = index.get(id).ok_or(dleng::Error::UnknownObject(id))?;
                        for (a, b) in q.iter_mut().zip(to_f64(&r.vector)) {
                            *a += b;
                        }
                    }
                    q
                }
                _ => return Err(CliError::validation("exactly one of --vector or --ref is required")),
            };
            let nprobe = nprobe.unwrap_or_else(|| index.config.default_nprobe());
            let band = config.bands.band(band)?;
            let outcome = index.query_topn(&query, n, nprobe)?;
            let hits: Vec<_> = outcome
                .hits
                .iter()
                .map(|h| json!({ "object_id": h.object_id, "cosine": h.cosine, "in_band": band.contains(h.cosine) }))
                .collect();
            let in_band: Vec<u64> = dleng::retrieval::filter_band(&outcome.hits, &band).iter().map(|h| h.object_id).collect();
            let mut table = Table::new("query")
                .row("nprobe", nprobe)
                .row("band", format!("[{}, {}]", band.lower, band.upper))
                .row("scanned", outcome.scanned);
            for h in &outcome.hits {
                table = table.row(format!("#{}", h.object_id), format!("{} {}", fmt4(h.cosine), if band.contains(h.cosine) { "in band" } else { "" }));
            }
            emit(
                &table,
                &json!({ "schema_version": 1, "command": "query", "n": n, "nprobe": nprobe, "band": [band.lower, band.upper], "scanned": outcome.scanned, "probed_lists": outcome.probed_lists, "hits": hits, "in_band": in_band }),
                quiet,
            )
        }
        Command::Init { data, config, out } => {
            let config = loop_config(config.as_deref())?;
            let bundle = read_bundle(&data)?;
            let state = dleng::pipeline::build_state(&bundle, &config)?;
            let saved = save_state(&state, 0, &out)?;
            let table = Table::new("init")
                .row("classes", saved.classes.len())
                .row("model digest", &saved.model_digest)
                .row("scorer digest", &saved.scorer_digest)
                .row("out", out.display());
            emit(&table, &json!({ "schema_version": 1, "command": "init", "state": saved }), quiet)
        }
        Command::Learn { state, data, class, samples, lambda, config, out } => {
            if out == state {
                return Err(CliError::validation("--out must differ from --state"));
            }
            let mut config = loop_config(config.as_deref())?;
            if let Some(l) = lambda {
                config.continual.lambda = l;
            }
            let bundle = read_bundle(&data)?;
            let (mut loop_state, manifest) = load_state(&state)?;
            let report = learn_objects(&mut loop_state, &bundle, &class, &samples, &config)?;
            let saved = save_state(&loop_state, manifest.generation + 1, &out)?;
            let table = Table::new("learn")
                .row("class", format!("{} (id {})", report.class_name, report.class_id))
                .row("lambda", report.lambda)
                .row("heldout accuracy", fmt4(report.heldout_accuracy))
                .row("heldout iou", fmt4(report.heldout_iou))
                .row("generation", saved.generation);
            emit(&table, &json!({ "schema_version": 1, "command": "learn", "generation": saved.generation, "report": report }), quiet)
        }
        Command::Eval { pred, gt, split, report } => {
            let preds = read_label_grids(&pred.join(format!("{split}.labels")))?;
            let truth_path = gt.join(format!("{split}.truth"));
            let gts = if truth_path.exists() {
                read_label_grids(&truth_path)?
            } else {
                read_label_grids(&gt.join(format!("{split}.labels")))?
            };
            if preds.len() != gts.len() {
                return Err(CliError::validation(format!("{} predicted frames against {} ground-truth frames", preds.len(), gts.len())));
            }
            let mut pairs = Vec::new();
            for g in &gts {
                let p = preds
                    .iter()
                    .find(|p| p.frame_id == g.frame_id)
                    .ok_or_else(|| CliError::validation(format!("no prediction for frame {}", g.frame_id)))?;
                pairs.push((p, g));
            }
            let mut classes: Vec<u32> = gts
                .iter()
                .flat_map(|g| g.labels.iter().copied())
                .filter(|&l| !dleng::grid::is_reserved(l))
                .collect();
            classes.sort_unstable();
            classes.dedup();
            let miou = miou_frames(&pairs, &classes)?;
            let doc = json!({ "schema_version": 1, "command": "eval", "split": split, "frames": pairs.len(), "miou": miou });
            write_report(&report, &doc)?;
            let mut table = Table::new("eval").row("frames", pairs.len()).row("mIoU", fmt4(miou.mean));
            for c in &miou.per_class {
                table = table.row(format!("class {}", c.class), c.iou.map(fmt4).unwrap_or_else(|| "-".into()));
            }
            emit(&table, &doc, quiet)
        }
        Command::Serve { config, bind, data_dir, state_dir } => {
            let mut cfg = match config {
                Some(p) => ServiceConfig::from_file(&p)?,
                None => ServiceConfig::default(),
            };
            cfg.apply_process_env()?;
            if let Some(b) = bind {
                cfg.bind = b;
            }
            if let Some(d) = data_dir {
                cfg.data_dir = d;
            }
            if let Some(s) = state_dir {
                cfg.state_dir = s;
            }
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(dleng_service::serve(cfg))?;
            Ok(())
        }
        Command::Demo { seed, config, report } => {
            let config = loop_config(config.as_deref())?;
            let (demo, _, _) = run_demo(&demo_spec(seed), &config)?;
            if let Some(path) = &report {
                write_report(path, &demo)?;
            }
            let t = &demo.thresholds;
            let table = Table::new(format!("demo seed {seed}"))
                .row("tau / lambda / alpha", format!("{} / {} / {}", t.tau, t.lambda, t.alpha))
                .row("image band", format!("[{}, {}]", t.image_band.0, t.image_band.1))
                .row("component F1", fmt4(demo.detection.pooled.f1))
                .row("candidates before/after", format!("{} / {}", demo.candidates_before, demo.candidates_after))
                .row("retrieved precision", fmt4(demo.retrieved_precision))
                .row("mean score before/after", format!("{} / {}", fmt4(demo.mean_score_before), fmt4(demo.mean_score_after)))
                .row("seed mIoU before/after", format!("{} / {}", fmt4(demo.seed_miou_before), fmt4(demo.seed_miou_after)))
                .row("new-class IoU", fmt4(demo.new_class_iou))
                .row("frozen digest kept", demo.frozen_digest_before == demo.frozen_digest_after);
            emit(&table, &demo, quiet)
        }
    }
}
