use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use lce_core::harness::{
    self, compute_dataset_stats, dataset, run_dir, Dataset, DatasetManifest, MethodRun, RunConfig, UnitsSource,
};
use lce_core::oracle::client::EndpointSpec;
use lce_core::oracle::synthetic::{SceneConfig, SyntheticOracle};
use lce_core::oracle::{server, Capability, Oracle};

#[derive(Parser)]
#[command(name = "lce", version, about = "Concept-level explanations and faithfulness benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion dataset with ground-truth masks.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Print per-channel mean and std of a dataset as JSON.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Discover concepts, compute Shapley values and rank them.
    Explain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        segmenter: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run the evaluate stage.
        #[arg(long)]
        evaluate: bool,
    },
    /// Score the ranked units of a run directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Overrides the model endpoint recorded in the run.
        #[arg(long)]
        model: Option<String>,
    },
    /// Score externally ranked units, or a built-in unit baseline.
    ImportUnits {
        #[arg(long)]
        manifest: PathBuf,
        /// A directory of units files, `random`, `random:<seed>` or
        /// `superpixel-ranking`.
        #[arg(long)]
        units: String,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate evaluated runs into a comparison table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the synthetic backends over the line protocol.
    ServeSynthetic {
        /// Listen on this address instead of stdin/stdout.
        #[arg(long)]
        tcp: Option<String>,
        /// Comma-separated capabilities to advertise.
        #[arg(long, value_delimiter = ',')]
        capabilities: Option<Vec<String>>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn endpoint(flag: Option<String>, configured: &Option<String>, what: &str) -> anyhow::Result<(String, EndpointSpec)> {
    let Some(text) = flag.or_else(|| configured.clone()) else {
        bail!("no {what} endpoint given on the command line or in the config");
    };
    let spec = text.parse()?;
    Ok((text, spec))
}

fn factory(
    spec: EndpointSpec,
    config: &RunConfig,
    required: Vec<Capability>,
) -> impl Fn() -> lce_core::Result<Box<dyn Oracle>> + Sync {
    harness::endpoint_factory(spec, config.connect_options().with_env_overrides(), required)
}

fn output_dir(flag: Option<PathBuf>, config: &RunConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn summarize(run: &MethodRun, out: &Path) {
    let failures = run.failures();
    println!(
        "{}: {} images, {} failures -> {}",
        run.method,
        run.images.len(),
        failures.len(),
        out.display()
    );
    for (id, e) in failures {
        println!("  failed {id}: {e}");
    }
}

fn absolute(path: &Path) -> anyhow::Result<String> {
    let p = path
        .canonicalize()
        .with_context(|| format!("{}: cannot resolve path", path.display()))?;
    Ok(p.display().to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { n, out, seed, size } => {
            let (manifest, _) = dataset::write_synthetic_dataset(&out, n, seed, size, &SceneConfig::default())?;
            println!("{} scenes -> {}", manifest.entries.len(), out.join("manifest.json").display());
        }
        Command::Stats { manifest } => {
            let m = DatasetManifest::load(&manifest)?;
            println!("{}", serde_json::to_string_pretty(&compute_dataset_stats(&m)?)?);
        }
        Command::Explain {
            manifest,
            model,
            segmenter,
            config,
            seed,
            out,
            evaluate,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (model_text, model_spec) = endpoint(model, &cfg.model, "model")?;
            let (seg_text, seg_spec) = endpoint(segmenter, &cfg.segmenter, "segmenter")?;
            let m = DatasetManifest::load(&manifest)?;
            let data = Dataset::load(&m);
            let model = factory(model_spec, &cfg, harness::model_capabilities());
            let segmenter = factory(seg_spec, &cfg, harness::segmenter_capabilities());
            let mut result = harness::explain_lce(&data, &model, &segmenter, &cfg, seed)?;
            if evaluate {
                result = harness::evaluate_run(&data, result, &model, cfg.workers)?;
            }
            let out = output_dir(out, &cfg, "lce-run");
            let meta = run_dir::RunMeta {
                manifest: absolute(&manifest)?,
                model: Some(model_text),
                segmenter: Some(seg_text),
                config: cfg,
            };
            run_dir::write_run(&out, &result, &meta)?;
            summarize(&result, &out);
        }
        Command::Evaluate { run, model } => {
            let (record, loaded) = run_dir::read_run(&run)?;
            let (model_text, model_spec) = endpoint(model, &record.model, "model")?;
            let m = DatasetManifest::load(Path::new(&record.manifest))?;
            let data = Dataset::load(&m);
            let model = factory(model_spec, &record.config, vec![Capability::Predict]);
            let result = harness::evaluate_run(&data, loaded, &model, record.config.workers)?;
            let meta = run_dir::RunMeta {
                manifest: record.manifest,
                model: Some(model_text),
                segmenter: record.segmenter,
                config: record.config,
            };
            run_dir::write_run(&run, &result, &meta)?;
            summarize(&result, &run);
        }
        Command::ImportUnits {
            manifest,
            units,
            method,
            model,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let source = if units == harness::RANDOM_METHOD {
                UnitsSource::Random { seed }
            } else if let Some(s) = units.strip_prefix("random:") {
                UnitsSource::Random {
                    seed: s.parse().with_context(|| format!("bad shuffle seed `{s}`"))?,
                }
            } else if units == harness::GUIDE_RANKING_METHOD {
                UnitsSource::GuideRanking
            } else {
                let (file_method, map) = run_dir::read_units_dir(Path::new(&units))?;
                UnitsSource::Imported {
                    method: method.clone().unwrap_or(file_method),
                    units: map,
                }
            };
            let (model_text, model_spec) = endpoint(model, &cfg.model, "model")?;
            let mut caps = vec![Capability::Predict];
            if source.needs_superpixels() {
                caps.push(Capability::Superpixels);
            }
            let m = DatasetManifest::load(&manifest)?;
            let data = Dataset::load(&m);
            let model = factory(model_spec, &cfg, caps);
            let mut result = harness::run_ranked_units(&data, &model, &source, &cfg, seed)?;
            if let Some(name) = method {
                result.method = name;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{}-run", result.method)));
            let meta = run_dir::RunMeta {
                manifest: absolute(&manifest)?,
                model: Some(model_text),
                segmenter: None,
                config: cfg,
            };
            run_dir::write_run(&out, &result, &meta)?;
            summarize(&result, &out);
        }
        Command::Compare { runs, out } => {
            let mut prepared = Vec::new();
            for dir in &runs {
                let (record, loaded) = run_dir::read_run(dir)?;
                let ids = record.images.iter().map(|i| i.image_id.clone()).collect();
                prepared.push((loaded.method.clone(), ids, loaded.report_rows()));
            }
            let table = harness::aggregate_rows(&prepared)?;
            let mut w = csv::Writer::from_path(&out).with_context(|| out.display().to_string())?;
            for row in &table.rows {
                w.serialize(row)?;
            }
            w.flush()?;
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
            let per_image = out.with_file_name(format!("{stem}_images.csv"));
            run_dir::write_report_csv(&per_image, &table.per_image)?;
            for row in &table.rows {
                println!(
                    "{:<20} n={:<4} fail={:<3} ins={:.4} del={:.4} ins_w={:.4} del_w={:.4} es={:.4}",
                    row.method,
                    row.images,
                    row.failures,
                    row.insertion,
                    row.deletion,
                    row.insertion_w,
                    row.deletion_w,
                    row.effect_score
                );
            }
        }
        Command::ServeSynthetic { tcp, capabilities } => {
            let mut oracle = SyntheticOracle::default();
            if let Some(names) = capabilities {
                let caps = names
                    .iter()
                    .map(|n| {
                        Capability::ALL
                            .into_iter()
                            .find(|c| c.method() == n)
                            .with_context(|| format!("unknown capability `{n}`"))
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?;
                oracle = oracle.with_capabilities(&caps);
            }
            match tcp {
                Some(addr) => {
                    let listener = TcpListener::bind(&addr).with_context(|| format!("cannot listen on {addr}"))?;
                    eprintln!("listening on {}", listener.local_addr()?);
                    server::serve_tcp(Arc::new(oracle), listener)?;
                }
                None => server::serve(&oracle, io::stdin().lock(), io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
