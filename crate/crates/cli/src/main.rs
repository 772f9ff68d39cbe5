//! `lineage`: probe text-to-image models, compare fingerprints, attribute lineage.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lineage_core::simulator::WorldSpec;
use lineage_core::{
    attribute, average_matrices, distance_matrix, load_fingerprints, normalize_columns, run_probe,
    save_fingerprints, Fingerprint, FingerprintStore, Metric, ProbePlan,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "lineage", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    model_id: Option<String>,
    /// Fingerprint distance: w2 or jsd.
    #[arg(long, global = true)]
    metric: Option<Metric>,
    #[arg(long, global = true)]
    seed_base: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Probe one model and write its fingerprint store.
    Probe {
        /// Journal path; defaults to `<out>/<model>.journal.jsonl`.
        #[arg(long)]
        journal: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Attribute a suspect model to one of several base models.
    Attribute {
        /// Suspect store; defaults to `<out>/<model-id>.json`.
        #[arg(long)]
        suspect: Option<PathBuf>,
        /// Base stores; defaults to `<out>/<id>.json` for each configured base.
        #[arg(long, num_args = 1..)]
        bases: Vec<PathBuf>,
    },
    /// Per-prompt and averaged distance matrices, normalized per column by base models.
    Heatmap {
        #[arg(long, num_args = 1.., required = true)]
        stores: Vec<PathBuf>,
        /// Base model ids used for normalization; defaults to the config, then to all stores.
        #[arg(long, num_args = 1..)]
        base_ids: Vec<String>,
    },
    /// Build a synthetic world and write one store per model.
    Simulate {
        /// World description; defaults to 6 lineages with one fine-tune each.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Check a prompt catalogue for consistency.
    CatalogueValidate {
        #[arg(long)]
        catalogue: Option<PathBuf>,
        /// Also write the canonical form of the catalogue here.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(out) = &cli.common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(metric) = cli.common.metric {
        cfg.attribution.metric = metric;
    }
    if let Some(seed) = cli.common.seed_base {
        cfg.plan.seed_base = seed;
    }
    if let Some(id) = &cli.common.model_id {
        cfg.model_id = Some(id.clone());
    }
    match cli.command {
        Command::Probe { journal, samples } => probe(&cfg, journal, samples),
        Command::Attribute { suspect, bases } => attribute_cmd(&cfg, suspect, bases),
        Command::Heatmap { stores, base_ids } => heatmap(&cfg, &stores, base_ids),
        Command::Simulate { world } => simulate(&cfg, world.as_deref()),
        Command::CatalogueValidate { catalogue, emit } => {
            if catalogue.is_some() {
                cfg.catalogue = catalogue;
            }
            validate_catalogue(&cfg, emit.as_deref())
        }
    }
}

fn store_path(dir: &Path, model_id: &str) -> PathBuf {
    dir.join(format!("{model_id}.json"))
}

fn probe(cfg: &RunConfig, journal: Option<PathBuf>, samples: Option<usize>) -> Result<ExitCode> {
    let model_id = cfg
        .model_id
        .clone()
        .context("probe needs --model-id or `model_id` in the config")?;
    let catalogue = cfg.catalogue()?;
    let generator = cfg.generator(&model_id, &catalogue)?;
    let classifier = cfg.classifier()?;

    let mut plan = ProbePlan::new(&model_id, &catalogue);
    plan.n_per_prompt = samples.unwrap_or(cfg.plan.n_per_prompt);
    plan.seed_base = cfg.plan.seed_base;
    plan.parallelism = cfg.plan.parallelism;
    plan.max_missing = cfg.plan.max_missing;
    plan.retry = cfg.plan.retry.clone();
    plan.width = cfg.plan.width;
    plan.height = cfg.plan.height;

    let planned = plan.prompt_ids.len() * plan.n_per_prompt;
    println!(
        "probing {model_id}: {} prompts x {} samples = {planned} images, estimated cost ${:.2}",
        plan.prompt_ids.len(),
        plan.n_per_prompt,
        planned as f64 * cfg.unit_price
    );

    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    let journal =
        journal.unwrap_or_else(|| cfg.output_dir.join(format!("{model_id}.journal.jsonl")));
    let out = run_probe(&*generator, &*classifier, &catalogue, &plan, Some(&journal))?;

    let path = store_path(&cfg.output_dir, &model_id);
    save_fingerprints(&out.store, &path)?;
    let s = &out.summary;
    println!(
        "wrote {} ({} samples, {} resumed, {} retries, {} missing); spend ${:.2}",
        path.display(),
        s.samples,
        s.resumed,
        s.retries,
        s.missing,
        s.cost_estimate(cfg.unit_price)
    );
    Ok(ExitCode::SUCCESS)
}

fn attribute_cmd(
    cfg: &RunConfig,
    suspect: Option<PathBuf>,
    bases: Vec<PathBuf>,
) -> Result<ExitCode> {
    let suspect = match suspect {
        Some(p) => p,
        None => store_path(
            &cfg.output_dir,
            cfg.model_id
                .as_deref()
                .context("attribute needs --suspect or --model-id")?,
        ),
    };
    let bases = if bases.is_empty() {
        cfg.base_models
            .iter()
            .map(|id| store_path(&cfg.output_dir, id))
            .collect()
    } else {
        bases
    };
    if bases.len() < 2 {
        bail!("attribute needs at least two base stores (--bases or `base_models`)");
    }
    let suspect = load_fingerprints(&suspect)?;
    let bases = bases
        .iter()
        .map(load_fingerprints)
        .collect::<Result<Vec<_>, _>>()?;
    let base_refs: Vec<&FingerprintStore> = bases.iter().collect();
    let report = attribute(&suspect, &base_refs, &cfg.attribution)?;

    let dir = cfg
        .output_dir
        .join(format!("attribution-{}", suspect.model_id));
    report.write_to_dir(&dir)?;

    println!(
        "suspect {}: {} trials ({} prompts dropped as unreliable, {} skipped), metric {}",
        report.suspect_id,
        report.trials.len(),
        report.filter.dropped.len(),
        report.skipped.len(),
        report.config.metric
    );
    println!(
        "{:<24} {:>4} {:>4} {:>7} {:>7} {:>7}  flags",
        "base", "s", "f", "mean", "ci_low", "ci_high"
    );
    for row in &report.rows {
        let p = &row.posterior;
        let mut flags = Vec::new();
        if row.decision.dominant {
            flags.push("dominant");
        }
        if row.decision.significant {
            flags.push("significant");
        }
        if row.decision.below_chance {
            flags.push("below-chance");
        }
        println!(
            "{:<24} {:>4} {:>4} {:>7.3} {:>7.3} {:>7.3}  {}",
            row.base_id,
            p.successes,
            p.failures,
            p.mean,
            p.ci_low,
            p.ci_high,
            flags.join(",")
        );
    }
    println!("verdict: {}", report.verdict);
    println!("report written to {}", dir.display());
    Ok(ExitCode::from(report.verdict.exit_code() as u8))
}

fn heatmap(cfg: &RunConfig, stores: &[PathBuf], base_ids: Vec<String>) -> Result<ExitCode> {
    let stores = stores
        .iter()
        .map(load_fingerprints)
        .collect::<Result<Vec<_>, _>>()?;
    let base_ids = if !base_ids.is_empty() {
        base_ids
    } else if !cfg.base_models.is_empty() {
        cfg.base_models.clone()
    } else {
        stores.iter().map(|s| s.model_id.clone()).collect()
    };
    let prompts: Vec<&str> = stores[0]
        .prompt_ids()
        .filter(|id| stores.iter().all(|s| s.get(id).is_some()))
        .collect();
    if prompts.is_empty() {
        bail!("the stores share no prompts");
    }
    let dir = cfg.output_dir.join("heatmap");
    std::fs::create_dir_all(&dir)?;
    let mut mats = Vec::with_capacity(prompts.len());
    for prompt in &prompts {
        let fps: Vec<&Fingerprint> = stores
            .iter()
            .map(|s| s.get(prompt).expect("shared"))
            .collect();
        let raw = distance_matrix(&fps, cfg.attribution.metric)?;
        let norm = normalize_columns(&raw, &base_ids)?;
        norm.write_csv(dir.join(format!("{prompt}.csv")))?;
        mats.push(norm);
    }
    let avg = average_matrices(&mats)?;
    avg.write_csv(dir.join("average.csv"))?;
    std::fs::write(dir.join("average_long.csv"), avg.to_heatmap_csv_string())?;
    std::fs::write(dir.join("average.json"), avg.to_json_string())?;
    println!(
        "wrote {} per-prompt matrices and the average to {}",
        mats.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn simulate(cfg: &RunConfig, world: Option<&Path>) -> Result<ExitCode> {
    let catalogue = cfg.catalogue()?;
    let mut world = match world {
        Some(path) => WorldSpec::from_json_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?,
        )?,
        None => WorldSpec::standard(6, &[0.3], 2.0, 0),
    };
    world.seed_base = cfg.plan.seed_base;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    for (spec, store) in world.probe_all(&catalogue)? {
        spec.save(dir.join(format!("{}.spec.json", spec.model_id)))?;
        save_fingerprints(&store, store_path(dir, &spec.model_id))?;
        println!(
            "{} (lineage {}): {} samples",
            spec.model_id,
            spec.lineage_id,
            store.total_samples()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn validate_catalogue(cfg: &RunConfig, emit: Option<&Path>) -> Result<ExitCode> {
    let catalogue = cfg.catalogue()?;
    println!("{} prompts", catalogue.len());
    for (name, count) in catalogue.counts_by_superordinate() {
        let k = catalogue.vocabulary(&name).map(|v| v.len()).unwrap_or(0);
        println!("  {name}: {count} prompts, {k} labels");
    }
    if let Some(path) = emit {
        catalogue.save(path)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
