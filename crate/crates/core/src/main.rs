use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cirkit::annotations::{load_annotations, DatasetFormat, QueryAnnotation};
use cirkit::grid::{compose_grid, GridSpec};
use cirkit::metrics::{evaluate, MetricSpec};
use cirkit::pipeline::{
    grid_sweep_csv, rankings_of, sidecar_checkpoint, write_jsonl_rankings, CaptionRecord, DirImageSource,
    EmbeddingSources, ImageSource, IntentForm, Pipeline, RunConfig, RunOutput,
};
use cirkit::ranker::{read_rankings, CandidateList};
use cirkit::rerank::write_audit_log;
use cirkit::store::load_index;

#[derive(Parser)]
#[command(name = "cirkit", version, about = "Training-free composed image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an embedding file and print its summary.
    BuildIndex {
        input: PathBuf,
        /// Fail unless the file has this dimensionality.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Generate target captions for every query.
    Caption {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        queries: QueryArgs,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fused retrieval followed by grid reranking (unless disabled).
    Retrieve {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        queries: QueryArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the annotated candidate grid for one query.
    Grid {
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerank an existing ranking dump.
    Rerank {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        queries: QueryArgs,
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// captions.jsonl from `caption`, required for the caption intent.
        #[arg(long)]
        captions_text: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a ranking dump against annotations.
    Evaluate {
        #[command(flatten)]
        queries: QueryArgs,
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long)]
        subset_rankings: Option<PathBuf>,
        /// Comma-separated, e.g. "R@1,R@5,Rs@1,mAP@10".
        #[arg(long, default_value = "R@1,R@5,R@10,R@50")]
        metrics: String,
        #[arg(long)]
        json: bool,
    },
    /// Parameter sweeps.
    #[command(subcommand)]
    Sweep(SweepCommand),
}

#[derive(Subcommand)]
enum SweepCommand {
    /// Fused retrieval over an α × β grid; writes a CSV (rows α, columns β).
    Fusion {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        queries: QueryArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        betas: Vec<f64>,
        #[arg(long, default_value = "R@1")]
        metric: MetricSpec,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reranking with each grid size; writes `m,k,<metrics>` rows.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        queries: QueryArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
        ms: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file plus command-line overrides.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Grid side; the rerank window becomes m².
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    no_ebr: bool,
    #[arg(long, value_enum)]
    intent: Option<IntentForm>,
    #[arg(long)]
    caption_endpoint: Option<String>,
    #[arg(long)]
    caption_model: Option<String>,
    #[arg(long)]
    rerank_endpoint: Option<String>,
    #[arg(long)]
    rerank_model: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<String>,
    /// Keep the reference image in the candidate pool.
    #[arg(long)]
    keep_reference: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(a) = self.alpha {
            cfg.fusion.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.fusion.beta = b;
        }
        if let Some(m) = self.m {
            cfg.set_grid_m(m);
        }
        if let Some(d) = self.depth {
            cfg.depth = d;
        }
        if self.no_ebr {
            cfg.ebr = false;
        }
        if let Some(i) = self.intent {
            cfg.intent_form = i;
        }
        if let Some(e) = &self.caption_endpoint {
            cfg.mllm_caption.endpoint_url = e.clone();
        }
        if let Some(e) = &self.caption_model {
            cfg.mllm_caption.model_name = e.clone();
        }
        if let Some(e) = &self.rerank_endpoint {
            cfg.mllm_rerank.endpoint_url = e.clone();
        }
        if let Some(e) = &self.rerank_model {
            cfg.mllm_rerank.model_name = e.clone();
        }
        if let Some(c) = &self.cache_dir {
            cfg.cache_dir = Some(c.clone());
        }
        if let Some(m) = &self.metrics {
            cfg.metrics = m.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }
        if self.keep_reference {
            cfg.exclude_reference = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, value_enum, default_value = "generic")]
    format: DatasetFormat,
    /// Category or task name attached to every query.
    #[arg(long)]
    group: Option<String>,
}

impl QueryArgs {
    fn load(&self) -> Result<Vec<QueryAnnotation>> {
        load_annotations(&self.annotations, self.format, self.group.as_deref())
    }
}

#[derive(Args)]
struct EmbeddingArgs {
    /// Gallery image embeddings.
    #[arg(long)]
    gallery: PathBuf,
    /// Reference image embeddings, when references are not in the gallery.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Modification-text embeddings keyed by query id.
    #[arg(long)]
    texts: PathBuf,
    /// Target-caption embeddings keyed by query id.
    #[arg(long)]
    captions: Option<PathBuf>,
}

impl EmbeddingArgs {
    fn load(&self) -> Result<EmbeddingSources> {
        Ok(EmbeddingSources::load(
            &self.gallery,
            self.references.as_deref(),
            &self.texts,
            self.captions.as_deref(),
        )?)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::BuildIndex { input, dim } => build_index(&input, dim),
        Command::Caption { run, queries, images, out } => {
            let cfg = run.resolve()?;
            let queries = queries.load()?;
            let p = Pipeline::new(cfg)?;
            let records = p.captions(&queries, &DirImageSource::new(images));
            fs::create_dir_all(&out)?;
            cirkit::pipeline::write_captions(&out.join("captions.jsonl"), &records)?;
            write_json_lines(&out.join("caption_audit.jsonl"), &records)?;
            let missing = records.iter().filter(|r| r.missing()).count();
            log::info!("{} captions written, {missing} unavailable", records.len() - missing);
            Ok(())
        }
        Command::Retrieve { run, queries, emb, images, out } => {
            let cfg = run.resolve()?;
            let queries = queries.load()?;
            let sources = emb.load()?;
            let specs = cfg.metric_specs()?;
            let p = Pipeline::new(cfg)?;
            let output = p.run(&queries, &sources, &DirImageSource::new(images))?;
            output.write_to(&out)?;
            report(&output, &queries, &specs, &out)
        }
        Command::Grid { rankings, query, images, m, out } => {
            let lists = read_dump(&rankings)?;
            let list = lists
                .iter()
                .find(|l| l.query_id == query)
                .with_context(|| format!("query {query:?} not in {}", rankings.display()))?;
            let spec = GridSpec::with_m(m);
            if list.len() < spec.cells() {
                bail!("query {query:?} has {} candidates, a {m}x{m} grid needs {}", list.len(), spec.cells());
            }
            let src = DirImageSource::new(images);
            let cells = list.candidates[..spec.cells()]
                .iter()
                .map(|c| Ok((c.gallery_id.clone(), src.load(&c.gallery_id)?)))
                .collect::<Result<Vec<_>>>()?;
            fs::write(&out, compose_grid(&cells, &spec)?.to_png()?)?;
            Ok(())
        }
        Command::Rerank {
            run,
            queries,
            rankings,
            images,
            captions_text,
            out,
        } => {
            let mut cfg = run.resolve()?;
            cfg.ebr = true;
            cfg.validate()?;
            let queries = queries.load()?;
            let lists = read_dump(&rankings)?;
            let captions = match &captions_text {
                Some(p) => read_caption_text(p)?,
                None => Vec::new(),
            };
            let p = Pipeline::new(cfg)?;
            let ebr = p.run_ebr(&queries, &lists, &captions, &DirImageSource::new(images))?;
            fs::create_dir_all(&out)?;
            write_jsonl_rankings(&out.join("rankings.jsonl"), &ebr.lists)?;
            let mut w = std::io::BufWriter::new(fs::File::create(out.join("rerank_audit.jsonl"))?);
            write_audit_log(&mut w, &ebr.outcomes)?;
            Ok(())
        }
        Command::Evaluate {
            queries,
            rankings,
            subset_rankings,
            metrics,
            json,
        } => {
            let queries = queries.load()?;
            let specs = MetricSpec::parse_list(&metrics)?;
            let full = read_dump(&rankings)?;
            let subset: BTreeMap<String, CandidateList> = match &subset_rankings {
                Some(p) => read_dump(p)?.into_iter().map(|l| (l.query_id.clone(), l)).collect(),
                None => BTreeMap::new(),
            };
            let rep = evaluate(&rankings_of(&full, &subset), &queries, &specs)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            } else {
                print!("{}", rep.to_table());
            }
            Ok(())
        }
        Command::Sweep(SweepCommand::Fusion {
            run,
            queries,
            emb,
            images,
            alphas,
            betas,
            metric,
            out,
        }) => {
            let mut cfg = run.resolve()?;
            cfg.ebr = false;
            let queries = queries.load()?;
            let sources = emb.load()?;
            let p = Pipeline::new(cfg)?;
            let table = p.sweep_fusion(&queries, &sources, &DirImageSource::new(images), &alphas, &betas, metric)?;
            write_out(&out, &table.to_csv())
        }
        Command::Sweep(SweepCommand::Grid {
            run,
            queries,
            emb,
            images,
            ms,
            out,
        }) => {
            let cfg = run.resolve()?;
            let queries = queries.load()?;
            let sources = emb.load()?;
            let p = Pipeline::new(cfg)?;
            let rows = p.sweep_grid(&queries, &sources, &DirImageSource::new(images), &ms)?;
            write_out(&out, &grid_sweep_csv(&rows))
        }
    }
}

fn build_index(input: &Path, dim: Option<usize>) -> Result<()> {
    let idx = load_index(input).with_context(|| format!("validating {}", input.display()))?;
    if let Some(d) = dim {
        if idx.dim() != d {
            bail!("{}: dim {} but {d} was required", input.display(), idx.dim());
        }
    }
    let zero = idx.iter().filter(|(_, e)| e.norm() == 0.0).count();
    let summary = serde_json::json!({
        "path": input,
        "dim": idx.dim(),
        "count": idx.len(),
        "zero_vectors": zero,
        "checkpoint": sidecar_checkpoint(input),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn report(output: &RunOutput, queries: &[QueryAnnotation], specs: &[MetricSpec], out: &Path) -> Result<()> {
    let rep = evaluate(&output.rankings(), queries, specs)?;
    fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&rep)?)?;
    print!("{}", rep.to_table());
    if let Some(ebr) = &output.ebr {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for o in &ebr.outcomes {
            *counts.entry(format!("{:?}", o.status).to_lowercase()).or_default() += 1;
        }
        log::info!("rerank statuses: {counts:?}");
    }
    Ok(())
}

fn read_dump(path: &Path) -> Result<Vec<CandidateList>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_rankings(BufReader::new(f))
}

fn read_caption_text(path: &Path) -> Result<Vec<CaptionRecord>> {
    #[derive(serde::Deserialize)]
    struct Line {
        id: String,
        text: String,
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: Line = serde_json::from_str(l)?;
            Ok(CaptionRecord {
                query_id: line.id,
                caption: Some(line.text),
                retries: 0,
                cached: true,
                error: None,
            })
        })
        .collect()
}

fn write_json_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    print!("{text}");
    Ok(())
}
