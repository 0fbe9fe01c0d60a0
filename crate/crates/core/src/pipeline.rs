//! End-to-end orchestration: caption generation, fused retrieval, grid
//! reranking, caching, run manifests and parameter sweeps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotations::QueryAnnotation;
use crate::fusion::{ComposedQuery, FusionError, FusionParams};
use crate::grid::{compose_grid, GridError, GridSpec};
use crate::metrics::{evaluate, EvalReport, MetricSpec, MetricsError, Rankings};
use crate::mllm::{MllmClient, MllmConfig, MllmError, PromptKind, PromptTemplate, RerankIntent};
use crate::ranker::{global_rank, rank_subset, write_rankings, CandidateList, RankError};
use crate::rerank::{apply_to_window, write_audit_log, RerankError, RerankOutcome};
use crate::store::{load_index, Embedding, GalleryIndex, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no {kind} embedding for id {id:?}")]
    MissingEmbedding { kind: &'static str, id: String },
    #[error("no image for id {0:?}")]
    MissingImage(String),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("embedding files come from different checkpoints: {0} vs {1}")]
    CheckpointMismatch(String, String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Mllm(#[from] MllmError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("image {id:?}: {source}")]
    Image { id: String, source: image::ImageError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IntentForm {
    /// Reference image and modification text are shown to the reranker.
    ReferencePlusText,
    /// The generated target caption stands in for the user's intent.
    GeneratedCaption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub fusion: FusionParams,
    /// Rerank window; must equal `grid.m²` when reranking is enabled.
    pub k: usize,
    /// Length of the dumped ranking per query (at least `k`).
    pub depth: usize,
    pub ebr: bool,
    pub grid: GridSpec,
    pub mllm_caption: MllmConfig,
    pub mllm_rerank: MllmConfig,
    pub intent_form: IntentForm,
    pub exclude_reference: bool,
    pub cache_dir: Option<PathBuf>,
    pub caption_template: Option<PathBuf>,
    pub rerank_template: Option<PathBuf>,
    pub metrics: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        Self {
            fusion: FusionParams::default(),
            k: grid.cells(),
            depth: 50,
            ebr: true,
            grid,
            mllm_caption: MllmConfig::default(),
            mllm_rerank: MllmConfig::default(),
            intent_form: IntentForm::ReferencePlusText,
            exclude_reference: true,
            cache_dir: None,
            caption_template: None,
            rerank_template: None,
            metrics: vec!["R@1".into(), "R@5".into(), "R@10".into(), "R@50".into()],
        }
    }
}

impl RunConfig {
    /// Offline configuration using the mock backend for both calls.
    pub fn mock(caption_mode: &str, rerank_mode: &str) -> Self {
        Self {
            mllm_caption: MllmConfig::mock(caption_mode),
            mllm_rerank: MllmConfig::mock(rerank_mode),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Sets the grid size and the matching rerank window.
    pub fn set_grid_m(&mut self, m: usize) {
        self.grid.m = m;
        self.k = m * m;
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.k == 0 {
            return Err(PipelineError::Config("k must be positive".into()));
        }
        if self.ebr {
            self.grid.validate()?;
            if self.k != self.grid.cells() {
                return Err(PipelineError::Config(format!(
                    "k = {} but a {}x{} grid holds {} candidates",
                    self.k,
                    self.grid.m,
                    self.grid.m,
                    self.grid.cells()
                )));
            }
        }
        self.metric_specs()?;
        Ok(())
    }

    pub fn metric_specs(&self) -> Result<Vec<MetricSpec>> {
        Ok(self
            .metrics
            .iter()
            .map(|m| m.parse())
            .collect::<Result<Vec<MetricSpec>, _>>()?)
    }

    /// Ranking length kept per query.
    pub fn list_len(&self) -> usize {
        self.depth.max(self.k)
    }

    /// Whether target captions are needed at all.
    pub fn needs_captions(&self) -> bool {
        self.fusion.beta > 0.0 || (self.ebr && self.intent_form == IntentForm::GeneratedCaption)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// The embedding files a run draws on. `texts` and `captions` are keyed by
/// query id; `references` defaults to the gallery.
#[derive(Debug, Clone)]
pub struct EmbeddingSources {
    pub gallery: GalleryIndex,
    pub references: Option<GalleryIndex>,
    pub texts: GalleryIndex,
    pub captions: Option<GalleryIndex>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Deserialize)]
struct SidecarManifest {
    checkpoint: String,
}

/// Checkpoint name from the `<file>.manifest.json` written next to an
/// embedding file, if there is one.
pub fn sidecar_checkpoint(path: &Path) -> Option<String> {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    let text = fs::read_to_string(PathBuf::from(name)).ok()?;
    serde_json::from_str::<SidecarManifest>(&text).ok().map(|m| m.checkpoint)
}

impl EmbeddingSources {
    pub fn new(gallery: GalleryIndex, texts: GalleryIndex) -> Self {
        Self {
            gallery,
            references: None,
            texts,
            captions: None,
            checkpoint: None,
        }
    }

    /// Loads the files and checks that every sidecar manifest names the
    /// same checkpoint.
    pub fn load(gallery: &Path, references: Option<&Path>, texts: &Path, captions: Option<&Path>) -> Result<Self> {
        let mut checkpoint: Option<String> = None;
        for p in [Some(gallery), references, Some(texts), captions].into_iter().flatten() {
            if let Some(c) = sidecar_checkpoint(p) {
                match &checkpoint {
                    Some(prev) if *prev != c => return Err(PipelineError::CheckpointMismatch(prev.clone(), c)),
                    _ => checkpoint = Some(c),
                }
            }
        }
        let gallery = load_index(gallery)?;
        let dim = gallery.dim();
        let check = |idx: GalleryIndex| -> Result<GalleryIndex> {
            if idx.dim() != dim {
                return Err(StoreError::DimMismatch {
                    expected: dim,
                    actual: idx.dim(),
                }
                .into());
            }
            Ok(idx)
        };
        Ok(Self {
            references: references.map(load_index).transpose()?.map(check).transpose()?,
            texts: check(load_index(texts)?)?,
            captions: captions.map(load_index).transpose()?.map(check).transpose()?,
            gallery,
            checkpoint,
        })
    }

    fn reference(&self, id: &str) -> Result<&Embedding> {
        self.references
            .as_ref()
            .unwrap_or(&self.gallery)
            .get(id)
            .ok_or_else(|| PipelineError::MissingEmbedding {
                kind: "reference image",
                id: id.into(),
            })
    }

    fn text(&self, query_id: &str) -> Result<&Embedding> {
        self.texts.get(query_id).ok_or_else(|| PipelineError::MissingEmbedding {
            kind: "modification text",
            id: query_id.into(),
        })
    }

    fn caption(&self, query_id: &str) -> Result<&Embedding> {
        self.captions
            .as_ref()
            .and_then(|c| c.get(query_id))
            .ok_or_else(|| PipelineError::MissingEmbedding {
                kind: "caption",
                id: query_id.into(),
            })
    }
}

/// Images by id, for captioning and grid composition.
pub trait ImageSource: Sync {
    fn load(&self, id: &str) -> Result<RgbImage>;

    /// Encoded bytes for upload. Defaults to a PNG of [`ImageSource::load`].
    fn bytes(&self, id: &str) -> Result<Vec<u8>> {
        Ok(crate::grid::encode_png(&self.load(id)?)?)
    }
}

/// Images stored as `<root>/<id>.<ext>`, trying extensions in order.
#[derive(Debug, Clone)]
pub struct DirImageSource {
    pub root: PathBuf,
    pub extensions: Vec<String>,
}

impl DirImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            extensions: ["png", "jpg", "jpeg"].map(String::from).to_vec(),
        }
    }

    pub fn path_of(&self, id: &str) -> Option<PathBuf> {
        self.extensions
            .iter()
            .map(|ext| self.root.join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
    }
}

impl ImageSource for DirImageSource {
    fn load(&self, id: &str) -> Result<RgbImage> {
        let p = self.path_of(id).ok_or_else(|| PipelineError::MissingImage(id.into()))?;
        let img = image::open(&p).map_err(|source| PipelineError::Image { id: id.into(), source })?;
        Ok(img.to_rgb8())
    }

    fn bytes(&self, id: &str) -> Result<Vec<u8>> {
        let p = self.path_of(id).ok_or_else(|| PipelineError::MissingImage(id.into()))?;
        Ok(fs::read(p)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryImageSource(pub HashMap<String, RgbImage>);

impl ImageSource for MemoryImageSource {
    fn load(&self, id: &str) -> Result<RgbImage> {
        self.0.get(id).cloned().ok_or_else(|| PipelineError::MissingImage(id.into()))
    }
}

// ---------------------------------------------------------------------------
// Completion cache
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    query_id: String,
    model: String,
    template_version: String,
    text: String,
}

/// On-disk store of successful completions, one JSON file per key.
#[derive(Debug, Clone)]
pub struct CompletionCache {
    root: PathBuf,
}

impl CompletionCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn key(parts: &[&str]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    fn path(&self, kind: &str, key: &str) -> PathBuf {
        self.root.join(kind).join(format!("{key}.json"))
    }

    pub fn get(&self, kind: &str, key: &str) -> Option<String> {
        let text = fs::read_to_string(self.path(kind, key)).ok()?;
        serde_json::from_str::<CacheEntry>(&text).ok().map(|e| e.text)
    }

    fn put(&self, kind: &str, key: &str, entry: &CacheEntry) -> Result<()> {
        let path = self.path(kind, key);
        fs::create_dir_all(path.parent().expect("cache path has a parent"))?;
        // write-then-rename so concurrent readers never see a partial file
        let tmp = path.with_extension(format!("tmp{}", rand::random::<u64>()));
        fs::write(&tmp, serde_json::to_vec_pretty(entry).expect("cache entry serializes"))?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub query_id: String,
    pub caption: Option<String>,
    pub retries: u32,
    pub cached: bool,
    pub error: Option<String>,
}

impl CaptionRecord {
    pub fn missing(&self) -> bool {
        self.caption.is_none()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SqafOutput {
    /// Global rankings in query order.
    pub lists: Vec<CandidateList>,
    /// Restricted-pool rankings for queries that carry `subset_ids`.
    pub subset: BTreeMap<String, CandidateList>,
    pub captions: Vec<CaptionRecord>,
}

#[derive(Debug, Clone)]
pub struct EbrOutput {
    pub lists: Vec<CandidateList>,
    pub outcomes: Vec<RerankOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub prompt_versions: BTreeMap<String, String>,
    pub models: BTreeMap<String, String>,
    pub checkpoint: Option<String>,
    pub query_count: usize,
    pub started_at: chrono::DateTime<chrono::Utc>,
    pub finished_at: chrono::DateTime<chrono::Utc>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub sqaf: SqafOutput,
    pub ebr: Option<EbrOutput>,
    pub manifest: RunManifest,
}

impl RunOutput {
    /// Final rankings: reranked when reranking ran, otherwise the fused ones.
    pub fn final_lists(&self) -> &[CandidateList] {
        self.ebr.as_ref().map_or(&self.sqaf.lists, |e| &e.lists)
    }

    pub fn rankings(&self) -> Rankings {
        rankings_of(self.final_lists(), &self.sqaf.subset)
    }

    /// Writes rankings, audit logs, captions and the manifest into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl_rankings(&dir.join("rankings.jsonl"), self.final_lists())?;
        write_jsonl_rankings(&dir.join("rankings_sqaf.jsonl"), &self.sqaf.lists)?;
        if !self.sqaf.subset.is_empty() {
            write_jsonl_rankings(&dir.join("rankings_subset.jsonl"), self.sqaf.subset.values())?;
        }
        if let Some(ebr) = &self.ebr {
            let mut w = BufWriter::new(fs::File::create(dir.join("rerank_audit.jsonl"))?);
            write_audit_log(&mut w, &ebr.outcomes)?;
            w.flush()?;
        }
        if !self.sqaf.captions.is_empty() {
            write_captions(&dir.join("captions.jsonl"), &self.sqaf.captions)?;
            let mut w = BufWriter::new(fs::File::create(dir.join("caption_audit.jsonl"))?);
            for c in &self.sqaf.captions {
                serde_json::to_writer(&mut w, c).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }
}

pub fn rankings_of<'a>(
    lists: impl IntoIterator<Item = &'a CandidateList>,
    subset: &BTreeMap<String, CandidateList>,
) -> Rankings {
    let ids = |l: &CandidateList| l.candidates.iter().map(|c| c.gallery_id.clone()).collect::<Vec<_>>();
    Rankings {
        full: lists.into_iter().map(|l| (l.query_id.clone(), ids(l))).collect(),
        subset: subset.iter().map(|(q, l)| (q.clone(), ids(l))).collect(),
    }
}

pub fn write_jsonl_rankings<'a>(path: &Path, lists: impl IntoIterator<Item = &'a CandidateList>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_rankings(&mut w, lists)?;
    w.flush()?;
    Ok(())
}

/// Writes successful captions as `{"id", "text"}` lines, the input format of
/// the text-embedding exporter.
pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        if let Some(text) = &r.caption {
            serde_json::to_writer(&mut w, &serde_json::json!({"id": r.query_id, "text": text}))
                .map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

pub struct Pipeline {
    cfg: RunConfig,
    caption_client: Arc<MllmClient>,
    rerank_client: Arc<MllmClient>,
    caption_template: PromptTemplate,
    rerank_template: PromptTemplate,
    cache: Option<CompletionCache>,
}

impl Pipeline {
    /// Builds clients from the configured endpoints.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let cap = Arc::new(MllmClient::new(cfg.mllm_caption.clone())?);
        let rr = Arc::new(MllmClient::new(cfg.mllm_rerank.clone())?);
        Self::with_clients(cfg, cap, rr)
    }

    pub fn with_clients(cfg: RunConfig, caption_client: Arc<MllmClient>, rerank_client: Arc<MllmClient>) -> Result<Self> {
        cfg.validate()?;
        let caption_template = match &cfg.caption_template {
            Some(p) => PromptTemplate::load(p)?,
            None => PromptTemplate::builtin(PromptKind::Caption),
        };
        let rerank_kind = match cfg.intent_form {
            IntentForm::ReferencePlusText => PromptKind::Rerank,
            IntentForm::GeneratedCaption => PromptKind::RerankCaptionIntent,
        };
        let rerank_template = match &cfg.rerank_template {
            Some(p) => PromptTemplate::load(p)?,
            None => PromptTemplate::builtin(rerank_kind),
        };
        if caption_template.kind != PromptKind::Caption {
            return Err(MllmError::WrongTemplate(caption_template.kind).into());
        }
        if rerank_template.kind != rerank_kind {
            return Err(MllmError::WrongTemplate(rerank_template.kind).into());
        }
        Ok(Self {
            cache: cfg.cache_dir.clone().map(CompletionCache::new),
            cfg,
            caption_client,
            rerank_client,
            caption_template,
            rerank_template,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Generates (or reads from cache) one target caption per query.
    /// Failures are recorded, never raised.
    pub fn captions(&self, queries: &[QueryAnnotation], images: &dyn ImageSource) -> Vec<CaptionRecord> {
        queries.par_iter().map(|q| self.caption_one(q, images)).collect()
    }

    fn caption_one(&self, q: &QueryAnnotation, images: &dyn ImageSource) -> CaptionRecord {
        let model = &self.cfg.mllm_caption.model_name;
        let key = CompletionCache::key(&["caption", &q.query_id, model, &self.caption_template.version]);
        if let Some(text) = self.cache.as_ref().and_then(|c| c.get("captions", &key)) {
            return CaptionRecord {
                query_id: q.query_id.clone(),
                caption: Some(text),
                retries: 0,
                cached: true,
                error: None,
            };
        }
        let result = images.bytes(&q.reference_id).and_then(|bytes| {
            Ok(self.caption_client.generate_target_caption(
                &q.query_id,
                &bytes,
                &q.modification_text,
                &self.caption_template,
            )?)
        });
        match result {
            Ok(c) => {
                if let Some(cache) = &self.cache {
                    let entry = CacheEntry {
                        query_id: q.query_id.clone(),
                        model: model.clone(),
                        template_version: self.caption_template.version.clone(),
                        text: c.text.clone(),
                    };
                    if let Err(e) = cache.put("captions", &key, &entry) {
                        log::warn!("caption cache write failed for {}: {e}", q.query_id);
                    }
                }
                CaptionRecord {
                    query_id: q.query_id.clone(),
                    caption: Some(c.text),
                    retries: c.retries,
                    cached: false,
                    error: None,
                }
            }
            Err(e) => {
                log::warn!("caption for {} unavailable, falling back to image+text query: {e}", q.query_id);
                let retries = match &e {
                    PipelineError::Mllm(m) => m.retries(),
                    _ => 0,
                };
                CaptionRecord {
                    query_id: q.query_id.clone(),
                    caption: None,
                    retries,
                    cached: false,
                    error: Some(e.to_string()),
                }
            }
        }
    }

    /// Composes the query vector for `q`. A missing caption (or β = 0)
    /// leaves the image+text fusion as the final query.
    pub fn compose(
        &self,
        q: &QueryAnnotation,
        sources: &EmbeddingSources,
        caption: Option<&CaptionRecord>,
        params: FusionParams,
    ) -> Result<ComposedQuery> {
        let r = sources.reference(&q.reference_id)?;
        let t = sources.text(&q.query_id)?;
        let cap = match caption {
            Some(c) if params.beta > 0.0 && !c.missing() => Some(sources.caption(&q.query_id)?),
            _ => None,
        };
        Ok(ComposedQuery::compose(&q.query_id, r, t, cap, params)?)
    }

    fn exclusions(&self, q: &QueryAnnotation) -> HashSet<String> {
        if self.cfg.exclude_reference {
            HashSet::from([q.reference_id.clone()])
        } else {
            HashSet::new()
        }
    }

    /// Fused retrieval given already generated captions (indexed by query
    /// position, or empty when captions are not used).
    pub fn sqaf_with_captions(
        &self,
        queries: &[QueryAnnotation],
        sources: &EmbeddingSources,
        captions: &[CaptionRecord],
        params: FusionParams,
    ) -> Result<SqafOutput> {
        let depth = self.cfg.list_len();
        let per_query: Vec<(CandidateList, Option<CandidateList>)> = queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let cq = self.compose(q, sources, captions.get(i), params)?;
                let full = global_rank(&cq, &sources.gallery, depth, &self.exclusions(q))?;
                let sub = q
                    .subset_ids
                    .as_ref()
                    .map(|s| rank_subset(&cq, &sources.gallery, s))
                    .transpose()?;
                Ok((full, sub))
            })
            .collect::<Result<_>>()?;
        let mut out = SqafOutput {
            captions: captions.to_vec(),
            ..SqafOutput::default()
        };
        for (full, sub) in per_query {
            if let Some(s) = sub {
                out.subset.insert(full.query_id.clone(), s);
            }
            out.lists.push(full);
        }
        Ok(out)
    }

    /// Caption generation (when needed) followed by fused retrieval.
    pub fn run_sqaf(
        &self,
        queries: &[QueryAnnotation],
        sources: &EmbeddingSources,
        images: &dyn ImageSource,
    ) -> Result<SqafOutput> {
        let captions = if self.cfg.needs_captions() {
            self.captions(queries, images)
        } else {
            Vec::new()
        };
        self.sqaf_with_captions(queries, sources, &captions, self.cfg.fusion)
    }

    /// Reranks the top-`k` window of every list with one grid call per
    /// query. Any failure degrades that query to its input order.
    pub fn run_ebr(
        &self,
        queries: &[QueryAnnotation],
        lists: &[CandidateList],
        captions: &[CaptionRecord],
        images: &dyn ImageSource,
    ) -> Result<EbrOutput> {
        let by_id: HashMap<&str, &QueryAnnotation> = queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
        let caps: HashMap<&str, &str> = captions
            .iter()
            .filter_map(|c| Some((c.query_id.as_str(), c.caption.as_deref()?)))
            .collect();
        let results: Vec<(CandidateList, RerankOutcome)> = lists
            .par_iter()
            .map(|list| {
                let window = self.cfg.k.min(list.len());
                let outcome = match self.rerank_one(list, window, by_id.get(list.query_id.as_str()).copied(), &caps, images) {
                    Ok(o) => o,
                    Err(e) => {
                        log::warn!("rerank skipped for {}: {e}", list.query_id);
                        RerankOutcome::skipped(&list.query_id, window, &e.to_string())
                    }
                };
                let reranked = apply_to_window(list, &outcome.pi_final)?;
                Ok((reranked, outcome))
            })
            .collect::<Result<_>>()?;
        let (lists, outcomes) = results.into_iter().unzip();
        Ok(EbrOutput { lists, outcomes })
    }

    fn rerank_one(
        &self,
        list: &CandidateList,
        window: usize,
        query: Option<&QueryAnnotation>,
        captions: &HashMap<&str, &str>,
        images: &dyn ImageSource,
    ) -> Result<RerankOutcome> {
        let q = query.ok_or_else(|| PipelineError::Config(format!("no annotation for query {:?}", list.query_id)))?;
        if window == 0 {
            return Ok(RerankOutcome::skipped(&list.query_id, 0, "empty candidate list"));
        }
        let ids: Vec<&str> = list.candidates[..window].iter().map(|c| c.gallery_id.as_str()).collect();
        let m = self.cfg.grid.m;
        let model = &self.cfg.mllm_rerank.model_name;
        let key = CompletionCache::key(&[
            "rerank",
            &q.query_id,
            model,
            &self.rerank_template.version,
            &m.to_string(),
            &ids.join("\n"),
        ]);
        if let Some(text) = self.cache.as_ref().and_then(|c| c.get("rerank", &key)) {
            return Ok(RerankOutcome::from_completion(&q.query_id, &text, window));
        }

        let mut cells: Vec<(String, RgbImage)> = Vec::with_capacity(self.cfg.grid.cells());
        for id in &ids {
            cells.push((id.to_string(), images.load(id)?));
        }
        // short lists are padded with blank cells the parser never accepts
        while cells.len() < self.cfg.grid.cells() {
            cells.push((String::new(), RgbImage::new(1, 1)));
        }
        let grid_png = compose_grid(&cells, &self.cfg.grid)?.to_png()?;

        let ref_bytes;
        let intent = match self.cfg.intent_form {
            IntentForm::ReferencePlusText => {
                ref_bytes = images.bytes(&q.reference_id)?;
                RerankIntent::Reference {
                    image: &ref_bytes,
                    modification: &q.modification_text,
                }
            }
            IntentForm::GeneratedCaption => RerankIntent::Caption {
                caption: captions.get(q.query_id.as_str()).copied().ok_or_else(|| {
                    PipelineError::Config(format!("no generated caption for {:?}", q.query_id))
                })?,
                modification: &q.modification_text,
            },
        };
        let completion = self
            .rerank_client
            .rerank_call(&q.query_id, intent, &grid_png, m, &self.rerank_template)?;
        if let Some(cache) = &self.cache {
            let entry = CacheEntry {
                query_id: q.query_id.clone(),
                model: model.clone(),
                template_version: self.rerank_template.version.clone(),
                text: completion.text.clone(),
            };
            if let Err(e) = cache.put("rerank", &key, &entry) {
                log::warn!("rerank cache write failed for {}: {e}", q.query_id);
            }
        }
        Ok(RerankOutcome::from_completion(&q.query_id, &completion.text, window))
    }

    /// Full run: fused retrieval, then reranking when enabled.
    pub fn run(
        &self,
        queries: &[QueryAnnotation],
        sources: &EmbeddingSources,
        images: &dyn ImageSource,
    ) -> Result<RunOutput> {
        let started_at = chrono::Utc::now();
        let sqaf = self.run_sqaf(queries, sources, images)?;
        let ebr = if self.cfg.ebr {
            Some(self.run_ebr(queries, &sqaf.lists, &sqaf.captions, images)?)
        } else {
            None
        };
        let manifest = self.manifest(sources.checkpoint.clone(), queries.len(), started_at);
        Ok(RunOutput { sqaf, ebr, manifest })
    }

    pub fn manifest(
        &self,
        checkpoint: Option<String>,
        query_count: usize,
        started_at: chrono::DateTime<chrono::Utc>,
    ) -> RunManifest {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            prompt_versions: BTreeMap::from([
                ("caption".into(), self.caption_template.version.clone()),
                ("rerank".into(), self.rerank_template.version.clone()),
            ]),
            models: BTreeMap::from([
                ("caption".into(), self.cfg.mllm_caption.model_name.clone()),
                ("rerank".into(), self.cfg.mllm_rerank.model_name.clone()),
            ]),
            checkpoint,
            query_count,
            started_at,
            finished_at: chrono::Utc::now(),
        }
    }

    /// Evaluates fused retrieval for every (α, β) pair. Captions are
    /// generated once up front. Rows follow `alphas`, columns `betas`.
    pub fn sweep_fusion(
        &self,
        queries: &[QueryAnnotation],
        sources: &EmbeddingSources,
        images: &dyn ImageSource,
        alphas: &[f64],
        betas: &[f64],
        metric: MetricSpec,
    ) -> Result<SweepTable> {
        let captions = if betas.iter().any(|&b| b > 0.0) {
            self.captions(queries, images)
        } else {
            Vec::new()
        };
        let mut values = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            let mut row = Vec::with_capacity(betas.len());
            for &beta in betas {
                let params = FusionParams::new(alpha, beta)?;
                let out = self.sqaf_with_captions(queries, sources, &captions, params)?;
                let report = evaluate(&rankings_of(&out.lists, &out.subset), queries, &[metric])?;
                row.push(report.per_metric[&metric.to_string()]);
            }
            values.push(row);
        }
        Ok(SweepTable {
            metric: metric.to_string(),
            alphas: alphas.to_vec(),
            betas: betas.to_vec(),
            values,
        })
    }

    /// Reranks the configured fused rankings with each grid size in `ms`
    /// and reports the configured metrics per size.
    pub fn sweep_grid(
        &self,
        queries: &[QueryAnnotation],
        sources: &EmbeddingSources,
        images: &dyn ImageSource,
        ms: &[usize],
    ) -> Result<Vec<(usize, EvalReport)>> {
        let specs = self.cfg.metric_specs()?;
        let max_k = ms.iter().map(|m| m * m).max().unwrap_or(0);
        let mut base_cfg = self.cfg.clone();
        base_cfg.depth = base_cfg.depth.max(max_k);
        base_cfg.ebr = false;
        let base = self.derive(base_cfg)?;
        let sqaf = base.run_sqaf(queries, sources, images)?;
        let mut rows = Vec::with_capacity(ms.len());
        for &m in ms {
            let mut cfg = self.cfg.clone();
            cfg.set_grid_m(m);
            cfg.ebr = true;
            let p = self.derive(cfg)?;
            let ebr = p.run_ebr(queries, &sqaf.lists, &sqaf.captions, images)?;
            rows.push((m, evaluate(&rankings_of(&ebr.lists, &sqaf.subset), queries, &specs)?));
        }
        Ok(rows)
    }

    /// Same clients and cache, different configuration.
    fn derive(&self, cfg: RunConfig) -> Result<Self> {
        Self::with_clients(cfg, self.caption_client.clone(), self.rerank_client.clone())
    }
}

/// Metric values over an α × β grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub metric: String,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `values[i][j]` is the metric at `alphas[i]`, `betas[j]`.
    pub values: Vec<Vec<f64>>,
}

impl SweepTable {
    /// Heatmap-ready CSV: first column α, one column per β.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha\\beta");
        for b in &self.betas {
            s.push_str(&format!(",{b}"));
        }
        s.push('\n');
        for (a, row) in self.alphas.iter().zip(&self.values) {
            s.push_str(&a.to_string());
            for v in row {
                s.push_str(&format!(",{v:.2}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn column(&self, beta_idx: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[beta_idx]).collect()
    }
}

/// CSV for a grid-size sweep: `m,k,<metric>...`.
pub fn grid_sweep_csv(rows: &[(usize, EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::from("m,k\n");
    };
    let mut s = String::from("m,k");
    for name in &first.metrics {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (m, r) in rows {
        s.push_str(&format!("{m},{}", m * m));
        for name in &r.metrics {
            s.push_str(&format!(",{:.2}", r.per_metric[name]));
        }
        s.push('\n');
    }
    s
}
