//! Python bindings for the cirkit retrieval engine.

use std::collections::{HashMap, HashSet};

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use cirkit::annotations::QueryAnnotation;
use cirkit::fusion;
use cirkit::grid::{self, GridSpec};
use cirkit::metrics::{self, MetricSpec, Rankings};
use cirkit::ranker::{self, CandidateList};
use cirkit::rerank::{self, RerankOutcome};
use cirkit::store::{self, Embedding, StoreError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn store_err(e: StoreError) -> PyErr {
    match e {
        StoreError::Io(io) => PyIOError::new_err(io.to_string()),
        other => value_err(other),
    }
}

fn emb(v: Vec<f32>) -> PyResult<Embedding> {
    Embedding::new(v).map_err(store_err)
}

fn scored(list: CandidateList) -> Vec<(String, f64)> {
    list.candidates.into_iter().map(|c| (c.gallery_id, c.score)).collect()
}

/// Unit-length copy of `v`.
#[pyfunction]
fn normalize(v: Vec<f32>) -> PyResult<Vec<f32>> {
    Ok(store::normalize(&emb(v)?).map_err(store_err)?.into_vec())
}

#[pyfunction]
fn cosine(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    store::cosine(&emb(a)?, &emb(b)?).map_err(store_err)
}

/// Image/text fusion with weight `alpha` on the text.
#[pyfunction]
#[pyo3(signature = (image, text, alpha = fusion::DEFAULT_ALPHA))]
fn fuse_vlm(image: Vec<f32>, text: Vec<f32>, alpha: f64) -> PyResult<Vec<f32>> {
    Ok(fusion::fuse_vlm(&emb(image)?, &emb(text)?, alpha).map_err(value_err)?.into_vec())
}

/// Mixes a fused query with a caption embedding, weight `beta` on the caption.
#[pyfunction]
#[pyo3(signature = (query, caption, beta = fusion::DEFAULT_BETA))]
fn fuse_final(query: Vec<f32>, caption: Vec<f32>, beta: f64) -> PyResult<Vec<f32>> {
    Ok(fusion::fuse_final(&emb(query)?, &emb(caption)?, beta).map_err(value_err)?.into_vec())
}

/// Both fusion stages at once; a `None` caption skips the second.
#[pyfunction]
#[pyo3(signature = (image, text, caption = None, alpha = fusion::DEFAULT_ALPHA, beta = fusion::DEFAULT_BETA))]
fn compose_query(image: Vec<f32>, text: Vec<f32>, caption: Option<Vec<f32>>, alpha: f64, beta: f64) -> PyResult<Vec<f32>> {
    let params = fusion::FusionParams::new(alpha, beta).map_err(value_err)?;
    let cap = caption.map(emb).transpose()?;
    let q = fusion::ComposedQuery::compose("", &emb(image)?, &emb(text)?, cap.as_ref(), params).map_err(value_err)?;
    Ok(q.q_final.into_vec())
}

/// An in-memory embedding collection keyed by string id.
#[pyclass(name = "GalleryIndex", module = "cirkit_py", frozen)]
struct PyGalleryIndex {
    inner: store::GalleryIndex,
}

#[pymethods]
impl PyGalleryIndex {
    #[new]
    fn new(ids: Vec<String>, vectors: Vec<Vec<f32>>) -> PyResult<Self> {
        if ids.len() != vectors.len() {
            return Err(value_err(format!("{} ids but {} vectors", ids.len(), vectors.len())));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        let recs = ids.into_iter().zip(vectors).map(|(id, v)| Ok((id, emb(v)?))).collect::<PyResult<Vec<_>>>()?;
        let inner = store::GalleryIndex::from_records(dim, recs).map_err(store_err)?;
        Ok(Self { inner })
    }

    /// Reads an SQEMB1 file.
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: store::load_index(path).map_err(store_err)?,
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        store::write_index(&self.inner, path).map_err(store_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, id: &str) -> bool {
        self.inner.contains(id)
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    fn get(&self, id: &str) -> PyResult<Vec<f32>> {
        self.inner
            .get(id)
            .map(|e| e.as_slice().to_vec())
            .ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }

    /// Top-`k` `(id, score)` pairs by cosine similarity.
    #[pyo3(signature = (query, k, exclude = None))]
    fn rank(&self, query: Vec<f32>, k: usize, exclude: Option<HashSet<String>>) -> PyResult<Vec<(String, f64)>> {
        let ex = exclude.unwrap_or_default();
        let list = ranker::rank_embedding("", &emb(query)?, &self.inner, k, &ex).map_err(value_err)?;
        Ok(scored(list))
    }

    /// Scores and sorts only the given ids.
    fn rank_subset(&self, query: Vec<f32>, subset: Vec<String>) -> PyResult<Vec<(String, f64)>> {
        let list = ranker::rank_subset_embedding("", &emb(query)?, &self.inner, &subset).map_err(value_err)?;
        Ok(scored(list))
    }

    fn __repr__(&self) -> String {
        format!("GalleryIndex(len={}, dim={})", self.inner.len(), self.inner.dim())
    }
}

/// Writes `(id, vector)` records to an SQEMB1 file.
#[pyfunction]
fn write_index(path: std::path::PathBuf, ids: Vec<String>, vectors: Vec<Vec<f32>>) -> PyResult<()> {
    PyGalleryIndex::new(ids, vectors)?.save(path)
}

#[pyfunction]
fn parse_indices(completion: &str, k: usize) -> Vec<usize> {
    rerank::parse_indices(completion, k)
}

#[pyfunction]
fn merge_ranking(pi_prime: Vec<usize>, k: usize) -> PyResult<Vec<usize>> {
    rerank::merge_ranking(&pi_prime, k).map_err(value_err)
}

/// `(status, parsed prefix, final permutation)` for a rerank completion.
#[pyfunction]
fn rerank_outcome(completion: &str, k: usize) -> (String, Vec<usize>, Vec<usize>) {
    let o = RerankOutcome::from_completion("", completion, k);
    let status = serde_json::to_value(o.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    (status, o.pi_prime, o.pi_final)
}

/// Reorders `ids` so position `j` holds `ids[pi[j]]`; entries past
/// `len(pi)` stay in place.
#[pyfunction]
fn apply_rerank(ids: Vec<String>, pi: Vec<usize>) -> PyResult<Vec<String>> {
    let list = CandidateList::from_scored("", ids.into_iter().map(|id| (id, 0.0)).collect());
    let out = rerank::apply_to_window(&list, &pi).map_err(value_err)?;
    Ok(out.candidates.into_iter().map(|c| c.gallery_id).collect())
}

#[pyfunction]
fn recall_at_k(ranking: Vec<String>, targets: HashSet<String>, k: usize) -> u8 {
    metrics::recall_at_k(&ranking, &targets, k)
}

#[pyfunction]
fn average_precision_at_k(ranking: Vec<String>, targets: HashSet<String>, k: usize) -> PyResult<f64> {
    metrics::average_precision_at_k(&ranking, &targets, k).map_err(value_err)
}

/// Macro-averaged metrics in percent. `metrics` is e.g. "R@1,R@5,mAP@10";
/// `groups` maps query ids to a category for per-group reports.
#[pyfunction]
#[pyo3(signature = (rankings, targets, metrics, groups = None, subsets = None))]
fn evaluate(
    rankings: HashMap<String, Vec<String>>,
    targets: HashMap<String, Vec<String>>,
    metrics: &str,
    groups: Option<HashMap<String, String>>,
    subsets: Option<HashMap<String, Vec<String>>>,
) -> PyResult<HashMap<String, HashMap<String, f64>>> {
    let specs = MetricSpec::parse_list(metrics).map_err(value_err)?;
    let mut qids: Vec<&String> = targets.keys().collect();
    qids.sort();
    let anns: Vec<QueryAnnotation> = qids
        .into_iter()
        .map(|q| QueryAnnotation {
            query_id: q.clone(),
            reference_id: String::new(),
            modification_text: String::new(),
            target_ids: targets[q].clone(),
            subset_ids: subsets.as_ref().and_then(|s| s.get(q).cloned()),
            group: groups.as_ref().and_then(|g| g.get(q).cloned()),
        })
        .collect();
    let rep = metrics::evaluate(&Rankings::from_full(rankings), &anns, &specs).map_err(value_err)?;
    let mut out: HashMap<String, HashMap<String, f64>> = rep
        .per_group
        .into_iter()
        .map(|(g, m)| (g, m.into_iter().collect()))
        .collect();
    if let Some(avg) = rep.group_average {
        out.insert("Average".into(), avg.into_iter().collect());
    }
    out.insert("All".into(), rep.per_metric.into_iter().collect());
    Ok(out)
}

/// Composes encoded images (PNG/JPEG bytes, in rank order) into an
/// annotated m×m grid and returns it as PNG bytes.
#[pyfunction]
#[pyo3(signature = (images, m = 4, cell_px = 256))]
fn compose_grid<'py>(py: Python<'py>, images: Vec<Vec<u8>>, m: usize, cell_px: u32) -> PyResult<Bound<'py, PyBytes>> {
    let spec = GridSpec {
        cell_px,
        ..GridSpec::with_m(m)
    };
    let decoded = images
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let img = image::load_from_memory(b).map_err(value_err)?;
            Ok((i.to_string(), img.to_rgb8()))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let png = grid::compose_grid(&decoded, &spec)
        .and_then(|g| g.to_png())
        .map_err(value_err)?;
    Ok(PyBytes::new(py, &png))
}

/// Row-major `(row, column)` of rank index `i` in an m×m grid.
#[pyfunction]
fn cell_of(i: usize, m: usize) -> (usize, usize) {
    grid::cell_of(i, m)
}

#[pymodule]
fn cirkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGalleryIndex>()?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_vlm, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_final, m)?)?;
    m.add_function(wrap_pyfunction!(compose_query, m)?)?;
    m.add_function(wrap_pyfunction!(write_index, m)?)?;
    m.add_function(wrap_pyfunction!(parse_indices, m)?)?;
    m.add_function(wrap_pyfunction!(merge_ranking, m)?)?;
    m.add_function(wrap_pyfunction!(rerank_outcome, m)?)?;
    m.add_function(wrap_pyfunction!(apply_rerank, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(compose_grid, m)?)?;
    m.add_function(wrap_pyfunction!(cell_of, m)?)?;
    Ok(())
}
