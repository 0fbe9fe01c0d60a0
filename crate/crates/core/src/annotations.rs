//! Query annotations: the generic JSON schema and adapters for the common
//! composed-retrieval benchmark layouts.
//!
//! Generic schema (a JSON array):
//!
//! ```json
//! [{"query_id": "q1", "reference_id": "img7", "modification_text": "make it red",
//!   "target_ids": ["img9"], "subset_ids": ["img9", "img3"], "group": "dress"}]
//! ```
//!
//! `subset_ids` and `group` are optional.

use std::collections::HashSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnnotation {
    pub query_id: String,
    pub reference_id: String,
    pub modification_text: String,
    pub target_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl QueryAnnotation {
    pub fn target_set(&self) -> HashSet<String> {
        self.target_ids.iter().cloned().collect()
    }

    /// Checks the annotation invariants. A subset without any target is only
    /// worth a warning: the query simply cannot score on subset metrics.
    pub fn validate(&self) -> Result<()> {
        if self.target_ids.is_empty() {
            bail!("query {:?} has no target ids", self.query_id);
        }
        if let Some(sub) = &self.subset_ids {
            if !self.target_ids.iter().any(|t| sub.contains(t)) {
                log::warn!("query {:?}: subset contains no target", self.query_id);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Generic,
    Cirr,
    Circo,
    Fashioniq,
    Genecis,
}

/// Reads an annotation file in the given layout. `group` names the
/// FashionIQ category or GeneCIS task; it is ignored by the other layouts.
pub fn load_annotations(path: impl AsRef<Path>, format: DatasetFormat, group: Option<&str>) -> Result<Vec<QueryAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let group = group.map(str::to_string).or_else(|| {
        // FashionIQ files are named cap.<category>.<split>.json
        (format == DatasetFormat::Fashioniq)
            .then(|| path.file_name()?.to_str()?.split('.').nth(1).map(str::to_string))
            .flatten()
    });
    let anns = parse_annotations(value, format, group.as_deref())?;
    for a in &anns {
        a.validate()?;
    }
    Ok(anns)
}

pub fn parse_annotations(value: Value, format: DatasetFormat, group: Option<&str>) -> Result<Vec<QueryAnnotation>> {
    match format {
        DatasetFormat::Generic => Ok(serde_json::from_value(value)?),
        DatasetFormat::Cirr => from_cirr(value),
        DatasetFormat::Circo => from_circo(value),
        DatasetFormat::Fashioniq => from_fashioniq(value, group),
        DatasetFormat::Genecis => from_genecis(value, group),
    }
}

fn entries(value: Value) -> Result<Vec<Value>> {
    match value {
        Value::Array(a) => Ok(a),
        _ => bail!("expected a JSON array of annotation objects"),
    }
}

/// Ids appear as strings or integers depending on the dataset.
fn id_of(v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => bail!("expected an id, found {other}"),
    }
}

fn field<'a>(obj: &'a Value, key: &str) -> Result<&'a Value> {
    obj.get(key).with_context(|| format!("missing field {key:?} in {obj}"))
}

fn str_field(obj: &Value, key: &str) -> Result<String> {
    field(obj, key)?
        .as_str()
        .map(str::to_string)
        .with_context(|| format!("field {key:?} is not a string"))
}

fn id_list(v: &Value) -> Result<Vec<String>> {
    v.as_array().context("expected an id array")?.iter().map(id_of).collect()
}

/// CIRR: `{pairid, reference, target_hard, caption, img_set: {members}}`.
/// The subset pool is `img_set.members` minus the reference image.
fn from_cirr(value: Value) -> Result<Vec<QueryAnnotation>> {
    entries(value)?
        .iter()
        .map(|e| {
            let reference = id_of(field(e, "reference")?)?;
            let subset = e
                .get("img_set")
                .and_then(|s| s.get("members"))
                .map(id_list)
                .transpose()?
                .map(|m| m.into_iter().filter(|id| *id != reference).collect());
            let targets = match e.get("target_hard") {
                Some(t) if !t.is_null() => vec![id_of(t)?],
                // the test split hides targets
                _ => Vec::new(),
            };
            Ok(QueryAnnotation {
                query_id: id_of(field(e, "pairid")?)?,
                reference_id: reference,
                modification_text: str_field(e, "caption")?,
                target_ids: targets,
                subset_ids: subset,
                group: None,
            })
        })
        .collect()
}

/// CIRCO: `{id, reference_img_id, target_img_id, gt_img_ids, relative_caption}`.
fn from_circo(value: Value) -> Result<Vec<QueryAnnotation>> {
    entries(value)?
        .iter()
        .map(|e| {
            let mut targets = match e.get("gt_img_ids") {
                Some(v) if !v.is_null() => id_list(v)?,
                _ => Vec::new(),
            };
            if let Some(t) = e.get("target_img_id").filter(|t| !t.is_null()) {
                let t = id_of(t)?;
                if !targets.contains(&t) {
                    targets.insert(0, t);
                }
            }
            Ok(QueryAnnotation {
                query_id: id_of(field(e, "id")?)?,
                reference_id: id_of(field(e, "reference_img_id")?)?,
                modification_text: str_field(e, "relative_caption")?,
                target_ids: targets,
                subset_ids: None,
                group: None,
            })
        })
        .collect()
}

/// FashionIQ: `{candidate, target, captions: [c1, c2]}`; captions are joined
/// with ", " in file order. Query ids are `<category>-<position>`.
fn from_fashioniq(value: Value, category: Option<&str>) -> Result<Vec<QueryAnnotation>> {
    let cat = category.unwrap_or("fashioniq");
    entries(value)?
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let captions: Vec<String> = field(e, "captions")?
                .as_array()
                .context("captions must be an array")?
                .iter()
                .map(|c| c.as_str().map(|s| s.trim().to_string()).context("caption must be a string"))
                .collect::<Result<_>>()?;
            Ok(QueryAnnotation {
                query_id: format!("{cat}-{i}"),
                reference_id: id_of(field(e, "candidate")?)?,
                modification_text: join_captions(&captions),
                target_ids: vec![id_of(field(e, "target")?)?],
                subset_ids: None,
                group: Some(cat.to_string()),
            })
        })
        .collect()
}

pub fn join_captions(captions: &[String]) -> String {
    captions.iter().filter(|c| !c.is_empty()).cloned().collect::<Vec<_>>().join(", ")
}

/// GeneCIS (flattened): `{id?, reference, target, condition, gallery}`. The
/// per-query gallery is the subset pool and includes the target.
fn from_genecis(value: Value, task: Option<&str>) -> Result<Vec<QueryAnnotation>> {
    let task = task.unwrap_or("genecis");
    entries(value)?
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let target = id_of(field(e, "target")?)?;
            let mut gallery = id_list(field(e, "gallery")?)?;
            if !gallery.contains(&target) {
                gallery.insert(0, target.clone());
            }
            let qid = match e.get("id") {
                Some(v) => format!("{task}-{}", id_of(v)?),
                None => format!("{task}-{i}"),
            };
            Ok(QueryAnnotation {
                query_id: qid,
                reference_id: id_of(field(e, "reference")?)?,
                modification_text: str_field(e, "condition")?,
                target_ids: vec![target],
                subset_ids: Some(gallery),
                group: Some(task.to_string()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn generic_round_trip() {
        let v = json!([{"query_id": "q1", "reference_id": "r", "modification_text": "m", "target_ids": ["t"]}]);
        let a = parse_annotations(v, DatasetFormat::Generic, None).unwrap();
        assert_eq!(a[0].subset_ids, None);
        assert_eq!(a[0].target_ids, vec!["t"]);
    }

    #[test]
    fn cirr_layout() {
        let v = json!([{
            "pairid": 12063, "reference": "ref-img", "target_hard": "tgt",
            "target_soft": {"tgt": 1.0}, "caption": "show three dogs",
            "img_set": {"id": 1, "members": ["ref-img", "tgt", "x", "y"]}
        }]);
        let a = &parse_annotations(v, DatasetFormat::Cirr, None).unwrap()[0];
        assert_eq!(a.query_id, "12063");
        assert_eq!(a.subset_ids.as_deref().unwrap(), ["tgt", "x", "y"]);
        assert_eq!(a.target_ids, ["tgt"]);
    }

    #[test]
    fn circo_layout() {
        let v = json!([{"id": 0, "reference_img_id": 85932, "target_img_id": 3456,
            "gt_img_ids": [3456, 777], "relative_caption": "has two cats", "shared_concept": "cat"}]);
        let a = &parse_annotations(v, DatasetFormat::Circo, None).unwrap()[0];
        assert_eq!(a.reference_id, "85932");
        assert_eq!(a.target_ids, ["3456", "777"]);
    }

    #[test]
    fn fashioniq_joins_captions_in_order() {
        let v = json!([{"target": "B1", "candidate": "B2", "captions": ["is red ", "has long sleeves"]}]);
        let a = &parse_annotations(v, DatasetFormat::Fashioniq, Some("dress")).unwrap()[0];
        assert_eq!(a.modification_text, "is red, has long sleeves");
        assert_eq!(a.group.as_deref(), Some("dress"));
        assert_eq!(a.query_id, "dress-0");
    }

    #[test]
    fn fashioniq_category_from_filename() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cap.shirt.val.json");
        std::fs::write(&p, r#"[{"target":"a","candidate":"b","captions":["x","y"]}]"#).unwrap();
        let a = load_annotations(&p, DatasetFormat::Fashioniq, None).unwrap();
        assert_eq!(a[0].group.as_deref(), Some("shirt"));
    }

    #[test]
    fn genecis_layout() {
        let v = json!([{"reference": "r", "target": "t", "condition": "color", "gallery": ["a", "b"]}]);
        let a = &parse_annotations(v, DatasetFormat::Genecis, Some("change_attribute")).unwrap()[0];
        assert_eq!(a.subset_ids.as_deref().unwrap(), ["t", "a", "b"]);
        assert_eq!(a.group.as_deref(), Some("change_attribute"));
    }

    #[test]
    fn empty_targets_rejected() {
        let a = QueryAnnotation {
            query_id: "q".into(),
            reference_id: "r".into(),
            modification_text: "m".into(),
            target_ids: vec![],
            subset_ids: None,
            group: None,
        };
        assert!(a.validate().is_err());
    }
}
