use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use csat_core::embedding::SpeakerEmbedding;
use csat_core::nalgebra::DVector;

/// `speaker_id<TAB>v1<TAB>v2...`, one speaker per line.
pub fn write_embeddings(embs: &BTreeMap<String, SpeakerEmbedding>) -> String {
    let mut out = String::new();
    for (id, e) in embs {
        out.push_str(id);
        for v in e.vector().iter() {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Parses an embedding table. Vectors must already be unit length (within
/// `tol`) unless `normalize` is set.
pub fn read_embeddings(path: &Path, normalize: bool, tol: f64) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{}:{}", path.display(), n + 1);
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{}: non-numeric value", at()))?;
        if id.is_empty() || values.is_empty() {
            bail!("{}: expected speaker id followed by values", at());
        }
        if *dim.get_or_insert(values.len()) != values.len() {
            bail!("{}: {} values, earlier rows have {}", at(), values.len(), dim.unwrap());
        }
        let v = DVector::from_vec(values);
        let emb = if normalize {
            SpeakerEmbedding::from_raw(v, 0)
        } else {
            SpeakerEmbedding::from_unit(v, 0, tol)
        }
        .with_context(|| format!("{}: speaker {id}", at()))?;
        if out.insert(id.clone(), emb).is_some() {
            bail!("{}: duplicate speaker {id}", at());
        }
    }
    if out.is_empty() {
        bail!("{}: no embeddings", path.display());
    }
    Ok(out)
}
