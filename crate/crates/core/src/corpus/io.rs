//! On-disk corpus layout.
//!
//! ```text
//! corpus/
//!   manifest.tsv   speaker_id <TAB> utterance_id <TAB> relative_path
//!   meta.tsv       n_classes <TAB> C  /  feature_dim <TAB> d
//!   <utterance files>
//! ```
//!
//! Utterance file: `"CSAT"`, version `u32`, `F u32`, `d u32`, `F*d` row-major
//! `f64`, then `F` targets as `u32`; all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::{Dataset, Speaker, Utterance};
use crate::{Error, Result};

const UTT_MAGIC: &[u8; 4] = b"CSAT";
const UTT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.tsv";
const META: &str = "meta.tsv";

/// Encodes one utterance in the binary utterance-file format.
pub fn write_utterance_file(utt: &Utterance) -> Vec<u8> {
    let (f, d) = utt.frames.shape();
    let mut buf = Vec::with_capacity(16 + f * d * 8 + f * 4);
    buf.extend_from_slice(UTT_MAGIC);
    buf.extend_from_slice(&UTT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for r in 0..f {
        for c in 0..d {
            buf.extend_from_slice(&utt.frames[(r, c)].to_le_bytes());
        }
    }
    for &t in &utt.targets {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf
}

/// Decodes an utterance file; `id` is used for the returned utterance and error messages.
pub fn read_utterance_file(id: &str, bytes: &[u8]) -> Result<Utterance> {
    let fmt = |msg: &str| Error::Format(format!("utterance {id}: {msg}"));
    if bytes.len() < 16 {
        return Err(fmt("truncated header"));
    }
    if &bytes[0..4] != UTT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != UTT_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let f = word(8) as usize;
    let d = word(12) as usize;
    let expected = f
        .checked_mul(d)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(f * 4 + 16))
        .ok_or_else(|| fmt("dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(fmt(&format!(
            "expected {expected} bytes for {f}x{d}, found {}",
            bytes.len()
        )));
    }
    let mut off = 16;
    let mut frames = DMatrix::zeros(f, d);
    for r in 0..f {
        for c in 0..d {
            frames[(r, c)] = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    let targets = (0..f).map(|i| word(off + 4 * i)).collect();
    Utterance::new(id, frames, targets)
}

/// Loads a corpus directory; speakers and utterances come back sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        let empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_none();
        if empty {
            return Err(Error::Validation(format!(
                "corpus directory {} is empty",
                dir.display()
            )));
        }
        return Err(Error::Format(format!(
            "missing {} in {}",
            MANIFEST,
            dir.display()
        )));
    }
    let (n_classes, feature_dim) = read_meta(&dir.join(META))?;
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;

    let mut by_speaker: BTreeMap<String, Vec<Utterance>> = BTreeMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "{MANIFEST} line {}: expected 3 tab-separated fields",
                lineno + 1
            )));
        }
        let path = dir.join(fields[2]);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let utt = read_utterance_file(fields[1], &bytes)?;
        if utt.frames.ncols() != feature_dim {
            return Err(Error::Validation(format!(
                "utterance {} has feature width {}, meta says {feature_dim}",
                utt.id,
                utt.frames.ncols()
            )));
        }
        by_speaker.entry(fields[0].to_string()).or_default().push(utt);
    }
    if by_speaker.is_empty() {
        return Err(Error::Validation(format!(
            "corpus {} lists no utterances",
            dir.display()
        )));
    }
    let speakers = by_speaker
        .into_iter()
        .map(|(id, utts)| Speaker::new(id, utts))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(speakers, n_classes, feature_dim)
}

fn read_meta(path: &Path) -> Result<(usize, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut n_classes = None;
    let mut feature_dim = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{META}: malformed line {line:?}")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("{META}: {key} is not an integer")))?;
        match key {
            "n_classes" => n_classes = Some(value),
            "feature_dim" => feature_dim = Some(value),
            _ => {}
        }
    }
    match (n_classes, feature_dim) {
        (Some(c), Some(d)) => Ok((c, d)),
        _ => Err(Error::Format(format!(
            "{META} must define n_classes and feature_dim"
        ))),
    }
}

/// Writes a corpus directory that [`load_dataset`] reads back unchanged.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let utt_dir = dir.join("utts");
    fs::create_dir_all(&utt_dir).map_err(|e| Error::io(&utt_dir, e))?;
    let mut manifest = String::new();
    for (si, spk) in dataset.speakers().iter().enumerate() {
        for (ui, utt) in spk.utterances.iter().enumerate() {
            let rel = format!("utts/{si:05}_{ui:04}.utt");
            let path = dir.join(&rel);
            fs::write(&path, write_utterance_file(utt)).map_err(|e| Error::io(&path, e))?;
            manifest.push_str(&format!("{}\t{}\t{rel}\n", spk.id, utt.id));
        }
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let meta = format!(
        "n_classes\t{}\nfeature_dim\t{}\n",
        dataset.n_classes(),
        dataset.feature_dim()
    );
    let meta_path = dir.join(META);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_speaker_dataset() -> Dataset {
        let mk = |spk: &str, base: f64| {
            let frames = DMatrix::from_fn(2, 3, |r, c| base + (r * 3 + c) as f64 * 0.25);
            Speaker::new(spk, vec![Utterance::new("u0", frames, vec![0, 1]).unwrap()]).unwrap()
        };
        Dataset::new(vec![mk("s2", -1.5), mk("s1", 3.0)], 2, 3).unwrap()
    }

    #[test]
    fn round_trip_two_speakers() {
        let dir = tempfile::tempdir().unwrap();
        let ds = two_speaker_dataset();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.n_speakers(), 2);
        assert_eq!(back.feature_dim(), 3);
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_directory_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(META), "n_classes\t2\nfeature_dim\t3\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn frame_target_mismatch_names_utterance() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&two_speaker_dataset(), dir.path()).unwrap();
        // Hand-craft a file with 5 frames of width 3 but only 4 targets.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CSAT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 5 * 3 * 8 + 4 * 4));
        fs::write(dir.path().join("utts/bad.utt"), bytes).unwrap();
        let mut manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        manifest.push_str("s3\tshort_utt\tutts/bad.utt\n");
        fs::write(dir.path().join(MANIFEST), manifest).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("short_utt"), "{err}");
    }

    #[test]
    fn dimension_mismatch_names_utterance() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&two_speaker_dataset(), dir.path()).unwrap();
        let odd = Utterance::new("wide_utt", DMatrix::zeros(1, 4), vec![0]).unwrap();
        fs::write(dir.path().join("utts/odd.utt"), write_utterance_file(&odd)).unwrap();
        let mut manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        manifest.push_str("s3\twide_utt\tutts/odd.utt\n");
        fs::write(dir.path().join(MANIFEST), manifest).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("wide_utt"), "{err}");
    }

    #[test]
    fn reader_rejects_bad_magic_and_version() {
        let utt = Utterance::new("u", DMatrix::zeros(1, 1), vec![0]).unwrap();
        let mut bytes = write_utterance_file(&utt);
        bytes[4] = 9;
        assert!(read_utterance_file("u", &bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
        bytes[0] = b'X';
        assert!(matches!(read_utterance_file("u", &bytes), Err(Error::Format(_))));
    }
}
