//! Versioned binary container shared by every persisted artifact.
//!
//! ```text
//! "CSATBLOB" | version u32 | kind u32 | payload_len u64 | payload
//! ```
//!
//! All integers and floats are little-endian. Matrices are stored as
//! `rows u32, cols u32` followed by row-major `f64` values, so round trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::clustering::{Clustering, Merge};
use crate::corpus::{Dataset, Speaker, Utterance};
use crate::embedding::{Covariances, Gmm, Projection, SpeakerEmbedding};
use crate::network::{Activation, LayerParams, Network, NetworkSpec};
use crate::sat::SatModel;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CSATBLOB";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ArtifactKind {
    Gmm = 1,
    Projection = 2,
    Clustering = 3,
    Network = 4,
    SatModel = 5,
    Dataset = 6,
    Embeddings = 7,
}

impl ArtifactKind {
    fn from_tag(tag: u32) -> Option<Self> {
        use ArtifactKind::*;
        [Gmm, Projection, Clustering, Network, SatModel, Dataset, Embeddings]
            .into_iter()
            .find(|k| *k as u32 == tag)
    }
}

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn matrix(&mut self, m: &DMatrix<f64>) {
        self.u32(m.nrows() as u32);
        self.u32(m.ncols() as u32);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.f64(m[(r, c)]);
            }
        }
    }

    pub fn vector(&mut self, v: &DVector<f64>) {
        self.u32(v.len() as u32);
        for x in v.iter() {
            self.f64(*x);
        }
    }
}

pub struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Decoder { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated payload at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    /// Guards element counts against the bytes actually remaining.
    fn count(&mut self, min_elem_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem_bytes) > self.bytes.len() - self.pos {
            return Err(Error::Format(format!("count {n} exceeds remaining payload")));
        }
        Ok(n)
    }

    pub fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows.saturating_mul(cols).saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::Format(format!("{rows}x{cols} matrix exceeds remaining payload")));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = self.f64()?;
            }
        }
        Ok(m)
    }

    pub fn vector(&mut self) -> Result<DVector<f64>> {
        let n = self.count(8)?;
        let mut v = DVector::zeros(n);
        for x in v.iter_mut() {
            *x = self.f64()?;
        }
        Ok(v)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// A value that can live in the container.
pub trait Artifact: Sized {
    const KIND: ArtifactKind;
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self>;
}

pub fn to_bytes<A: Artifact>(artifact: &A) -> Vec<u8> {
    let mut payload = Encoder::default();
    artifact.encode(&mut payload);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.buf.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(A::KIND as u32).to_le_bytes());
    out.extend_from_slice(&(payload.buf.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload.buf);
    out
}

/// Reads just the kind tag of a container, validating magic and version.
pub fn peek_kind(bytes: &[u8]) -> Result<ArtifactKind> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated container header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a CSATBLOB container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let tag = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    ArtifactKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown artifact kind {tag}")))
}

pub fn from_bytes<A: Artifact>(bytes: &[u8]) -> Result<A> {
    let kind = peek_kind(bytes)?;
    if kind != A::KIND {
        return Err(Error::Format(format!(
            "container holds {kind:?}, expected {:?}",
            A::KIND
        )));
    }
    let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != len {
        return Err(Error::Format(format!(
            "payload is {} bytes, header says {len}",
            payload.len()
        )));
    }
    let mut dec = Decoder::new(payload);
    let value = A::decode(&mut dec)?;
    dec.finish()?;
    Ok(value)
}

pub fn save_artifact<A: Artifact>(artifact: &A, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(artifact)).map_err(|e| Error::io(path, e))
}

pub fn load_artifact<A: Artifact>(path: &Path) -> Result<A> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl Artifact for Gmm {
    const KIND: ArtifactKind = ArtifactKind::Gmm;

    fn encode(&self, enc: &mut Encoder) {
        enc.vector(self.weights());
        enc.matrix(self.means());
        enc.vector(self.variance_floor());
        match self.covariances() {
            Covariances::Diagonal(v) => {
                enc.u8(0);
                enc.matrix(v);
            }
            Covariances::Full(covs) => {
                enc.u8(1);
                enc.u32(covs.len() as u32);
                for c in covs {
                    enc.matrix(c);
                }
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let weights = dec.vector()?;
        let means = dec.matrix()?;
        let floor = dec.vector()?;
        let covariances = match dec.u8()? {
            0 => Covariances::Diagonal(dec.matrix()?),
            1 => {
                let n = dec.count(8)?;
                Covariances::Full((0..n).map(|_| dec.matrix()).collect::<Result<_>>()?)
            }
            t => return Err(Error::Format(format!("unknown covariance tag {t}"))),
        };
        Gmm::new(weights, means, covariances, floor)
    }
}

impl Artifact for Projection {
    const KIND: ArtifactKind = ArtifactKind::Projection;

    fn encode(&self, enc: &mut Encoder) {
        enc.vector(self.mean());
        enc.matrix(self.basis());
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let mean = dec.vector()?;
        let basis = dec.matrix()?;
        Projection::new(mean, basis)
    }
}

fn encode_embedding(enc: &mut Encoder, e: &SpeakerEmbedding) {
    enc.usize(e.source_frames());
    enc.vector(e.vector());
}

fn decode_embedding(dec: &mut Decoder<'_>) -> Result<SpeakerEmbedding> {
    let frames = dec.usize()?;
    SpeakerEmbedding::from_unit(dec.vector()?, frames, 1e-10)
}

impl Artifact for Clustering {
    const KIND: ArtifactKind = ArtifactKind::Clustering;

    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.k() as u32);
        enc.u32(self.speakers().len() as u32);
        for (s, &c) in self.speakers().iter().zip(self.labels()) {
            enc.str(s);
            enc.u32(c as u32);
        }
        enc.u32(self.dendrogram().len() as u32);
        for m in self.dendrogram() {
            enc.usize(m.left);
            enc.usize(m.right);
            enc.f64(m.cost);
            enc.usize(m.size);
        }
        enc.u32(self.cluster_embeddings().len() as u32);
        for e in self.cluster_embeddings() {
            encode_embedding(enc, e);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let k = dec.u32()? as usize;
        let n = dec.count(8)?;
        let mut speakers = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            speakers.push(dec.str()?);
            labels.push(dec.u32()? as usize);
        }
        let n_merges = dec.count(32)?;
        let mut dendrogram = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            dendrogram.push(Merge {
                left: dec.usize()?,
                right: dec.usize()?,
                cost: dec.f64()?,
                size: dec.usize()?,
            });
        }
        let n_emb = dec.count(12)?;
        let embeddings = (0..n_emb).map(|_| decode_embedding(dec)).collect::<Result<Vec<_>>>()?;
        let clustering = Clustering::new(k, speakers, labels, dendrogram)?;
        if embeddings.is_empty() {
            Ok(clustering)
        } else {
            clustering.with_embeddings(embeddings)
        }
    }
}

fn encode_spec(enc: &mut Encoder, spec: &NetworkSpec) {
    enc.u32(spec.layer_dims.len() as u32);
    for &(i, o) in &spec.layer_dims {
        enc.u32(i as u32);
        enc.u32(o as u32);
    }
    match spec.activation {
        Activation::Pnorm { p, group_size } => {
            enc.u8(0);
            enc.f64(p);
            enc.u32(group_size as u32);
        }
        Activation::Relu => enc.u8(1),
        Activation::Identity => enc.u8(2),
    }
    enc.u32(spec.n_classes as u32);
}

fn decode_spec(dec: &mut Decoder<'_>) -> Result<NetworkSpec> {
    let n = dec.count(8)?;
    let layer_dims = (0..n)
        .map(|_| Ok((dec.u32()? as usize, dec.u32()? as usize)))
        .collect::<Result<Vec<_>>>()?;
    let activation = match dec.u8()? {
        0 => Activation::Pnorm {
            p: dec.f64()?,
            group_size: dec.u32()? as usize,
        },
        1 => Activation::Relu,
        2 => Activation::Identity,
        t => return Err(Error::Format(format!("unknown activation tag {t}"))),
    };
    let spec = NetworkSpec {
        layer_dims,
        activation,
        n_classes: dec.u32()? as usize,
    };
    spec.validate()
        .map_err(|e| Error::Format(format!("invalid network spec: {e}")))?;
    Ok(spec)
}

fn encode_layer(enc: &mut Encoder, p: &LayerParams) {
    enc.matrix(&p.weight);
    enc.vector(&p.bias);
}

fn decode_layer(dec: &mut Decoder<'_>) -> Result<LayerParams> {
    Ok(LayerParams {
        weight: dec.matrix()?,
        bias: dec.vector()?,
    })
}

impl Artifact for Network {
    const KIND: ArtifactKind = ArtifactKind::Network;

    fn encode(&self, enc: &mut Encoder) {
        encode_spec(enc, self.spec());
        for p in self.layers() {
            encode_layer(enc, p);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let spec = decode_spec(dec)?;
        let layers = (0..spec.n_layers()).map(|_| decode_layer(dec)).collect::<Result<_>>()?;
        Network::new(spec, layers)
    }
}

impl Artifact for SatModel {
    const KIND: ArtifactKind = ArtifactKind::SatModel;

    fn encode(&self, enc: &mut Encoder) {
        encode_spec(enc, self.spec());
        enc.u32(self.sd_index() as u32);
        enc.u32(self.k() as u32);
        for p in self.shared_layers() {
            encode_layer(enc, p);
        }
        for p in self.sd_layers() {
            encode_layer(enc, p);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let spec = decode_spec(dec)?;
        let sd_index = dec.u32()? as usize;
        let k = dec.count(16)?;
        let shared = (0..spec.n_layers().saturating_sub(1))
            .map(|_| decode_layer(dec))
            .collect::<Result<_>>()?;
        let sd = (0..k).map(|_| decode_layer(dec)).collect::<Result<_>>()?;
        SatModel::new(spec, sd_index, shared, sd)
    }
}

impl Artifact for Dataset {
    const KIND: ArtifactKind = ArtifactKind::Dataset;

    fn encode(&self, enc: &mut Encoder) {
        enc.usize(self.n_classes());
        enc.usize(self.feature_dim());
        enc.u32(self.n_speakers() as u32);
        for spk in self.speakers() {
            enc.str(&spk.id);
            enc.u32(spk.utterances.len() as u32);
            for utt in &spk.utterances {
                enc.str(&utt.id);
                enc.matrix(&utt.frames);
                enc.u32(utt.targets.len() as u32);
                for &t in &utt.targets {
                    enc.u32(t);
                }
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let n_classes = dec.usize()?;
        let feature_dim = dec.usize()?;
        let n_spk = dec.count(8)?;
        let mut speakers = Vec::with_capacity(n_spk);
        for _ in 0..n_spk {
            let id = dec.str()?;
            let n_utt = dec.count(12)?;
            let mut utts = Vec::with_capacity(n_utt);
            for _ in 0..n_utt {
                let uid = dec.str()?;
                let frames = dec.matrix()?;
                let n_t = dec.count(4)?;
                let targets = (0..n_t).map(|_| dec.u32()).collect::<Result<_>>()?;
                utts.push(Utterance::new(uid, frames, targets)?);
            }
            speakers.push(Speaker::new(id, utts)?);
        }
        Dataset::new(speakers, n_classes, feature_dim)
    }
}

/// Speaker id to embedding table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable(pub BTreeMap<String, SpeakerEmbedding>);

impl Artifact for EmbeddingTable {
    const KIND: ArtifactKind = ArtifactKind::Embeddings;

    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.0.len() as u32);
        for (id, e) in &self.0 {
            enc.str(id);
            encode_embedding(enc, e);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let n = dec.count(16)?;
        let mut table = BTreeMap::new();
        for _ in 0..n {
            let id = dec.str()?;
            let e = decode_embedding(dec)?;
            if table.insert(id.clone(), e).is_some() {
                return Err(Error::Format(format!("duplicate embedding for {id}")));
            }
        }
        Ok(EmbeddingTable(table))
    }
}
