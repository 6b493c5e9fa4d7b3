mod common;

use common::*;
use csat_core::clustering::{compute_cluster_embeddings, ward_cluster, Clustering};
use csat_core::corpus::{load_dataset, save_dataset, Dataset};
use csat_core::embedding::{train_ubm, CovarianceType, Embedder, EmbeddingConfig, Gmm, Projection};
use csat_core::network::{Activation, Network, NetworkSpec};
use csat_core::persist::{
    from_bytes, load_artifact, peek_kind, save_artifact, to_bytes, Artifact, ArtifactKind, EmbeddingTable,
};
use csat_core::sat::{build_sat, sat_iteration, SatModel, SatTrainConfig};
use csat_core::Error;

fn round_trip<A: Artifact + PartialEq + std::fmt::Debug>(a: &A) {
    let bytes = to_bytes(a);
    assert_eq!(peek_kind(&bytes).unwrap(), A::KIND);
    assert_eq!(&from_bytes::<A>(&bytes).unwrap(), a);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("artifact.bin");
    save_artifact(a, &path).unwrap();
    assert_eq!(&load_artifact::<A>(&path).unwrap(), a);
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    for cut in [0, 10, 23, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(from_bytes::<A>(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
}

struct Fixture {
    ds: Dataset,
    embedder: Embedder,
    clustering: Clustering,
    embeddings: EmbeddingTable,
}

fn fixture() -> Fixture {
    let (ds, _) = corpus(&separated_config(2, 4, 3));
    let embedder = Embedder::fit(&ds, &EmbeddingConfig::default(), 1).unwrap();
    let embs = embedder.embed_speakers(&ds).unwrap();
    let clustering = compute_cluster_embeddings(ward_cluster(&embs, 2).unwrap(), &ds, &embedder).unwrap();
    Fixture {
        ds,
        embedder,
        clustering,
        embeddings: EmbeddingTable(embs),
    }
}

#[test]
fn every_artifact_kind_round_trips_bit_exactly() {
    let f = fixture();
    round_trip::<Gmm>(&f.embedder.gmm);
    round_trip::<Projection>(&f.embedder.projection);
    round_trip::<Clustering>(&f.clustering);
    round_trip::<Dataset>(&f.ds);
    round_trip::<EmbeddingTable>(&f.embeddings);

    let (frames, _) = f.ds.stacked();
    round_trip::<Gmm>(&train_ubm(&frames, 2, CovarianceType::Full, 5, 0).unwrap());

    for act in [Activation::Relu, Activation::Identity, Activation::Pnorm { p: 2.0, group_size: 4 }] {
        let spec = NetworkSpec::stacked(16, 3, 8, act, 16).unwrap();
        let net = random_network(spec, 2, 0.3);
        round_trip::<Network>(&net);
        let sat = build_sat(&net, 2, 1).unwrap();
        let (sat, _) = sat_iteration(&sat, &f.ds, &f.clustering.assignment(), &SatTrainConfig::default(), 0).unwrap();
        round_trip::<SatModel>(&sat);
    }
}

#[test]
fn header_is_checked() {
    let net = random_network(small_spec(Activation::Relu), 0, 1.0);
    let bytes = to_bytes(&net);
    assert_eq!(&bytes[..8], b"CSATBLOB");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), ArtifactKind::Network as u32);
    assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize, bytes.len() - 24);

    let mut v2 = bytes.clone();
    v2[8] = 2;
    match from_bytes::<Network>(&v2) {
        Err(Error::Format(msg)) => assert!(msg.contains("version 2"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(from_bytes::<Network>(&magic), Err(Error::Format(_))));
    assert!(matches!(from_bytes::<Gmm>(&bytes), Err(Error::Format(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(from_bytes::<Network>(&trailing), Err(Error::Format(_))));
}

#[test]
fn dataset_directory_round_trip() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&f.ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), f.ds);
    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset(empty.path()).is_err());
}

#[test]
fn missing_file_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nope.bin");
    match load_artifact::<Network>(&path) {
        Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("nope.bin")),
        other => panic!("{other:?}"),
    }
}
