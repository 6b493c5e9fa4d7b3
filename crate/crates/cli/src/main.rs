mod settings;
mod tsv;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use csat_core::clustering::{
    cluster_stats, compute_cluster_embeddings, match_cluster, mean_member_embeddings, ward_cluster, Clustering,
};
use csat_core::config::SdLayer;
use csat_core::corpus::{generate_synthetic, holdout_speakers, load_dataset, save_dataset, Dataset};
use csat_core::embedding::{train_ubm, CovarianceType, Embedder, Gmm, Projection};
use csat_core::eval::{compare_si_sat, run_pipeline, run_sweep, scma, EmbeddingSource};
use csat_core::network::{train_si, Network};
use csat_core::persist::{load_artifact, save_artifact, Artifact, EmbeddingTable};
use csat_core::sat::{train_sat, SatModel, SatTrainConfig};

/// Speaker-cluster adaptive training toolkit.
///
/// Every subcommand is deterministic given its inputs and `--seed`. Set
/// CSAT_THREADS to a positive number to enable internal parallelism.
#[derive(Parser)]
#[command(name = "csat", version)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Base configuration preset.
    #[arg(long, global = true, default_value = "desk", value_parser = ["desk", "paper"])]
    preset: String,
    /// TOML file overriding preset values (any subset of keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    ShowConfig,
    /// Generate a synthetic corpus with train/ and test/ splits and truth.tsv.
    GenData(GenData),
    /// Train the GMM background model.
    TrainUbm(TrainUbm),
    /// Extract unit-length speaker embeddings.
    ExtractEmbeddings(ExtractEmbeddings),
    /// Load external unit-norm vectors from a TSV table.
    ImportEmbeddings(ImportEmbeddings),
    /// Ward-cluster speakers from their embeddings.
    Cluster(ClusterCmd),
    /// Minimum, maximum and average cluster size.
    ClusterStats(ClusterStatsCmd),
    /// Train the speaker-independent network.
    TrainSi(TrainSi),
    /// Train a SAT model from an SI network and a clustering.
    TrainSat(TrainSat),
    /// Match speakers to their most similar cluster.
    Match(MatchCmd),
    /// Compare SI and matched SAT models on held-out speakers.
    Evaluate(Evaluate),
    /// Speaker-cluster matching accuracy under k-fold cross-validation.
    Scma(ScmaCmd),
    /// Embed, cluster, train SI and SAT, and evaluate in one go.
    Run(RunCmd),
    /// SAT results over cluster counts and SD-layer positions.
    Sweep(Sweep),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    speakers_per_cluster: Option<usize>,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Speakers per true cluster moved to test/ (0 writes train/ only).
    #[arg(long)]
    holdout: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cov {
    Diagonal,
    Full,
}

#[derive(Args)]
struct TrainUbm {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long, value_enum)]
    covariance: Option<Cov>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct ExtractEmbeddings {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ubm: PathBuf,
    /// Projection artifact; read unless --fit is given.
    #[arg(long)]
    projection: PathBuf,
    /// Fit the projection on --data and write it to --projection.
    #[arg(long)]
    fit: bool,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    relevance: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the vectors as TSV.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct ImportEmbeddings {
    #[arg(long)]
    tsv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Normalize vectors instead of requiring unit length.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

/// Frames, background model and projection used to embed pooled cluster data.
#[derive(Args)]
struct PooledSource {
    #[arg(long, requires_all = ["ubm", "projection"])]
    data: Option<PathBuf>,
    #[arg(long)]
    ubm: Option<PathBuf>,
    #[arg(long)]
    projection: Option<PathBuf>,
    #[arg(long)]
    relevance: Option<f64>,
}

#[derive(Args)]
struct ClusterCmd {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// `speaker_id<TAB>cluster_index` table.
    #[arg(long)]
    tsv: Option<PathBuf>,
    /// Without these, cluster embeddings are the normalized member means.
    #[command(flatten)]
    pooled: PooledSource,
}

#[derive(Args)]
struct ClusterStatsCmd {
    #[arg(long)]
    clustering: PathBuf,
}

#[derive(Args)]
struct TrainSi {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainSat {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    si: PathBuf,
    #[arg(long)]
    clustering: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// first, middle, last or a 0-based layer index.
    #[arg(long)]
    sd_layer: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct MatchCmd {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    clustering: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    si: PathBuf,
    #[arg(long)]
    sat: PathBuf,
    #[arg(long)]
    clustering: PathBuf,
    #[arg(long)]
    ubm: PathBuf,
    #[arg(long)]
    projection: PathBuf,
    #[arg(long)]
    relevance: Option<f64>,
    /// Embed each test speaker from their first utterance only.
    #[arg(long)]
    single_utterance: bool,
    /// TSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScmaCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunCmd {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Directory for artifacts and the TSV report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "first,middle,last")]
    positions: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load<A: Artifact>(path: &Path, flag: &str) -> Result<A> {
    load_artifact(path).with_context(|| format!("--{flag} {}", path.display()))
}

fn save<A: Artifact>(a: &A, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    save_artifact(a, path).with_context(|| format!("writing {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dataset(path: &Path, flag: &str) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("--{flag} {}", path.display()))
}

fn embedder(ubm: &Path, projection: &Path, relevance: f64) -> Result<Embedder> {
    Ok(Embedder {
        gmm: load::<Gmm>(ubm, "ubm")?,
        projection: load::<Projection>(projection, "projection")?,
        relevance,
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = settings::load(&cli.preset, cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::ShowConfig => print!("{}", settings::to_toml(&cfg)?),
        Command::GenData(a) => {
            let s = &mut cfg.synth;
            s.n_clusters_true = a.clusters.unwrap_or(s.n_clusters_true);
            s.speakers_per_cluster = a.speakers_per_cluster.unwrap_or(s.speakers_per_cluster);
            s.utterances_per_speaker = a.utterances.unwrap_or(s.utterances_per_speaker);
            s.frames_per_utterance = a.frames.unwrap_or(s.frames_per_utterance);
            s.feature_dim = a.dim.unwrap_or(s.feature_dim);
            s.n_classes = a.classes.unwrap_or(s.n_classes);
            s.cluster_shift_scale = a.shift.unwrap_or(s.cluster_shift_scale);
            s.noise_scale = a.noise.unwrap_or(s.noise_scale);
            s.seed = seed;
            let holdout = a.holdout.unwrap_or(cfg.holdout_per_cluster);
            let (ds, truth) = generate_synthetic(&cfg.synth)?;
            let (train, test) = if holdout == 0 {
                (ds, None)
            } else {
                let (train, test) = holdout_speakers(&ds, &truth, holdout)
                    .with_context(|| format!("--holdout {holdout}"))?;
                (train, Some(test))
            };
            save_dataset(&train, &a.out.join("train"))?;
            if let Some(test) = test {
                save_dataset(&test, &a.out.join("test"))?;
            }
            let mut t = String::from("speaker_id\tcluster\n");
            for (s, c) in &truth {
                t.push_str(&format!("{s}\t{c}\n"));
            }
            write(&a.out.join("truth.tsv"), &t)?;
            println!("wrote {} training speakers to {}", train.n_speakers(), a.out.display());
        }
        Command::TrainUbm(a) => {
            let ds = dataset(&a.data, "data")?;
            let cov = match a.covariance {
                Some(Cov::Diagonal) => CovarianceType::Diagonal,
                Some(Cov::Full) => CovarianceType::Full,
                None => cfg.embedding.covariance,
            };
            let k = a.components.unwrap_or(cfg.embedding.ubm_components);
            let (frames, _) = ds.stacked();
            let gmm = train_ubm(&frames, k, cov, a.iters.unwrap_or(cfg.embedding.em_iters), seed)?;
            save(&gmm, &a.out)?;
            println!("background model: {k} components, mean log-likelihood {:.6}", gmm.mean_log_likelihood(&frames)?);
        }
        Command::ExtractEmbeddings(a) => {
            let ds = dataset(&a.data, "data")?;
            cfg.embedding.embedding_dim = a.dim.unwrap_or(cfg.embedding.embedding_dim);
            cfg.embedding.relevance = a.relevance.unwrap_or(cfg.embedding.relevance);
            let gmm = load::<Gmm>(&a.ubm, "ubm")?;
            let emb = if a.fit {
                let e = Embedder::fit_projection_for(gmm, &ds, &cfg.embedding)?;
                save(&e.projection, &a.projection)?;
                e
            } else {
                Embedder {
                    gmm,
                    projection: load(&a.projection, "projection")?,
                    relevance: cfg.embedding.relevance,
                }
            };
            let table = emb.embed_speakers(&ds)?;
            if let Some(path) = &a.tsv {
                write(path, &tsv::write_embeddings(&table))?;
            }
            println!("{} embeddings of dimension {}", table.len(), emb.projection.dim());
            save(&EmbeddingTable(table), &a.out)?;
        }
        Command::ImportEmbeddings(a) => {
            let table = tsv::read_embeddings(&a.tsv, a.normalize, a.tolerance)?;
            println!("imported {} embeddings", table.len());
            save(&EmbeddingTable(table), &a.out)?;
        }
        Command::Cluster(a) => {
            let EmbeddingTable(embs) = load(&a.embeddings, "embeddings")?;
            let k = a.k.unwrap_or(cfg.n_clusters);
            let c = ward_cluster(&embs, k).context("--k")?;
            let c = match (&a.pooled.data, &a.pooled.ubm, &a.pooled.projection) {
                (Some(d), Some(u), Some(p)) => {
                    let ds = dataset(d, "data")?;
                    let e = embedder(u, p, a.pooled.relevance.unwrap_or(cfg.embedding.relevance))?;
                    compute_cluster_embeddings(c, &ds, &e)?
                }
                _ => mean_member_embeddings(c, &embs)?,
            };
            if let Some(path) = &a.tsv {
                write(path, &c.to_tsv())?;
            }
            save(&c, &a.out)?;
            print_stats(&c);
        }
        Command::ClusterStats(a) => {
            let c: Clustering = load(&a.clustering, "clustering")?;
            print_stats(&c);
        }
        Command::TrainSi(a) => {
            let ds = dataset(&a.data, "data")?;
            cfg.si.epochs = a.epochs.unwrap_or(cfg.si.epochs);
            let spec = cfg.topology.spec(ds.feature_dim(), ds.n_classes())?;
            let net = train_si(&spec, &ds, &cfg.si, seed)?;
            let m = csat_core::network::evaluate(&net, &ds)?;
            println!("SI training cross-entropy {:.6}, accuracy {:.6}", m.cross_entropy, m.accuracy);
            save(&net, &a.out)?;
        }
        Command::TrainSat(a) => {
            let ds = dataset(&a.data, "data")?;
            let si: Network = load(&a.si, "si")?;
            let c: Clustering = load(&a.clustering, "clustering")?;
            let sd: SdLayer = match &a.sd_layer {
                Some(s) => s.parse().context("--sd-layer")?,
                None => cfg.sd_layer,
            };
            let sat_cfg = SatTrainConfig {
                seed,
                max_iters: a.max_iters.unwrap_or(cfg.sat.max_iters),
                ..cfg.sat.clone()
            };
            let t = train_sat(&si, &ds, &c, sd.index(si.n_layers()), &sat_cfg)?;
            println!("initial objective {:.6}", t.initial_objective);
            for (i, h) in t.history.iter().enumerate() {
                println!("iteration {}: {h:.6}", i + 1);
            }
            save(&t.model, &a.out)?;
        }
        Command::Match(a) => {
            let EmbeddingTable(embs) = load(&a.embeddings, "embeddings")?;
            let c: Clustering = load(&a.clustering, "clustering")?;
            let mut out = String::from("speaker_id\tcluster\n");
            for (id, e) in &embs {
                let m = match_cluster(e, &c).with_context(|| format!("speaker {id}"))?;
                out.push_str(&format!("{id}\t{m}\n"));
            }
            match &a.out {
                Some(p) => write(p, &out)?,
                None => print!("{out}"),
            }
        }
        Command::Evaluate(a) => {
            let test = dataset(&a.test, "test")?;
            let si: Network = load(&a.si, "si")?;
            let sat: SatModel = load(&a.sat, "sat")?;
            let c: Clustering = load(&a.clustering, "clustering")?;
            let e = embedder(&a.ubm, &a.projection, a.relevance.unwrap_or(cfg.embedding.relevance))?;
            let source = if a.single_utterance || cfg.eval.single_utterance {
                EmbeddingSource::FirstUtterance
            } else {
                EmbeddingSource::AllUtterances
            };
            let report = compare_si_sat(&si, &sat, &c, &test, &e, source)?;
            print!("{}", report.to_text());
            if let Some(p) = &a.out {
                write(p, &report.to_tsv())?;
            }
        }
        Command::Scma(a) => {
            let ds = dataset(&a.data, "data")?;
            let folds = a.folds.unwrap_or(cfg.eval.scma_folds);
            let k = a.k.unwrap_or(cfg.n_clusters);
            let r = scma(&ds, folds, k, &cfg.embedding, seed)?;
            print!("{}", r.to_text());
            if let Some(p) = &a.out {
                write(p, &r.to_tsv())?;
            }
        }
        Command::Run(a) => {
            let train = dataset(&a.train, "train")?;
            let test = dataset(&a.test, "test")?;
            cfg.n_clusters = a.k.unwrap_or(cfg.n_clusters);
            let out = run_pipeline(&train, &test, &cfg, seed)?;
            save(&out.embedder.gmm, &a.out.join("ubm.bin"))?;
            save(&out.embedder.projection, &a.out.join("projection.bin"))?;
            save(&out.clustering, &a.out.join("clustering.bin"))?;
            write(&a.out.join("clusters.tsv"), &out.clustering.to_tsv())?;
            save(&out.si, &a.out.join("si.bin"))?;
            save(&out.sat.model, &a.out.join("sat.bin"))?;
            write(&a.out.join("report.tsv"), &out.report.to_tsv())?;
            print!("{}", out.report.to_text());
        }
        Command::Sweep(a) => {
            let train = dataset(&a.train, "train")?;
            let test = dataset(&a.test, "test")?;
            let positions = a
                .positions
                .iter()
                .map(|p| p.parse::<SdLayer>().with_context(|| format!("--positions {p}")))
                .collect::<Result<Vec<_>>>()?;
            if a.ks.is_empty() || positions.is_empty() {
                bail!("--ks and --positions must be nonempty");
            }
            let r = run_sweep(&train, &test, &cfg, &a.ks, &positions, seed)?;
            print!("{}", r.to_text());
            if let Some(p) = &a.out {
                write(p, &r.to_tsv())?;
            }
        }
    }
    Ok(())
}

fn print_stats(c: &Clustering) {
    let s = cluster_stats(c);
    let sizes: BTreeMap<usize, usize> = c.sizes().into_iter().enumerate().collect();
    println!(
        "k = {}, speakers = {}, min = {}, max = {}, avg = {:.1}",
        c.k(),
        c.speakers().len(),
        s.min_size,
        s.max_size,
        s.avg_size
    );
    for (i, n) in sizes {
        println!("cluster {i}: {n}");
    }
}
