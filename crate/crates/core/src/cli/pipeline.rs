//! The batch stages and the artifacts they read and write.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, PipelineConfig, SplitChoice};
use crate::corpus::{
    build_stats, build_vocabulary, split_dataset, Caption, CorpusError, CorpusStats, Dataset, DatasetEntry, Split,
    StatsConfig, Vocabulary, UNK_WORD,
};
use crate::decoder::{beam_search, m_best, BeamConfig};
use crate::dmsm::{train_dmsm, DmsmConfig, DmsmError, DmsmModel, DmsmPair, DmsmTrainConfig};
use crate::melm::{
    detection_tokens, perplexity, prepare_sentences, train_nce, FeatureConfig, LmState, MelmConfig, MelmError,
    MelmModel,
};
use crate::metrics::{EvalReport, MetricsError};
use crate::mil::{calibrate, detect_words, train_mil, DetectedWordSet, MilArtifact, MilConfig, MilError, RegionBag};
use crate::rerank::{
    mert_optimize, rerank, sentence_features, MertConfig, MertImage, MertWeights, RerankError, DMSM_INDEX,
    NUM_FEATURES,
};
use crate::util::{fnv64, indexed_substream};

pub const SPLIT: &str = "split.json";
pub const VOCAB: &str = "vocab.json";
pub const STATS: &str = "stats.json";
pub const MIL: &str = "mil.json";
pub const DETECTIONS: &str = "detections.jsonl";
pub const LM: &str = "lm.json";
pub const DMSM: &str = "dmsm.json";
pub const MBEST: &str = "mbest.jsonl";
pub const MERT: &str = "mert.json";
pub const CAPTIONS: &str = "captions.tsv";
pub const REPORT: &str = "report.txt";
pub const PER_IMAGE: &str = "per_image.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Split the dataset and build the vocabulary and corpus statistics.
    Prepare,
    /// Train and calibrate the word detectors.
    TrainMil,
    /// Run the detectors on every image.
    Detect,
    /// Train the language model on training captions and their detections.
    TrainLm,
    /// Train the image/text similarity model.
    TrainDmsm,
    /// Beam-search M-best lists for the validation images.
    Decode,
    /// Tune the re-ranking weights on the validation M-best lists.
    Mert,
    /// Detect, decode and re-rank end to end.
    Caption,
    /// Score the captions against the references.
    Evaluate,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("unreadable artifact {}: {msg}", .path.display())]
    BadArtifact { path: PathBuf, msg: String },
    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl PipelineError {
    /// 1 usage/config, 2 data or artifact, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<MilError> for PipelineError {
    fn from(e: MilError) -> Self {
        match e {
            MilError::Diverged { .. } | MilError::NonFinite => PipelineError::Numeric(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<MelmError> for PipelineError {
    fn from(e: MelmError) -> Self {
        match e {
            MelmError::NonFinite | MelmError::NonFiniteUpdate(_) | MelmError::ZeroProbability => {
                PipelineError::Numeric(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<DmsmError> for PipelineError {
    fn from(e: DmsmError) -> Self {
        match e {
            DmsmError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<RerankError> for PipelineError {
    fn from(e: RerankError) -> Self {
        match e {
            RerankError::NonFinite(_) => PipelineError::Numeric(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitFile {
    version: u32,
    seed: u64,
    ratios: [f64; 3],
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

/// One decoded sentence of an M-best list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub words: Vec<String>,
    pub log_score: f64,
    pub coverage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MBestRecord {
    pub image_id: String,
    pub achieved_t: usize,
    pub candidates: Vec<Candidate>,
}

/// Artifact locations for one config.
struct Paths<'a>(&'a PipelineConfig);

impl Paths<'_> {
    fn model(&self, name: &str) -> PathBuf {
        self.0.model_dir.join(name)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.0.report_dir.join(name)
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact(path.to_path_buf()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    require(path)?;
    fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| PipelineError::BadArtifact { path: path.to_path_buf(), msg: e.to_string() })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::BadArtifact { path: path.to_path_buf(), msg: format!("record {}: {e}", i + 1) })
        })
        .collect()
}

/// Writes through a temporary file so readers never see a partial artifact.
fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec(value).expect("artifacts serialize");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend(serde_json::to_vec(v).expect("artifacts serialize"));
        bytes.push(b'\n');
    }
    write_bytes(path, &bytes)
}

fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    require(&cfg.dataset)?;
    Ok(Dataset::load(&cfg.dataset)?)
}

/// Loads the dataset with the split recorded by `prepare`.
fn load_split_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let path = Paths(cfg).model(SPLIT);
    let split: SplitFile = read_json(&path)?;
    let mut ds = load_dataset(cfg)?;
    let mut by_id: HashMap<&str, Split> = HashMap::new();
    for (ids, s) in [(&split.train, Split::Train), (&split.val, Split::Val), (&split.test, Split::Test)] {
        for id in ids {
            by_id.insert(id, s);
        }
    }
    if by_id.len() != ds.len() {
        return Err(PipelineError::BadArtifact {
            path,
            msg: format!("split lists {} images, dataset has {}", by_id.len(), ds.len()),
        });
    }
    for (i, e) in ds.entries.iter().enumerate() {
        ds.split[i] = *by_id.get(e.image_id.as_str()).ok_or_else(|| PipelineError::BadArtifact {
            path: path.clone(),
            msg: format!("image {} is not in the split", e.image_id),
        })?;
    }
    Ok(ds)
}

fn load_vocab(cfg: &PipelineConfig) -> Result<Vocabulary> {
    read_json(&Paths(cfg).model(VOCAB))
}

fn load_stats(cfg: &PipelineConfig) -> Result<CorpusStats> {
    read_json(&Paths(cfg).model(STATS))
}

fn load_mil(cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<MilArtifact> {
    let mil: MilArtifact = read_json(&Paths(cfg).model(MIL))?;
    mil.check_vocabulary(vocab)?;
    Ok(mil)
}

fn load_lm(cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<MelmModel> {
    let lm: MelmModel = read_json(&Paths(cfg).model(LM))?;
    lm.check_vocabulary(vocab)?;
    Ok(lm)
}

fn load_dmsm(cfg: &PipelineConfig) -> Result<Option<DmsmModel>> {
    if cfg.use_dmsm {
        Ok(Some(read_json(&Paths(cfg).model(DMSM))?))
    } else {
        Ok(None)
    }
}

fn load_detections(cfg: &PipelineConfig) -> Result<HashMap<String, DetectedWordSet>> {
    let sets: Vec<DetectedWordSet> = read_jsonl(&Paths(cfg).model(DETECTIONS))?;
    Ok(sets.into_iter().map(|d| (d.image_id.clone(), d)).collect())
}

fn entries_in(ds: &Dataset, split: Split) -> Vec<&DatasetEntry> {
    ds.indices(split).into_iter().map(|i| &ds.entries[i]).collect()
}

fn nonempty<'a>(entries: Vec<&'a DatasetEntry>, what: &str) -> Result<Vec<&'a DatasetEntry>> {
    if entries.is_empty() {
        Err(PipelineError::Data(format!("the {what} split is empty")))
    } else {
        Ok(entries)
    }
}

/// Up to `k` reference captions, chosen per image from the seed.
pub fn references(entry: &DatasetEntry, k: usize, seed: u64) -> Vec<Vec<String>> {
    let n = entry.captions.len();
    if n <= k {
        return entry.captions.iter().map(|c| c.tokens.clone()).collect();
    }
    let mut rng = indexed_substream(seed, "references", fnv64(entry.image_id.as_bytes()));
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| entry.captions[i].tokens.clone()).collect()
}

fn beam_config(cfg: &PipelineConfig) -> BeamConfig {
    BeamConfig { beam_width: cfg.beam_width, max_len: cfg.max_len, m_best: cfg.m_best, t_cap: cfg.t_cap, scoring: cfg.scoring }
}

/// M-best list for one image; sentences without words are dropped since
/// they cannot be scored by the re-ranker.
fn decode_one(lm: &MelmModel, stats: &CorpusStats, vocab: &Vocabulary, beam: &BeamConfig, det: &DetectedWordSet, image_id: &str) -> MBestRecord {
    let init = LmState::new(&detection_tokens(vocab, det, lm.config.score_source));
    let t_init = init.remaining().len().min(beam.t_cap);
    let completed = beam_search(init, lm, stats, beam);
    let list = m_best(&completed, beam.m_best, t_init);
    let candidates = list
        .entries
        .iter()
        .filter(|h| !h.words().is_empty())
        .map(|h| Candidate { words: vocab.decode(h.words()), log_score: h.log_score, coverage: h.coverage() })
        .collect();
    MBestRecord { image_id: image_id.to_string(), achieved_t: list.achieved_t, candidates }
}

fn candidate_features(rec: &MBestRecord, dmsm: Option<&DmsmModel>, entry: &DatasetEntry) -> Result<Vec<[f64; NUM_FEATURES]>> {
    let image = match dmsm {
        Some(_) => Some(entry.image_feature.as_deref().ok_or_else(|| {
            PipelineError::Data(format!("image {} has no image_feature for the similarity model", entry.image_id))
        })?),
        None => None,
    };
    rec.candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let sim = match (dmsm, image) {
                (Some(m), Some(f)) => m.score(f, &c.words)?,
                _ => 0.0,
            };
            Ok(sentence_features(c.log_score, c.words.len(), c.coverage, i + 1, sim)?.to_vector())
        })
        .collect()
}

/// Runs one stage.
pub fn run(command: Command, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    match command {
        Command::Prepare => prepare(cfg),
        Command::TrainMil => train_mil_stage(cfg),
        Command::Detect => detect(cfg),
        Command::TrainLm => train_lm(cfg),
        Command::TrainDmsm => train_dmsm_stage(cfg),
        Command::Decode => decode(cfg),
        Command::Mert => mert(cfg),
        Command::Caption => caption(cfg),
        Command::Evaluate => evaluate(cfg),
    }
}

fn prepare(cfg: &PipelineConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let ds = split_dataset(load_dataset(cfg)?, cfg.split_ratios, seed)?;
    let ids = |s: Split| ds.indices(s).into_iter().map(|i| ds.entries[i].image_id.clone()).collect::<Vec<_>>();
    let split = SplitFile {
        version: 1,
        seed,
        ratios: cfg.split_ratios,
        train: ids(Split::Train),
        val: ids(Split::Val),
        test: ids(Split::Test),
    };
    let train: Vec<Caption> = ds.captions(Split::Train);
    if train.is_empty() {
        return Err(PipelineError::Data("the train split is empty".into()));
    }
    let mut vocab = build_vocabulary(&train, cfg.vocab_size)?;
    if vocab.coverage() < 1.0 {
        vocab = vocab.with_unk();
    }
    let stats = build_stats(&train, &vocab, &StatsConfig { frequent_words: cfg.frequent_words, closed_class: cfg.closed_class });
    let p = Paths(cfg);
    write_json(&p.model(SPLIT), &split)?;
    write_json(&p.model(VOCAB), &vocab)?;
    write_json(&p.model(STATS), &stats)?;
    eprintln!(
        "prepare: {}/{}/{} images, {} words covering {:.1}% of training tokens",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        vocab.len(),
        100.0 * vocab.coverage()
    );
    Ok(())
}

fn train_mil_stage(cfg: &PipelineConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let ds = load_split_dataset(cfg)?;
    let vocab = load_vocab(cfg)?;
    let bags: Vec<RegionBag> = nonempty(entries_in(&ds, Split::Train), "train")?.into_iter().map(|e| RegionBag::from_entry(e, &vocab)).collect();
    let heldout: Vec<RegionBag> = nonempty(entries_in(&ds, Split::Val), "val")?.into_iter().map(|e| RegionBag::from_entry(e, &vocab)).collect();
    let config = MilConfig { learning_rate: cfg.mil_learning_rate, epochs: cfg.mil_epochs, tau: cfg.mil_tau, seed };
    let (model, report) = train_mil(&bags, &vocab, &config)?;
    let calibration = calibrate(&model, &heldout, cfg.mil_tau)?;
    write_json(&Paths(cfg).model(MIL), &MilArtifact::new(model, calibration))?;
    eprintln!("train-mil: {} detectors, {} skipped", vocab.len() - report.skipped.len(), report.skipped.len());
    Ok(())
}

fn detect(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let vocab = load_vocab(cfg)?;
    let stats = load_stats(cfg)?;
    let mil = load_mil(cfg, &vocab)?;
    let sets = ds
        .entries
        .par_iter()
        .map(|e| detect_words(&mil.model, &mil.calibration, &RegionBag::from_entry(e, &vocab), &stats))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_jsonl(&Paths(cfg).model(DETECTIONS), &sets)?;
    let mean = sets.iter().map(|s| s.entries.len()).sum::<usize>() as f64 / sets.len().max(1) as f64;
    eprintln!("detect: {} images, {mean:.2} words per image", sets.len());
    Ok(())
}

fn detections_for<'a>(dets: &'a HashMap<String, DetectedWordSet>, id: &str, cfg: &PipelineConfig) -> Result<&'a DetectedWordSet> {
    dets.get(id).ok_or_else(|| PipelineError::BadArtifact {
        path: Paths(cfg).model(DETECTIONS),
        msg: format!("no detections for image {id}"),
    })
}

fn train_lm(cfg: &PipelineConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let ds = load_split_dataset(cfg)?;
    let vocab = load_vocab(cfg)?;
    let dets = load_detections(cfg)?;
    let mut data = Vec::new();
    for e in nonempty(entries_in(&ds, Split::Train), "train")? {
        let d = detections_for(&dets, &e.image_id, cfg)?;
        data.extend(e.captions.iter().map(|c| (c.clone(), d.clone())));
    }
    let config = MelmConfig {
        hash_bits: cfg.lm_hash_bits,
        features: FeatureConfig { n_max: cfg.lm_n_max, use_score: cfg.use_score_feature, ..Default::default() },
        nce_samples: cfg.lm_nce_samples,
        learning_rate: cfg.lm_learning_rate,
        epochs: cfg.lm_epochs,
        score_source: cfg.score_source,
        seed,
    };
    let sentences = prepare_sentences(&vocab, &data, cfg.score_source)?;
    let (model, report) = train_nce(&MelmModel::new(&vocab, config)?, &sentences)?;
    write_json(&Paths(cfg).model(LM), &model)?;
    eprintln!(
        "train-lm: {} sentences, final objective {:.4}, {} features in {} slots (collision rate {:.4})",
        sentences.len(),
        report.objective.last().copied().unwrap_or(f64::NAN),
        report.distinct_features,
        report.distinct_slots,
        report.collision_rate
    );
    Ok(())
}

fn train_dmsm_stage(cfg: &PipelineConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let ds = load_split_dataset(cfg)?;
    let vocab = load_vocab(cfg)?;
    let image_dim = ds.image_dim.ok_or_else(|| PipelineError::Data("the dataset has no image features".into()))?;
    let mut pairs = Vec::new();
    for (i, e) in ds.entries.iter().enumerate().filter(|(i, _)| ds.split[*i] == Split::Train) {
        let image = e.image_feature.clone().ok_or_else(|| PipelineError::Data(format!("image {} has no image_feature", e.image_id)))?;
        pairs.extend(e.captions.iter().map(|c| DmsmPair { group: i, image: image.clone(), caption: c.tokens.clone() }));
    }
    let config = DmsmConfig {
        d_sem: cfg.dmsm_d_sem,
        conv_channels: cfg.dmsm_conv_channels,
        text_hidden: cfg.dmsm_text_hidden,
        image_hidden: cfg.dmsm_image_hidden,
        gamma: cfg.dmsm_gamma,
        negatives: cfg.dmsm_negatives,
        overflow_buckets: cfg.dmsm_overflow_buckets,
        seed,
    };
    let words = vocab.words().iter().map(String::as_str).filter(|w| *w != UNK_WORD);
    let model = DmsmModel::new(&config, image_dim, words)?;
    let train = DmsmTrainConfig { learning_rate: cfg.dmsm_learning_rate, epochs: cfg.dmsm_epochs, seed };
    let (model, report) = train_dmsm(&model, &pairs, &train)?;
    write_json(&Paths(cfg).model(DMSM), &model)?;
    eprintln!("train-dmsm: {} pairs, final loss {:.4}", pairs.len(), report.loss.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn decode(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_split_dataset(cfg)?;
    let vocab = load_vocab(cfg)?;
    let stats = load_stats(cfg)?;
    let lm = load_lm(cfg, &vocab)?;
    let dets = load_detections(cfg)?;
    let beam = beam_config(cfg);
    let val = nonempty(entries_in(&ds, Split::Val), "val")?;
    let jobs = val.iter().map(|e| Ok((e, detections_for(&dets, &e.image_id, cfg)?))).collect::<Result<Vec<_>>>()?;
    let records: Vec<MBestRecord> = jobs.par_iter().map(|(e, d)| decode_one(&lm, &stats, &vocab, &beam, d, &e.image_id)).collect();
    write_jsonl(&Paths(cfg).model(MBEST), &records)?;
    let mean = records.iter().map(|r| r.candidates.len()).sum::<usize>() as f64 / records.len() as f64;
    eprintln!("decode: {} images, {mean:.1} candidates per list", records.len());
    Ok(())
}

fn mert(cfg: &PipelineConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let ds = load_dataset(cfg)?;
    let records: Vec<MBestRecord> = read_jsonl(&Paths(cfg).model(MBEST))?;
    let dmsm = load_dmsm(cfg)?;
    let mut images = Vec::new();
    for rec in records.iter().filter(|r| !r.candidates.is_empty()) {
        let e = ds
            .position(&rec.image_id)
            .map(|i| &ds.entries[i])
            .ok_or_else(|| PipelineError::Data(format!("M-best image {} is not in the dataset", rec.image_id)))?;
        let feats = candidate_features(rec, dmsm.as_ref(), e)?;
        let sentences: Vec<&Vec<String>> = rec.candidates.iter().map(|c| &c.words).collect();
        let sentences: Vec<Vec<&str>> = sentences.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
        images.push(MertImage::new(feats, &sentences, &references(e, cfg.references, seed)));
    }
    if images.is_empty() {
        return Err(PipelineError::Data("no non-empty M-best lists to tune on".into()));
    }
    let config = MertConfig { restarts: cfg.mert_restarts, seed, ..Default::default() };
    let (mut weights, report) = mert_optimize(&images, &MertWeights::baseline(), &config)?;
    if !cfg.use_dmsm {
        weights.0[DMSM_INDEX] = 0.0;
    }
    write_json(&Paths(cfg).model(MERT), &weights)?;
    eprintln!("mert: {} lists, BLEU-4 {:.4} -> {:.4}", images.len(), report.initial_bleu, report.final_bleu);
    Ok(())
}

fn caption(cfg: &PipelineConfig) -> Result<()> {
    let ds = load_split_dataset(cfg)?;
    let vocab = load_vocab(cfg)?;
    let stats = load_stats(cfg)?;
    let mil = load_mil(cfg, &vocab)?;
    let lm = load_lm(cfg, &vocab)?;
    let mut weights: MertWeights = read_json(&Paths(cfg).model(MERT))?;
    let dmsm = load_dmsm(cfg)?;
    if dmsm.is_none() {
        weights.0[DMSM_INDEX] = 0.0;
    }
    let beam = beam_config(cfg);
    let selected: Vec<&DatasetEntry> = match cfg.caption_split {
        SplitChoice::All => ds.entries.iter().collect(),
        SplitChoice::Train => entries_in(&ds, Split::Train),
        SplitChoice::Val => entries_in(&ds, Split::Val),
        SplitChoice::Test => entries_in(&ds, Split::Test),
    };
    let lines = selected
        .par_iter()
        .map(|e| {
            let det = detect_words(&mil.model, &mil.calibration, &RegionBag::from_entry(e, &vocab), &stats)?;
            let rec = decode_one(&lm, &stats, &vocab, &beam, &det, &e.image_id);
            let text = if rec.candidates.is_empty() {
                String::new()
            } else {
                let feats = candidate_features(&rec, dmsm.as_ref(), e)?;
                rec.candidates[rerank(&feats, &weights)?].words.join(" ")
            };
            Ok(format!("{}\t{}\n", e.image_id, text))
        })
        .collect::<Result<Vec<String>>>()?;
    let empty = lines.iter().filter(|l| l.ends_with("\t\n")).count();
    write_bytes(&Paths(cfg).report(CAPTIONS), lines.concat().as_bytes())?;
    eprintln!("caption: {} images{}", lines.len(), if empty > 0 { format!(", {empty} without a sentence") } else { String::new() });
    Ok(())
}

/// Perplexity of the test captions when the LM and detections exist.
fn test_perplexity(cfg: &PipelineConfig) -> Result<Option<f64>> {
    let p = Paths(cfg);
    if ![p.model(SPLIT), p.model(VOCAB), p.model(LM), p.model(DETECTIONS)].iter().all(|f| f.exists()) {
        return Ok(None);
    }
    let ds = load_split_dataset(cfg)?;
    let vocab = load_vocab(cfg)?;
    let lm = load_lm(cfg, &vocab)?;
    let dets = load_detections(cfg)?;
    let mut data = Vec::new();
    for e in entries_in(&ds, Split::Test) {
        let d = detections_for(&dets, &e.image_id, cfg)?;
        // without an UNK entry, captions with unseen words cannot be scored
        data.extend(e.captions.iter().filter(|c| c.tokens.iter().all(|w| vocab.map_token(w).is_some())).map(|c| (c.clone(), d.clone())));
    }
    if data.is_empty() {
        return Ok(None);
    }
    let sentences = prepare_sentences(&vocab, &data, lm.config.score_source)?;
    Ok(Some(perplexity(&lm, &sentences)?))
}

fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let p = Paths(cfg);
    let ds = load_dataset(cfg)?;
    let text = read_text(&p.report(CAPTIONS))?;
    let (mut ids, mut hyps, mut refs) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let (id, sentence) = line.split_once('\t').ok_or_else(|| PipelineError::BadArtifact {
            path: p.report(CAPTIONS),
            msg: format!("line {}: expected image_id<TAB>caption", n + 1),
        })?;
        let e = ds
            .position(id)
            .map(|i| &ds.entries[i])
            .ok_or_else(|| PipelineError::Data(format!("captioned image {id} is not in the dataset")))?;
        ids.push(id.to_string());
        hyps.push(crate::corpus::tokenize(sentence));
        refs.push(references(e, cfg.references, seed));
    }
    let report = EvalReport::compute(&ids, &hyps, &refs, test_perplexity(cfg)?)?;
    write_bytes(&p.report(REPORT), report.to_text().as_bytes())?;
    write_bytes(&p.report(PER_IMAGE), report.per_image_table().as_bytes())?;
    print!("{}", report.to_text());
    Ok(())
}

/// Parses `captions.tsv` into `(image_id, caption)` pairs.
pub fn read_captions(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(read_text(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l.split_once('\t').unwrap_or((l, ""));
            (a.to_string(), b.to_string())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config(ConfigError::Missing("seed")).exit_code(), 1);
        assert_eq!(PipelineError::MissingArtifact("lm.json".into()).exit_code(), 2);
        assert_eq!(PipelineError::Numeric("x".into()).exit_code(), 3);
        assert_eq!(PipelineError::from(MilError::Diverged { word: "a".into(), step: 1 }).exit_code(), 3);
    }

    #[test]
    fn reference_choice_is_stable() {
        let caps: Vec<Caption> = (0..6).map(|i| Caption::new("x", format!("w{i} a")).unwrap()).collect();
        let e = DatasetEntry { image_id: "x".into(), captions: caps, regions: vec![vec![0.0]], image_feature: None };
        let a = references(&e, 4, 1);
        assert_eq!(a.len(), 4);
        assert_eq!(a, references(&e, 4, 1));
        assert_eq!(references(&e, 10, 1).len(), 6);
    }
}
