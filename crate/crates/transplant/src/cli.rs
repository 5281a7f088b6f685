//! Run configuration and the commands behind the `transplant` binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use transplant_core::surgery::{default_extraction_start, extract, integrate, IntegrationPlan, Strategy, DEFAULT_ORGAN_SIZE};
use transplant_core::{mean_loss, perplexity, train, EvalReport, FreezeMask, ModelConfig, TrainConfig, TransformerModel};

use crate::checkpoint::{
    file_digest, load_checkpoint, load_model, read_checkpoint, save_checkpoint, save_model, TrainingMeta,
};
use crate::corpus::{self, ingest, make_cross_domain_pair, CorpusSpec, Domain, SplitSizes, Splits};
use crate::error::{Error, Result};
use crate::harness::{
    self, cross_domain_experiment, integration_comparison, method_comparison_figure, multi_organ_experiment,
    multi_organ_figure, position_figure, position_sweep, run_method_comparison, train_donor_organ, transplant_pipeline,
    BaselineSettings, Bundle, DonorRun, Harness, Method, RecoveryConfig,
};
use crate::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Pretrain,
    Extract,
    TrainDonor,
    Transplant,
    Evaluate,
    SweepPositions,
    MultiOrgan,
    CompareMethods,
    CrossDomain,
    FullStudy,
}

/// Knobs of the individual protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub organ_size: usize,
    /// Defaults to a third of the depth.
    pub extraction_start: Option<usize>,
    /// Insertion point for transplant, method comparison and cross-domain.
    pub position: usize,
    pub strategy: Strategy,
    pub sweep_positions: Vec<usize>,
    pub multi_organ_positions: Vec<usize>,
    pub methods: Vec<Method>,
    pub baselines: BaselineSettings,
    pub recovery: RecoveryConfig,
    /// Training-set sizes of the direct-vs-bridge study; empty means half
    /// and all of the training split.
    pub data_sizes: Vec<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            organ_size: DEFAULT_ORGAN_SIZE,
            extraction_start: None,
            position: 1,
            strategy: Strategy::DirectReplacement,
            sweep_positions: vec![1, 4, 7, 9],
            multi_organ_positions: vec![1, 7],
            methods: Method::ALL.to_vec(),
            baselines: BaselineSettings::default(),
            recovery: RecoveryConfig::default(),
            data_sizes: Vec::new(),
        }
    }
}

/// Input files; unset ones default to names inside `out_dir`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub base_model: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run depends on. `seed` overrides the seeds inside `train`
/// and `pretrain` and initializes the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    /// Corpus for pretraining the base; `corpus` when absent.
    pub pretrain_corpus: Option<CorpusSpec>,
    pub corpus: CorpusSpec,
    pub cross_domain_corpus: Option<CorpusSpec>,
    pub experiment: Option<Experiment>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Record wall-clock seconds. Timed reports are not byte-reproducible.
    pub timing: bool,
    pub jobs: usize,
    pub study: StudyConfig,
    pub paths: Paths,
}

fn splits(train: usize, val: usize, test: usize, cross_domain: usize) -> SplitSizes {
    SplitSizes {
        train,
        val,
        test,
        cross_domain,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 3,
            max_seq_len: 64,
            seed: 42,
            ..TrainConfig::default()
        };
        Self {
            model: ModelConfig {
                num_layers: 12,
                hidden_dim: 128,
                num_heads: 4,
                ffn_dim: 512,
                vocab_size: corpus::VOCAB_SIZE,
                max_seq_len: 64,
                layernorm_eps: 1e-5,
                tied_head: true,
            },
            train,
            pretrain: TrainConfig {
                learning_rate: 2e-3,
                epochs: 4,
                ..train
            },
            pretrain_corpus: Some(CorpusSpec::synthetic(Domain::General, 1400, splits(1200, 100, 100, 0), 64, 1)),
            corpus: CorpusSpec::synthetic(Domain::Medical, 1400, splits(1000, 100, 100, 100), 64, 2),
            cross_domain_corpus: Some(CorpusSpec::synthetic(Domain::Code, 400, splits(0, 0, 0, 0), 64, 3)),
            experiment: None,
            out_dir: PathBuf::from("runs"),
            seed: 42,
            timing: false,
            jobs: 1,
            study: StudyConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("config {}: {e}", path.display())))
    }

    /// Propagates `seed` into the training configs and checks them.
    pub fn resolved(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.jobs = self.jobs.max(1);
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        if self.model.vocab_size < corpus::VOCAB_SIZE {
            return Err(Error::Input(format!(
                "model vocab_size {} is below the byte-level vocabulary of {}",
                self.model.vocab_size,
                corpus::VOCAB_SIZE
            )));
        }
        Ok(self)
    }

    pub fn harness(&self) -> Harness {
        Harness {
            train: self.train,
            recovery: self.study.recovery,
            timed: self.timing,
            jobs: self.jobs,
        }
    }

    pub fn bundle(&self) -> Bundle {
        Bundle::new(&self.out_dir, self.seed)
    }

    pub fn base_model_path(&self) -> PathBuf {
        self.paths.base_model.clone().unwrap_or_else(|| self.out_dir.join("base.notc"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("donor.notc"))
    }

    fn extraction_start(&self) -> usize {
        self.study
            .extraction_start
            .unwrap_or_else(|| default_extraction_start(self.model.num_layers))
    }

    /// Writes the effective config next to the outputs.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.out_dir.join("run_config.json");
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

fn corpus_id(spec: &CorpusSpec) -> String {
    serde_json::to_string(&spec.sources).unwrap_or_default()
}

/// Trains a base model from scratch on the pretraining corpus and saves it.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(TransformerModel, EvalReport)> {
    let spec = cfg.pretrain_corpus.as_ref().unwrap_or(&cfg.corpus);
    let data = ingest(spec)?;
    let mut model = TransformerModel::new(cfg.model, cfg.seed)?;
    let mask = FreezeMask::all_trainable(&model);
    let h = cfg.harness();
    let clock = crate::clock::WallClock::new();
    let clock: &dyn transplant_core::Clock = if h.timed { &clock } else { &transplant_core::NoClock };
    let report = train(&mut model, &data.train, &cfg.pretrain, &mask, clock)?;
    let ppl = perplexity(&model, &data.val)?;
    let mut r = EvalReport::trained("pretrain", ppl, model.config, &cfg.pretrain, &report, h.timed);
    r.metrics.insert("uniform_ppl".into(), model.config.vocab_size as f64);
    save_model(&model, &format!("base pretrained on {}", corpus_id(spec)), &cfg.base_model_path())?;
    cfg.bundle().write_json("pretrain", &r)?;
    Ok((model, r))
}

fn load_base(cfg: &RunConfig) -> Result<TransformerModel> {
    Ok(load_model(&cfg.base_model_path())?.0)
}

/// Saves the untrained layers `start..start + count` of the base model.
pub fn cmd_extract(cfg: &RunConfig, start: usize, count: usize) -> Result<PathBuf> {
    let base = load_base(cfg)?;
    let organ = extract(&base, start, count)?;
    let path = cfg.checkpoint_path();
    save_checkpoint(&organ, &cfg.base_model_path().display().to_string(), &TrainingMeta::default(), &path)?;
    Ok(path)
}

fn donor_meta(cfg: &RunConfig, donor: &DonorRun) -> TrainingMeta {
    let loss = donor.report.final_loss();
    TrainingMeta {
        dataset: corpus_id(&cfg.corpus),
        train_config: Some(cfg.train),
        final_loss: loss,
        final_ppl: loss.map(f64::exp),
    }
}

/// Trains the default organ of the base model on the task corpus and saves
/// the checkpoint.
pub fn cmd_train_donor(cfg: &RunConfig) -> Result<DonorRun> {
    let base = load_base(cfg)?;
    let data = ingest(&cfg.corpus)?;
    let donor = train_donor_organ(&base, cfg.extraction_start(), cfg.study.organ_size, &data.train, &cfg.harness())?;
    save_checkpoint(
        &donor.organ,
        &cfg.base_model_path().display().to_string(),
        &donor_meta(cfg, &donor),
        &cfg.checkpoint_path(),
    )?;
    let mut r = EvalReport::trained("train_donor", f64::NAN, base.config, &cfg.train, &donor.report, cfg.timing);
    r.ppl = donor.report.final_loss().map_or(f64::NAN, f64::exp);
    r.notes.push("ppl is exp(final training loss) of the wrapper".into());
    cfg.bundle().write_json("train_donor", &r)?;
    Ok(donor)
}

/// Provenance wrapper around a transplant report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransplantReport {
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
    pub signature_digest: String,
    pub recipient: PathBuf,
    pub position: usize,
    pub strategy: Strategy,
    pub report: EvalReport,
}

/// Load → validate → integrate → recover → evaluate, then writes the model
/// and `transplant_{seed}.json`.
pub fn cmd_transplant(cfg: &RunConfig, position: usize, strategy: Strategy) -> Result<TransplantReport> {
    let recipient = load_base(cfg)?;
    let ckpt = cfg.checkpoint_path();
    let (organ, meta) = load_checkpoint(&ckpt, &recipient)?;
    let data = ingest(&cfg.corpus)?;
    let plan = IntegrationPlan::single(strategy, position);
    let run = transplant_pipeline(&recipient, &[&organ], &plan, &data, &cfg.harness(), "transplant")?;
    save_model(&run.transplant.model, "transplanted", &cfg.out_dir.join("transplanted.notc"))?;
    let out = TransplantReport {
        checkpoint_digest: file_digest(&ckpt)?,
        checkpoint: ckpt,
        signature_digest: meta.signature.digest,
        recipient: cfg.base_model_path(),
        position,
        strategy,
        report: run.report,
    };
    cfg.bundle().write_json("transplant", &out)?;
    Ok(out)
}

/// Validation and test PPL of a saved model.
pub fn cmd_evaluate(cfg: &RunConfig, model_path: &Path) -> Result<EvalReport> {
    let (model, _) = load_model(model_path)?;
    let data = ingest(&cfg.corpus)?;
    let ppl = perplexity(&model, &data.test)?;
    let mut r = EvalReport::evaluation("evaluate", ppl, model.config, model.num_params(), cfg.seed);
    r.metrics.insert("val_ppl".into(), perplexity(&model, &data.val)?);
    r.metrics.insert("test_loss".into(), mean_loss(&model, &data.test)?);
    cfg.bundle().write_json("evaluate", &r)?;
    Ok(r)
}

pub fn cmd_sweep_positions(cfg: &RunConfig) -> Result<EvalReport> {
    let base = load_base(cfg)?;
    let (organ, _) = load_checkpoint(&cfg.checkpoint_path(), &base)?;
    let data = ingest(&cfg.corpus)?;
    let r = position_sweep(&base, &organ, &cfg.study.sweep_positions, cfg.study.strategy, &data, &cfg.harness())?;
    cfg.bundle().write_json("position_sweep", &r)?;
    Ok(r)
}

/// Multi-organ configurations up to `organs` organs, all copies of the
/// saved checkpoint.
pub fn cmd_multi_organ(cfg: &RunConfig, organs: usize) -> Result<Vec<harness::MultiOrganRow>> {
    let positions = &cfg.study.multi_organ_positions;
    if organs == 0 || organs > positions.len() {
        return Err(Error::Input(format!(
            "--organs must lie in 1..={} (one per configured position)",
            positions.len()
        )));
    }
    let base = load_base(cfg)?;
    let (organ, _) = load_checkpoint(&cfg.checkpoint_path(), &base)?;
    let data = ingest(&cfg.corpus)?;
    let rows = multi_organ_experiment(&base, &[&organ], &positions[..organs], cfg.study.strategy, &data, &cfg.harness())?;
    cfg.bundle().write_json("multi_organ", &rows)?;
    Ok(rows)
}

fn donor_for(cfg: &RunConfig, base: &TransformerModel, data: &Splits) -> Result<DonorRun> {
    train_donor_organ(base, cfg.extraction_start(), cfg.study.organ_size, &data.train, &cfg.harness())
}

pub fn cmd_compare_methods(cfg: &RunConfig) -> Result<Vec<harness::ComparisonRow>> {
    let base = load_base(cfg)?;
    let data = ingest(&cfg.corpus)?;
    let donor = donor_for(cfg, &base, &data)?;
    compare(cfg, &base, &donor, &data)
}

fn compare(cfg: &RunConfig, base: &TransformerModel, donor: &DonorRun, data: &Splits) -> Result<Vec<harness::ComparisonRow>> {
    let s = &cfg.study;
    let rows = run_method_comparison(base, donor, s.position, s.strategy, &s.methods, &s.baselines, data, &cfg.harness())?;
    cfg.bundle().write_json("method_comparison", &rows)?;
    Ok(rows)
}

fn cross_domain_pair(cfg: &RunConfig) -> Result<(Splits, Vec<Vec<u32>>)> {
    let b = cfg
        .cross_domain_corpus
        .as_ref()
        .ok_or_else(|| Error::Input("cross-domain runs need cross_domain_corpus in the config".into()))?;
    make_cross_domain_pair(&cfg.corpus, b)
}

pub fn cmd_cross_domain(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let base = load_base(cfg)?;
    let (source, target) = cross_domain_pair(cfg)?;
    let donor = donor_for(cfg, &base, &source)?;
    cross(cfg, &base, &donor, &source, &target)
}

fn cross(cfg: &RunConfig, base: &TransformerModel, donor: &DonorRun, source: &Splits, target: &[Vec<u32>]) -> Result<Vec<EvalReport>> {
    let s = &cfg.study;
    let rows = cross_domain_experiment(base, donor, s.position, s.strategy, source, target, &cfg.harness())?;
    cfg.bundle().write_json("cross_domain", &rows)?;
    Ok(rows)
}

/// Outcome of the checkpoint round-trip check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub position: usize,
    pub in_memory_loss: f64,
    pub loaded_loss: f64,
    pub identical: bool,
}

/// Files of a full-study bundle.
#[derive(Clone, Debug)]
pub struct StudyOutputs {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

/// Pretrain → donor training → every protocol, writing one JSON report per
/// experiment, the aggregate CSV and one CSV per figure family.
pub fn cmd_full_study(cfg: &RunConfig) -> Result<StudyOutputs> {
    cfg.save()?;
    let mut bundle = cfg.bundle();
    let h = cfg.harness();
    let s = &cfg.study;

    let (_, pre) = cmd_pretrain(cfg)?;
    bundle.record("pretrain", [&pre]);
    let base = load_base(cfg)?;

    let data = ingest(&cfg.corpus)?;
    let donor = donor_for(cfg, &base, &data)?;
    save_checkpoint(
        &donor.organ,
        &cfg.base_model_path().display().to_string(),
        &donor_meta(cfg, &donor),
        &cfg.checkpoint_path(),
    )?;
    let (organ, _) = load_checkpoint(&cfg.checkpoint_path(), &base)?;

    // checkpoint round trip, before recovery so only the organ differs
    let plan = IntegrationPlan::single(s.strategy, s.position);
    let mem = mean_loss(&integrate(&base, &[&donor.organ], &plan)?.model, &data.test)?;
    let disk = mean_loss(&integrate(&base, &[&organ], &plan)?.model, &data.test)?;
    let rt = RoundTrip {
        position: s.position,
        in_memory_loss: mem,
        loaded_loss: disk,
        identical: mem.to_bits() == disk.to_bits(),
    };
    bundle.write_json("checkpoint_roundtrip", &rt)?;

    let sweep = position_sweep(&base, &organ, &s.sweep_positions, s.strategy, &data, &h)?;
    bundle.write_json("position_sweep", &sweep)?;
    bundle.record("position_sweep", [&sweep]);

    let multi = multi_organ_experiment(&base, &[&organ], &s.multi_organ_positions, s.strategy, &data, &h)?;
    bundle.write_json("multi_organ", &multi)?;
    bundle.record("multi_organ", multi.iter().filter_map(|r| r.report.as_ref()));

    let loaded = DonorRun {
        organ: organ.clone(),
        report: donor.report.clone(),
    };
    let comparison = compare(cfg, &base, &loaded, &data)?;
    bundle.record("method_comparison", comparison.iter().map(|r| &r.report));

    if cfg.cross_domain_corpus.is_some() {
        let (source, target) = cross_domain_pair(cfg)?;
        let rows = cross(cfg, &base, &loaded, &source, &target)?;
        bundle.record("cross_domain", &rows);
    }

    let sizes = if s.data_sizes.is_empty() {
        vec![(data.train.len() / 2).max(1), data.train.len()]
    } else {
        s.data_sizes.clone()
    };
    let integ = integration_comparison(&base, cfg.extraction_start(), s.organ_size, s.position, &sizes, &data, &h)?;
    bundle.write_json("integration_comparison", &integ)?;
    bundle.record("integration_comparison", &integ);

    let (hd, body) = method_comparison_figure(&comparison);
    bundle.write_csv(harness::FIGURES[0], &hd, &body)?;
    let (hd, body) = position_figure(&sweep);
    bundle.write_csv(harness::FIGURES[1], &hd, &body)?;
    let (hd, body) = multi_organ_figure(&multi);
    bundle.write_csv(harness::FIGURES[2], &hd, &body)?;
    bundle.write_aggregate()?;

    Ok(StudyOutputs {
        dir: cfg.out_dir.clone(),
        files: harness::bundle_files(&cfg.out_dir)?,
    })
}

/// Writes synthetic lines of `domain` to `path`, one per line.
pub fn cmd_synth_corpus(domain: Domain, samples: usize, seed: u64, path: &Path) -> Result<usize> {
    let lines = corpus::synthesize(domain, samples, seed);
    let mut text = lines.join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(lines.len())
}

/// Reads back a checkpoint's metadata without a recipient.
pub fn describe_checkpoint(path: &Path) -> Result<serde_json::Value> {
    let (_, meta) = read_checkpoint(path)?;
    serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7, "study": {"position": 3}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.study.position, 3);
        assert_eq!(partial.study.organ_size, 3);
        let r = partial.resolved().unwrap();
        assert_eq!((r.train.seed, r.pretrain.seed), (7, 7));
    }

    #[test]
    fn small_vocab_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.vocab_size = 100;
        assert!(matches!(cfg.resolved(), Err(Error::Input(_))));
    }
}
