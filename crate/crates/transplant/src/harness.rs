//! Experiment protocols: recovery fine-tuning, position sweeps, multi-organ
//! composition, method comparison, cross-domain transfer and the
//! direct-vs-bridge study, plus report and CSV emission.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use transplant_core::baselines::{self, run_full_finetune, run_ia3, run_lora, run_topk, run_zero_shot};
use transplant_core::donor::{build_wrapper, train_donor};
use transplant_core::report::{population_variance, transfer_penalty_pct};
use transplant_core::surgery::{bridge_deviation, extract, integrate, DonorOrgan, IntegrationPlan, Strategy, Transplant};
use transplant_core::{perplexity, train, Clock, EvalReport, NoClock, TrainConfig, TrainReport, TransformerModel};

use crate::clock::WallClock;
use crate::corpus::Splits;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Epoch budget of recovery fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub direct_epochs: usize,
    pub bridge_stage1_epochs: usize,
    pub bridge_stage2_epochs: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            direct_epochs: 4,
            bridge_stage1_epochs: 1,
            bridge_stage2_epochs: 2,
        }
    }
}

/// Settings shared by every experiment in a run.
#[derive(Clone, Copy, Debug)]
pub struct Harness {
    pub train: TrainConfig,
    pub recovery: RecoveryConfig,
    /// Measure wall-clock time. Off keeps reports byte-reproducible.
    pub timed: bool,
    /// Worker threads for independent jobs.
    pub jobs: usize,
}

impl Harness {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            recovery: RecoveryConfig::default(),
            timed: false,
            jobs: 1,
        }
    }

    fn clock(&self) -> Box<dyn Clock> {
        if self.timed {
            Box::new(WallClock::new())
        } else {
            Box::new(NoClock)
        }
    }
}

/// `f` over `items` on up to `jobs` threads; results in item order.
pub fn parallel_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

/// Trains a freshly integrated transplant. Direct replacement trains the
/// surgery mask in one phase; bridge mediation trains the bridges alone,
/// then bridges and organ together.
pub fn recovery_finetune(
    t: &mut Transplant,
    data: &[Vec<u32>],
    strategy: Strategy,
    config: &TrainConfig,
    recovery: &RecoveryConfig,
    clock: &dyn Clock,
) -> Result<TrainReport> {
    match strategy {
        Strategy::DirectReplacement => {
            Ok(train(&mut t.model, data, &config.with_epochs(recovery.direct_epochs), &t.mask, clock)?)
        }
        Strategy::BridgeMediated => {
            let stage1 = t.bridges_only();
            let mut report = train(&mut t.model, data, &config.with_epochs(recovery.bridge_stage1_epochs), &stage1, clock)?;
            let stage2 = train(&mut t.model, data, &config.with_epochs(recovery.bridge_stage2_epochs), &t.mask, clock)?;
            report.extend(stage2);
            Ok(report)
        }
    }
}

/// One integrate → recover → evaluate pass.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub transplant: Transplant,
    pub pre_ppl: f64,
    pub train: TrainReport,
    pub report: EvalReport,
}

/// Integrates `organs` into a copy of `base`, recovers on `data.train` and
/// evaluates on `data.test`.
pub fn transplant_pipeline(
    base: &TransformerModel,
    organs: &[&DonorOrgan],
    plan: &IntegrationPlan,
    data: &Splits,
    h: &Harness,
    method: &str,
) -> Result<PipelineRun> {
    let mut t = integrate(base, organs, plan)?;
    let pre_ppl = perplexity(&t.model, &data.test)?;
    let clock = h.clock();
    let report = recovery_finetune(&mut t, &data.train, plan.strategy, &h.train, &h.recovery, clock.as_ref())?;
    let ppl = perplexity(&t.model, &data.test)?;
    let mut r = EvalReport::trained(method, ppl, t.model.config, &h.train, &report, h.timed);
    r.metrics.insert("pre_recovery_ppl".into(), pre_ppl);
    if let [p] = plan.positions[..] {
        r.metrics.insert("position".into(), p as f64);
    }
    if !t.bridges.is_empty() {
        r.bridge_deviations = Some(t.model.bridges.iter().map(|s| bridge_deviation(&s.bridge)).collect());
    }
    Ok(PipelineRun {
        transplant: t,
        pre_ppl,
        train: report,
        report: r,
    })
}

/// Transplants `organ` at each of `positions` into a fresh copy of `base`.
/// The returned report carries the mean PPL, every per-position PPL and
/// their population variance.
pub fn position_sweep(
    base: &TransformerModel,
    organ: &DonorOrgan,
    positions: &[usize],
    strategy: Strategy,
    data: &Splits,
    h: &Harness,
) -> Result<EvalReport> {
    if positions.is_empty() {
        return Err(Error::Input("position sweep needs at least one position".into()));
    }
    let runs = parallel_map(h.jobs, positions, |&p| {
        transplant_pipeline(base, &[organ], &IntegrationPlan::single(strategy, p), data, h, "position_sweep")
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let per: Vec<(usize, f64)> = positions.iter().zip(&runs).map(|(&p, r)| (p, r.report.ppl)).collect();
    let ppls: Vec<f64> = per.iter().map(|x| x.1).collect();
    let mean = ppls.iter().sum::<f64>() / ppls.len() as f64;
    let mut report = runs[0].report.clone();
    report.method = "position_sweep".into();
    report.ppl = mean;
    report.epoch_losses.clear();
    report.metrics.clear();
    report.bridge_deviations = None;
    report.seconds = h.timed.then(|| runs.iter().map(|r| r.train.seconds).sum());
    report.position_variance = Some(population_variance(&ppls));
    let best = per.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let worst = per.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    report.metrics.insert("best_position".into(), best.0 as f64);
    report.metrics.insert("best_ppl".into(), best.1);
    report.metrics.insert("worst_position".into(), worst.0 as f64);
    report.metrics.insert("worst_ppl".into(), worst.1);
    report.per_position_ppl = Some(per);
    Ok(report)
}

/// One organ-count configuration of the multi-organ experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiOrganRow {
    pub organs: usize,
    pub positions: Vec<usize>,
    pub report: Option<EvalReport>,
    /// Why the configuration did not run.
    pub skipped: Option<String>,
    /// Lowest PPL among the configurations that ran.
    pub best: bool,
}

/// Evaluates 1..=n organ configurations, organ `i` at `positions[i]`. A
/// single organ is reused at every position. Configurations whose plan is
/// rejected are skipped with the reason.
pub fn multi_organ_experiment(
    base: &TransformerModel,
    organs: &[&DonorOrgan],
    positions: &[usize],
    strategy: Strategy,
    data: &Splits,
    h: &Harness,
) -> Result<Vec<MultiOrganRow>> {
    if organs.is_empty() || (organs.len() != 1 && organs.len() != positions.len()) {
        return Err(Error::Input(format!(
            "multi-organ experiment needs one organ or one per position, got {} organs for {} positions",
            organs.len(),
            positions.len()
        )));
    }
    let counts: Vec<usize> = (1..=positions.len()).collect();
    let results = parallel_map(h.jobs, &counts, |&n| {
        let chosen: Vec<&DonorOrgan> = (0..n).map(|i| organs[i.min(organs.len() - 1)]).collect();
        let plan = IntegrationPlan {
            strategy,
            positions: positions[..n].to_vec(),
        };
        transplant_pipeline(base, &chosen, &plan, data, h, &format!("multi_organ_{n}"))
    });
    let mut rows = Vec::new();
    for (n, r) in counts.into_iter().zip(results) {
        let (report, skipped) = match r {
            Ok(run) => (Some(run.report), None),
            Err(Error::Core(transplant_core::Error::Plan(msg))) => (None, Some(msg)),
            Err(e) => return Err(e),
        };
        rows.push(MultiOrganRow {
            organs: n,
            positions: positions[..n].to_vec(),
            report,
            skipped,
            best: false,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.report.as_ref().map(|rep| (i, rep.ppl)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((i, _)) = best {
        rows[i].best = true;
    }
    Ok(rows)
}

/// `100 · (PPL_target − PPL_source) / PPL_source` for `model`.
pub fn transfer_penalty(model: &TransformerModel, source_eval: &[Vec<u32>], target_eval: &[Vec<u32>]) -> Result<f64> {
    let s = perplexity(model, source_eval)?;
    let t = perplexity(model, target_eval)?;
    Ok(transfer_penalty_pct(s, t))
}

/// A trained donor organ and how its training went.
#[derive(Clone, Debug)]
pub struct DonorRun {
    pub organ: DonorOrgan,
    pub report: TrainReport,
}

/// Extracts `count` layers from `start`, trains them behind the frozen
/// embedding and head of `base` on `data`.
pub fn train_donor_organ(
    base: &TransformerModel,
    start: usize,
    count: usize,
    data: &[Vec<u32>],
    h: &Harness,
) -> Result<DonorRun> {
    let organ = extract(base, start, count)?;
    let mut wrapper = build_wrapper(base, &organ, false)?;
    let clock = h.clock();
    let (organ, report) = train_donor(&mut wrapper, data, &h.train, clock.as_ref())?;
    Ok(DonorRun { organ, report })
}

/// Methods of the comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Donor,
    ZeroShot,
    FullFt,
    Lora,
    Ia3,
    Topk,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Donor,
        Method::ZeroShot,
        Method::FullFt,
        Method::Lora,
        Method::Ia3,
        Method::Topk,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Donor => "donor",
            Method::ZeroShot => "zero_shot",
            Method::FullFt => "full_ft",
            Method::Lora => "lora",
            Method::Ia3 => "ia3",
            Method::Topk => "topk",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSettings {
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub topk_fraction: f64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            lora_rank: baselines::LORA_RANK,
            lora_alpha: baselines::LORA_ALPHA,
            topk_fraction: baselines::TOPK_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub report: EvalReport,
    /// This row's PPL over the donor row's; absent without a donor row.
    pub ratio_to_donor: Option<f64>,
}

/// Donor report: trainable share is the organ against the full model,
/// time is standalone donor training. Recovery and pipeline time go to
/// metrics.
fn donor_row(base: &TransformerModel, donor: &DonorRun, run: &PipelineRun, h: &Harness) -> EvalReport {
    let mut r = run.report.clone();
    r.method = Method::Donor.tag().into();
    let total = base.num_params();
    r.trainable_params = donor.organ.num_params();
    r.total_params = total;
    r.trainable_fraction = r.trainable_params as f64 / total as f64;
    r.seconds = h.timed.then_some(donor.report.seconds);
    if h.timed {
        r.metrics.insert("pipeline_seconds".into(), donor.report.seconds + run.train.seconds);
        r.metrics.insert("recovery_seconds".into(), run.train.seconds);
    }
    r.metrics.insert("recovery_trainable_fraction".into(), run.train.trainable_fraction);
    r.metrics.insert("donor_epochs".into(), donor.report.epoch_losses.len() as f64);
    r.epoch_losses = donor.report.epoch_losses.iter().chain(&run.train.epoch_losses).copied().collect();
    r
}

/// Runs the donor pipeline and the selected baselines on the same splits
/// and seed. Rows are sorted by ascending PPL.
#[allow(clippy::too_many_arguments)]
pub fn run_method_comparison(
    base: &TransformerModel,
    donor: &DonorRun,
    position: usize,
    strategy: Strategy,
    methods: &[Method],
    settings: &BaselineSettings,
    data: &Splits,
    h: &Harness,
) -> Result<Vec<ComparisonRow>> {
    let mut unique: Vec<Method> = methods.to_vec();
    unique.sort();
    unique.dedup();
    let reports = parallel_map(h.jobs, &unique, |&m| -> Result<EvalReport> {
        let (train_data, eval) = (&data.train[..], &data.test[..]);
        let clock = h.clock();
        let clock = clock.as_ref();
        let cfg = &h.train;
        Ok(match m {
            Method::Donor => {
                let plan = IntegrationPlan::single(strategy, position);
                let run = transplant_pipeline(base, &[&donor.organ], &plan, data, h, "donor")?;
                donor_row(base, donor, &run, h)
            }
            Method::ZeroShot => {
                let mut r = run_zero_shot(base, eval)?;
                r.seed = cfg.seed;
                r
            }
            Method::FullFt => run_full_finetune(base, train_data, eval, cfg, clock, h.timed)?.report,
            Method::Lora => {
                run_lora(base, train_data, eval, cfg, settings.lora_rank, settings.lora_alpha, clock, h.timed)?.report
            }
            Method::Ia3 => run_ia3(base, train_data, eval, cfg, clock, h.timed)?.report,
            Method::Topk => run_topk(base, train_data, eval, cfg, settings.topk_fraction, clock, h.timed)?.report,
        })
    });
    let mut reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| a.ppl.total_cmp(&b.ppl).then_with(|| a.method.cmp(&b.method)));
    let donor_ppl = reports.iter().find(|r| r.method == Method::Donor.tag()).map(|r| r.ppl);
    Ok(reports
        .into_iter()
        .map(|report| ComparisonRow {
            ratio_to_donor: donor_ppl.map(|d| report.ppl / d),
            report,
        })
        .collect())
}

/// Source and target perplexities and the transfer penalty of the donor
/// pipeline and of the untouched base.
pub fn cross_domain_experiment(
    base: &TransformerModel,
    donor: &DonorRun,
    position: usize,
    strategy: Strategy,
    source: &Splits,
    target: &[Vec<u32>],
    h: &Harness,
) -> Result<Vec<EvalReport>> {
    let plan = IntegrationPlan::single(strategy, position);
    let run = transplant_pipeline(base, &[&donor.organ], &plan, source, h, "donor")?;
    let mut donor_report = donor_row(base, donor, &run, h);
    let mut zero = run_zero_shot(base, &source.test)?;
    zero.seed = h.train.seed;
    let mut out = Vec::new();
    for (model, r) in [(&run.transplant.model, &mut donor_report), (base, &mut zero)] {
        let s = perplexity(model, &source.test)?;
        let t = perplexity(model, target)?;
        r.ppl = t;
        r.metrics.insert("source_ppl".into(), s);
        r.metrics.insert("target_ppl".into(), t);
        r.transfer_penalty_pct = Some(transfer_penalty_pct(s, t));
        out.push(r.clone());
    }
    Ok(out)
}

/// Direct replacement against bridge mediation at each training-set size.
/// The donor is trained and recovered on the first `n` training sequences.
pub fn integration_comparison(
    base: &TransformerModel,
    start: usize,
    count: usize,
    position: usize,
    data_sizes: &[usize],
    data: &Splits,
    h: &Harness,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for &n in data_sizes {
        if n == 0 || n > data.train.len() {
            return Err(Error::Input(format!(
                "data size {n} is outside 1..={} training sequences",
                data.train.len()
            )));
        }
        let subset = data.with_train_size(n);
        let donor = train_donor_organ(base, start, count, &subset.train, h)?;
        let strategies = [Strategy::DirectReplacement, Strategy::BridgeMediated];
        let runs = parallel_map(h.jobs, &strategies, |&s| {
            let plan = IntegrationPlan::single(s, position);
            let init = integrate(base, &[&donor.organ], &plan)?;
            let init_dev = init.model.bridges.iter().map(|b| bridge_deviation(&b.bridge).mean).fold(0.0, f64::max);
            let mut run = transplant_pipeline(base, &[&donor.organ], &plan, &subset, h, s.tag())?;
            run.report.metrics.insert("train_samples".into(), n as f64);
            if s == Strategy::BridgeMediated {
                run.report.metrics.insert("bridge_deviation_init".into(), init_dev);
                let after = run.report.bridge_deviations.iter().flatten().map(|d| d.mean).fold(0.0, f64::max);
                run.report.metrics.insert("bridge_deviation_final".into(), after);
            }
            Ok::<_, Error>(run.report)
        });
        for r in runs {
            out.push(r?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report bundle

/// Writes `{experiment}_{seed}.json` reports and CSV summaries into one
/// directory, collecting rows for the aggregate CSV in call order.
pub struct Bundle {
    pub dir: PathBuf,
    pub seed: u64,
    rows: Vec<(String, EvalReport)>,
}

impl Bundle {
    pub fn new(dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            dir: dir.into(),
            seed,
            rows: Vec::new(),
        }
    }

    pub fn path(&self, experiment: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{experiment}_{}.{ext}", self.seed))
    }

    pub fn write_json<T: Serialize>(&self, experiment: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(experiment, "json");
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// Adds rows to the aggregate CSV.
    pub fn record<'a>(&mut self, experiment: &str, reports: impl IntoIterator<Item = &'a EvalReport>) {
        self.rows.extend(reports.into_iter().map(|r| (experiment.to_owned(), r.clone())));
    }

    pub fn write_csv(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<PathBuf> {
        let path = self.path(name, "csv");
        write_atomic(&path, &csv_bytes(header, rows)?)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// `aggregate_{seed}.csv`: method, ppl, trainable_pct, seconds, seed,
    /// experiment, then one column per extra metric.
    pub fn write_aggregate(&self) -> Result<PathBuf> {
        let extras: BTreeSet<String> = self.rows.iter().flat_map(|(_, r)| extra_metrics(r).into_iter().map(|(k, _)| k)).collect();
        let mut header: Vec<String> = ["method", "ppl", "trainable_pct", "seconds", "seed", "experiment"]
            .map(String::from)
            .to_vec();
        header.extend(extras.iter().cloned());
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(exp, r)| {
                let m = extra_metrics(r);
                let mut row = vec![
                    r.method.clone(),
                    r.ppl.to_string(),
                    (100.0 * r.trainable_fraction).to_string(),
                    seconds_cell(r),
                    r.seed.to_string(),
                    exp.clone(),
                ];
                row.extend(extras.iter().map(|k| {
                    m.iter().find(|(n, _)| n == k).map(|(_, v)| v.to_string()).unwrap_or_default()
                }));
                row
            })
            .collect();
        self.write_csv("aggregate", &header, &rows)
    }
}

/// Empty for zero-shot rows and untimed runs.
pub fn seconds_cell(r: &EvalReport) -> String {
    match r.seconds {
        Some(s) if r.method != Method::ZeroShot.tag() => s.to_string(),
        _ => String::new(),
    }
}

fn extra_metrics(r: &EvalReport) -> Vec<(String, f64)> {
    let mut m: Vec<(String, f64)> = r.metrics.iter().map(|(k, v)| (k.clone(), *v)).collect();
    if let Some(v) = r.position_variance {
        m.push(("position_variance".into(), v));
    }
    if let Some(v) = r.transfer_penalty_pct {
        m.push(("transfer_penalty_pct".into(), v));
    }
    m
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Plot-ready table of the method comparison.
pub fn method_comparison_figure(rows: &[ComparisonRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["method", "ppl", "trainable_pct", "seconds", "ratio_to_donor"].map(String::from).to_vec();
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.report.method.clone(),
                r.report.ppl.to_string(),
                (100.0 * r.report.trainable_fraction).to_string(),
                seconds_cell(&r.report),
                r.ratio_to_donor.map(|v| v.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    (header, body)
}

/// Plot-ready per-position PPLs of a sweep.
pub fn position_figure(sweep: &EvalReport) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["position", "ppl"].map(String::from).to_vec();
    let body = sweep
        .per_position_ppl
        .iter()
        .flatten()
        .map(|(p, v)| vec![p.to_string(), v.to_string()])
        .collect();
    (header, body)
}

/// Plot-ready organ-count table.
pub fn multi_organ_figure(rows: &[MultiOrganRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["organs", "positions", "ppl", "best", "skipped"].map(String::from).to_vec();
    let body = rows
        .iter()
        .map(|r| {
            let positions: Vec<String> = r.positions.iter().map(usize::to_string).collect();
            vec![
                r.organs.to_string(),
                positions.join(" "),
                r.report.as_ref().map(|x| x.ppl.to_string()).unwrap_or_default(),
                r.best.to_string(),
                r.skipped.clone().unwrap_or_default(),
            ]
        })
        .collect();
    (header, body)
}

/// Figure CSV families written by a full study.
pub const FIGURES: [&str; 3] = ["figure_method_comparison", "figure_position_sensitivity", "figure_multi_organ"];

/// Every file name in `dir`, sorted.
pub fn bundle_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::storage(dir, e))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::storage(dir, e))?;
    names.sort();
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use transplant_core::ModelConfig;

    fn base(layers: usize) -> TransformerModel {
        TransformerModel::new(
            ModelConfig {
                num_layers: layers,
                hidden_dim: 16,
                num_heads: 4,
                ffn_dim: 32,
                vocab_size: 20,
                max_seq_len: 16,
                layernorm_eps: 1e-5,
                tied_head: true,
            },
            3,
        )
        .unwrap()
    }

    fn data() -> Splits {
        let seq = |i: u32| (0..10).map(|j| (i * 3 + j * 7) % 20).collect::<Vec<u32>>();
        Splits {
            train: (0..12).map(seq).collect(),
            val: (12..14).map(seq).collect(),
            test: (14..18).map(seq).collect(),
        }
    }

    fn harness() -> Harness {
        Harness::new(TrainConfig {
            learning_rate: 5e-3,
            epochs: 1,
            ..TrainConfig::default()
        })
    }

    #[test]
    fn bridge_recovery_runs_two_stages() {
        let b = base(6);
        let organ = extract(&base(6), 2, 2).unwrap();
        let mut t = integrate(&b, &[&organ], &IntegrationPlan::single(Strategy::BridgeMediated, 2)).unwrap();
        let donor_before = t.model.layers[2..4].to_vec();

        let h = harness();
        let mut stage1 = t.clone();
        let mask = stage1.bridges_only();
        train(&mut stage1.model, &data().train, &h.train.with_epochs(1), &mask, &NoClock).unwrap();
        assert_eq!(stage1.model.layers[2..4], donor_before[..]);
        assert_ne!(stage1.model.bridges, t.model.bridges);

        let r = recovery_finetune(&mut t, &data().train, Strategy::BridgeMediated, &h.train, &h.recovery, &NoClock).unwrap();
        assert_eq!(r.epoch_losses.len(), 3);
        assert_ne!(t.model.layers[2..4], donor_before[..]);
    }

    #[test]
    fn direct_recovery_trains_the_surgery_set() {
        let b = base(6);
        let organ = extract(&base(6), 2, 2).unwrap();
        let mut t = integrate(&b, &[&organ], &IntegrationPlan::single(Strategy::DirectReplacement, 2)).unwrap();
        assert_eq!(t.mask.trainable_layers(), [1, 2, 3, 4]);
        let before = t.model.clone();
        let h = harness();
        let r = recovery_finetune(&mut t, &data().train, Strategy::DirectReplacement, &h.train, &h.recovery, &NoClock).unwrap();
        assert_eq!(r.epoch_losses.len(), 4);
        assert_eq!(t.model.layers[0], before.layers[0]);
        assert_eq!(t.model.layers[5], before.layers[5]);
        assert_eq!(t.model.embedding, before.embedding);
        for i in 1..5 {
            assert_ne!(t.model.layers[i], before.layers[i], "layer {i}");
        }
    }

    #[test]
    fn sweep_of_one_position_has_zero_variance() {
        let b = base(5);
        let organ = extract(&b, 1, 2).unwrap();
        let r = position_sweep(&b, &organ, &[2], Strategy::DirectReplacement, &data(), &harness()).unwrap();
        assert_eq!(r.position_variance, Some(0.0));
        assert_eq!(r.per_position_ppl.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn sweep_is_isolated_and_parallel_safe() {
        let b = base(6);
        let snapshot = b.clone();
        let organ = extract(&base(6), 0, 2).unwrap();
        let serial = position_sweep(&b, &organ, &[0, 2, 4], Strategy::DirectReplacement, &data(), &harness()).unwrap();
        assert_eq!(b, snapshot);
        let h = Harness { jobs: 3, ..harness() };
        let parallel = position_sweep(&b, &organ, &[0, 2, 4], Strategy::DirectReplacement, &data(), &h).unwrap();
        assert_eq!(serial, parallel);
        // the first position again, after the others, reproduces exactly
        let again = position_sweep(&b, &organ, &[0], Strategy::DirectReplacement, &data(), &harness()).unwrap();
        assert_eq!(again.per_position_ppl.unwrap()[0], serial.per_position_ppl.as_ref().unwrap()[0]);
        let ppls: Vec<f64> = serial.per_position_ppl.unwrap().iter().map(|x| x.1).collect();
        assert_eq!(serial.ppl, ppls.iter().sum::<f64>() / 3.0);
    }

    #[test]
    fn multi_organ_skips_overlaps_and_marks_best() {
        let b = base(8);
        let organ = extract(&base(8), 0, 2).unwrap();
        let h = harness();
        let rows = multi_organ_experiment(&b, &[&organ], &[0, 5, 6], Strategy::DirectReplacement, &data(), &h).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].report.is_some() && rows[1].report.is_some());
        assert!(rows[2].report.is_none());
        assert!(rows[2].skipped.as_ref().unwrap().contains("overlap"));
        assert_eq!(rows.iter().filter(|r| r.best).count(), 1);
        let best = rows.iter().find(|r| r.best).unwrap().report.as_ref().unwrap().ppl;
        assert!(rows.iter().filter_map(|r| r.report.as_ref()).all(|r| r.ppl >= best));

        let single = transplant_pipeline(&b, &[&organ], &IntegrationPlan::single(Strategy::DirectReplacement, 0), &data(), &h, "x")
            .unwrap();
        assert_eq!(rows[0].report.as_ref().unwrap().ppl, single.report.ppl);
    }

    #[test]
    fn penalty_is_zero_on_identical_sets() {
        let b = base(2);
        let d = data();
        assert_eq!(transfer_penalty(&b, &d.test, &d.test).unwrap(), 0.0);
    }

    #[test]
    fn comparison_rows_are_sorted_with_unit_donor_ratio() {
        let b = base(6);
        let h = harness();
        let d = data();
        let donor = train_donor_organ(&b, 2, 2, &d.train, &h).unwrap();
        let rows = run_method_comparison(
            &b,
            &donor,
            1,
            Strategy::DirectReplacement,
            &Method::ALL,
            &BaselineSettings {
                lora_rank: 2,
                ..BaselineSettings::default()
            },
            &d,
            &h,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.windows(2).all(|w| w[0].report.ppl <= w[1].report.ppl));
        let donor_row = rows.iter().find(|r| r.report.method == "donor").unwrap();
        assert_eq!(donor_row.ratio_to_donor, Some(1.0));
        assert_eq!(donor_row.report.trainable_params, donor.organ.num_params());
        let zero = rows.iter().find(|r| r.report.method == "zero_shot").unwrap();
        assert_eq!(seconds_cell(&zero.report), "");
        let (_, fig) = method_comparison_figure(&rows);
        assert_eq!(fig.len(), 6);
    }

    #[test]
    fn integration_comparison_reports_bridge_drift() {
        let b = base(6);
        let rows = integration_comparison(&b, 2, 2, 2, &[6, 12], &data(), &harness()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows.iter().filter(|r| r.method == "bridge") {
            assert_eq!(r.metrics["bridge_deviation_init"], 0.0);
            assert!(r.metrics["bridge_deviation_final"] > 0.0);
        }
        assert!(rows.iter().filter(|r| r.method == "direct").all(|r| r.bridge_deviations.is_none()));
    }

    #[test]
    fn aggregate_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = Bundle::new(dir.path(), 42);
        let cfg = base(1).config;
        let mut a = EvalReport::evaluation("zero_shot", 12.5, cfg, 10, 42);
        a.metrics.insert("zeta".into(), 1.0);
        let mut b = EvalReport::evaluation("full_ft", 3.0, cfg, 10, 42);
        b.trainable_fraction = 0.25;
        b.seconds = None;
        b.position_variance = Some(2.0);
        bundle.record("demo", [&a, &b]);
        let path = bundle.write_aggregate().unwrap();
        assert!(path.ends_with("aggregate_42.csv"));
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,ppl,trainable_pct,seconds,seed,experiment,position_variance,zeta");
        assert_eq!(lines[1], "zero_shot,12.5,0,,42,demo,,1");
        assert_eq!(lines[2], "full_ft,3,25,,42,demo,2,");
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..20).collect();
        assert_eq!(parallel_map(4, &items, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn donor_freeze_contract() {
        let b = base(4);
        let d = data();
        let run = train_donor_organ(&b, 1, 2, &d.train, &harness()).unwrap();
        assert_eq!(run.report.trainable_params, run.organ.num_params());
        assert_eq!(run.organ.extraction_indices, [1, 2]);
        assert_ne!(run.organ.layers[..], b.layers[1..3]);
    }
}
