use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{DatasetSpec, ExperimentConfig, SplitSpec};
use super::report::{
    evaluate_outcomes, format_grid, grid_from_examples, single_network_row, transfer_series, AttackItem,
    BinSeries, OutcomeTable, PolicyVariant,
};
use crate::attacks::{
    select_smallest, single_network_sweep, superimpose_unclipped, write_examples, AdversarialExample,
    AttackConfig, SweepSample,
};
use crate::certify::{certify, CertificateRecord, CertifyConfig};
use crate::data::{load_idx, partition_indices, synth_blobs, Dataset, PartitionPlan};
use crate::defense::{Classifier, Ensemble};
use crate::error::{Error, Result};
use crate::net::{train, LayerSpec, Network, TrainConfig};
use crate::tensor::Tensor;

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Blobs { classes, per_class, dim, spread } => {
            synth_blobs(*classes, *per_class, *dim, *spread, cfg.seeds().dataset)
        }
        DatasetSpec::Idx { images, labels, limit } => {
            let ds = load_idx(images, labels)?;
            Ok(match limit {
                Some(n) => ds.head(*n),
                None => ds,
            })
        }
    }
}

/// Dense member architecture for `input_len` inputs.
pub fn member_layers(cfg: &ExperimentConfig, input_shape: &[usize], label_count: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    if input_shape.len() > 1 {
        specs.push(LayerSpec::Flatten);
    }
    let mut width: usize = input_shape.iter().product();
    for &h in &cfg.hidden {
        specs.push(LayerSpec::Dense { in_dim: width, out_dim: h });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::Dropout { keep: cfg.train.dropout_keep });
        width = h;
    }
    specs.push(LayerSpec::Dense { in_dim: width, out_dim: label_count });
    specs
}

#[derive(Debug, Clone)]
pub struct TrainedEnsemble {
    pub ensemble: Ensemble<Network>,
    pub training_sets: Vec<Dataset>,
    pub validation: Dataset,
    pub validation_accuracy: Vec<f64>,
}

pub fn accuracy<C: Classifier>(member: &C, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .inputs()
        .iter()
        .zip(data.labels())
        .filter(|(x, &y)| member.classify(x.data()) == y)
        .count();
    hits as f64 / data.len() as f64
}

/// Member training sets and the validation set, as fixed by the split
/// spec and the root seed.
pub fn split_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Vec<Dataset>, Dataset)> {
    let seed = cfg.seeds().partition;
    match cfg.split {
        SplitSpec::Partitioned { part_size, validation_size } => {
            let plan = PartitionPlan {
                part_count: cfg.members,
                part_size,
                validation_size,
                seed,
            };
            crate::data::partition(data, &plan)
        }
        SplitSpec::Shared { validation_size } => {
            if data.len() <= validation_size {
                return Err(Error::Size { needed: validation_size + 1, available: data.len() });
            }
            let plan = PartitionPlan {
                part_count: 1,
                part_size: data.len() - validation_size,
                validation_size,
                seed,
            };
            let (parts, val) = partition_indices(data.len(), &plan)?;
            let shared = data.subset(&parts[0], format!("{}-shared", data.name()));
            Ok((
                vec![shared; cfg.members],
                data.subset(&val, format!("{}-validation", data.name())),
            ))
        }
    }
}

/// Train `cfg.members` networks, member `l` at temperature `base · l`.
pub fn train_ensemble(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let (training_sets, validation) = split_dataset(cfg, data)?;
    let shape = data
        .input_shape()
        .ok_or_else(|| Error::Data("dataset is empty".into()))?
        .to_vec();
    let specs = member_layers(cfg, &shape, data.label_count());
    let temps = cfg.temperatures();
    let members = (0..cfg.members)
        .into_par_iter()
        .map(|l| {
            let net = Network::new(&shape, &specs, temps[l], seeds.member_init[l])?;
            let tc = TrainConfig { seed: seeds.member_train[l], ..cfg.train.clone() };
            train(&net, &training_sets[l], &tc)
        })
        .collect::<Result<Vec<_>>>()?;
    let validation_accuracy = members.iter().map(|m| accuracy(m, &validation)).collect();
    Ok(TrainedEnsemble {
        ensemble: Ensemble::new(members)?,
        training_sets,
        validation,
        validation_accuracy,
    })
}

pub fn member_path(dir: &Path, l: usize) -> PathBuf {
    dir.join(format!("member_{l:03}.json"))
}

pub fn save_members(dir: &Path, ens: &Ensemble<Network>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (l, net) in ens.members().iter().enumerate() {
        net.save(member_path(dir, l))?;
    }
    Ok(())
}

/// Load `member_000.json`, `member_001.json`, ... until the first gap.
pub fn load_members(dir: &Path) -> Result<Ensemble<Network>> {
    let mut members = Vec::new();
    while member_path(dir, members.len()).exists() {
        members.push(Network::load(member_path(dir, members.len()))?);
    }
    if members.is_empty() {
        return Err(Error::Data(format!("no member files in {}", dir.display())));
    }
    Ensemble::new(members)
}

/// The first `count` validation items the plain ensemble gets right, each
/// paired with its targets.
pub fn attack_samples(
    cfg: &ExperimentConfig,
    ens: &Ensemble<Network>,
    validation: &Dataset,
) -> Result<Vec<SweepSample>> {
    let lc = ens.label_count();
    let mut out = Vec::new();
    for (i, (x, &y)) in validation.inputs().iter().zip(validation.labels()).enumerate() {
        if out.len() == cfg.samples {
            break;
        }
        if ens.vote_raw(x.data()).label.class() != Some(y) {
            continue;
        }
        let k = cfg.targets_per_sample.unwrap_or(lc - 1).min(lc - 1);
        let targets = (1..=k).map(|j| (y + j) % lc).collect();
        out.push(SweepSample { index: i, input: x.clone(), label: y, targets });
    }
    if out.len() < cfg.samples {
        return Err(Error::InsufficientExamples { needed: cfg.samples, found: out.len() });
    }
    Ok(out)
}

/// Group sweep output by (sample, target) and superimpose the `k` smallest
/// successful deltas of each group. Groups with too few successes are
/// skipped and counted.
pub fn superimposition_items(examples: &[AdversarialExample], k: usize) -> Result<(Vec<AttackItem>, usize)> {
    let mut groups: BTreeMap<(usize, usize), Vec<AdversarialExample>> = BTreeMap::new();
    let mut order = Vec::new();
    for e in examples {
        let key = (e.source_index, e.target);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(e.clone());
    }
    let mut items = Vec::new();
    let mut skipped = 0;
    for key in order {
        let group = &groups[&key];
        match select_smallest(group, k) {
            Ok(chosen) => {
                let raw = superimpose_unclipped(group, &chosen)?;
                let adv = Tensor::new(
                    group[0].original.shape().to_vec(),
                    raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                )?;
                items.push(AttackItem::superimposed(group, &chosen, adv)?);
            }
            Err(Error::InsufficientExamples { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((items, skipped))
}

pub fn policy_variants(cfg: &ExperimentConfig) -> Vec<PolicyVariant> {
    vec![
        PolicyVariant::new("plain", cfg.plain_policy()),
        PolicyVariant::new("nl", cfg.noisy_policy()),
        PolicyVariant::new("nl_rv", cfg.rank_policy()),
    ]
}

pub fn attack_config(cfg: &ExperimentConfig) -> AttackConfig {
    AttackConfig { seed: cfg.seeds().attack, ..cfg.attack }
}

pub fn certify_config(cfg: &ExperimentConfig) -> CertifyConfig {
    CertifyConfig {
        rv_alpha: Some(cfg.policies.rv_alpha),
        ..CertifyConfig::new(cfg.certify.sigma, cfg.certify.n, cfg.certify.alpha, cfg.seeds().certify)
    }
}

/// Everything a pipeline run produced, kept in memory for inspection.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub out_dir: PathBuf,
    pub trained: TrainedEnsemble,
    pub samples: Vec<SweepSample>,
    pub single: Vec<AdversarialExample>,
    pub superimposed: Vec<(usize, Vec<AttackItem>, usize)>,
    pub tables: Vec<OutcomeTable>,
    pub bins: BinSeries,
    pub grids: Vec<(String, Vec<usize>)>,
    pub certificates: Vec<CertificateRecord>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    status: &'a str,
    failed_stage: Option<&'a str>,
    error: Option<String>,
    completed_stages: &'a [&'static str],
    seeds: super::config::SeedPlan,
    config: ExperimentConfig,
    files: &'a [String],
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
    stages: Vec<&'static str>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn manifest(&mut self, cfg: &ExperimentConfig, failure: Option<(&str, &Error)>) -> Result<()> {
        let mut config = cfg.clone();
        config.out_dir = PathBuf::from(".");
        let mut files = self.files.clone();
        files.push("manifest.json".into());
        let m = Manifest {
            tool: "certvote",
            version: env!("CARGO_PKG_VERSION"),
            status: if failure.is_some() { "failed" } else { "ok" },
            failed_stage: failure.map(|(s, _)| s),
            error: failure.map(|(_, e)| e.to_string()),
            completed_stages: &self.stages,
            seeds: cfg.seeds(),
            config,
            files: &files,
        };
        let text = serde_json::to_string_pretty(&m)? + "\n";
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn stage<T>(name: &'static str, w: &mut Writer, f: impl FnOnce(&mut Writer) -> Result<T>) -> Result<T> {
    match f(w) {
        Ok(v) => {
            w.stages.push(name);
            Ok(v)
        }
        Err(e) => Err(Error::Stage { stage: name, source: Box::new(e) }),
    }
}

fn jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Train, attack, superimpose, evaluate, bin, grid and certify, writing
/// each stage's outputs under `cfg.out_dir` as soon as it finishes.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = Writer { dir: &cfg.out_dir, files: Vec::new(), stages: Vec::new() };
    let result = run_stages(cfg, &mut w);
    let failure = match &result {
        Err(Error::Stage { stage, source }) => Some((*stage, source.as_ref())),
        Err(e) => Some(("setup", e)),
        Ok(_) => None,
    };
    w.manifest(cfg, failure)?;
    result
}

fn run_stages(cfg: &ExperimentConfig, w: &mut Writer) -> Result<PipelineReport> {
    let data = stage("data", w, |_| load_dataset(cfg))?;

    let trained = stage("train", w, |w| {
        let t = train_ensemble(cfg, &data)?;
        let mut csv = String::from("member,temperature,train_size,validation_accuracy\n");
        for (l, net) in t.ensemble.members().iter().enumerate() {
            w.put(&format!("members/member_{l:03}.json"), net.to_json().as_bytes())?;
            let _ = writeln!(
                csv,
                "{l},{},{},{}",
                net.temperature(),
                t.training_sets[l].len(),
                t.validation_accuracy[l]
            );
        }
        w.put("members.csv", csv.as_bytes())?;
        Ok(t)
    })?;
    let ens = &trained.ensemble;

    let (samples, single) = stage("attack", w, |w| {
        let samples = attack_samples(cfg, ens, &trained.validation)?;
        let single = single_network_sweep(ens, &samples, &attack_config(cfg))?;
        let mut buf = Vec::new();
        write_examples(&mut buf, &single)?;
        w.put("examples_single.jsonl", &buf)?;
        Ok((samples, single))
    })?;

    let superimposed = stage("superimpose", w, |w| {
        let mut out = Vec::new();
        for &k in &cfg.superimpose {
            let (items, skipped) = superimposition_items(&single, k)?;
            w.put(&format!("examples_si{k}.jsonl"), &jsonl(&items)?)?;
            out.push((k, items, skipped));
        }
        Ok(out)
    })?;

    let tables = stage("evaluate", w, |w| {
        let variants = policy_variants(cfg);
        let single_items: Vec<AttackItem> = single.iter().map(AttackItem::from).collect();
        let mut first = evaluate_outcomes(ens, "single", &single_items, &variants)?;
        first.rows.insert(0, single_network_row(ens, &single)?);
        let mut tables = vec![first];
        for (k, items, _) in &superimposed {
            tables.push(evaluate_outcomes(ens, &format!("si{k}"), items, &variants)?);
        }
        let mut csv = String::from(OutcomeTable::CSV_HEADER);
        csv.push('\n');
        for t in &tables {
            t.write_csv_rows(&mut csv);
        }
        w.put("outcomes.csv", csv.as_bytes())?;
        Ok(tables)
    })?;

    let bins = stage("transfer", w, |w| {
        let items: Vec<AttackItem> = single.iter().map(AttackItem::from).collect();
        let series = transfer_series(ens, &items, cfg.bins)?;
        w.put("bins.csv", series.to_csv().as_bytes())?;
        Ok(series)
    })?;

    let grids = stage("grid", w, |w| {
        let first = &samples[0];
        let t = first.targets[0];
        let examples: Vec<AdversarialExample> = single
            .iter()
            .filter(|e| e.source_index == first.index && e.target == t)
            .cloned()
            .collect();
        let mut grids = Vec::new();
        let mut text = String::new();
        for v in policy_variants(cfg).into_iter().take(2) {
            let g = grid_from_examples(ens, &examples, &v.policy)?;
            let _ = writeln!(text, "# {} sample={} target={}", v.name, first.index, t);
            text.push_str(&format_grid(&g, 5));
            grids.push((v.name, g));
        }
        w.put("grid.txt", text.as_bytes())?;
        Ok(grids)
    })?;

    let certificates = stage("certify", w, |w| {
        let ccfg = certify_config(cfg);
        let val = &trained.validation;
        let n = cfg.certify.samples.min(val.len());
        let records = (0..n)
            .map(|i| {
                Ok(CertificateRecord {
                    index: i,
                    true_label: Some(val.labels()[i]),
                    certificate: certify(ens, &val.inputs()[i], &ccfg)?,
                    config: ccfg,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        w.put("certificates.jsonl", &jsonl(&records)?)?;
        Ok(records)
    })?;

    Ok(PipelineReport {
        out_dir: cfg.out_dir.clone(),
        trained,
        samples,
        single,
        superimposed,
        tables,
        bins,
        grids,
        certificates,
    })
}
