//! Seeded experiment runs, their on-disk artifacts and cross-seed reports.
//!
//! A run directory holds `config.toml` (the resolved single-run config),
//! `run-s{seed}-{hash}.{csv,jsonl}` (the run record), `metrics.json`,
//! `budget.json` and `model.ckpt`. Every one of them names the seed and the
//! config hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterKind;
use crate::audit::{self, ParamBudget};
use crate::backbone::ToyBackboneConfig;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::network::{DomainId, DomainSpec, InsertionConfig, MdlNetwork, NetworkConfig};
use crate::synth::{evaluate_top1, ClipSamplerConfig, FrameGeometry, GeneratorKind, SyntheticDomain, SyntheticSampler};
use crate::trainer::{train, DomainSampler, RunRecord, TrainSchedule};

/// Environment variable naming the directory all runs are written under.
pub const OUTPUT_ROOT_VAR: &str = "MDL_OUTPUT_ROOT";

/// Names of the built-in experiment templates.
pub const TEMPLATES: [&str; 4] = ["table1-sweep", "table2-fixvstrain", "table3-placement", "table4-domains"];

/// Output root from [`OUTPUT_ROOT_VAR`], defaulting to `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Axes to sweep; variants are the cartesian product of the non-empty lists.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub adapter_kind: Vec<AdapterKind>,
    pub insertion: Vec<InsertionConfig>,
    pub trainable_base: Vec<bool>,
    /// Subsets of domain ids to train together.
    pub domain_sets: Vec<Vec<usize>>,
}

impl Sweep {
    fn is_empty(&self) -> bool {
        self.adapter_kind.is_empty()
            && self.insertion.is_empty()
            && self.trainable_base.is_empty()
            && self.domain_sets.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Directory under the output root; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub adapter_kind: AdapterKind,
    pub insertion: InsertionConfig,
    pub trainable_base: bool,
    #[serde(default)]
    pub shared_bn_stats: bool,
    /// Validation items per domain; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_limit: Option<usize>,
    /// Cache generated clips under the experiment directory.
    #[serde(default)]
    pub cache_clips: bool,
    #[serde(default)]
    pub backbone: ToyBackboneConfig,
    #[serde(default)]
    pub clips: ClipSamplerConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default, skip_serializing_if = "Sweep::is_empty")]
    pub sweep: Sweep,
    pub domains: Vec<SyntheticDomain>,
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when `source_name` ends in `.json`.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let parse_err = |detail: String| Error::Parse {
            source_name: source_name.to_string(),
            detail,
        };
        let cfg: ExperimentConfig = if source_name.ends_with(".json") {
            serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| parse_err(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, or a built-in template when `arg` names one.
    pub fn load(arg: &str) -> Result<Self> {
        if let Some(t) = template(arg) {
            return Ok(t);
        }
        let text = fs::read_to_string(arg).map_err(|e| Error::io(arg, e))?;
        Self::parse(&text, arg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Checks every variant the config expands to; nothing is computed here.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("experiment name is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("no domains configured".into()));
        }
        let mut ids = BTreeSet::new();
        for d in &self.domains {
            d.validate()?;
            if !ids.insert(d.id) {
                return Err(Error::Config(format!("duplicate domain id {}", d.id)));
            }
            if self.clips.window_frames > d.geometry.frames {
                return Err(Error::Config(format!(
                    "domain `{}` has {} frames but the sampling window is {}",
                    d.name, d.geometry.frames, self.clips.window_frames
                )));
            }
            if d.geometry.channels != self.backbone.in_channels {
                return Err(Error::Config(format!(
                    "domain `{}` has {} channels, backbone expects {}",
                    d.name, d.geometry.channels, self.backbone.in_channels
                )));
            }
        }
        self.clips.validate()?;
        self.schedule.validate()?;
        if self.eval_limit == Some(0) {
            return Err(Error::Config("`eval_limit` must be positive".into()));
        }
        for set in &self.sweep.domain_sets {
            if set.is_empty() {
                return Err(Error::Config("empty entry in `sweep.domain_sets`".into()));
            }
            if let Some(bad) = set.iter().find(|id| !ids.contains(id)) {
                return Err(Error::Config(format!("`sweep.domain_sets` names unknown domain {bad}")));
            }
        }
        let locations = self.backbone.channel_spec().num_locations();
        for ins in self.sweep.insertion.iter().chain([&self.insertion]) {
            ins.locations(locations)?;
        }
        for order in &self.schedule.domain_order {
            if !ids.contains(&order.get()) {
                return Err(Error::Config(format!("`domain_order` names unknown domain {order}")));
            }
        }
        Ok(())
    }

    /// Expands the sweep into labelled single-variant configs.
    pub fn variants(&self) -> Vec<(String, ExperimentConfig)> {
        let base = ExperimentConfig {
            sweep: Sweep::default(),
            ..self.clone()
        };
        let mut out = vec![(String::new(), base)];
        fn expand<V: Clone>(
            out: Vec<(String, ExperimentConfig)>,
            values: &[V],
            label: impl Fn(&V) -> String,
            apply: impl Fn(&mut ExperimentConfig, &V),
        ) -> Vec<(String, ExperimentConfig)> {
            if values.is_empty() {
                return out;
            }
            let mut next = Vec::with_capacity(out.len() * values.len());
            for (name, cfg) in out {
                for v in values {
                    let mut c = cfg.clone();
                    apply(&mut c, v);
                    let l = label(v);
                    next.push((if name.is_empty() { l } else { format!("{name}_{l}") }, c));
                }
            }
            next
        }
        out = expand(
            out,
            &self.sweep.adapter_kind,
            |k| format!("adapter-{}", kind_slug(*k)),
            |c, k| c.adapter_kind = *k,
        );
        out = expand(out, &self.sweep.insertion, |i| i.to_string(), |c, i| c.insertion = *i);
        out = expand(
            out,
            &self.sweep.trainable_base,
            |b| if *b { "train".into() } else { "fix".into() },
            |c, b| c.trainable_base = *b,
        );
        out = expand(
            out,
            &self.sweep.domain_sets,
            |s| format!("domains-{}", s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("+")),
            |c, s| {
                c.domains.retain(|d| s.contains(&d.id));
                c.schedule.domain_order.retain(|d| s.contains(&d.get()));
            },
        );
        if out.len() == 1 && out[0].0.is_empty() {
            out[0].0 = "default".into();
        }
        out
    }

    pub fn network_config(&self, seed: u64) -> NetworkConfig {
        NetworkConfig {
            backbone: self.backbone.clone(),
            adapter_kind: self.adapter_kind,
            insertion: self.insertion,
            trainable_base: self.trainable_base,
            domains: self
                .domains
                .iter()
                .map(|d| DomainSpec::new(d.id, d.name.clone(), d.num_classes))
                .collect(),
            seed,
            shared_bn_stats: self.shared_bn_stats,
        }
    }

    /// Hash of everything that defines a run except the seed list and the
    /// output location, so runs of one config under different seeds share it.
    pub fn config_hash(&self) -> String {
        let canonical = ExperimentConfig {
            seeds: Vec::new(),
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serialises to JSON");
        hex::encode(Sha256::digest(json))
    }

    fn experiment_dir(&self, root: &Path) -> PathBuf {
        root.join(self.output_dir.clone().unwrap_or_else(|| PathBuf::from(&self.name)))
    }
}

fn kind_slug(k: AdapterKind) -> &'static str {
    match k {
        AdapterKind::Framewise2D => "2d",
        AdapterKind::SeparableST => "2+1d",
        AdapterKind::Full3D => "3d",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetric {
    pub domain_id: usize,
    pub name: String,
    pub top1: f64,
    pub final_loss: f64,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub updates: usize,
    /// Stem of the run-record files in the same directory.
    pub record: String,
    pub domains: Vec<DomainMetric>,
}

/// Contents of `budget.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetArtifact {
    pub seed: u64,
    pub config_hash: String,
    pub budget: ParamBudget,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub record: RunRecord,
    pub metrics: RunMetrics,
    pub budget: ParamBudget,
}

/// Trains one variant for one seed and writes its artifacts to `dir`.
pub fn run_single(cfg: &ExperimentConfig, variant: &str, seed: u64, dir: &Path, cache_root: Option<&Path>) -> Result<RunArtifacts> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let single = ExperimentConfig {
        seeds: vec![seed],
        ..cfg.clone()
    };
    let hash = cfg.config_hash();
    let snapshot = format!("# config_hash = {hash}\n# seed = {seed}\n{}", single.to_toml());
    let path = dir.join("config.toml");
    fs::write(&path, snapshot).map_err(|e| Error::io(&path, e))?;

    let mut net = MdlNetwork::<f32>::new(cfg.network_config(seed))?;
    let mut samplers: Vec<Box<dyn DomainSampler<f32>>> = Vec::new();
    for d in &cfg.domains {
        let mut s = SyntheticSampler::new(d.clone(), cfg.clips.clone(), seed)?;
        if let Some(root) = cache_root {
            s = s.with_cache(root)?;
        }
        samplers.push(Box::new(s));
    }
    let domains = cfg.domains.clone();
    let (clips, limit) = (cfg.clips.clone(), cfg.eval_limit);
    let mut hook = move |net: &mut MdlNetwork<f32>, _update: usize| -> Result<Vec<(DomainId, f64)>> {
        domains
            .iter()
            .map(|d| Ok((DomainId::new(d.id), evaluate_top1(net, d, &clips, limit)?)))
            .collect()
    };
    let record = train(&mut net, &cfg.schedule, &mut samplers, Some(&mut hook))?;

    let stem = format!("run-s{seed}-{}", &hash[..12]);
    record.write(dir, &stem)?;
    let metrics = RunMetrics {
        experiment: cfg.name.clone(),
        variant: variant.to_string(),
        seed,
        config_hash: hash.clone(),
        updates: cfg.schedule.total_iterations,
        record: stem,
        domains: cfg
            .domains
            .iter()
            .map(|d| DomainMetric {
                domain_id: d.id,
                name: d.name.clone(),
                top1: record.final_top1(d.id).unwrap_or(f64::NAN),
                final_loss: record.losses(d.id).last().copied().unwrap_or(f64::NAN),
            })
            .collect(),
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    let budget = audit::walker_count(&net);
    write_json(
        &dir.join("budget.json"),
        &BudgetArtifact {
            seed,
            config_hash: hash.clone(),
            budget: budget.clone(),
        },
    )?;
    let meta = BTreeMap::from([
        ("seed".to_string(), seed.to_string()),
        ("config_hash".to_string(), hash),
        ("experiment".to_string(), cfg.name.clone()),
        ("variant".to_string(), variant.to_string()),
    ]);
    checkpoint::save(&net, &meta, &dir.join("model.ckpt"))?;
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        config: single,
        record,
        metrics,
        budget,
    })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs every variant and seed under `root`. A repeated seed gets its own
/// numbered directory.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path, mut progress: impl FnMut(&RunArtifacts)) -> Result<Vec<RunArtifacts>> {
    cfg.validate()?;
    let exp_dir = cfg.experiment_dir(root);
    let cache = cfg.cache_clips.then(|| exp_dir.join("cache"));
    let mut out = Vec::new();
    for (variant, vcfg) in cfg.variants() {
        let mut seen = BTreeMap::<u64, usize>::new();
        for &seed in &cfg.seeds {
            let n = seen.entry(seed).or_default();
            let leaf = if *n == 0 { format!("seed-{seed}") } else { format!("seed-{seed}-{n}") };
            *n += 1;
            let art = run_single(&vcfg, &variant, seed, &exp_dir.join(&variant).join(leaf), cache.as_deref())?;
            progress(&art);
            out.push(art);
        }
    }
    let summary = sweep_summary(&out);
    let path = exp_dir.join("summary.csv");
    fs::write(&path, summary_csv(&summary)).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

/// Mean, min and max of a metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let mut mean = 0.0;
        for (k, &v) in values.iter().enumerate() {
            mean += (v - mean) / (k + 1) as f64;
        }
        Some(Spread {
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub domain: String,
    pub top1: Spread,
    pub trainable: usize,
}

/// Per-variant, per-domain top-1 across seeds, in run order.
pub fn sweep_summary(runs: &[RunArtifacts]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut keys: Vec<(String, usize, String)> = Vec::new();
    for r in runs {
        for d in &r.metrics.domains {
            let key = (r.metrics.variant.clone(), d.domain_id, d.name.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    for (variant, id, name) in keys {
        let of_variant: Vec<&RunArtifacts> = runs.iter().filter(|r| r.metrics.variant == variant).collect();
        let values: Vec<f64> = of_variant
            .iter()
            .flat_map(|r| r.metrics.domains.iter().filter(|d| d.domain_id == id).map(|d| d.top1))
            .collect();
        rows.push(SummaryRow {
            variant,
            domain: name,
            top1: Spread::of(&values).expect("at least one run"),
            trainable: of_variant[0].budget.total,
        });
    }
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("variant,domain,seeds,top1_mean,top1_min,top1_max,trainable_M\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.variant,
            r.domain,
            r.top1.n,
            r.top1.mean,
            r.top1.min,
            r.top1.max,
            r.trainable as f64 / 1e6
        );
    }
    out
}

/// Table with one row per variant and one top-1 column per domain.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut domains: Vec<&str> = Vec::new();
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !domains.contains(&r.domain.as_str()) {
            domains.push(&r.domain);
        }
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut out = format!("{:<28} {:>12}", "variant", "params (M)");
    for d in &domains {
        let _ = write!(out, " {d:>14}");
    }
    out.push('\n');
    for v in variants {
        let of_v: Vec<&SummaryRow> = rows.iter().filter(|r| r.variant == v).collect();
        let _ = write!(out, "{v:<28} {:>12.4}", of_v[0].trainable as f64 / 1e6);
        for d in &domains {
            match of_v.iter().find(|r| r.domain == *d) {
                Some(r) => {
                    let _ = write!(out, " {:>13.1}%", 100.0 * r.top1.mean);
                }
                None => {
                    let _ = write!(out, " {:>14}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// One loaded run directory.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub record: RunRecord,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let metrics: RunMetrics = read_json(&dir.join("metrics.json"))?;
    let path = dir.join(format!("{}.jsonl", metrics.record));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        record: RunRecord::from_jsonl(&text)?,
        metrics,
    })
}

/// Run directories given on the command line: each path is a run itself or
/// a parent whose subdirectories (recursively) contain runs.
pub fn find_runs(paths: &[PathBuf]) -> (Vec<PathBuf>, Vec<(PathBuf, String)>) {
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    fn walk(p: &Path, runs: &mut Vec<PathBuf>, depth: usize) -> bool {
        if p.join("metrics.json").is_file() {
            runs.push(p.to_path_buf());
            return true;
        }
        if depth == 0 {
            return false;
        }
        let Ok(entries) = fs::read_dir(p) else { return false };
        let mut children: Vec<PathBuf> = entries.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect();
        children.sort();
        let mut found = false;
        for c in children {
            found |= walk(&c, runs, depth - 1);
        }
        found
    }
    for p in paths {
        if !p.is_dir() {
            skipped.push((p.clone(), "not a directory".into()));
        } else if !walk(p, &mut runs, 3) {
            skipped.push((p.clone(), "no metrics.json found".into()));
        }
    }
    (runs, skipped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainAggregate {
    pub domain_id: usize,
    pub name: String,
    pub top1: Spread,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub config_hash: String,
    pub runs: Vec<PathBuf>,
    pub domains: Vec<DomainAggregate>,
    /// Directories that were listed but skipped, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    pub out_dir: PathBuf,
}

/// Aggregates runs of a single config across seeds and writes
/// `summary.csv`, `loss.svg` and `accuracy.svg` to `out_dir`.
pub fn report_command(paths: &[PathBuf], out_dir: Option<&Path>) -> Result<Report> {
    let (dirs, mut skipped) = find_runs(paths);
    let mut runs = Vec::new();
    for d in dirs {
        match load_run(&d) {
            Ok(r) => runs.push(r),
            Err(e) => skipped.push((d, e.to_string())),
        }
    }
    if runs.is_empty() {
        return Err(Error::Config("no complete run directories to aggregate".into()));
    }
    let hashes: BTreeSet<&str> = runs.iter().map(|r| r.metrics.config_hash.as_str()).collect();
    if hashes.len() > 1 {
        return Err(Error::Config(format!(
            "refusing to aggregate runs of {} different configs ({})",
            hashes.len(),
            hashes.iter().map(|h| &h[..12]).collect::<Vec<_>>().join(", ")
        )));
    }
    let hash = runs[0].metrics.config_hash.clone();
    let mut domains = Vec::new();
    for d in &runs[0].metrics.domains {
        let values: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.metrics.domains.iter().find(|m| m.domain_id == d.domain_id))
            .map(|m| m.top1)
            .collect();
        domains.push(DomainAggregate {
            domain_id: d.domain_id,
            name: d.name.clone(),
            top1: Spread::of(&values).expect("first run has the domain"),
        });
    }
    let out_dir = match out_dir {
        Some(p) => p.to_path_buf(),
        None => common_parent(&runs.iter().map(|r| r.dir.clone()).collect::<Vec<_>>()).join("report"),
    };
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut csv = String::from("domain_id,domain,seeds,top1_mean,top1_min,top1_max,config_hash\n");
    for d in &domains {
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.6},{}",
            d.domain_id, d.name, d.top1.n, d.top1.mean, d.top1.min, d.top1.max, hash
        );
    }
    let path = out_dir.join("summary.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;

    let curves = |pick: &dyn Fn(&RunRecord, usize) -> Vec<(f64, f64)>| -> Vec<(String, Vec<(f64, f64)>)> {
        domains
            .iter()
            .map(|d| (d.name.clone(), mean_curve(runs.iter().map(|r| pick(&r.record, d.domain_id)).collect())))
            .collect()
    };
    let loss = curves(&|rec, id| {
        rec.rows
            .iter()
            .filter(|r| r.domain_id == id)
            .map(|r| (r.update_index as f64, r.loss))
            .collect()
    });
    let acc = curves(&|rec, id| {
        rec.rows
            .iter()
            .filter(|r| r.domain_id == id)
            .filter_map(|r| r.val_top1.map(|v| (r.update_index as f64, 100.0 * v)))
            .collect()
    });
    for (file, title, series) in [("loss.svg", "training loss", &loss), ("accuracy.svg", "validation top-1 (%)", &acc)] {
        let path = out_dir.join(file);
        fs::write(&path, svg_plot(title, series)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(Report {
        config_hash: hash,
        runs: runs.into_iter().map(|r| r.dir).collect(),
        domains,
        skipped,
        out_dir,
    })
}

fn common_parent(dirs: &[PathBuf]) -> PathBuf {
    let mut prefix: Vec<_> = dirs[0].parent().unwrap_or(&dirs[0]).components().collect();
    for d in &dirs[1..] {
        let comps: Vec<_> = d.parent().unwrap_or(d).components().collect();
        let n = prefix.iter().zip(&comps).take_while(|(a, b)| a == b).count();
        prefix.truncate(n);
    }
    prefix.iter().collect()
}

/// Pointwise mean over seeds at the x positions every series shares.
fn mean_curve(series: Vec<Vec<(f64, f64)>>) -> Vec<(f64, f64)> {
    let n = series.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let x = series[0][i].0;
            let y = series.iter().map(|s| s[i].1).sum::<f64>() / series.len() as f64;
            (x, y)
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal self-contained SVG line chart.
pub fn svg_plot(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let points = series.iter().flat_map(|(_, s)| s.iter()).filter(|p| p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(out, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(out, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", w / 2.0, escape(title));
    let _ = writeln!(
        out,
        "<path d=\"M{m},{m} V{} H{}\" fill=\"none\" stroke=\"black\"/>",
        h - m,
        w - m
    );
    for (v, anchor, x, y) in [
        (x0, "start", m, h - m + 16.0),
        (x1, "end", w - m, h - m + 16.0),
        (y0, "end", m - 4.0, h - m),
        (y1, "end", m - 4.0, m + 4.0),
    ] {
        let _ = writeln!(out, "<text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\">{}</text>", fmt_tick(v));
    }
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">update</text>", w / 2.0, h - 12.0);
    for (i, (name, s)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| (sx(x), sy(y)))
            .collect();
        match pts.as_slice() {
            [] => {}
            [(x, y)] => {
                let _ = writeln!(out, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"{colour}\"/>");
            }
            _ => {
                let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                let _ = writeln!(
                    out,
                    "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>",
                    coords.join(" ")
                );
            }
        }
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{ly}\" fill=\"{colour}\" text-anchor=\"end\">{}</text>",
            w - m - 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Desk-scale domain set: a motion-defined domain, a pattern domain and a
/// mixed-style domain, all on 16-frame 16×16 RGB clips.
pub fn desk_domains() -> Vec<SyntheticDomain> {
    let geometry = FrameGeometry {
        frames: 16,
        channels: 3,
        height: 16,
        width: 16,
    };
    let domain = |id, name: &str, kind, num_classes, train_size, seed| SyntheticDomain {
        id,
        name: name.into(),
        kind,
        num_classes,
        train_size,
        val_size: 80,
        geometry,
        seed,
        style: id as u64,
        noise: None,
    };
    vec![
        domain(1, "motion", GeneratorKind::TemporalMotion, 4, 400, 11),
        domain(2, "patterns", GeneratorKind::SpatialPatterns, 8, 400, 12),
        domain(3, "mixed", GeneratorKind::MixedStyle, 4, 400, 13),
    ]
}

/// Built-in templates, one per table of the original study.
pub fn template(name: &str) -> Option<ExperimentConfig> {
    let updates = 300;
    let mut cfg = ExperimentConfig {
        name: name.to_string(),
        seeds: vec![0, 1, 2],
        output_dir: None,
        adapter_kind: AdapterKind::SeparableST,
        insertion: InsertionConfig::All,
        trainable_base: true,
        shared_bn_stats: false,
        eval_limit: Some(40),
        cache_clips: true,
        backbone: ToyBackboneConfig::default(),
        clips: ClipSamplerConfig {
            window_frames: 16,
            clip_len: 8,
            resize_range: (12, 16),
            crop_size: 12,
            ..Default::default()
        },
        schedule: TrainSchedule {
            total_iterations: updates,
            batch_size: 8,
            lr0: 0.05,
            lr_drop_points: vec![updates * 3 / 4],
            eval_every: 100,
            ..Default::default()
        },
        sweep: Sweep::default(),
        domains: desk_domains(),
    };
    match name {
        "table1-sweep" => {
            // a frame-wise backbone leaves temporal modelling to the adapters
            cfg.backbone.temporal_kernel = 1;
            cfg.domains.truncate(2);
            cfg.sweep.adapter_kind = AdapterKind::ALL.to_vec();
        }
        "table2-fixvstrain" => {
            cfg.sweep.trainable_base = vec![false, true];
        }
        "table3-placement" => {
            use InsertionConfig::*;
            cfg.sweep.insertion = vec![Early(1), Early(3), Late(3), Late(1), MultiHead, All];
        }
        "table4-domains" => {
            cfg.sweep.domain_sets = vec![vec![1], vec![1, 2], vec![1, 2, 3]];
        }
        _ => return None,
    }
    Some(cfg)
}
