//! End-to-end runs: corpus generation, both training stages, inference,
//! evaluation and the ablation grid. Every file written here carries the
//! master seed and a hash of the producing configuration.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{generate_synthetic, load_manifest, split_labeled, DatasetManifest, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::image::LabelMask;
use crate::metrics::{self, MetricReport};
use crate::segmenter::{self, SegmenterConfig, SegmenterState, Stage1LogRow, Stage1Options};
use crate::ssl::{self, Assistant, SSLConfig, Stage2Result, StudentNet};
use crate::templatebank::TemplateBank;

pub const SEGMENTER_CKPT: &str = "segmenter.json";
pub const STUDENT_CKPT: &str = "student.json";
pub const TEACHER_CKPT: &str = "teacher.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_prompt: bool,
    pub use_memory: bool,
    pub use_feedback: bool,
    pub use_assistant: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_prompt: true,
            use_memory: true,
            use_feedback: true,
            use_assistant: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSettings {
    pub patients: usize,
    pub slices_per_patient: usize,
    pub classes: u8,
    pub size: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            patients: 20,
            slices_per_patient: 4,
            classes: 2,
            size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub out_dir: PathBuf,
    pub ratio: f64,
    /// Master seeds; single-run commands use the first.
    pub seeds: Vec<u64>,
    pub corpus: CorpusSettings,
    /// Template sampling temperature.
    pub temperature: f64,
    pub segmenter: SegmenterConfig,
    pub stage1: Stage1Options,
    pub ssl: SSLConfig,
    pub flags: AblationFlags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            ratio: 0.05,
            seeds: vec![1],
            corpus: CorpusSettings::default(),
            temperature: 0.1,
            segmenter: SegmenterConfig {
                feature_channels: 32,
                prompt_dim: 32,
                ..SegmenterConfig::default()
            },
            stage1: Stage1Options {
                steps: 600,
                learning_rate: 0.1,
                ..Stage1Options::default()
            },
            ssl: SSLConfig {
                feature_channels: 32,
                ..SSLConfig::default()
            },
            flags: AblationFlags::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("label ratio {} must lie in (0, 1]", self.ratio)));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.corpus.classes != self.segmenter.num_classes || self.corpus.classes != self.ssl.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class counts disagree: corpus {}, segmenter {}, ssl {}",
                self.corpus.classes, self.segmenter.num_classes, self.ssl.num_classes
            )));
        }
        self.effective_segmenter().validate()?;
        self.effective_ssl().validate()
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    /// Segmenter config with the prompt/memory flags applied.
    pub fn effective_segmenter(&self) -> SegmenterConfig {
        SegmenterConfig {
            use_prompt: self.flags.use_prompt,
            use_memory: self.flags.use_memory,
            ..self.segmenter.clone()
        }
    }

    pub fn effective_ssl(&self) -> SSLConfig {
        SSLConfig {
            use_feedback: self.flags.use_feedback,
            ..self.ssl.clone()
        }
    }

    /// Hash of everything that affects results. Paths are left out so the
    /// same run in two directories hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset_root = PathBuf::new();
        c.out_dir = PathBuf::new();
        checkpoint::config_hash(&c)
    }

    pub fn header(&self, seed: u64) -> String {
        format!("seed={seed} config_hash={}", self.hash())
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the synthetic corpus under `dataset_root`, splits it and saves
/// the manifest.
pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    let c = cfg.corpus;
    let synth = SynthConfig::new(seed, c.patients, c.slices_per_patient, c.classes, c.size);
    let manifest = generate_synthetic(&cfg.dataset_root, &synth)?;
    let manifest = split_labeled(&manifest, cfg.ratio, seed)?;
    let path = manifest.save()?;
    info!("wrote {} ({} slices)", path.display(), manifest.entries.len());
    Ok(manifest)
}

fn manifest_of(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    load_manifest(&cfg.dataset_root.join(crate::data::MANIFEST_FILE))
}

fn write_stage1_csv(log: &[Stage1LogRow], path: &Path, header: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "total", "text", "mask"])?;
    for r in log {
        w.serialize((r.step, r.total, r.text, r.mask))?;
    }
    let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    let mut out = format!("# {header}\n").into_bytes();
    out.extend(body);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Segmenter predictions on the test split, scored.
pub fn evaluate_segmenter(
    state: &SegmenterState,
    cfg: &SegmenterConfig,
    bank: &TemplateBank,
    manifest: &DatasetManifest,
    seed: u64,
) -> Result<MetricReport> {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (i, s) in manifest.load_split(Split::Test)?.into_iter().enumerate() {
        let truth = s.mask.ok_or_else(|| Error::InvalidArgument(format!("{} has no mask", s.name)))?;
        let draw_seed = crate::rng::derive_seed(seed, "eval/segmenter", i as u64);
        preds.push(segmenter::predict_mask(state, cfg, &s.image, bank, draw_seed)?);
        truths.push(truth);
    }
    metrics::evaluate(&preds, &truths, &manifest.classes)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub state: SegmenterState,
    pub log: Vec<Stage1LogRow>,
    /// Held-out (test split) scores of the trained segmenter.
    pub report: MetricReport,
    pub checkpoint: PathBuf,
}

fn pretrain_on(manifest: &DatasetManifest, cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<PretrainOutput> {
    ensure_dir(out)?;
    let scfg = cfg.effective_segmenter();
    let bank = TemplateBank::from_split(manifest, Split::Labeled, cfg.temperature)?;
    let opts = Stage1Options { seed, ..cfg.stage1.clone() };
    info!("stage 1: {} steps on {} templates", opts.steps, bank.len());
    let (state, log) = segmenter::train_stage1(manifest, &bank, &scfg, &opts)?;
    let header = cfg.header(seed);
    let checkpoint = out.join(SEGMENTER_CKPT);
    state.save(&scfg, seed, &checkpoint)?;
    write_stage1_csv(&log, &out.join("stage1_loss.csv"), &header)?;
    let report = evaluate_segmenter(&state, &scfg, &bank, manifest, seed)?;
    report.write_csv(&out.join("stage1_metrics.csv"), Some(&header))?;
    info!("stage 1 held-out mean dice {:.4}", report.mean_dice);
    Ok(PretrainOutput {
        state,
        log,
        report,
        checkpoint,
    })
}

/// Stage 1 on the labeled split of the corpus at `dataset_root`; writes
/// the checkpoint, the loss curve and held-out metrics to `out_dir`.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<PretrainOutput> {
    cfg.validate()?;
    pretrain_on(&manifest_of(cfg)?, cfg, seed, &cfg.out_dir)
}

/// Stage 2 on an already loaded manifest, writing outputs under `out`.
pub fn ssl_train_on(
    manifest: &DatasetManifest,
    cfg: &ExperimentConfig,
    seed: u64,
    assistant: Option<(&SegmenterState, &SegmenterConfig)>,
    out: &Path,
) -> Result<Stage2Result> {
    ensure_dir(out)?;
    let sslcfg = cfg.effective_ssl();
    let bank = TemplateBank::from_split(manifest, Split::Labeled, cfg.temperature)?;
    let asst = assistant.map(|(state, config)| Assistant {
        state,
        config,
        bank: &bank,
    });
    let result = ssl::train_stage2(manifest, asst, &sslcfg, seed)?;
    let header = cfg.header(seed);
    result.state.student.save("student", &sslcfg, seed, &out.join(STUDENT_CKPT))?;
    result.state.teacher.save("teacher", &sslcfg, seed, &out.join(TEACHER_CKPT))?;
    ssl::write_stage2_csv(&result.log, sslcfg.num_classes, &out.join("stage2_log.csv"), Some(&header))?;
    let evals = out.join("eval");
    ensure_dir(&evals)?;
    for (it, rep) in &result.history {
        rep.write_csv(&evals.join(format!("metrics_{it:06}.csv")), Some(&header))?;
    }
    if let Some(rep) = result.final_report() {
        rep.write_csv(&out.join("metrics.csv"), Some(&header))?;
    }
    Ok(result)
}

/// Stage 2. Unless the assistant is disabled, the segmenter checkpoint is
/// read from `segmenter` or, by default, `out_dir/segmenter.json`.
pub fn ssl_train(cfg: &ExperimentConfig, seed: u64, segmenter_ckpt: Option<&Path>) -> Result<Stage2Result> {
    cfg.validate()?;
    let manifest = manifest_of(cfg)?;
    if !cfg.flags.use_assistant {
        return ssl_train_on(&manifest, cfg, seed, None, &cfg.out_dir);
    }
    let path = segmenter_ckpt
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(SEGMENTER_CKPT));
    let (state, scfg, _) = SegmenterState::load(&path)?;
    ssl_train_on(&manifest, cfg, seed, Some((&state, &scfg)), &cfg.out_dir)
}

/// Either network, as read back from a checkpoint.
pub enum Model {
    Student(StudentNet),
    Segmenter(SegmenterState, SegmenterConfig),
}

impl Model {
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Kind {
            kind: String,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let k: Kind = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        match k.kind.as_str() {
            "segmenter" => {
                let (s, c, _) = SegmenterState::load(path)?;
                Ok(Model::Segmenter(s, c))
            }
            "student" | "teacher" => Ok(Model::Student(StudentNet::load(path, &k.kind)?.0)),
            other => Err(Error::Checkpoint(format!("{}: unknown kind {other}", path.display()))),
        }
    }
}

/// Predicted label maps for every slice of `split`, paired with slice
/// names.
pub fn infer(cfg: &ExperimentConfig, seed: u64, ckpt: &Path, split: Split) -> Result<Vec<(String, LabelMask)>> {
    let manifest = manifest_of(cfg)?;
    let model = Model::load(ckpt)?;
    let bank = match &model {
        Model::Segmenter(..) => Some(TemplateBank::from_split(&manifest, Split::Labeled, cfg.temperature)?),
        Model::Student(_) => None,
    };
    let mut out = Vec::new();
    for (i, s) in manifest.load_split(split)?.into_iter().enumerate() {
        let mask = match (&model, &bank) {
            (Model::Student(net), _) => net.predict_mask(&s.image)?,
            (Model::Segmenter(state, scfg), Some(bank)) => {
                let draw_seed = crate::rng::derive_seed(seed, "eval/segmenter", i as u64);
                segmenter::predict_mask(state, scfg, &s.image, bank, draw_seed)?
            }
            (Model::Segmenter(..), None) => unreachable!("bank built for segmenter checkpoints"),
        };
        out.push((s.name, mask));
    }
    Ok(out)
}

fn file_name(entry: &str) -> &str {
    Path::new(entry).file_name().and_then(|n| n.to_str()).unwrap_or(entry)
}

/// Runs [`infer`] and writes the label maps as PNGs under
/// `out_dir/pred`.
pub fn infer_to_dir(cfg: &ExperimentConfig, seed: u64, ckpt: &Path, split: Split) -> Result<PathBuf> {
    let dir = cfg.out_dir.join("pred");
    ensure_dir(&dir)?;
    for (name, mask) in infer(cfg, seed, ckpt, split)? {
        mask.save_png(&dir.join(file_name(&name)))?;
    }
    Ok(dir)
}

/// Scores the test split, either from a checkpoint or from a directory
/// of predicted mask PNGs named like the test images, and writes
/// `out_dir/metrics.csv`.
pub fn eval(cfg: &ExperimentConfig, seed: u64, ckpt: Option<&Path>, pred_dir: Option<&Path>) -> Result<MetricReport> {
    let manifest = manifest_of(cfg)?;
    let test = manifest.load_split(Split::Test)?;
    let preds: Vec<LabelMask> = match (ckpt, pred_dir) {
        (_, Some(dir)) => test
            .iter()
            .map(|s| LabelMask::load_png(&dir.join(file_name(&s.name)), manifest.num_classes))
            .collect::<Result<_>>()?,
        (Some(ck), None) => infer(cfg, seed, ck, Split::Test)?.into_iter().map(|(_, m)| m).collect(),
        (None, None) => return Err(Error::InvalidArgument("eval needs a checkpoint or a prediction directory".into())),
    };
    let truths: Vec<LabelMask> = test
        .into_iter()
        .map(|s| s.mask.ok_or_else(|| Error::InvalidArgument(format!("{} has no mask", s.name))))
        .collect::<Result<_>>()?;
    let report = metrics::evaluate(&preds, &truths, &manifest.classes)?;
    ensure_dir(&cfg.out_dir)?;
    report.write_csv(&cfg.out_dir.join("metrics.csv"), Some(&cfg.header(seed)))?;
    Ok(report)
}

/// The four ablation configurations, full first.
pub const ABLATION_GRID: [(&str, AblationFlags); 4] = [
    (
        "full",
        AblationFlags {
            use_prompt: true,
            use_memory: true,
            use_feedback: true,
            use_assistant: true,
        },
    ),
    (
        "no-prompt",
        AblationFlags {
            use_prompt: false,
            use_memory: true,
            use_feedback: true,
            use_assistant: true,
        },
    ),
    (
        "no-memory",
        AblationFlags {
            use_prompt: true,
            use_memory: false,
            use_feedback: true,
            use_assistant: true,
        },
    ),
    (
        "no-feedback",
        AblationFlags {
            use_prompt: true,
            use_memory: true,
            use_feedback: false,
            use_assistant: true,
        },
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: String,
    pub reference: bool,
    pub stage1_dice: f64,
    pub mean_dice: f64,
    pub dice: Vec<f64>,
    pub mean_iou: f64,
    pub mean_hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv_string(&self) -> Result<String> {
        let k = self.rows.first().map_or(0, |r| r.dice.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["seed".to_string(), "variant".into(), "reference".into(), "stage1_dice".into(), "mean_dice".into()];
        head.extend((1..=k).map(|c| format!("dice_class{c}")));
        head.extend(["mean_iou".into(), "mean_hd95".into()]);
        w.write_record(&head)?;
        for r in &self.rows {
            let mut rec = vec![
                r.seed.to_string(),
                r.variant.clone(),
                r.reference.to_string(),
                r.stage1_dice.to_string(),
                r.mean_dice.to_string(),
            ];
            rec.extend(r.dice.iter().map(f64::to_string));
            rec.push(r.mean_iou.to_string());
            rec.push(r.mean_hd95.map_or_else(String::new, |v| v.to_string()));
            w.write_record(&rec)?;
        }
        let body = w.into_inner().map_err(|e| Error::io(Path::new("<ablation>"), e.into_error()))?;
        let seeds: Vec<String> = self
            .rows
            .iter()
            .map(|r| r.seed)
            .collect::<std::collections::BTreeSet<_>>()
            .iter()
            .map(u64::to_string)
            .collect();
        let mut out = format!("# seeds={} config_hash={}\n", seeds.join(","), self.config_hash);
        out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn rows_for(&self, seed: u64) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.seed == seed)
    }
}

/// Everything one seed of the grid produced, including the held-out
/// scores of each distinct stage-1 model.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub manifest: DatasetManifest,
    pub rows: Vec<AblationRow>,
    /// Stage-1 model of the full configuration, for reuse.
    pub full_segmenter: (SegmenterState, SegmenterConfig),
}

/// One seed of the grid: a fresh corpus under `out_dir/seed_<s>/data`,
/// one stage-1 model per distinct (prompt, memory) setting, then stage 2
/// for each row.
pub fn ablate_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let root = cfg.out_dir.join(format!("seed_{seed}"));
    let data_cfg = ExperimentConfig {
        dataset_root: root.join("data"),
        ..cfg.clone()
    };
    let manifest = generate(&data_cfg, seed)?;
    let mut stage1: Vec<((bool, bool), PretrainOutput)> = Vec::new();
    let mut rows = Vec::new();
    for (name, flags) in ABLATION_GRID {
        let run_cfg = ExperimentConfig { flags, ..data_cfg.clone() };
        let key = (flags.use_prompt, flags.use_memory);
        if !stage1.iter().any(|(k, _)| *k == key) {
            info!("seed {seed}: stage 1 for {name}");
            let out = pretrain_on(&manifest, &run_cfg, seed, &root.join(format!("stage1_{name}")))?;
            stage1.push((key, out));
        }
        let pre = &stage1.iter().find(|(k, _)| *k == key).expect("trained above").1;
        info!("seed {seed}: stage 2 for {name}");
        let scfg = run_cfg.effective_segmenter();
        let result = ssl_train_on(&manifest, &run_cfg, seed, Some((&pre.state, &scfg)), &root.join(name))?;
        let rep = result
            .final_report()
            .ok_or_else(|| Error::InvalidArgument("stage 2 ran zero iterations".into()))?;
        rows.push(AblationRow {
            seed,
            variant: name.to_string(),
            reference: name == "full",
            stage1_dice: pre.report.mean_dice,
            mean_dice: rep.mean_dice,
            dice: rep.dice_per_class(),
            mean_iou: rep.mean_iou,
            mean_hd95: rep.mean_hd95,
        });
    }
    let full = stage1.swap_remove(0).1;
    Ok(SeedRun {
        seed,
        manifest,
        rows,
        full_segmenter: (full.state, ExperimentConfig { flags: ABLATION_GRID[0].1, ..cfg.clone() }.effective_segmenter()),
    })
}

/// Runs the grid for every seed in `cfg.seeds` and writes
/// `out_dir/ablation.csv`.
pub fn ablate(cfg: &ExperimentConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        rows.extend(ablate_seed(cfg, seed)?.rows);
    }
    let table = AblationTable {
        config_hash: cfg.hash(),
        rows,
    };
    write_table(cfg, &table)?;
    Ok(table)
}

pub fn write_table(cfg: &ExperimentConfig, table: &AblationTable) -> Result<PathBuf> {
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("ablation.csv");
    fs::write(&path, table.to_csv_string()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Hash of a file's bytes, for determinism checks.
pub fn file_hash(path: &Path) -> Result<String> {
    checkpoint::file_sha256(path)
}
