//! The experiment stages. Each stage writes into its own directory under the
//! run directory and finishes by writing a manifest; a stage whose manifest
//! matches the current config and verifies is skipped.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use conceptvae::analysis::{self, ClusterReport};
use conceptvae::conceptgen::{self, RepresentativeSet};
use conceptvae::dataset::{self, DataSet, Image28};
use conceptvae::model::{self, Checkpoint, ModelParams};
use conceptvae::training::{self, EpochMetrics, LossConfig, TrainObserver};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{StageManifest, MANIFEST_NAME};

pub const BASELINE: &str = "baseline";
pub const REPRESENTATIVES: &str = "representatives";
pub const AUGMENT: &str = "augment";
pub const TRAIN_WITH: &str = "train-with-concept-loss";
pub const TRAIN_WITHOUT: &str = "train-without-concept-loss";
pub const ANALYSIS: &str = "analysis";
pub const STAGES: [&str; 6] = [BASELINE, REPRESENTATIVES, AUGMENT, TRAIN_WITH, TRAIN_WITHOUT, ANALYSIS];

pub const CHECKPOINT: &str = "checkpoint.cvae";
pub const METRICS: &str = "metrics.jsonl";
const CONFIG_FILE: &str = "config.json";
const HASH_FILE: &str = "config.sha256";

pub fn idx_names(stem: &str) -> [String; 2] {
    [format!("{stem}-images-idx3-ubyte"), format!("{stem}-labels-idx1-ubyte")]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    hash: String,
    pub quiet: bool,
}

impl Pipeline {
    /// Opens (or creates) the run directory. A directory created under a
    /// different config hash is refused.
    pub fn open(cfg: RunConfig) -> Result<Self, CliError> {
        let run_dir = cfg.run_dir.clone();
        let hash = cfg.hash();
        std::fs::create_dir_all(&run_dir)?;
        let hash_path = run_dir.join(HASH_FILE);
        if hash_path.exists() {
            let existing = std::fs::read_to_string(&hash_path)?;
            if existing.trim() != hash {
                return Err(CliError::Config(format!(
                    "{} was created with config {}, current config is {}; use a new --run-dir",
                    run_dir.display(),
                    existing.trim(),
                    hash
                )));
            }
        } else {
            std::fs::write(run_dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
            std::fs::write(&hash_path, format!("{hash}\n"))?;
        }
        Ok(Self {
            cfg,
            run_dir,
            hash,
            quiet: false,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.run_dir.join(stage)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// `true` if the stage already completed under this config and its files
    /// verify.
    fn completed(&self, stage: &str) -> Result<bool, CliError> {
        let dir = self.stage_dir(stage);
        let Some(m) = StageManifest::read(&dir)? else {
            return Ok(false);
        };
        if m.config_hash != self.hash {
            return Err(CliError::Config(format!("{stage} was produced under config {}; use a new --run-dir", m.config_hash)));
        }
        let bad = m.mismatches(&dir);
        if !bad.is_empty() {
            return Err(CliError::Verification(format!("{stage}: {} changed since it was written", bad.join(", "))));
        }
        self.log(format!("{stage}: up to date (verified {} files)", m.files.len()));
        Ok(true)
    }

    fn require(&self, stage: &str) -> Result<PathBuf, CliError> {
        let dir = self.stage_dir(stage);
        if StageManifest::read(&dir)?.is_none() {
            return Err(CliError::MissingStage(format!("run `{}` first", stage_command(stage))));
        }
        Ok(dir)
    }

    fn finish(&self, stage: &str, seed: u64, files: &[String]) -> Result<(), CliError> {
        let dir = self.stage_dir(stage);
        StageManifest::build(stage, &self.hash, seed, &dir, files)?.write(&dir)?;
        self.log(format!("{stage}: done ({} files)", files.len()));
        Ok(())
    }

    /// A partially written stage directory is cleared before rerunning.
    fn fresh_dir(&self, stage: &str) -> Result<PathBuf, CliError> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// The original images after subsetting.
    pub fn original_data(&self) -> Result<DataSet, CliError> {
        let data = dataset::load_mnist_train(&self.cfg.data_dir).map_err(|e| CliError::Data(format!("{}: {e}", self.cfg.data_dir.display())))?;
        if self.cfg.subset_fraction < 1.0 {
            Ok(dataset::subsample(&data, self.cfg.subset_fraction, self.cfg.seeds.data)?)
        } else {
            Ok(data)
        }
    }

    fn train_stage(&self, stage: &str, tag: &str, train: &DataSet, val: &DataSet, loss: &LossConfig, epochs: usize, mut files: Vec<String>) -> Result<(), CliError> {
        let dir = self.stage_dir(stage);
        let params = model::init_params::<f32>(&self.cfg.model, self.cfg.seeds.init)?;
        self.log(format!(
            "{stage}: {} parameters, {} training / {} validation samples, {epochs} epochs",
            params.parameter_count(),
            train.len(),
            val.len()
        ));
        let mut observer = FileObserver::new(&dir, epochs, self.quiet)?;
        training::train(params, train, val, loss, &self.cfg.train_config(epochs), tag, &mut observer)?;
        files.extend(observer.files);
        self.finish(stage, self.cfg.seeds.noise, &files)
    }

    pub fn baseline(&self) -> Result<Outcome, CliError> {
        if self.completed(BASELINE)? {
            return Ok(Outcome::UpToDate);
        }
        let dir = self.fresh_dir(BASELINE)?;
        let data = self.original_data()?;
        let (train, val) = dataset::split_train_val(&data, self.cfg.train_fraction, self.cfg.seeds.data)?;
        train.write_idx(&dir, "train")?;
        val.write_idx(&dir, "val")?;
        let files = [idx_names("train"), idx_names("val")].concat();
        // No concept labels are present, so the concept weight has no effect.
        self.train_stage(BASELINE, "baseline", &train, &val, &self.cfg.loss, self.cfg.train.baseline_epochs, files)?;
        Ok(Outcome::Ran)
    }

    pub fn representatives(&self) -> Result<Outcome, CliError> {
        let base = self.require(BASELINE)?;
        if self.completed(REPRESENTATIVES)? {
            return Ok(Outcome::UpToDate);
        }
        let ckpt = Checkpoint::load(&base.join(CHECKPOINT))?;
        let train = DataSet::read_idx(&base, "train")?;
        let dir = self.fresh_dir(REPRESENTATIVES)?;
        let (reps, report) = build_representatives(&ckpt.params, &train, self.cfg.seeds.cluster, &ckpt.tag)?;
        reps.write_idx(&dir, "representatives")?;
        analysis::render_grid(&reps.images, self.cfg.analysis.grid_columns, &dir.join("representatives.png"))?;
        write_json(&dir.join("report.json"), &report)?;
        let mut files = idx_names("representatives").to_vec();
        files.extend(["representatives.png".to_string(), "report.json".to_string()]);
        self.finish(REPRESENTATIVES, self.cfg.seeds.cluster, &files)?;
        Ok(Outcome::Ran)
    }

    pub fn augment(&self) -> Result<Outcome, CliError> {
        let reps_dir = self.require(REPRESENTATIVES)?;
        if self.completed(AUGMENT)? {
            return Ok(Outcome::UpToDate);
        }
        let reps = RepresentativeSet::read_idx(&reps_dir, "representatives", "representatives")?;
        let original = self.original_data()?;
        let table = self.cfg.concept_table()?;
        let dir = self.fresh_dir(AUGMENT)?;
        let concepts = conceptgen::generate_concept_dataset(&table, &original, &reps, self.cfg.per_concept(), self.cfg.concepts.p_training_source, self.cfg.seeds.data)?;
        let merged = conceptgen::build_augmented_dataset(&original, &concepts)?;
        let (train, val) = dataset::split_train_val(&merged, self.cfg.train_fraction, self.cfg.seeds.data)?;
        concepts.write_idx(&dir, "concepts")?;
        train.write_idx(&dir, "train")?;
        val.write_idx(&dir, "val")?;
        let counts = Bookkeeping::of(&concepts, &merged, &train, &val);
        write_json(&dir.join("bookkeeping.json"), &counts)?;
        self.log(format!(
            "augment: {} concept samples, {} merged, {} train / {} val",
            counts.concepts, counts.merged, counts.train, counts.val
        ));
        let mut files = [idx_names("concepts"), idx_names("train"), idx_names("val")].concat();
        files.push("bookkeeping.json".into());
        self.finish(AUGMENT, self.cfg.seeds.data, &files)?;
        Ok(Outcome::Ran)
    }

    pub fn train(&self, with_concept_loss: bool) -> Result<Outcome, CliError> {
        let aug = self.require(AUGMENT)?;
        let (stage, tag) = if with_concept_loss {
            (TRAIN_WITH, "with-concept-loss")
        } else {
            (TRAIN_WITHOUT, "without-concept-loss")
        };
        if self.completed(stage)? {
            return Ok(Outcome::UpToDate);
        }
        let train = DataSet::read_idx(&aug, "train")?;
        let val = DataSet::read_idx(&aug, "val")?;
        self.fresh_dir(stage)?;
        let loss = paired_loss(&self.cfg.loss, with_concept_loss);
        self.train_stage(stage, tag, &train, &val, &loss, self.cfg.train.epochs, Vec::new())?;
        Ok(Outcome::Ran)
    }

    pub fn analyze(&self) -> Result<Outcome, CliError> {
        let base = self.require(BASELINE)?;
        let reps_dir = self.require(REPRESENTATIVES)?;
        let aug = self.require(AUGMENT)?;
        let with = self.require(TRAIN_WITH)?;
        let without = self.require(TRAIN_WITHOUT)?;
        if self.completed(ANALYSIS)? {
            return Ok(Outcome::UpToDate);
        }
        let dir = self.fresh_dir(ANALYSIS)?;
        let cols = self.cfg.analysis.grid_columns;
        let seed = self.cfg.seeds.cluster;
        let with_params = Checkpoint::load(&with.join(CHECKPOINT))?.params;
        let without_params = Checkpoint::load(&without.join(CHECKPOINT))?.params;
        let train = DataSet::read_idx(&aug, "train")?;
        let val = DataSet::read_idx(&aug, "val")?;
        let digits = train.filter_labels(0, 9);
        let concepts = train.filter_labels(dataset::FIRST_CONCEPT_LABEL, dataset::MAX_LABEL);
        let reps = RepresentativeSet::read_idx(&reps_dir, "representatives", "representatives")?;
        let templates = conceptgen::concept_templates(&self.cfg.concept_table()?, &reps);
        let mut files = Vec::new();
        let mut save = |name: &str, report: &mut ClusterReport| -> Result<(), CliError> {
            let png = format!("{name}.png");
            analysis::render_grid(&report.center_images, cols, &dir.join(&png))?;
            report.grid_path = Some(png.clone());
            write_json(&dir.join(format!("{name}.json")), report)?;
            files.extend([png, format!("{name}.json")]);
            Ok(())
        };

        self.log("analysis: latent clusters of digit images");
        let labels = |d: &DataSet| d.iter().map(|s| s.label()).collect::<Vec<u8>>();
        let c = analysis::cluster_latents(&with_params, &digits, self.cfg.analysis.digit_clusters, seed)?;
        let mut latent_digits = analysis::decode_centers(&with_params, &c, &labels(&digits))?;
        save("latent-digits", &mut latent_digits)?;

        self.log("analysis: latent clusters of concept images");
        let c = analysis::cluster_latents(&with_params, &concepts, self.cfg.analysis.concept_clusters, seed)?;
        let mut latent_concepts = analysis::decode_centers(&with_params, &c, &labels(&concepts))?;
        save("latent-concepts", &mut latent_concepts)?;

        self.log("analysis: layer-3 clusters with and without concept loss");
        let layer = self.cfg.loss.concept_layer;
        let mut layer_with = layer_report(&with_params, &concepts, layer, self.cfg.analysis.concept_clusters, seed, &templates)?;
        save("layer3-with-concept-loss", &mut layer_with)?;
        let mut layer_without = layer_report(&without_params, &concepts, layer, self.cfg.analysis.concept_clusters, seed, &templates)?;
        save("layer3-without-concept-loss", &mut layer_without)?;

        analysis::render_grid(&templates, cols, &dir.join("concept-templates.png"))?;
        files.push("concept-templates.png".into());

        let baseline_mse = final_val_mse(&base.join(METRICS))?;
        let with_mse = final_val_mse(&with.join(METRICS))?;
        let without_mse = final_val_mse(&without.join(METRICS))?;
        let digit_val = val.filter_labels(0, 9);
        let report = AnalysisReport {
            clustered_subset: "augmented training split".into(),
            val_mse: ValMse {
                baseline: baseline_mse,
                with_concept_loss: with_mse,
                without_concept_loss: without_mse,
                ratio_with_to_baseline: with_mse / baseline_mse,
                with_concept_loss_digit_val: training::evaluate_mse(&with_params, &digit_val)?,
                without_concept_loss_digit_val: training::evaluate_mse(&without_params, &digit_val)?,
            },
            digit_clusters_purer_than_half: latent_digits.count_purer_than(0.5),
            alignment_with_concept_loss: layer_with.alignment_score.unwrap_or(f64::NAN),
            alignment_without_concept_loss: layer_without.alignment_score.unwrap_or(f64::NAN),
        };
        write_json(&dir.join("report.json"), &report)?;
        let summary = report.summary();
        std::fs::write(dir.join("summary.txt"), &summary)?;
        files.extend(["report.json".to_string(), "summary.txt".to_string()]);
        if !self.quiet {
            print!("{summary}");
        }
        self.finish(ANALYSIS, seed, &files)?;
        Ok(Outcome::Ran)
    }

    /// Re-hashes every stage directory. Returns the number of files checked.
    pub fn verify(&self) -> Result<usize, CliError> {
        let mut problems = Vec::new();
        let mut checked = 0;
        for stage in STAGES {
            let dir = self.stage_dir(stage);
            let Some(m) = StageManifest::read(&dir)? else { continue };
            if m.config_hash != self.hash {
                problems.push(format!("{stage}: config hash {}", m.config_hash));
            }
            for name in m.mismatches(&dir) {
                problems.push(format!("{stage}/{name}: hash mismatch"));
            }
            checked += m.files.len();
        }
        if problems.is_empty() {
            self.log(format!("verified {checked} files in {}", self.run_dir.display()));
            Ok(checked)
        } else {
            Err(CliError::Verification(problems.join("; ")))
        }
    }

    /// Every enabled stage in order.
    pub fn run_all(&self) -> Result<(), CliError> {
        let s = &self.cfg.stages;
        if s.fetch {
            crate::fetch::fetch(&self.cfg)?;
        }
        if s.baseline {
            self.baseline()?;
        }
        if s.representatives {
            self.representatives()?;
        }
        if s.augment {
            self.augment()?;
        }
        if s.train_with {
            self.train(true)?;
        }
        if s.train_without {
            self.train(false)?;
        }
        if s.analyze {
            self.analyze()?;
        }
        Ok(())
    }
}

fn stage_command(stage: &str) -> &'static str {
    match stage {
        BASELINE => "baseline",
        REPRESENTATIVES => "representatives",
        AUGMENT => "augment",
        TRAIN_WITH => "train --concept-loss=on",
        TRAIN_WITHOUT => "train --concept-loss=off",
        _ => "analyze",
    }
}

/// The loss for one arm of a paired run; only the concept weight differs.
pub fn paired_loss(base: &LossConfig, with_concept_loss: bool) -> LossConfig {
    LossConfig {
        concept_weight: if with_concept_loss { base.concept_weight } else { 0.0 },
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativesReport {
    pub checkpoint_tag: String,
    /// `cluster_digit[c]` is the digit assigned to cluster `c`.
    pub cluster_digit: Vec<u8>,
    pub purity: Vec<f64>,
    pub dominant_label: Vec<Option<u8>>,
    pub sizes: Vec<usize>,
    pub inertia: f64,
}

/// 10-cluster latent k-means, decoded centers, and the purity-maximizing
/// one-to-one assignment of clusters to digits.
pub fn build_representatives(params: &ModelParams<f32>, train: &DataSet, seed: u64, tag: &str) -> Result<(RepresentativeSet, RepresentativesReport), CliError> {
    let digits = train.filter_labels(0, 9);
    let clustering = analysis::cluster_latents(params, &digits, 10, seed)?;
    let labels: Vec<u8> = digits.iter().map(|s| s.label()).collect();
    let report = analysis::decode_centers(params, &clustering, &labels)?;
    let hist = analysis::label_histograms(&clustering.assignment, &labels, 10);
    let cluster_digit = analysis::assign_labels(&hist, 10).map_err(|e| CliError::AmbiguousAssignment(e.to_string()))?;
    let mut images = vec![Image28::zeros(); 10];
    for (c, &d) in cluster_digit.iter().enumerate() {
        images[d as usize] = report.center_images[c].quantized();
    }
    let reps = RepresentativeSet::new(images, tag)?;
    Ok((
        reps,
        RepresentativesReport {
            checkpoint_tag: tag.to_string(),
            cluster_digit,
            purity: report.purity,
            dominant_label: report.dominant_label,
            sizes: report.sizes,
            inertia: report.inertia,
        },
    ))
}

/// Layer-map clustering plus the alignment score of its centers.
pub fn layer_report(params: &ModelParams<f32>, concepts: &DataSet, layer: usize, k: usize, seed: u64, templates: &[Image28]) -> Result<ClusterReport, CliError> {
    let (clustering, mut report) = analysis::cluster_layer_maps(params, concepts, layer, k, seed)?;
    report.alignment_score = Some(analysis::alignment_score(&clustering.centers, templates));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bookkeeping {
    pub concepts: usize,
    pub merged: usize,
    pub train: usize,
    pub val: usize,
    /// Samples per label 0-27 in the generated concept set.
    pub concept_label_counts: Vec<usize>,
}

impl Bookkeeping {
    pub fn of(concepts: &DataSet, merged: &DataSet, train: &DataSet, val: &DataSet) -> Self {
        Self {
            concepts: concepts.len(),
            merged: merged.len(),
            train: train.len(),
            val: val.len(),
            concept_label_counts: concepts.label_counts().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMse {
    pub baseline: f64,
    pub with_concept_loss: f64,
    pub without_concept_loss: f64,
    pub ratio_with_to_baseline: f64,
    /// MSE on the digit-labelled part of the augmented validation split.
    pub with_concept_loss_digit_val: f64,
    pub without_concept_loss_digit_val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub clustered_subset: String,
    pub val_mse: ValMse,
    pub digit_clusters_purer_than_half: usize,
    pub alignment_with_concept_loss: f64,
    pub alignment_without_concept_loss: f64,
}

impl AnalysisReport {
    pub fn summary(&self) -> String {
        let v = &self.val_mse;
        format!(
            "validation MSE (pixel-sum per image)\n\
             \x20 baseline (original images)          {:>10.3}\n\
             \x20 augmented, with concept loss        {:>10.3}\n\
             \x20 augmented, without concept loss     {:>10.3}\n\
             \x20 ratio with / baseline               {:>10.4}\n\
             \x20 with, digit-labelled val only       {:>10.3}\n\
             \x20 without, digit-labelled val only    {:>10.3}\n\
             digit clusters with purity > 0.5       {:>6} / 10\n\
             layer alignment with concept loss      {:>10.4}\n\
             layer alignment without concept loss   {:>10.4}\n",
            v.baseline,
            v.with_concept_loss,
            v.without_concept_loss,
            v.ratio_with_to_baseline,
            v.with_concept_loss_digit_val,
            v.without_concept_loss_digit_val,
            self.digit_clusters_purer_than_half,
            self.alignment_with_concept_loss,
            self.alignment_without_concept_loss,
        )
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>, CliError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn final_val_mse(path: &Path) -> Result<f64, CliError> {
    read_metrics(path)?
        .last()
        .map(|m| m.val_mse)
        .ok_or_else(|| CliError::Data(format!("{} is empty", path.display())))
}

/// A metrics line without the wall-clock field, for reproducibility checks.
pub fn canonical_metrics_line(m: &EpochMetrics) -> String {
    EpochMetrics { seconds: 0.0, ..m.clone() }.to_json_line()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serializes") + "\n")?;
    Ok(())
}

/// Writes the metrics log and checkpoints as training proceeds.
struct FileObserver {
    dir: PathBuf,
    metrics: BufWriter<File>,
    epochs: usize,
    files: Vec<String>,
    quiet: bool,
}

impl FileObserver {
    fn new(dir: &Path, epochs: usize, quiet: bool) -> Result<Self, CliError> {
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(File::create(dir.join(METRICS))?),
            epochs,
            files: vec![METRICS.into()],
            quiet,
        })
    }
}

impl TrainObserver for FileObserver {
    fn on_epoch(&mut self, m: &EpochMetrics, checkpoint: Option<&Checkpoint>) -> conceptvae::Result<()> {
        writeln!(self.metrics, "{}", m.to_json_line())?;
        self.metrics.flush()?;
        if !self.quiet {
            eprintln!(
                "  epoch {:>3}/{}  bce {:>8.3}  mse {:>8.3}  val_mse {:>8.3}  kl {:>7.3}  concept {:>8.3}  {:.0}s",
                m.epoch, self.epochs, m.train_bce, m.train_mse, m.val_mse, m.kl, m.concept_loss, m.seconds
            );
        }
        if let Some(c) = checkpoint {
            let name = format!("checkpoint-epoch-{:03}.cvae", m.epoch);
            c.save(&self.dir.join(&name))?;
            self.files.push(name);
            if m.epoch == self.epochs {
                c.save(&self.dir.join(CHECKPOINT))?;
                self.files.push(CHECKPOINT.into());
            }
        }
        Ok(())
    }

    fn on_abort(&mut self, last_good: &Checkpoint) -> conceptvae::Result<()> {
        last_good.save(&self.dir.join("checkpoint-last-good.cvae"))
    }
}

/// Files of a stage directory other than its manifest, sorted.
pub fn stage_files(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_NAME)
        .collect();
    names.sort();
    Ok(names)
}
