//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use camalkit::backend::{Model, ParamStore, ReferenceModel};
use camalkit::bench::{self, ExtractionTiming, LineFit, StepTiming};
use camalkit::datasets::{self, Dataset, FoldPlan, LoadOptions, SyntheticSpec};
use camalkit::evaluation::{self, FaithMode, FaithfulnessCurve, PerturbKind, RegularizerKind, StudyCell, Summary};
use camalkit::stats::{self, BootstrapCi, PoiOutcome, TestOutcome, TrialMatrix};
use camalkit::training::{self, Method};
use camalkit::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{self, ExperimentConfig};
use crate::manifest::RunManifest;
use crate::plot::{Chart, Series};

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub force: bool,
    pub jobs: usize,
}

/// Creates `dir`, refusing a non-empty one unless `force` is set, in which case it is cleared.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!("output directory {} is not empty; pass --force to overwrite", dir.display())));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------- generate-data

pub fn load_spec(path: Option<&Path>) -> Result<SyntheticSpec> {
    match path {
        None => Ok(SyntheticSpec::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Axis-aligned bounding box of a mask, used as a coarse stand-in for an
/// externally produced pseudo-mask.
pub fn bounding_box(mask: &Array2<f32>) -> Array2<f32> {
    let (h, w) = mask.dim();
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for ((y, x), &v) in mask.indexed_iter() {
        if v > 0.5 {
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| (y >= y0 && y <= y1 && x >= x0 && x <= x1) as u8 as f32)
}

pub fn generate_data(g: &Globals, spec_file: Option<&Path>, pseudo_masks: Option<&Path>) -> Result<Dataset> {
    let mut spec = load_spec(spec_file)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()?;
    prepare_out(&g.out, g.force)?;
    let effective = toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?;
    let m = RunManifest::begin("generate-data", &g.out, spec_file, Some(config::sha256_hex(effective.as_bytes())), Some(spec.seed));
    let dataset = datasets::generate_synthetic(&spec)?;
    datasets::export(&dataset, &g.out)?;
    fs::write(g.out.join("spec.toml"), effective)?;
    m.finish(&g.out)?;
    if let Some(dir) = pseudo_masks {
        prepare_out(dir, g.force)?;
        let pm = RunManifest::begin("generate-data --pseudo-masks", dir, spec_file, None, Some(spec.seed));
        for s in &dataset.samples {
            datasets::write_mask_png(&bounding_box(&s.mask), &dir.join(format!("{}.png", s.sample_id)))?;
        }
        pm.finish(dir)?;
    }
    println!("wrote {} samples to {}", dataset.len(), g.out.display());
    Ok(dataset)
}

// ------------------------------------------------------------------------ train

pub fn run_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join("runs").join(cfg.dataset_name()).join(cfg.train.method.as_str())
}

fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(fold.to_string())
}

fn fold_complete(run: &Path, fold: usize) -> bool {
    fold_dir(run, fold).join("weights.bin").is_file()
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub trained: Vec<usize>,
    pub skipped: Vec<usize>,
}

pub fn train(g: &Globals, config_path: &Path, folds: Option<&str>) -> Result<TrainOutcome> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let effective = cfg.to_toml()?;
    let hash = config::sha256_hex(effective.as_bytes());
    let run = run_dir(&g.out, &cfg);
    if run.exists() {
        match RunManifest::read(&run) {
            Ok(m) if m.config_sha256.as_deref() == Some(hash.as_str()) => {}
            Ok(_) if !g.force => {
                return Err(Error::Config(format!(
                    "{} was trained with a different config; pass --force to retrain from scratch",
                    run.display()
                )))
            }
            Err(_) if !g.force && fs::read_dir(&run)?.next().is_some() => {
                return Err(Error::Config(format!("{} exists without a manifest; pass --force to overwrite", run.display())))
            }
            _ => fs::remove_dir_all(&run)?,
        }
    }
    fs::create_dir_all(&run)?;
    fs::write(run.join("config.toml"), &effective)?;
    let m = RunManifest::begin("train", &run, Some(config_path), Some(hash), Some(cfg.train.seed));
    m.write(&run)?;

    let dataset = datasets::load_directory(&cfg.data.root, &cfg.load_options())?;
    let plan = datasets::make_folds(&dataset, cfg.data.folds, cfg.data.fold_seed)?;
    write_json(&run.join("folds.json"), &plan)?;
    let pseudo = match cfg.train.method {
        Method::Prior => {
            let dir = cfg.train.pseudo_mask_dir.as_ref().expect("validated");
            Some(datasets::load_pseudo_masks(dir, dataset.samples.iter().map(|s| s.sample_id.as_str()), &cfg.load_options())?)
        }
        _ => None,
    };
    let selected = match folds {
        Some(spec) => config::parse_folds(spec, cfg.data.folds)?,
        None => (0..cfg.data.folds).collect(),
    };
    let (skipped, todo): (Vec<usize>, Vec<usize>) = selected.into_iter().partition(|&f| fold_complete(&run, f));
    for f in &skipped {
        println!("fold {f}: already complete, skipping");
    }
    let tc = cfg.train_config();
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let train_one = |fold: usize| -> Result<()> {
        let (train_idx, _) = plan.split(&dataset, fold)?;
        let art = training::train_classifier(&tc, &dataset, &train_idx, fold, pseudo.as_ref())?;
        art.save(&fold_dir(&run, fold), &effective)?;
        let last = art.log.last().map(|r| r.total).unwrap_or(f32::NAN);
        println!("fold {fold}: {} steps, final loss {last:.4}, {:.1}s", art.timing.steps, art.timing.total_seconds);
        Ok(())
    };
    std::thread::scope(|s| {
        for _ in 0..g.jobs.max(1).min(todo.len().max(1)) {
            s.spawn(|| loop {
                if failure.lock().expect("lock").is_some() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&fold) = todo.get(i) else { break };
                if let Err(e) = train_one(fold) {
                    failure.lock().expect("lock").get_or_insert(e);
                    break;
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    m.finish(&run)?;
    Ok(TrainOutcome { run_dir: run, trained: todo, skipped })
}

// --------------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    Align,
    Faith,
    Accuracy,
}

impl EvalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalKind::Align => "align",
            EvalKind::Faith => "faith",
            EvalKind::Accuracy => "accuracy",
        }
    }
}

/// A trained run directory whose config hash has been verified.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub plan: FoldPlan,
    pub folds: Vec<usize>,
}

impl LoadedRun {
    pub fn open(dir: &Path) -> Result<Self> {
        let m = RunManifest::read(dir)?;
        let text = fs::read_to_string(dir.join("config.toml"))
            .map_err(|e| Error::Format(format!("{}: {e}", dir.join("config.toml").display())))?;
        let hash = config::sha256_hex(text.as_bytes());
        if m.config_sha256.as_deref() != Some(hash.as_str()) {
            return Err(Error::Config(format!(
                "config.toml in {} does not match the hash recorded in its manifest; refusing to evaluate",
                dir.display()
            )));
        }
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let config = ExperimentConfig::from_table(table)?;
        let dataset = datasets::load_directory(&config.data.root, &config.load_options())?;
        let plan = datasets::make_folds(&dataset, config.data.folds, config.data.fold_seed)?;
        let mut folds: Vec<usize> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.parse().ok()))
            .collect();
        folds.sort_unstable();
        if folds.is_empty() {
            return Err(Error::InsufficientData(format!("no fold directories in {}", dir.display())));
        }
        Ok(Self { dir: dir.to_path_buf(), config, dataset, plan, folds })
    }

    pub fn model(&self, fold: usize) -> Result<ReferenceModel> {
        let path = fold_dir(&self.dir, fold).join("weights.bin");
        let file = fs::File::open(&path).map_err(|e| Error::Format(format!("missing weights {}: {e}", path.display())))?;
        let weights = ParamStore::read_from(&mut BufReader::new(file))?;
        let mut model = ReferenceModel::build(&self.config.model.name, self.dataset.n_classes, self.dataset.image_size(), false, 0)?;
        model.params_mut().load_values(weights)?;
        Ok(model)
    }

    pub fn layer(&self, model: &ReferenceModel) -> String {
        self.config.model.capture_layer.clone().unwrap_or_else(|| model.default_capture_layer())
    }

    pub fn test_indices(&self, fold: usize) -> Result<Vec<usize>> {
        Ok(self.plan.split(&self.dataset, fold)?.1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignRow {
    pub fold: usize,
    pub sample_id: String,
    pub iou: f64,
    pub tau: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSummaryRow {
    pub fold: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub fold: usize,
    pub sample_id: String,
    pub label: usize,
    pub mode: String,
    pub k: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AucRow {
    pub fold: usize,
    pub sample_id: String,
    pub label: usize,
    pub mode: String,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandRow {
    pub mode: String,
    pub k: f64,
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignSummary {
    pub method: String,
    pub dataset: String,
    /// Mean and sample standard deviation of the per-fold mean IoUs.
    pub across_folds: Summary,
    pub per_fold: Vec<FoldSummaryRow>,
    pub tau: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub method: String,
    pub dataset: String,
    pub across_folds: Summary,
    pub per_fold: Vec<AccuracyRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaithSummary {
    pub method: String,
    pub dataset: String,
    pub n_samples: usize,
    pub removal_auc: BootstrapCi,
    pub insertion_auc: BootstrapCi,
    /// Largest deviation of a curve endpoint from direct evaluation on the fully perturbed image.
    pub max_endpoint_error: f64,
}

pub fn eval_dir(run: &Path, kind: EvalKind) -> PathBuf {
    run.join("eval").join(kind.as_str())
}

pub fn evaluate(run_dir: &Path, kind: EvalKind) -> Result<PathBuf> {
    let run = LoadedRun::open(run_dir)?;
    let out = eval_dir(run_dir, kind);
    if out.exists() {
        fs::remove_dir_all(&out)?;
    }
    fs::create_dir_all(&out)?;
    let m = RunManifest::begin(
        &format!("evaluate {}", kind.as_str()),
        &out,
        Some(&run_dir.join("config.toml")),
        RunManifest::read(run_dir)?.config_sha256,
        None,
    );
    let method = run.config.train.method.as_str().to_string();
    let dataset_name = run.config.dataset_name();
    match kind {
        EvalKind::Align => {
            let (mut rows, mut folds) = (Vec::new(), Vec::new());
            for &fold in &run.folds {
                let model = run.model(fold)?;
                let test = run.test_indices(fold)?;
                let (records, summary) = evaluation::alignment_eval(&model, &run.dataset, &test, &run.layer(&model), run.config.eval.tau)?;
                rows.extend(records.into_iter().map(|r| AlignRow { fold, sample_id: r.sample_id, iou: r.iou, tau: r.tau }));
                folds.push(FoldSummaryRow { fold, mean: summary.mean, std: summary.std, n: summary.n });
            }
            write_csv(&out.join("alignment.csv"), &rows)?;
            write_csv(&out.join("alignment_folds.csv"), &folds)?;
            let across = Summary::of(&folds.iter().map(|f| f.mean).collect::<Vec<_>>());
            fs::write(
                out.join("table.md"),
                format!("| method | {dataset_name} |\n|---|---|\n| {method} | {:.2} ± {:.2} |\n", across.mean, across.std),
            )?;
            write_json(
                &out.join("summary.json"),
                &AlignSummary { method, dataset: dataset_name, across_folds: across, per_fold: folds, tau: run.config.eval.tau },
            )?;
            println!("mean IoU {:.3} ± {:.3} over {} folds", across.mean, across.std, across.n);
        }
        EvalKind::Accuracy => {
            let mut rows = Vec::new();
            for &fold in &run.folds {
                let model = run.model(fold)?;
                rows.push(AccuracyRow { fold, accuracy: evaluation::accuracy_eval(&model, &run.dataset, &run.test_indices(fold)?)? });
            }
            write_csv(&out.join("accuracy.csv"), &rows)?;
            let across = Summary::of(&rows.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            write_json(
                &out.join("summary.json"),
                &AccuracySummary { method, dataset: dataset_name, across_folds: across, per_fold: rows },
            )?;
            println!("mean accuracy {:.3} ± {:.3} over {} folds", across.mean, across.std, across.n);
        }
        EvalKind::Faith => {
            let k_grid = run.config.k_grid();
            let ev = &run.config.eval;
            let (mut curve_rows, mut auc_rows) = (Vec::new(), Vec::new());
            let mut curves: Vec<(usize, FaithfulnessCurve)> = Vec::new();
            let mut max_endpoint_error = 0.0f64;
            for &fold in &run.folds {
                let model = run.model(fold)?;
                let test = run.test_indices(fold)?;
                let suite = evaluation::representative_faithfulness_suite(
                    &model,
                    &run.dataset,
                    &test,
                    &run.layer(&model),
                    ev.per_class,
                    &k_grid,
                    ev.seed + fold as u64,
                )?;
                max_endpoint_error = max_endpoint_error.max(endpoint_error(&model, &run.dataset, &suite.curves)?);
                for c in suite.curves {
                    let mode = c.curve.mode.as_str().to_string();
                    for (&k, &conf) in c.curve.k_grid.iter().zip(&c.curve.confidence) {
                        curve_rows.push(CurveRow {
                            fold,
                            sample_id: c.sample_id.clone(),
                            label: c.label,
                            mode: mode.clone(),
                            k,
                            confidence: conf,
                        });
                    }
                    auc_rows.push(AucRow { fold, sample_id: c.sample_id, label: c.label, mode, auc: c.curve.auc });
                    curves.push((c.label, c.curve));
                }
            }
            write_csv(&out.join("curves.csv"), &curve_rows)?;
            write_csv(&out.join("auc.csv"), &auc_rows)?;
            let mut band_rows = Vec::new();
            let mut cis = BTreeMap::new();
            for mode in [FaithMode::Removal, FaithMode::Insertion] {
                let group: Vec<(String, &FaithfulnessCurve)> =
                    curves.iter().filter(|(_, c)| c.mode == mode).map(|(l, c)| (format!("class{l}"), c)).collect();
                let band = evaluation::band_for(&group, ev.bootstrap_resamples, 0.95, ev.seed)?;
                for j in 0..band.k_grid.len() {
                    band_rows.push(BandRow {
                        mode: mode.as_str().into(),
                        k: band.k_grid[j],
                        mean: band.mean[j],
                        low: band.low[j],
                        high: band.high[j],
                    });
                }
                cis.insert(mode.as_str(), band.auc);
            }
            write_csv(&out.join("bands.csv"), &band_rows)?;
            plot_bands(&out, &band_rows, &method)?;
            let summary = FaithSummary {
                method,
                dataset: dataset_name,
                n_samples: curves.len() / 2,
                removal_auc: cis["removal"],
                insertion_auc: cis["insertion"],
                max_endpoint_error,
            };
            write_json(&out.join("summary.json"), &summary)?;
            println!("removal AUC {:.3}, insertion AUC {:.3}", summary.removal_auc.point, summary.insertion_auc.point);
        }
    }
    m.finish(&out)?;
    Ok(out)
}

/// Largest gap between curve endpoints and direct model evaluation on the
/// unperturbed and fully perturbed images.
pub fn endpoint_error(model: &dyn Model, dataset: &Dataset, curves: &[evaluation::SuiteCurve]) -> Result<f64> {
    let mut worst = 0.0f64;
    for c in curves {
        let i = dataset.index_of(&c.sample_id).ok_or_else(|| Error::Index(format!("unknown sample `{}`", c.sample_id)))?;
        let (images, labels, _) = dataset.batch(&[i], datasets::SplitRole::Test)?;
        let orig = evaluation::predict_proba(model, &images)?[[0, labels[0]]] as f64;
        let zero = evaluation::predict_proba(model, &ndarray::ArrayD::zeros(images.raw_dim()))?[[0, labels[0]]] as f64;
        let first = c.curve.confidence[0];
        let last = *c.curve.confidence.last().expect("nonempty curve");
        let (want_first, want_last) = match c.curve.mode {
            FaithMode::Removal => (orig, zero),
            FaithMode::Insertion => (zero, orig),
        };
        worst = worst.max((first - want_first).abs()).max((last - want_last).abs());
    }
    Ok(worst)
}

/// Renders `bands.csv`-shaped rows for one or more methods to removal and insertion plots.
pub fn plot_bands(dir: &Path, rows: &[BandRow], label: &str) -> Result<()> {
    plot_band_sets(dir, &[(label.to_string(), rows.to_vec())])
}

pub fn plot_band_sets(dir: &Path, sets: &[(String, Vec<BandRow>)]) -> Result<()> {
    for mode in ["removal", "insertion"] {
        let series = sets
            .iter()
            .map(|(label, rows)| {
                let r: Vec<&BandRow> = rows.iter().filter(|r| r.mode == mode).collect();
                Series {
                    label: label.clone(),
                    xs: r.iter().map(|r| r.k).collect(),
                    ys: r.iter().map(|r| r.mean).collect(),
                    band: Some((r.iter().map(|r| r.low).collect(), r.iter().map(|r| r.high).collect())),
                }
            })
            .collect();
        let chart = Chart {
            title: format!("{mode} curve (95% band)"),
            x_label: "k (% pixels)".into(),
            y_label: "ground-truth confidence".into(),
            series,
        };
        chart.save(dir, &format!("faith_{mode}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- perturb-study

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesRow {
    pub mask_id: String,
    pub kind: String,
    pub regularizer: String,
    pub severities: String,
    pub responses: String,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub truncated_at: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub n_masks: usize,
    pub cells: Vec<StudyCell>,
}

fn fmt_cell(s: &Option<Summary>) -> String {
    match s {
        Some(s) => format!("{:.2} ± {:.2}", s.mean, s.std),
        None => "—".to_string(),
    }
}

pub fn study_markdown(cells: &[StudyCell]) -> String {
    let mut md = String::from("| perturbation | regularizer | Spearman | Pearson |\n|---|---|---|---|\n");
    for c in cells {
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            c.kind.as_str(),
            c.regularizer.as_str(),
            fmt_cell(&c.spearman),
            fmt_cell(&c.pearson)
        ));
    }
    md
}

pub fn study_masks(g: &Globals, masks_dir: Option<&Path>, n: usize) -> Result<Vec<(String, Array2<f32>)>> {
    match masks_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
                .collect();
            paths.sort();
            paths
                .iter()
                .map(|p| {
                    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                    let m = datasets::load_mask(p, &stem, &LoadOptions::default())?;
                    Ok((stem, m))
                })
                .collect()
        }
        None => {
            let spec = SyntheticSpec {
                samples_per_class: n.div_ceil(3).max(1),
                seed: g.seed.unwrap_or(SyntheticSpec::default().seed),
                ..Default::default()
            };
            Ok(datasets::generate_synthetic(&spec)?.samples.into_iter().take(n).map(|s| (s.sample_id, s.mask)).collect())
        }
    }
}

pub fn perturb_study(g: &Globals, masks_dir: Option<&Path>, n: usize, overlays: bool) -> Result<StudyReport> {
    let masks = study_masks(g, masks_dir, n)?;
    if masks.is_empty() {
        return Err(Error::InsufficientData("no masks for the perturbation study".into()));
    }
    prepare_out(&g.out, g.force)?;
    let m = RunManifest::begin("perturb-study", &g.out, masks_dir, None, g.seed);
    let kinds: Vec<(PerturbKind, Vec<usize>)> = PerturbKind::ALL.iter().map(|k| (*k, k.default_severities())).collect();
    let regs = [RegularizerKind::Camal, RegularizerKind::SuppressOnly];
    let (series, cells) = evaluation::regularizer_response_study(&masks, &regs, &kinds)?;
    let join = |v: &[String]| v.join(";");
    let rows: Vec<SeriesRow> = series
        .iter()
        .map(|s| SeriesRow {
            mask_id: s.mask_id.clone(),
            kind: s.kind.as_str().into(),
            regularizer: s.regularizer.as_str().into(),
            severities: join(&s.severities.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
            responses: join(&s.responses.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>()),
            spearman: s.correlation.spearman,
            pearson: s.correlation.pearson,
            truncated_at: s.truncated_at,
        })
        .collect();
    write_csv(&g.out.join("series.csv"), &rows)?;
    fs::write(g.out.join("report.md"), study_markdown(&cells))?;
    let report = StudyReport { n_masks: masks.len(), cells };
    write_json(&g.out.join("report.json"), &report)?;
    if overlays {
        write_overlays(&g.out.join("overlays"), &masks[0].1, &kinds)?;
    }
    m.finish(&g.out)?;
    print!("{}", study_markdown(&report.cells));
    Ok(report)
}

/// One strip per perturbation kind: mask in green, simulated attention in magenta, overlap in white.
fn write_overlays(dir: &Path, mask: &Array2<f32>, kinds: &[(PerturbKind, Vec<usize>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = mask.dim();
    for (kind, sev) in kinds {
        let p = evaluation::perturb_masks(mask.view(), *kind, sev)?;
        let mut img = image::RgbImage::new((w * p.maps.len()) as u32, h as u32);
        for (i, hm) in p.maps.iter().enumerate() {
            for ((y, x), &a) in hm.indexed_iter() {
                let mv = mask[[y, x]] > 0.5;
                let av = a > 0.5;
                let c = match (mv, av) {
                    (true, true) => [255, 255, 255],
                    (true, false) => [0, 160, 0],
                    (false, true) => [200, 0, 200],
                    (false, false) => [0, 0, 0],
                };
                img.put_pixel((i * w + x) as u32, y as u32, image::Rgb(c));
            }
        }
        img.save(dir.join(format!("{}.png", kind.as_str())))?;
    }
    Ok(())
}

// ------------------------------------------------------------------------ stats

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatTest {
    Wsrt,
    Sbci,
    Poi,
}

impl StatTest {
    pub fn as_str(&self) -> &'static str {
        match self {
            StatTest::Wsrt => "wsrt",
            StatTest::Sbci => "sbci",
            StatTest::Poi => "poi",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "test", rename_all = "lowercase")]
pub enum StatsReport {
    Wsrt { a: String, b: String, column: String, keys: Vec<String>, outcome: TestOutcome },
    Sbci { input: String, ci: BootstrapCi },
    Poi { a: String, b: String, outcome: PoiOutcome },
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads `(key, value)` pairs from a CSV whose first column is the key.
pub fn read_keyed_column(path: &Path, column: Option<&str>) -> Result<(String, BTreeMap<String, f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Format(format!("{} needs a key column and a value column", path.display())));
    }
    let idx = match column {
        Some(c) => headers.iter().position(|h| h == c).ok_or_else(|| Error::Format(format!("{} has no column `{c}`", path.display())))?,
        None => 1,
    };
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let key = rec.get(0).unwrap_or_default().to_string();
        let v: f64 = rec
            .get(idx)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("non-numeric value in {}", path.display())))?;
        if out.insert(key.clone(), v).is_some() {
            return Err(Error::Format(format!("duplicate key `{key}` in {}", path.display())));
        }
    }
    Ok((headers[idx].to_string(), out))
}

fn read_matrix(path: &Path) -> Result<TrialMatrix> {
    TrialMatrix::read_csv(fs::File::open(path)?)
}

pub struct StatsArgs<'a> {
    pub a: Option<&'a Path>,
    pub b: Option<&'a Path>,
    pub input: Option<&'a Path>,
    pub column: Option<&'a str>,
    pub resamples: usize,
    pub level: f64,
}

pub fn run_stats(g: &Globals, test: StatTest, args: &StatsArgs<'_>) -> Result<StatsReport> {
    let need = |p: Option<&Path>, flag: &str| {
        p.map(Path::to_path_buf).ok_or_else(|| Error::Config(format!("`stats {}` needs --{flag}", test.as_str())))
    };
    let seed = g.seed.unwrap_or(0);
    let report = match test {
        StatTest::Wsrt => {
            let (a, b) = (need(args.a, "a")?, need(args.b, "b")?);
            let (col, xa) = read_keyed_column(&a, args.column)?;
            let (_, xb) = read_keyed_column(&b, args.column)?;
            if xa.len() != xb.len() || xa.keys().ne(xb.keys()) {
                return Err(Error::Pairing(format!(
                    "{} has {} entries and {} has {}; paired keys must match exactly",
                    a.display(),
                    xa.len(),
                    b.display(),
                    xb.len()
                )));
            }
            let keys: Vec<String> = xa.keys().cloned().collect();
            let va: Vec<f64> = xa.values().copied().collect();
            let vb: Vec<f64> = xb.values().copied().collect();
            let outcome = stats::wsrt_one_tailed(&va, &vb)?;
            StatsReport::Wsrt { a: file_name(&a), b: file_name(&b), column: col, keys, outcome }
        }
        StatTest::Sbci => {
            let input = need(args.input, "input")?;
            let m = read_matrix(&input)?;
            let ci = stats::stratified_bootstrap(&m, |m| Ok(m.mean()), args.resamples, args.level, seed)?;
            StatsReport::Sbci { input: file_name(&input), ci }
        }
        StatTest::Poi => {
            let (a, b) = (need(args.a, "a")?, need(args.b, "b")?);
            let outcome = stats::poi_test(&read_matrix(&a)?, &read_matrix(&b)?, args.resamples, args.level, seed)?;
            StatsReport::Poi { a: file_name(&a), b: file_name(&b), outcome }
        }
    };
    fs::create_dir_all(&g.out)?;
    let m = RunManifest::begin(&format!("stats {}", test.as_str()), &g.out, None, None, Some(seed));
    let text = describe(&report);
    fs::write(g.out.join(format!("{}.txt", test.as_str())), &text)?;
    write_json(&g.out.join(format!("{}.json", test.as_str())), &report)?;
    m.finish(&g.out)?;
    print!("{text}");
    Ok(report)
}

pub fn describe(r: &StatsReport) -> String {
    match r {
        StatsReport::Wsrt { column, outcome: o, .. } => format!(
            "WSRT on `{column}` (one-tailed, a > b): n={} R+={} R-={} T={} p={:.6} ({:?}) -> {}\n",
            o.n,
            o.r_plus,
            o.r_minus,
            o.statistic,
            o.p_value,
            o.method,
            if o.significant { "significant at p < 0.05" } else { "not significant" }
        ),
        StatsReport::Sbci { ci, .. } => {
            format!("mean {:.6}, {:.0}% CI [{:.6}, {:.6}] from {} resamples\n", ci.point, 100.0 * ci.level, ci.low, ci.high, ci.n_resamples)
        }
        StatsReport::Poi { outcome, .. } => format!(
            "POI {:.6}, {:.0}% CI [{:.6}, {:.6}] -> {}\n",
            outcome.ci.point,
            100.0 * outcome.ci.level,
            outcome.ci.low,
            outcome.ci.high,
            if outcome.significant { "significant" } else { "not significant" }
        ),
    }
}

// ------------------------------------------------------------- bench-overhead

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBench {
    pub model: String,
    pub extraction: Vec<ExtractionTiming>,
    pub steps: Vec<StepTiming>,
    /// Per-sample extraction time against batch size, over sizes of at least 4.
    pub per_sample_fit: Option<LineFit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch_sizes: Vec<usize>,
    pub repeats: usize,
    pub models: Vec<ModelBench>,
}

#[derive(Serialize)]
struct ExtractionRow<'a> {
    model: &'a str,
    batch_size: usize,
    batch_level_seconds: f64,
    per_sample_seconds: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct StepRow<'a> {
    model: &'a str,
    batch_size: usize,
    vanilla_seconds: f64,
    camal_batch_seconds: f64,
    camal_per_sample_seconds: f64,
    batch_overhead: f64,
    per_sample_overhead: f64,
}

pub fn bench_overhead(g: &Globals, models: &[String], batch_sizes: &[usize], repeats: usize) -> Result<BenchReport> {
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::Config("batch sizes must be positive".into()));
    }
    prepare_out(&g.out, g.force)?;
    let m = RunManifest::begin("bench-overhead", &g.out, None, None, g.seed);
    let seed = g.seed.unwrap_or(0);
    let mut report = BenchReport { batch_sizes: batch_sizes.to_vec(), repeats, models: Vec::new() };
    for name in models {
        let model = ReferenceModel::build(name, 3, (64, 64), false, seed)?;
        let extraction = bench::time_extraction(&model, batch_sizes, repeats, seed)?;
        let steps = bench::time_steps(&model, batch_sizes, repeats, seed)?;
        let big: Vec<&ExtractionTiming> = extraction.iter().filter(|t| t.batch_size >= 4).collect();
        let per_sample_fit = (big.len() >= 2)
            .then(|| {
                bench::fit_line(
                    &big.iter().map(|t| t.batch_size as f64).collect::<Vec<_>>(),
                    &big.iter().map(|t| t.per_sample_seconds).collect::<Vec<_>>(),
                )
            })
            .transpose()?;
        report.models.push(ModelBench { model: name.clone(), extraction, steps, per_sample_fit });
    }
    let ex_rows: Vec<ExtractionRow> = report
        .models
        .iter()
        .flat_map(|mb| {
            mb.extraction.iter().map(move |t| ExtractionRow {
                model: &mb.model,
                batch_size: t.batch_size,
                batch_level_seconds: t.batch_level_seconds,
                per_sample_seconds: t.per_sample_seconds,
                ratio: t.ratio(),
            })
        })
        .collect();
    write_csv(&g.out.join("extraction.csv"), &ex_rows)?;
    let step_rows: Vec<StepRow> = report
        .models
        .iter()
        .flat_map(|mb| {
            mb.steps.iter().map(move |s| StepRow {
                model: &mb.model,
                batch_size: s.batch_size,
                vanilla_seconds: s.vanilla_seconds,
                camal_batch_seconds: s.camal_batch_seconds,
                camal_per_sample_seconds: s.camal_per_sample_seconds,
                batch_overhead: s.batch_overhead(),
                per_sample_overhead: s.per_sample_overhead(),
            })
        })
        .collect();
    write_csv(&g.out.join("steps.csv"), &step_rows)?;
    write_json(&g.out.join("report.json"), &report)?;
    let xs = |v: &[ExtractionTiming]| v.iter().map(|t| t.batch_size as f64).collect::<Vec<_>>();
    let mut series = Vec::new();
    for mb in &report.models {
        let ms = |f: fn(&ExtractionTiming) -> f64| mb.extraction.iter().map(|t| 1e3 * f(t)).collect::<Vec<_>>();
        series.push(Series {
            label: format!("{} batch-level", mb.model),
            xs: xs(&mb.extraction),
            ys: ms(|t| t.batch_level_seconds),
            band: None,
        });
        series.push(Series {
            label: format!("{} per-sample", mb.model),
            xs: xs(&mb.extraction),
            ys: ms(|t| t.per_sample_seconds),
            band: None,
        });
    }
    Chart { title: "attention extraction time".into(), x_label: "batch size".into(), y_label: "milliseconds".into(), series }
        .save(&g.out, "extraction")?;
    let mut series = Vec::new();
    for mb in &report.models {
        let bx: Vec<f64> = mb.steps.iter().map(|s| s.batch_size as f64).collect();
        series.push(Series {
            label: format!("{} batch-level", mb.model),
            xs: bx.clone(),
            ys: mb.steps.iter().map(StepTiming::batch_overhead).collect(),
            band: None,
        });
        series.push(Series {
            label: format!("{} per-sample", mb.model),
            xs: bx,
            ys: mb.steps.iter().map(StepTiming::per_sample_overhead).collect(),
            band: None,
        });
    }
    Chart { title: "training step time relative to vanilla".into(), x_label: "batch size".into(), y_label: "ratio".into(), series }
        .save(&g.out, "overhead")?;
    for mb in &report.models {
        for t in &mb.extraction {
            println!(
                "{} B={:>3}: batch-level {:.3} ms, per-sample {:.3} ms, ratio {:.2}",
                mb.model,
                t.batch_size,
                1e3 * t.batch_level_seconds,
                1e3 * t.per_sample_seconds,
                t.ratio()
            );
        }
    }
    m.finish(&g.out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bounding_box_of_a_diagonal() {
        let m = array![[0.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(bounding_box(&m), array![[0.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 1.0]]);
    }

    #[test]
    fn undefined_cells_render_as_dash() {
        let cells = vec![StudyCell {
            kind: PerturbKind::Erode,
            regularizer: RegularizerKind::SuppressOnly,
            spearman: None,
            pearson: None,
            n_series: 3,
            n_undefined: 3,
        }];
        assert!(study_markdown(&cells).contains("| erode | suppress-only | — | — |"));
    }

    #[test]
    fn keyed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "fold,accuracy\n0,0.5\n1,0.75\n").unwrap();
        let (col, m) = read_keyed_column(&p, None).unwrap();
        assert_eq!(col, "accuracy");
        assert_eq!(m["1"], 0.75);
        assert!(read_keyed_column(&p, Some("iou")).is_err());
        fs::write(&p, "fold,accuracy\n0,0.5\n0,0.75\n").unwrap();
        assert!(read_keyed_column(&p, None).is_err());
    }

    #[test]
    fn non_empty_output_is_refused_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(matches!(prepare_out(dir.path(), false), Err(Error::Config(_))));
        prepare_out(dir.path(), true).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
