//! Command-line front end. [`run`] returns the process exit code.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::concepts::ConceptSet;
use crate::error::{Error, Result};
use crate::geo::{sphere_grid, GeoCoordinate, ThresholdSpec};
use crate::inference::{
    build_gallery, evaluate, fuse_features, gallery_coordinates, probe_classification, probe_regression,
    random_gallery_baseline, LocationGallery, ProbeConfig, Retriever, TestItem,
};
use crate::interpret::{
    class_differential, clusters_table, concept_map, encode_labels, explain, explanations_table, influence_table,
    kmeans, linear_probe_contributions, LinearProbeConfig, KMEANS_MAX_ITER,
};
use crate::io::{
    fmt_f64, read_embeddings, write_embeddings, write_stamp, CsvTable, Manifest, ManifestKind, ReproStamp, RunConfig,
};
use crate::numkernel::Matrix;
use crate::synthworld::{generate, write_world, WorldParams, WorldSpec};
use crate::trainer::{load_checkpoint, resume, save_checkpoint, ModelState, TrainData};

pub const CHECKPOINT_FILE: &str = "model.gckp";

#[derive(Debug, Parser)]
#[command(
    name = "geoconcept",
    version,
    about = "Concept-aware image/GPS alignment, geo-localization and concept analytics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world with known concept intensities.
    Simulate(SimulateArgs),
    /// Train a model on paired image embeddings and coordinates.
    Train(TrainArgs),
    /// Geo-localize test embeddings and score them against distance thresholds.
    Eval(EvalArgs),
    /// Sparse concept explanations, error-binned influence and class differentials.
    Explain(ExplainArgs),
    /// Similarity between location embeddings and one concept direction.
    Map(MapArgs),
    /// Downstream probe on image, location or fused features.
    Probe(ProbeArgs),
    /// Write empty embedding files, manifests and a default config showing the file formats.
    ExportEmbeddingsTemplate(TemplateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Full world description; overrides every other flag.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub concepts: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long = "train", default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long = "test", default_value_t = 500)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training embeddings (GEMB with an image manifest carrying lat/lon).
    #[arg(long)]
    pub data: PathBuf,
    /// Concept embeddings (GEMB with a concept_set manifest).
    #[arg(long, required_unless_present = "resume")]
    pub concepts: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GalleryArgs {
    /// Training embeddings whose coordinates join the gallery.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Grid spacing in degrees for the uniform gallery sample; 0 disables the grid.
    #[arg(long)]
    pub grid_deg: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test embeddings with lat/lon in the manifest.
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub gallery: GalleryArgs,
    /// Comma-separated distance thresholds in km.
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Consecutive rows sharing an id that are averaged into one query.
    #[arg(long)]
    pub views: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub k_top: Option<usize>,
    #[command(flatten)]
    pub gallery: GalleryArgs,
    /// CSV with `id,label` columns for class differentials and contributions.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Cluster the concept activations into this many groups.
    #[arg(long)]
    pub clusters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub concept: String,
    /// CSV with `lat,lon` and an optional `region` column; a grid is used when absent.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    pub grid_deg: f64,
    /// Compare against the learned basis column instead of the frozen embedding.
    #[arg(long)]
    pub use_basis: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeFeatures {
    Image,
    Location,
    Fused,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Embeddings with lat/lon in the manifest.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// CSV with `id,target` columns.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ProbeKind,
    #[arg(long, value_enum, default_value_t = ProbeFeatures::Location)]
    pub features: ProbeFeatures,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
}

/// Parses `argv` (including the program name), runs the command and maps the outcome to
/// an exit code: 0 success, 1 usage, 2 data, 3 numeric.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Map(a) => map(a),
        Command::Probe(a) => probe(a),
        Command::ExportEmbeddingsTemplate(a) => template(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub struct ImageSet {
    pub ids: Vec<String>,
    pub x: Matrix,
    pub coords: Option<Vec<GeoCoordinate>>,
}

pub fn load_images(path: &Path) -> Result<ImageSet> {
    let (x, manifest) = read_embeddings(path)?;
    if manifest.kind != ManifestKind::ImageEmbeddings {
        return Err(Error::data(format!(
            "{} is a {:?} manifest, expected image_embeddings",
            path.display(),
            manifest.kind
        )));
    }
    Ok(ImageSet {
        coords: manifest.locations()?,
        ids: manifest.ids,
        x,
    })
}

fn require_coords(set: ImageSet, path: &Path) -> Result<(Vec<String>, Matrix, Vec<GeoCoordinate>)> {
    match set.coords {
        Some(c) => Ok((set.ids, set.x, c)),
        None => Err(Error::data(format!(
            "{} has no lat/lon in its manifest",
            path.display()
        ))),
    }
}

pub fn load_concepts(path: &Path) -> Result<ConceptSet> {
    let (rows, manifest) = read_embeddings(path)?;
    if manifest.kind != ManifestKind::ConceptSet {
        return Err(Error::data(format!(
            "{} is a {:?} manifest, expected concept_set",
            path.display(),
            manifest.kind
        )));
    }
    ConceptSet::from_rows(manifest.ids, &rows)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let spec = match &a.world {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<WorldSpec>(&text).map_err(|e| Error::usage(format!("{}: {e}", p.display())))?
        }
        None => WorldSpec::random(&WorldParams {
            seed: a.seed,
            n_concepts: a.concepts,
            embed_dim: a.dim,
            n_train: a.n_train,
            n_test: a.n_test,
            noise_sigma: a.noise,
            ..WorldParams::default()
        })?,
    };
    spec.validate()?;
    let world = generate(&spec)?;
    create_dir(&a.out)?;
    write_world(&a.out, &world)?;
    let spec_json = serde_json::to_string_pretty(&spec)? + "\n";
    crate::io::atomic_write(&a.out.join("world.json"), spec_json.as_bytes())?;
    write_stamp(
        &a.out,
        &ReproStamp::new("simulate", crate::io::sha256_hex(spec_json.as_bytes()), spec.seed),
    )
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(l) = a.lambda {
        cfg.train.loss.lambda = l;
    }
    cfg.validate()?;
    let (ids, x, coords) = require_coords(load_images(&a.data)?, &a.data)?;
    let data = TrainData::new(ids, x, coords)?;
    let state = match &a.resume {
        Some(p) => {
            let mut s = load_checkpoint(p)?;
            s.train_config.epochs = cfg.train.epochs;
            s
        }
        None => {
            let path = a
                .concepts
                .as_deref()
                .ok_or_else(|| Error::usage("--concepts is required"))?;
            let mut concepts = load_concepts(path)?;
            if let Some(sel) = &cfg.concepts {
                concepts = concepts.with_selection_by_name(sel)?;
            }
            ModelState::init(cfg.model.clone(), cfg.train.clone(), concepts)?
        }
    };
    let (state, record) = resume(state, &data)?;
    create_dir(&a.common.out)?;
    save_checkpoint(&state, &a.common.out.join(CHECKPOINT_FILE))?;
    record.write_csv(
        &a.common.out.join("train_steps.csv"),
        &a.common.out.join("train_epochs.csv"),
    )?;
    crate::io::atomic_write(&a.common.out.join("config.json"), (cfg.to_json() + "\n").as_bytes())?;
    if let Some(last) = record.steps.last() {
        println!(
            "step {} total {:.6} infonce {:.6} divergence {:.6}",
            last.step, last.total, last.infonce, last.divergence
        );
    }
    write_stamp(&a.common.out, &ReproStamp::new("train", cfg.hash(), cfg.train.seed))
}

fn gallery_for(model: &ModelState, cfg: &RunConfig, g: &GalleryArgs) -> Result<LocationGallery> {
    let mut gcfg = cfg.eval.gallery.clone();
    if let Some(deg) = g.grid_deg {
        gcfg.grid_deg = (deg > 0.0).then_some(deg);
    }
    let training = match &g.train {
        Some(p) => require_coords(load_images(p)?, p)?.2,
        None => {
            if gcfg.include_training {
                log::warn!("no training embeddings given; the gallery holds grid points only");
            }
            Vec::new()
        }
    };
    let coords = gallery_coordinates(&training, &gcfg)?;
    if coords.is_empty() {
        return Err(Error::usage("gallery is empty: give --train or a positive --grid-deg"));
    }
    build_gallery(model, &coords)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(t) = &a.thresholds {
        cfg.eval.thresholds_km = ThresholdSpec::parse(t)?;
    }
    if let Some(v) = a.views {
        cfg.eval.views = v;
    }
    cfg.validate()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let (ids, x, truths) = require_coords(load_images(&a.test)?, &a.test)?;
    let items = TestItem::group(&ids, &x, &truths, cfg.eval.views)?;
    let gallery = gallery_for(&model, &cfg, &a.gallery)?;
    let report = evaluate(&model, &gallery, &items, &cfg.eval.thresholds_km)?;
    let item_truths: Vec<GeoCoordinate> = items.iter().map(|i| i.truth).collect();
    let baseline = random_gallery_baseline(gallery.coordinates(), &item_truths, &cfg.eval.thresholds_km)?;
    create_dir(&a.common.out)?;
    report.write_csv(
        &a.common.out.join("eval_summary.csv"),
        &a.common.out.join("eval_items.csv"),
        Some(&baseline),
    )?;
    for (t, f) in report.thresholds.thresholds().iter().zip(&report.fractions) {
        println!("{t} km\t{f:.4}");
    }
    write_stamp(&a.common.out, &ReproStamp::new("eval", cfg.hash(), cfg.train.seed))
}

fn read_labels(path: &Path) -> Result<HashMap<String, String>> {
    let t = CsvTable::read(path)?;
    let (Some(i), Some(l)) = (t.column_index("id"), t.column_index("label")) else {
        return Err(Error::data(format!("{} needs id and label columns", path.display())));
    };
    Ok(t.rows.iter().map(|r| (r[i].clone(), r[l].clone())).collect())
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(k) = a.k_top {
        cfg.interpret.k_top = k;
    }
    cfg.validate()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let k = model.concepts.k();
    if cfg.interpret.k_top > k {
        log::warn!(
            "k_top {} exceeds the {k} available concepts; keeping all",
            cfg.interpret.k_top
        );
        cfg.interpret.k_top = k;
    }
    let set = load_images(&a.embeddings)?;
    let gallery = gallery_for(&model, &cfg, &a.gallery)?;
    let retriever = Retriever::new(&model, &gallery)?;
    let mut explanations = Vec::with_capacity(set.ids.len());
    let mut errors = Vec::new();
    for (r, id) in set.ids.iter().enumerate() {
        let view = set.x.row(r).to_vec();
        let mut pred = retriever.predict(std::slice::from_ref(&view))?;
        if let Some(c) = &set.coords {
            let e = crate::geo::haversine_km(c[r], pred.coordinate);
            pred.error_km = Some(e);
            errors.push(e);
        }
        explanations.push(explain(&model, id, &view, Some(&pred), cfg.interpret.k_top)?);
    }
    let out = &a.common.out;
    create_dir(out)?;
    explanations_table(&explanations).write(&out.join("explanations.csv"))?;
    if set.coords.is_some() {
        let table = influence_table(
            &explanations,
            &errors,
            cfg.interpret.min_support,
            cfg.interpret.rank_length,
        )?;
        for n in &table.notices {
            eprintln!("note: {n}");
        }
        table.to_table().write(&out.join("influence.csv"))?;
    }
    let names: Vec<String> = (0..model.concepts.k())
        .map(|j| model.concepts.selected_name(j).to_string())
        .collect();
    let sparse = Matrix::from_rows(&explanations.iter().map(|e| e.sparse.clone()).collect::<Vec<_>>())?;
    if let Some(p) = &a.labels {
        let lookup = read_labels(p)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (r, id) in set.ids.iter().enumerate() {
            if let Some(l) = lookup.get(id) {
                rows.push(r);
                labels.push(l.clone());
            }
        }
        let labelled = sparse.select_rows(&rows);
        let diff = class_differential(&labelled, &labels, &names)?;
        diff.sankey_edges(cfg.interpret.top_m).write(&out.join("sankey.csv"))?;
        let (ids, classes) = encode_labels(&labels);
        let contrib = linear_probe_contributions(&labelled, &ids, &LinearProbeConfig::default())?;
        let mut t = CsvTable::new(["class", "concept", "contribution"]);
        for (c, class) in classes.iter().enumerate() {
            for (j, name) in names.iter().enumerate() {
                t.push([class.clone(), name.clone(), fmt_f64(contrib.weights.get(c, j))]);
            }
        }
        t.write(&out.join("contributions.csv"))?;
    }
    if let Some(k) = a.clusters {
        let z = model.image_concepts(&set.x)?;
        let result = kmeans(&z, k, cfg.train.seed, KMEANS_MAX_ITER)?;
        clusters_table(&set.ids, &result.assignments).write(&out.join("clusters.csv"))?;
    }
    write_stamp(out, &ReproStamp::new("explain", cfg.hash(), cfg.train.seed))
}

fn read_points(path: &Path) -> Result<(Vec<GeoCoordinate>, Option<Vec<String>>)> {
    let t = CsvTable::read(path)?;
    let (Some(la), Some(lo)) = (t.column_index("lat"), t.column_index("lon")) else {
        return Err(Error::data(format!("{} needs lat and lon columns", path.display())));
    };
    let region = t.column_index("region");
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::data(format!("{}: bad number {s:?}", path.display())))
    };
    let mut points = Vec::with_capacity(t.rows.len());
    for r in &t.rows {
        points.push(GeoCoordinate::new(parse(&r[la])?, parse(&r[lo])?)?);
    }
    let regions = region.map(|i| t.rows.iter().map(|r| r[i].clone()).collect());
    Ok((points, regions))
}

fn map(a: MapArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    cfg.interpret.map_use_basis |= a.use_basis;
    let model = load_checkpoint(&a.checkpoint)?;
    let (points, regions) = match &a.points {
        Some(p) => read_points(p)?,
        None => (sphere_grid(a.grid_deg)?, None),
    };
    let m = concept_map(
        &model,
        &a.concept,
        &points,
        regions.as_deref(),
        cfg.interpret.map_use_basis,
    )?;
    create_dir(&a.common.out)?;
    m.to_table().write(&a.common.out.join("map.csv"))?;
    if let Some(t) = m.regions_table() {
        t.write(&a.common.out.join("map_regions.csv"))?;
    }
    write_stamp(&a.common.out, &ReproStamp::new("map", cfg.hash(), cfg.train.seed))
}

fn probe(a: ProbeArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let model = load_checkpoint(&a.checkpoint)?;
    let (ids, x, coords) = require_coords(load_images(&a.embeddings)?, &a.embeddings)?;
    let task = CsvTable::read(&a.task)?;
    let (Some(ic), Some(tc)) = (task.column_index("id"), task.column_index("target")) else {
        return Err(Error::data(format!("{} needs id and target columns", a.task.display())));
    };
    let row_of: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut rows = Vec::with_capacity(task.rows.len());
    let mut targets = Vec::with_capacity(task.rows.len());
    for r in &task.rows {
        let Some(&i) = row_of.get(r[ic].as_str()) else {
            return Err(Error::data(format!(
                "task id {:?} not found in {}",
                r[ic],
                a.embeddings.display()
            )));
        };
        rows.push(i);
        targets.push(r[tc].clone());
    }
    let picked: Vec<GeoCoordinate> = rows.iter().map(|&i| coords[i]).collect();
    let features = match a.features {
        ProbeFeatures::Image => x.select_rows(&rows),
        ProbeFeatures::Location => model.encode_locations(&picked)?,
        ProbeFeatures::Fused => fuse_features(&x.select_rows(&rows), &model.encode_locations(&picked)?)?,
    };
    let pcfg = ProbeConfig {
        seed: a.seed,
        trials: a.trials,
        ..ProbeConfig::default()
    };
    let name = a
        .task
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let result = match a.kind {
        ProbeKind::Regression => {
            let y = targets
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::data(format!("non-numeric target {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            probe_regression(&name, &features, &y, &pcfg)?
        }
        ProbeKind::Classification => {
            let (labels, _) = encode_labels(&targets);
            probe_classification(&name, &features, &labels, &pcfg)?
        }
    };
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let mut t = CsvTable::new(["task", "metric", "value", "lr", "depth", "width"]);
    t.push([
        result.task.clone(),
        result.metric.label().to_string(),
        fmt_f64(result.value),
        fmt_f64(result.hyper.lr),
        result.hyper.depth.to_string(),
        result.hyper.width.to_string(),
    ]);
    create_dir(&a.common.out)?;
    t.write(&a.common.out.join("probe.csv"))?;
    println!("{} {} = {:.4}", result.task, result.metric.label(), result.value);
    write_stamp(&a.common.out, &ReproStamp::new("probe", cfg.hash(), a.seed))
}

fn template(a: TemplateArgs) -> Result<()> {
    if a.dim == 0 {
        return Err(Error::usage("--dim must be positive"));
    }
    create_dir(&a.out)?;
    let empty = Matrix::zeros(0, a.dim);
    let images = Manifest::new(ManifestKind::ImageEmbeddings, Vec::new(), a.dim)
        .with_locations(&[])
        .with_source("template");
    write_embeddings(&a.out.join("images.gemb"), &empty, &images)?;
    let concepts = Manifest::new(ManifestKind::ConceptSet, Vec::new(), a.dim).with_source("template");
    write_embeddings(&a.out.join("concepts.gemb"), &empty, &concepts)?;
    let cfg = RunConfig::default();
    crate::io::atomic_write(&a.out.join("config.json"), (cfg.to_json() + "\n").as_bytes())?;
    write_stamp(
        &a.out,
        &ReproStamp::new("export-embeddings-template", cfg.hash(), cfg.train.seed),
    )
}
