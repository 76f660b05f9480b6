use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{GrayImage, Luma};
use log::{info, warn};

use patchprobe::cluster::{
    compare_ab, pipeline_a, region_to_boxes, ClusterProposal, ComparisonReport, FruitEvidence, VerifyConfig,
    MIN_COMPONENT_AREA,
};
use patchprobe::dataset::{
    derive_bboxes, load_coco, load_source, read_split_map, split_dataset, validate, write_coco, AnnotationStore,
    ImageId, Split, SplitMode, SplitPolicy,
};
use patchprobe::decoders::{read_checkpoint, write_checkpoint, ModelConfig, Task};
use patchprobe::encoder::{encode_image, ArchiveWriter, EncoderRegistry, FeatureArchive, Variant, DEFAULT_LONG_SIDE};
use patchprobe::geometry::BBox;
use patchprobe::mask::BinaryMask;
use patchprobe::metrics::{map_report, seg_metrics, MetricReport, Metrics, PredictionRecord};
use patchprobe::postprocess::PostprocessConfig;
use patchprobe::synth::{cluster_scene, signal_squares, SceneConfig};
use patchprobe::training::{predict_masks, predict_records, train, write_loss_curve, EvalSet, TrainConfig};
use patchprobe::viz::{fit_pca, project_rgb, render_overlay, write_tables, Overlay, VizError};
use patchprobe::PATCH_SIZE;

#[derive(Parser)]
#[command(name = "patchprobe", version, about = "Patch-feature probing: normalize, extract, train, predict, evaluate, visualize")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a dataset to COCO-JSON with an embedded split manifest.
    Normalize(NormalizeArgs),
    /// Encode images into a feature archive.
    Extract(ExtractArgs),
    /// Train a segmentation or detection head on cached features.
    Train(TrainArgs),
    /// Run a trained head over an archive.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Verified cluster proposals (Output A) against region boxes (Output B).
    Cluster(ClusterArgs),
    /// PCA colour maps and prediction overlays.
    Viz {
        #[command(subcommand)]
        command: VizCommand,
    },
    /// Tabulate metric reports.
    Report(ReportArgs),
    /// Write synthetic demo data.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Seg,
    Det,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Seg => Task::Seg,
            TaskArg::Det => Task::Det,
        }
    }
}

#[derive(Args)]
struct NormalizeArgs {
    /// COCO-JSON file, directory with annotations.json, or a mask-raster layout.
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    dst: PathBuf,
    /// train:val:test proportions.
    #[arg(long, default_value = "7:2:1")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Predefined split manifest (image id to split); overrides random splitting.
    #[arg(long)]
    splits: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    coco: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// s, s+, b, l or mock. Only the mock backend ships with this build.
    #[arg(long, default_value = "mock")]
    encoder: Variant,
    #[arg(long)]
    out: PathBuf,
    /// Also store features of the mirrored image.
    #[arg(long)]
    flip_aug: bool,
    #[arg(long, default_value_t = DEFAULT_LONG_SIDE)]
    target_long_side: u32,
    /// Restrict to one split of the store.
    #[arg(long)]
    split: Option<Split>,
    /// Feature width of the mock backend.
    #[arg(long, default_value_t = 64)]
    mock_channels: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    coco: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    flip_aug: bool,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Validation archive; validation images come from the val split of --coco.
    #[arg(long)]
    val_archive: Option<PathBuf>,
    /// Stem width; defaults to the architecture default.
    #[arg(long)]
    stem_dim: Option<usize>,
}

#[derive(Args)]
struct PostprocessArgs {
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.5)]
    nms: f64,
    #[arg(long, default_value_t = 300)]
    max_det: usize,
    #[arg(long, default_value_t = 0.5)]
    mask_threshold: f64,
}

impl PostprocessArgs {
    fn config(&self) -> Result<PostprocessConfig> {
        let cfg = PostprocessConfig { conf: self.conf, nms: self.nms, max_det: self.max_det, mask: self.mask_threshold };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Image sizes and category ids for mapping back to the original frame.
    #[arg(long)]
    coco: PathBuf,
    #[command(flatten)]
    pp: PostprocessArgs,
    /// Detection: COCO-results JSON file. Segmentation: directory of `<image id>.png` masks.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Detection results JSON or a directory of `<image id>.png` masks.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Operating point for detection precision and recall.
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    /// Score only this split of --gt.
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Directory of `<image id>.png` foreground masks.
    #[arg(long)]
    fg_mask_dir: PathBuf,
    /// Fruit detections (COCO-results JSON).
    #[arg(long)]
    fruit_pred: PathBuf,
    /// Cluster annotations.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 2)]
    min_fruits: usize,
    #[arg(long, default_value_t = 0.6)]
    compact: f64,
    #[arg(long, default_value_t = 2.0)]
    rho: f64,
    /// Fruit detections below this score are ignored.
    #[arg(long, default_value_t = 0.25)]
    fruit_conf: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum VizCommand {
    /// PCA colour maps of patch features, fitted on the selected images together.
    Pca {
        #[arg(long)]
        archive: PathBuf,
        /// Comma-separated image ids; all images when omitted.
        #[arg(long, value_delimiter = ',')]
        images: Vec<ImageId>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prediction overlays on the source images.
    Overlay {
        /// Detection results JSON or a directory of `<image id>.png` masks.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Source images; a gray canvas is used when omitted.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of metric report JSON files.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Signal squares readable by the mock encoder.
    Squares,
    /// Fruit groups and isolated fruits for the cluster command.
    Clusters,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "squares")]
    kind: SynthKind,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Normalize(a) => normalize(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Cluster(a) => cluster(a),
        Command::Viz { command } => viz(command),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMask::from_fn(w as usize, h as usize, |x, y| img.get_pixel(x as u32, y as u32).0[0] > 0))
}

fn mask_path(dir: &Path, id: ImageId) -> PathBuf {
    dir.join(format!("{id}.png"))
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn normalize(a: NormalizeArgs) -> Result<()> {
    let ratios = SplitPolicy::parse_ratios(&a.ratios).with_context(|| format!("bad ratios {:?}", a.ratios))?;
    let store = derive_bboxes(&load_source(&a.src)?)?;
    let mut policy = SplitPolicy::random(ratios, a.seed);
    if let Some(p) = &a.splits {
        policy.mode = SplitMode::Predefined(read_split_map(p)?);
    }
    let store = split_dataset(&store, &policy)?;
    let violations = validate(&store);
    if !violations.is_empty() {
        for v in &violations {
            warn!("{v}");
        }
        bail!("{} schema violations", violations.len());
    }
    write_coco(&store, &a.dst)?;
    let (tr, va, te) = store.split_counts();
    info!("{} images, {} instances; splits train {tr} / val {va} / test {te}", store.images.len(), store.instances.len());
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let mut store = load_coco(&a.coco)?;
    if let Some(split) = a.split {
        store = store.split_subset(split);
    }
    let registry = EncoderRegistry::with_mock(a.mock_channels);
    let encoder = registry.get(a.encoder)?;
    let mut writer = ArchiveWriter::new(encoder.spec().clone(), a.split.map_or("all", |s| s.as_str()));
    let mut images: Vec<_> = store.images.iter().collect();
    images.sort_by_key(|im| im.id);
    for im in images {
        let path = a.images.join(&im.file_name);
        let img = image::open(&path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
        let (map, flipped) = encode_image(encoder, &img, im.id, a.target_long_side, a.flip_aug)?;
        writer.push(&map, false)?;
        if let Some(f) = flipped {
            writer.push(&f, true)?;
        }
    }
    let n = writer.len();
    writer.finalize(&a.out)?;
    info!("wrote {n} feature maps to {}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let archive = FeatureArchive::open(&a.archive)?;
    let store = load_coco(&a.coco)?;
    let ids = archive.image_ids();
    let has_splits = !store.splits.is_empty();
    let train_store = if has_splits {
        store.split_subset(Split::Train)
    } else {
        store.subset(&ids)
    };
    let task: Task = a.task.into();
    let mut model_cfg = ModelConfig::for_task(task, archive.spec().embed_dim, store.categories.len());
    if let Some(d) = a.stem_dim {
        model_cfg = model_cfg.with_stem_dim(d);
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        flip: a.flip_aug,
        ..Default::default()
    };
    let val_archive = a.val_archive.as_deref().map(FeatureArchive::open).transpose()?;
    let val_store = val_archive.as_ref().map(|_| store.split_subset(Split::Val));
    let val = val_archive.as_ref().zip(val_store.as_ref()).map(|(archive, store)| EvalSet { archive, store });
    info!("training {:?} head on {} images", task, train_store.images.len());
    let out = train(&archive, &train_store, model_cfg, &cfg, val)?;
    write_checkpoint(&out.best, &a.out)?;
    let curve = a.curve.unwrap_or_else(|| a.out.with_extension("csv"));
    write_loss_curve(&out.curve, &curve)?;
    let last = out.curve.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    info!("{} steps, final loss {last:.5}, kept epoch {}; curve in {}", out.steps, out.best_epoch, curve.display());
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let archive = FeatureArchive::open(&a.archive)?;
    let store = load_coco(&a.coco)?.subset(&archive.image_ids());
    let model = read_checkpoint(&a.ckpt)?;
    let pp = a.pp.config()?;
    match model.task() {
        Task::Det => {
            let records = predict_records(&model, &archive, &store, &pp)?;
            write_json(&records, &a.out)?;
            info!("{} detections over {} images", records.len(), store.images.len());
        }
        Task::Seg => {
            fs::create_dir_all(&a.out)?;
            let masks = predict_masks(&model, &archive, &store, &pp)?;
            for (id, m) in &masks {
                save_mask(m, &mask_path(&a.out, *id))?;
            }
            info!("{} masks written to {}", masks.len(), a.out.display());
        }
    }
    Ok(())
}

fn load_gt(path: &Path, split: Option<Split>) -> Result<AnnotationStore> {
    let store = load_coco(path)?;
    Ok(match split {
        Some(s) => store.split_subset(s),
        None => store,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let gt = load_gt(&a.gt, a.split)?;
    let metrics = match a.task {
        TaskArg::Det => Metrics::Det(map_report(&read_records(&a.pred)?, &gt, a.conf)?.metrics),
        TaskArg::Seg => {
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            let mut images: Vec<_> = gt.images.iter().collect();
            images.sort_by_key(|im| im.id);
            for im in images {
                preds.push(load_mask(&mask_path(&a.pred, im.id))?);
                gts.push(gt.foreground_mask(im.id).context("image without mask")?);
            }
            Metrics::Seg(seg_metrics(&preds, &gts)?)
        }
    };
    let report = MetricReport {
        dataset: a.dataset.unwrap_or_else(|| file_stem(&a.gt)),
        model: a.model.unwrap_or_else(|| file_stem(&a.pred)),
        metrics,
    };
    write_json(&report, &a.out)?;
    println!("{}", serde_json::to_string(&report.metrics)?);
    Ok(())
}

#[derive(serde::Serialize)]
struct ClusterImageReport {
    image_id: ImageId,
    output_a: Vec<BBox>,
    output_b: Vec<BBox>,
    proposals: Vec<ClusterProposal>,
}

#[derive(serde::Serialize)]
struct ClusterReport {
    config: VerifyConfig,
    comparison: ComparisonReport,
    images: Vec<ClusterImageReport>,
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let cfg = VerifyConfig { min_fruits: a.min_fruits, compact: a.compact, rho: a.rho };
    cfg.validate()?;
    let gt = load_coco(&a.gt)?;
    let category = *gt.class_ids().first().context("cluster annotations have no category")?;
    let mut fruits: BTreeMap<ImageId, Vec<BBox>> = BTreeMap::new();
    for r in read_records(&a.fruit_pred)? {
        if r.score >= a.fruit_conf {
            fruits.entry(r.image_id).or_default().push(r.bbox);
        }
    }
    let (mut out_a, mut out_b) = (BTreeMap::new(), BTreeMap::new());
    let mut images = Vec::new();
    let mut ids: Vec<ImageId> = gt.images.iter().map(|im| im.id).collect();
    ids.sort_unstable();
    for id in ids {
        let mask = load_mask(&mask_path(&a.fg_mask_dir, id))?;
        let evidence = FruitEvidence::from_boxes(fruits.get(&id).map_or(&[][..], |v| v));
        let result = pipeline_a(&mask, &evidence, &cfg);
        let b = region_to_boxes(&mask, MIN_COMPONENT_AREA);
        out_a.insert(id, result.accepted.clone());
        out_b.insert(id, b.clone());
        images.push(ClusterImageReport { image_id: id, output_a: result.accepted, output_b: b, proposals: result.proposals });
    }
    let comparison = compare_ab(&out_a, &out_b, &gt, category)?;
    for (name, m) in [("A", &comparison.output_a), ("B", &comparison.output_b)] {
        println!(
            "output {name}: mAP50 {:.3}  mAP {:.3}  P {:.3}  R {:.3}  F1 {:.3}",
            m.map50, m.map, m.precision, m.recall, m.f1
        );
    }
    write_json(&ClusterReport { config: cfg, comparison, images }, &a.out)
}

fn viz(cmd: VizCommand) -> Result<()> {
    match cmd {
        VizCommand::Pca { archive, images, out } => {
            let archive = FeatureArchive::open(&archive)?;
            let ids = if images.is_empty() { archive.image_ids() } else { images };
            let maps = ids.iter().map(|&id| archive.get(id)).collect::<Result<Vec<_>, _>>()?;
            let model = match fit_pca(&maps, None) {
                Ok(m) => m,
                Err(VizError::ZeroVariance { fallback }) => {
                    warn!("features have zero variance; rendering gray");
                    *fallback
                }
                Err(e) => return Err(e.into()),
            };
            fs::create_dir_all(&out)?;
            for m in &maps {
                let path = out.join(format!("{}_pca.png", m.image_id));
                project_rgb(m, &model)?.to_image(PATCH_SIZE as u32).save(&path)?;
            }
            write_json(&model, &out.join("pca.json"))?;
            info!("explained variance {:?}", model.explained);
            Ok(())
        }
        VizCommand::Overlay { pred, gt, images, conf, split, out } => {
            let gt = load_gt(&gt, split)?;
            let records = if pred.is_file() { Some(read_records(&pred)?) } else { None };
            fs::create_dir_all(&out)?;
            for im in &gt.images {
                let base = match &images {
                    Some(dir) => image::open(dir.join(&im.file_name))?.to_rgb8(),
                    None => image::RgbImage::from_pixel(im.width, im.height, image::Rgb([128, 128, 128])),
                };
                let raster = match &records {
                    Some(recs) => {
                        let p: Vec<BBox> =
                            recs.iter().filter(|r| r.image_id == im.id && r.score >= conf).map(|r| r.bbox).collect();
                        let g: Vec<BBox> = gt.instances_for(im.id).filter_map(|i| i.bbox).collect();
                        render_overlay(&base, &Overlay::Boxes { pred: &p, gt: &g })?
                    }
                    None => {
                        let p = load_mask(&mask_path(&pred, im.id))?;
                        let g = gt.foreground_mask(im.id);
                        render_overlay(&base, &Overlay::Masks { pred: Some(&p), gt: g.as_ref() })?
                    }
                };
                raster.save(out.join(format!("{}_overlay.png", im.id)))?;
            }
            Ok(())
        }
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut reports = Vec::new();
    for p in &paths {
        let text = fs::read_to_string(p)?;
        let r: MetricReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        reports.push(r);
    }
    let tables = write_tables(&reports, &a.out)?;
    print!("{}", tables.text);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    match a.kind {
        SynthKind::Squares => {
            let set = signal_squares(a.n, &SceneConfig { seed: a.seed, ..Default::default() });
            let dir = a.out.join("images");
            fs::create_dir_all(&dir)?;
            for (id, img) in &set.images {
                let im = set.store.image(*id).context("synthetic image record")?;
                img.save(dir.join(&im.file_name))?;
            }
            write_coco(&set.store, &a.out.join("annotations.json"))?;
        }
        SynthKind::Clusters => {
            let masks = a.out.join("masks");
            fs::create_dir_all(&masks)?;
            let mut store = AnnotationStore::default();
            let mut fruits = Vec::new();
            for k in 0..a.n {
                let id = k as ImageId + 1;
                let scene = cluster_scene(a.seed.wrapping_add(k as u64));
                save_mask(&scene.foreground, &mask_path(&masks, id))?;
                fruits.extend(scene.fruits.iter().map(|&bbox| PredictionRecord { image_id: id, category_id: 1, bbox, score: 1.0 }));
                let mut one = scene.cluster_store(id);
                for inst in &mut one.instances {
                    inst.id = store.instances.len() as u64 + 1;
                    store.instances.push(inst.clone());
                }
                store.categories = one.categories;
                store.images.extend(one.images);
            }
            write_coco(&store, &a.out.join("clusters.json"))?;
            write_json(&fruits, &a.out.join("fruits.json"))?;
        }
    }
    info!("wrote {} synthetic scenes to {}", a.n, a.out.display());
    Ok(())
}
