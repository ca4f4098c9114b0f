use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::augment_set;
use crate::eval::{error_map, evaluate_class, report, ClassEvaluation, ErrorMapLegend, MetricsRow, Reference};
use crate::grid::{extract_all, plan_grid, stitch, TileGrid, TileIndex};
use crate::labels::{
    class_fraction, decode_labels, make_binary_mask, select_images, split_train_test, BinaryMask, LulcClass, MaskValue,
};
use crate::net::Fcn8Model;
use crate::raster::{load_rgb, save_rgb, Dims, Plane, RgbRaster};
use crate::synth;
use crate::training::{
    build_training_set, load_checkpoint, predict, save_checkpoint, train, Checkpoint, Manifest, TrainConfig,
    TrainError, TrainMode,
};

use super::config::{
    check_dataset, load_dataset, write_manifest, DatasetPair, FilePairs, ManifestEntry, PipelineConfig, TrainSettings,
};
use super::{ensure_dir, write_file, write_json, CliError, Command, Context, TrainFlags};

pub(super) fn dispatch(ctx: &Context, cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Masks { class } => masks(ctx, class),
        Command::Split { class } => split(ctx, class),
        Command::Augment { image, mask } => augment(ctx, &image, &mask),
        Command::Tile { image, tile } => tile_cmd(ctx, &image, tile),
        Command::Stitch { grid } => stitch_cmd(ctx, &grid),
        Command::Train { class, flags } => train_cmd(ctx, class, &flags),
        Command::Predict { checkpoint, images, mode } => predict_cmd(ctx, &checkpoint, &images, mode),
        Command::Evaluate { class, preds, truths, mode } => evaluate(ctx, class, &preds, &truths, mode),
        Command::Errormap { pred, truth } => errormap(ctx, &pred, &truth),
        Command::Report { metrics, reference, improvement, title } => {
            report_cmd(ctx, &metrics, reference.as_deref(), improvement, &title)
        }
        Command::Pipeline { class, flags } => pipeline(ctx, class, &flags),
        Command::Synth { kind, count, width, height } => synth_cmd(ctx, &kind, count, width, height),
    }
}

/// Bare image name: file stem with mask/prediction suffixes removed.
fn base_stem(path: &Path) -> String {
    let mut s = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    loop {
        let before = s.len();
        for suffix in [".mask", ".pred", ".stitched", ".errormap"] {
            if let Some(t) = s.strip_suffix(suffix) {
                s = t.to_string();
            }
        }
        for c in LulcClass::ALL {
            if let Some(t) = s.strip_suffix(&format!(".{c}")) {
                s = t.to_string();
            }
        }
        if s.len() == before {
            return s;
        }
    }
}

fn save_png(raster: &RgbRaster, path: PathBuf) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        ensure_dir(d)?;
    }
    Ok(save_rgb(raster, path)?)
}

fn save_mask(mask: &BinaryMask, path: PathBuf) -> Result<(), CliError> {
    save_png(&mask.render(), path)
}

fn fail_if(problems: Vec<String>) -> Result<(), CliError> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::config(problems.join("; ")))
    }
}

/// Validates config (and training settings), loads and header-checks the
/// dataset, reporting every problem together.
fn dataset(ctx: &Context, train: Option<&TrainConfig>) -> Result<Vec<DatasetPair>, CliError> {
    let mut problems = ctx.config.problems(train);
    let Some(path) = &ctx.config.dataset else {
        problems.push("no dataset manifest configured (`dataset` in --config)".into());
        return Err(CliError::config(problems.join("; ")));
    };
    if !path.is_file() {
        return Err(CliError::config(problems.join("; ")));
    }
    let pairs = load_dataset(path)?;
    let bad_data = check_dataset(&pairs);
    if problems.is_empty() && !bad_data.is_empty() {
        return Err(CliError::data(bad_data.join("; ")));
    }
    problems.extend(bad_data);
    fail_if(problems)?;
    Ok(pairs)
}

fn dry_run_done(ctx: &Context, what: &str) -> bool {
    if ctx.dry_run {
        println!("dry run ok: {what}");
    }
    ctx.dry_run
}

type Fractions = [f64; 4];

fn fractions(cfg: &PipelineConfig, pairs: &[DatasetPair]) -> Result<Vec<Fractions>, CliError> {
    pairs
        .par_iter()
        .map(|p| {
            let map = decode_labels(&load_rgb(&p.labels)?, &cfg.palette, cfg.label_tolerance)?;
            Ok(LulcClass::ALL.map(|c| class_fraction(&map, c)))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitRecord {
    class: LulcClass,
    presence_threshold: f64,
    rng_seed: u64,
    selected: Vec<String>,
    train: Vec<String>,
    test: Vec<String>,
}

struct SplitOutcome {
    record: SplitRecord,
    train: Vec<DatasetPair>,
    test: Vec<DatasetPair>,
}

fn split_pairs(cfg: &PipelineConfig, pairs: &[DatasetPair], class: LulcClass) -> Result<SplitOutcome, CliError> {
    let fr = fractions(cfg, pairs)?;
    let items: Vec<(DatasetPair, Fractions)> = pairs.iter().cloned().zip(fr).collect();
    let selected = select_images(&items, class, &cfg.split, |(_, f), c| f[c.index()])?;
    let (train, test) = split_train_test(&selected, class, &cfg.split)?;
    let names = |v: &[(DatasetPair, Fractions)]| v.iter().map(|(p, _)| p.stem.clone()).collect();
    Ok(SplitOutcome {
        record: SplitRecord {
            class,
            presence_threshold: cfg.split.presence_threshold,
            rng_seed: cfg.split.rng_seed,
            selected: names(&selected),
            train: names(&train),
            test: names(&test),
        },
        train: train.into_iter().map(|(p, _)| p).collect(),
        test: test.into_iter().map(|(p, _)| p).collect(),
    })
}

fn masks(ctx: &Context, class: Option<LulcClass>) -> Result<(), CliError> {
    let pairs = dataset(ctx, None)?;
    if dry_run_done(ctx, &format!("{} pairs", pairs.len())) {
        return Ok(());
    }
    let classes: Vec<LulcClass> = class.map(|c| vec![c]).unwrap_or_else(|| LulcClass::ALL.to_vec());
    let dir = ctx.out.join("masks");
    ensure_dir(&dir)?;
    let cfg = &ctx.config;
    let fr = pairs
        .par_iter()
        .map(|p| {
            let map = decode_labels(&load_rgb(&p.labels)?, &cfg.palette, cfg.label_tolerance)?;
            for &c in &classes {
                save_mask(&make_binary_mask(&map, c), dir.join(format!("{}.{c}.mask.png", p.stem)))?;
            }
            let f: BTreeMap<LulcClass, f64> = LulcClass::ALL.iter().map(|&c| (c, class_fraction(&map, c))).collect();
            Ok((p.stem.clone(), f))
        })
        .collect::<Result<BTreeMap<_, _>, CliError>>()?;
    write_json(&dir.join("fractions.json"), &fr)?;
    ctx.record(&ctx.out, None)?;
    println!("wrote {} masks for {} images", classes.len() * pairs.len(), pairs.len());
    Ok(())
}

fn split(ctx: &Context, class: LulcClass) -> Result<(), CliError> {
    let pairs = dataset(ctx, None)?;
    if dry_run_done(ctx, &format!("{} pairs", pairs.len())) {
        return Ok(());
    }
    let s = split_pairs(&ctx.config, &pairs, class)?;
    write_json(&ctx.out.join(format!("split.{class}.json")), &s.record)?;
    ctx.record(&ctx.out, None)?;
    println!("selected {}, train {}, test {}", s.record.selected.len(), s.train.len(), s.test.len());
    Ok(())
}

fn augment(ctx: &Context, image: &Path, mask: &Path) -> Result<(), CliError> {
    fail_if(ctx.config.problems(None))?;
    let raster = load_rgb(image)?;
    let m = BinaryMask::load(mask)?;
    if dry_run_done(ctx, &format!("{} and {}", raster.dims(), m.dims())) {
        return Ok(());
    }
    let variants = augment_set(&raster, &m, &ctx.config.augment)?;
    let stem = base_stem(image);
    let names = std::iter::once("original").chain(ctx.config.augment.kinds.iter().map(|k| k.name()));
    for ((r, mk), name) in variants.iter().zip(names) {
        save_png(r, ctx.out.join(format!("{stem}.{name}.png")))?;
        save_mask(mk, ctx.out.join(format!("{stem}.{name}.mask.png")))?;
    }
    ctx.record(&ctx.out, None)?;
    println!("wrote {} variants", variants.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TileEntry {
    row: u32,
    col: u32,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridSidecar {
    stem: String,
    grid: TileGrid,
    tiles: Vec<TileEntry>,
}

fn tile_cmd(ctx: &Context, image: &Path, tile: u32) -> Result<(), CliError> {
    let raster = load_rgb(image)?;
    let grid = plan_grid(raster.dims(), tile)?;
    if dry_run_done(ctx, &format!("{} tiles", grid.len())) {
        return Ok(());
    }
    ensure_dir(&ctx.out)?;
    let stem = base_stem(image);
    let mut entries = Vec::with_capacity(grid.len());
    for (idx, t) in extract_all(&raster, &grid) {
        let file = format!("{stem}.r{}c{}.png", idx.row, idx.col);
        save_png(&t, ctx.out.join(&file))?;
        entries.push(TileEntry { row: idx.row, col: idx.col, file });
    }
    let sidecar = GridSidecar { stem: stem.clone(), grid, tiles: entries };
    write_json(&ctx.out.join(format!("{stem}.grid.json")), &sidecar)?;
    ctx.record(&ctx.out, None)?;
    println!(
        "{} rows x {} cols = {} tiles (pad right {}, bottom {})",
        grid.rows,
        grid.cols,
        grid.len(),
        grid.pad_right,
        grid.pad_bottom
    );
    Ok(())
}

fn stitch_cmd(ctx: &Context, sidecar: &Path) -> Result<(), CliError> {
    let text =
        fs::read_to_string(sidecar).map_err(|e| CliError::io(format!("cannot read {}: {e}", sidecar.display())))?;
    let sc: GridSidecar =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("grid sidecar {}: {e}", sidecar.display())))?;
    let base = sidecar.parent().unwrap_or(Path::new(""));
    if dry_run_done(ctx, &format!("{} tiles listed", sc.tiles.len())) {
        return Ok(());
    }
    let tiles = sc
        .tiles
        .iter()
        .map(|t| Ok((TileIndex { row: t.row, col: t.col }, load_rgb(base.join(&t.file))?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let out: RgbRaster = stitch(&tiles, &sc.grid)?;
    ensure_dir(&ctx.out)?;
    save_png(&out, ctx.out.join(format!("{}.stitched.png", sc.stem)))?;
    ctx.record(&ctx.out, None)?;
    println!("stitched {} tiles into {}", tiles.len(), out.dims());
    Ok(())
}

fn class_train_config(ctx: &Context, class: LulcClass, flags: &TrainFlags) -> Result<TrainConfig, CliError> {
    let settings: TrainSettings = flags.settings()?;
    Ok(ctx.config.train_config(class, &settings))
}

fn run_dir(ctx: &Context, cfg: &TrainConfig) -> PathBuf {
    ctx.out.join(format!("{}-{}", cfg.target_class, cfg.mode))
}

fn file_pairs(ctx: &Context, pairs: Vec<DatasetPair>, class: LulcClass) -> FilePairs {
    FilePairs { pairs, palette: ctx.config.palette.clone(), tolerance: ctx.config.label_tolerance, class }
}

/// Split, train, and save the checkpoint under `dir`.
fn train_class(
    ctx: &Context,
    cfg: &TrainConfig,
    pairs: &[DatasetPair],
    dir: &Path,
) -> Result<(Checkpoint, SplitOutcome), CliError> {
    let split = split_pairs(&ctx.config, pairs, cfg.target_class)?;
    write_json(&dir.join("split.json"), &split.record)?;
    let source = file_pairs(ctx, split.train.clone(), cfg.target_class);
    let set = build_training_set(&source, cfg, &ctx.config.augment)?;
    let mut model = Fcn8Model::init(cfg.seed, cfg.width_multiplier);
    if let Some(p) = &ctx.config.pretrained {
        let copied = load_checkpoint(p)?.transfer_into(&mut model);
        log::info!("copied {} pretrained layers from {}", copied.len(), p.display());
    }
    log::info!("training {} ({}) on {} samples", cfg.target_class, cfg.mode, set.len());
    let manifest = |epoch: usize| {
        Manifest::describe(
            Some(cfg.target_class),
            Some(cfg.mode),
            epoch,
            cfg.epochs,
            cfg.learning_rate,
            cfg.batch_size,
            cfg.seed,
        )
    };
    match train(model, &set, cfg) {
        Ok(outcome) => {
            write_json(&dir.join("losses.json"), &outcome.losses)?;
            let mut m = manifest(cfg.epochs);
            m.metrics.insert("final_loss".into(), *outcome.losses.last().expect("epochs >= 1"));
            m.metrics.insert("train_samples".into(), set.len() as f64);
            let cp = Checkpoint::new(outcome.model, m);
            save_checkpoint(&cp, dir.join("checkpoint.fcn8"))?;
            Ok((cp, split))
        }
        Err(TrainError::Diverged(d)) => {
            write_json(&dir.join("losses.json"), &d.losses)?;
            let cp = Checkpoint::new(d.last_good.clone(), manifest(d.epoch));
            save_checkpoint(&cp, dir.join("checkpoint.last-good.fcn8"))?;
            Err(TrainError::Diverged(d).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn train_cmd(ctx: &Context, class: LulcClass, flags: &TrainFlags) -> Result<(), CliError> {
    let cfg = class_train_config(ctx, class, flags)?;
    let pairs = dataset(ctx, Some(&cfg))?;
    if dry_run_done(ctx, &format!("{} pairs, {} {} for {} epochs", pairs.len(), class, cfg.mode, cfg.epochs)) {
        return Ok(());
    }
    let dir = run_dir(ctx, &cfg);
    ensure_dir(&dir)?;
    ctx.record(&dir, Some(&cfg))?;
    let (cp, split) = train_class(ctx, &cfg, &pairs, &dir)?;
    println!(
        "trained {class} ({}) for {} epochs on {} images; final loss {:.6}",
        cfg.mode,
        cfg.epochs,
        split.train.len(),
        cp.manifest.metrics["final_loss"]
    );
    Ok(())
}

fn predict_cmd(ctx: &Context, checkpoint: &Path, images: &[PathBuf], mode: Option<TrainMode>) -> Result<(), CliError> {
    fail_if(ctx.config.problems(None))?;
    let cp = load_checkpoint(checkpoint)?;
    let mode = mode.or(cp.manifest.mode).unwrap_or(TrainMode::Grid);
    let missing: Vec<String> =
        images.iter().filter(|p| !p.is_file()).map(|p| format!("image {} does not exist", p.display())).collect();
    fail_if(missing)?;
    if dry_run_done(ctx, &format!("{} images, {mode} mode", images.len())) {
        return Ok(());
    }
    ensure_dir(&ctx.out)?;
    for img in images {
        let raster = load_rgb(img)?;
        let mask = predict(&cp.model, &raster, mode, ctx.config.predict_batch)?;
        let stem = base_stem(img);
        save_mask(&mask, ctx.out.join(format!("{stem}.pred.png")))?;
        let frac = mask.count(MaskValue::Target) as f64 / mask.pixels().len() as f64;
        println!("{stem}: {} target fraction {frac:.4}", mask.dims());
    }
    ctx.record(&ctx.out, None)?;
    Ok(())
}

fn load_mask_pair(pred: &Path, truth: &Path) -> Result<(BinaryMask, BinaryMask), CliError> {
    Ok((BinaryMask::load(pred)?, BinaryMask::load(truth)?))
}

fn print_row(label: &str, r: &MetricsRow) {
    println!(
        "{label}: accuracy {:.4} iou {:.4} recall {:.4} precision {:.4} f1 {:.4} mean_iou {:.4}",
        r.accuracy, r.iou, r.recall, r.precision, r.f1, r.mean_iou
    );
}

fn evaluate(
    ctx: &Context,
    class: LulcClass,
    preds: &[PathBuf],
    truths: &[PathBuf],
    mode: TrainMode,
) -> Result<(), CliError> {
    if preds.len() != truths.len() {
        return Err(CliError::config(format!("{} --pred files but {} --truth files", preds.len(), truths.len())));
    }
    if dry_run_done(ctx, &format!("{} pairs", preds.len())) {
        return Ok(());
    }
    let pairs = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            let (pm, tm) = load_mask_pair(p, t)?;
            Ok((base_stem(t), pm, tm))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let ev = evaluate_class(class, mode.name(), &pairs)?;
    write_json(&ctx.out.join(format!("metrics.{class}.json")), &ev)?;
    ctx.record(&ctx.out, None)?;
    print_row(class.name(), &ev.row);
    Ok(())
}

fn errormap(ctx: &Context, pred: &Path, truth: &Path) -> Result<(), CliError> {
    let (p, t) = load_mask_pair(pred, truth)?;
    if dry_run_done(ctx, &format!("{}", p.dims())) {
        return Ok(());
    }
    let map = error_map(&p, &t, &ErrorMapLegend::default())?;
    ensure_dir(&ctx.out)?;
    let stem = base_stem(truth);
    save_png(&map, ctx.out.join(format!("{stem}.errormap.png")))?;
    ctx.record(&ctx.out, None)?;
    let cm = crate::eval::confusion(&p, &t)?;
    println!("{stem}: tp {} fn {} fp {} tn {}", cm.tp, cm.fn_, cm.fp, cm.tn);
    Ok(())
}

fn report_cmd(
    ctx: &Context,
    metrics: &[PathBuf],
    reference: Option<&str>,
    improvement: bool,
    title: &str,
) -> Result<(), CliError> {
    let reference = reference
        .map(|n| {
            Reference::by_name(n).ok_or_else(|| {
                CliError::config(format!("unknown reference `{n}` (ecognition, fcn8-downsample, fcn8-grid)"))
            })
        })
        .transpose()?;
    if improvement && reference.is_none() {
        return Err(CliError::config("--improvement needs --reference".into()));
    }
    let mut rows = BTreeMap::new();
    for path in metrics {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
        let ev: ClassEvaluation =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("metrics file {}: {e}", path.display())))?;
        if rows.insert(ev.class, ev.row).is_some() {
            return Err(CliError::config(format!("class {} appears in two metrics files", ev.class)));
        }
    }
    if dry_run_done(ctx, &format!("{} metrics files", metrics.len())) {
        return Ok(());
    }
    let r = report(title, &rows, reference, improvement);
    write_file(&ctx.out.join("report.txt"), r.render_text().as_bytes())?;
    write_file(&ctx.out.join("report.json"), format!("{}\n", r.to_json()).as_bytes())?;
    ctx.record(&ctx.out, None)?;
    print!("{}", r.render_text());
    Ok(())
}

fn pipeline(ctx: &Context, class: LulcClass, flags: &TrainFlags) -> Result<(), CliError> {
    let cfg = class_train_config(ctx, class, flags)?;
    let pairs = dataset(ctx, Some(&cfg))?;
    if dry_run_done(ctx, &format!("{} pairs, {} {} for {} epochs", pairs.len(), class, cfg.mode, cfg.epochs)) {
        return Ok(());
    }
    let dir = run_dir(ctx, &cfg);
    ensure_dir(&dir)?;
    ctx.record(&dir, Some(&cfg))?;
    let (cp, split) = train_class(ctx, &cfg, &pairs, &dir)?;
    println!("selected {}, train {}, test {}", split.record.selected.len(), split.train.len(), split.test.len());
    let source = file_pairs(ctx, split.test.clone(), class);
    let mut evaluated = Vec::with_capacity(split.test.len());
    for (i, p) in split.test.iter().enumerate() {
        let image = source.image(i)?;
        let truth = source.mask(i)?;
        let pred = predict(&cp.model, &image, cfg.mode, ctx.config.predict_batch)?;
        save_mask(&pred, dir.join("predictions").join(format!("{}.pred.png", p.stem)))?;
        save_mask(&truth, dir.join("truth").join(format!("{}.{class}.mask.png", p.stem)))?;
        let map = error_map(&pred, &truth, &ErrorMapLegend::default())?;
        save_png(&map, dir.join("errormaps").join(format!("{}.errormap.png", p.stem)))?;
        evaluated.push((p.stem.clone(), pred, truth));
    }
    let ev = evaluate_class(class, cfg.mode.name(), &evaluated)?;
    write_json(&dir.join("metrics.json"), &ev)?;
    let reference = match cfg.mode {
        TrainMode::Grid => Reference::fcn8_grid(),
        TrainMode::Downsample => Reference::fcn8_downsampled(),
    };
    let rows = BTreeMap::from([(class, ev.row.clone())]);
    let r = report(&format!("{class}, {} mode", cfg.mode), &rows, Some(reference), false);
    write_file(&dir.join("report.txt"), r.render_text().as_bytes())?;
    write_file(&dir.join("report.json"), format!("{}\n", r.to_json()).as_bytes())?;
    print_row(class.name(), &ev.row);
    println!("outputs in {}", dir.display());
    Ok(())
}

fn synth_cmd(ctx: &Context, kind: &str, count: usize, width: u32, height: u32) -> Result<(), CliError> {
    let dims = Dims::new(width, height).map_err(|e| CliError::config(e.to_string()))?;
    let maps = match kind {
        "scenes" => {
            if count < 2 {
                return Err(CliError::config("scenes needs --count of at least 2".into()));
            }
            (0..count).map(|i| synth::scene(ctx.config.seed.wrapping_add(i as u64), dims)).collect()
        }
        "presence" => synth::presence_fixture(),
        other => return Err(CliError::config(format!("unknown synth kind `{other}` (scenes, presence)"))),
    };
    if dry_run_done(ctx, &format!("{} images", maps.len())) {
        return Ok(());
    }
    let palette = &ctx.config.palette;
    let mut entries = Vec::with_capacity(maps.len());
    for (i, map) in maps.iter().enumerate() {
        let name = format!("img{i:03}");
        let image = synth::paint(map, ctx.config.seed.wrapping_add(1000 + i as u64));
        save_png(&image, ctx.out.join("images").join(format!("{name}.png")))?;
        save_png(&map.render(palette), ctx.out.join("labels").join(format!("{name}.png")))?;
        entries.push(ManifestEntry {
            image: PathBuf::from("images").join(format!("{name}.png")),
            labels: PathBuf::from("labels").join(format!("{name}.png")),
        });
    }
    write_manifest(&ctx.out.join("dataset.json"), entries)?;
    let mut cfg = PipelineConfig {
        dataset: Some(PathBuf::from("dataset.json")),
        output_dir: PathBuf::from("out"),
        seed: ctx.config.seed,
        ..PipelineConfig::default()
    };
    if kind == "scenes" {
        let k = (count / 4).max(1);
        cfg.split.test_counts = LulcClass::ALL.iter().map(|&c| (c, k)).collect();
        cfg.train = TrainSettings {
            epochs: Some(2),
            batch_size: Some(2),
            width_multiplier: Some(crate::net::WidthMultiplier::SIXTEENTH),
            ..TrainSettings::default()
        };
    }
    write_json(&ctx.out.join("config.json"), &cfg)?;
    ctx.record(&ctx.out, None)?;
    println!("wrote {} image/label pairs, dataset.json and config.json", maps.len());
    Ok(())
}
