use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::Serialize;

use posemap::calibration::{
    apply_temperature, coverage_histogram, default_t_grid, fit_temperature, synthetic_calibrated, CalibrationSample,
    CoverageHistogram, SyntheticConfig,
};
use posemap::cropgen::{annotations_by_image, assemble, crop_image, CropStrength};
use posemap::decoder::{argmax_decode, expected_oks_decode, fuse_double, udp_decode, DEFAULT_BLUR_SIGMA};
use posemap::fitlab::{fit_map, FitConfig, FitReport, Init, Normalizer};
use posemap::geometry::{domain_vector, window_from_bbox, AreaContext};
use posemap::interop::{
    parse_gt, parse_predictions, read_pmap, write_pmap, GtDocument, PmapFile, PredictionDocument, PredictionEntry,
};
use posemap::metrics::{
    accumulate, evaluate_image, greedy_pairs, group_by_image, presence_pairs, presence_sweep, EvalReport,
    PresenceSweep, Similarity,
};
use posemap::pose::{BBOX_AREA_FACTOR, KEYPOINT_NAMES};
use posemap::probmap::PresenceProbability;
use posemap::{
    ActivationWindow, ImageExtent, KappaTable, Keypoint, KeypointArea, LossConfig, OksParams, Point, PoseInstance,
    ProbabilityMap, Rect, WindowConfig, NUM_KEYPOINTS,
};

use crate::args::*;
use crate::settings::{parse_t_grid, usage, CliError, CliResult, Resolver};

/// Object scale used by `fit` when none is given.
const DEFAULT_FIT_SCALE: f64 = 40.0;

pub struct Ctx {
    resolver: Resolver,
    pool: rayon::ThreadPool,
    kappa_flag: Option<PathBuf>,
}

impl Ctx {
    pub fn new(cli: &Cli) -> CliResult<Self> {
        let resolver = Resolver::new(cli.config.as_deref())?;
        let jobs = resolver.get(cli.jobs, "jobs", 1usize)?;
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Data(anyhow!("thread pool: {e}")))?;
        Ok(Self { resolver, pool, kappa_flag: cli.kappa_table.clone() })
    }

    fn kappas(&self) -> CliResult<KappaTable> {
        self.resolver.kappa_table(self.kappa_flag.clone())
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::Eval(a) => eval(&ctx, a),
        Command::Exeval(a) => exeval(&ctx, a),
        Command::Decode(a) => decode(&ctx, a),
        Command::Cropgen(a) => cropgen(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
        Command::Fit(a) => fit(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Areas(a) => areas(&ctx, a),
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    Ok(std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// To `path` when given, else stdout.
fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => write_file(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes).and_then(|_| out.flush()).context("cannot write to stdout")?;
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
    bytes.push(b'\n');
    bytes
}

fn load_gt(path: &Path) -> CliResult<GtDocument> {
    Ok(parse_gt(&read(path)?).with_context(|| format!("invalid ground truth {}", path.display()))?)
}

fn load_preds(path: &Path) -> CliResult<PredictionDocument> {
    Ok(parse_predictions(&read(path)?).with_context(|| format!("invalid predictions {}", path.display()))?)
}

fn load_pmap(path: &Path) -> CliResult<PmapFile> {
    Ok(read_pmap(&read(path)?).with_context(|| format!("invalid PMAP {}", path.display()))?)
}

fn instances(doc: &GtDocument, path: &Path) -> CliResult<Vec<PoseInstance>> {
    Ok(doc.instances().with_context(|| format!("invalid ground truth {}", path.display()))?)
}

fn probability(value: f64, name: &str) -> CliResult<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(usage(format!("{name} {value} outside [0, 1]")))
    }
}

fn positive(value: f64, name: &str) -> CliResult<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(usage(format!("{name} {value} must be positive")))
    }
}

fn evaluate(
    ctx: &Ctx,
    gts: &[PoseInstance],
    preds: &[PoseInstance],
    num_images: usize,
    kappas: &KappaTable,
    similarity: Similarity,
) -> CliResult<EvalReport> {
    let groups: Vec<_> = group_by_image(gts, preds).into_iter().collect();
    let images = ctx.install(|| {
        groups
            .par_iter()
            .map(|(id, (g, p))| evaluate_image(*id, g, p, kappas, &similarity))
            .collect::<posemap::Result<Vec<_>>>()
    })?;
    let curve = accumulate(images);
    Ok(EvalReport::new(similarity, &curve, num_images))
}

fn report_text(label: &str, r: &EvalReport) -> String {
    let mut s = format!("{label} {:.3}\n", r.map);
    for (t, ap) in &r.ap_per_threshold {
        let _ = writeln!(s, "AP@{t:.2} {ap:.3}");
    }
    let _ = write!(s, "images {}\ngt {}\ndets {}\n", r.num_images, r.num_gt, r.num_dets);
    s
}

fn eval(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    let format = ctx.resolver.choice(a.format, "format", Format::Text)?;
    let kappas = ctx.kappas()?;
    let doc = load_gt(&a.gt)?;
    let gts = instances(&doc, &a.gt)?;
    let preds = load_preds(&a.pred)?.instances();
    let report = evaluate(ctx, &gts, &preds, doc.images.len(), &kappas, Similarity::Oks)?;
    log::info!("{} images, {} gt, {} detections", report.num_images, report.num_gt, report.num_dets);
    let bytes = match format {
        Format::Text => report_text("mAP", &report).into_bytes(),
        Format::Json => json(&report),
    };
    emit(a.out.as_deref(), &bytes)
}

fn sweep_csv(s: &PresenceSweep) -> String {
    let mut out = String::from("threshold,accuracy\n");
    for (t, acc) in s.thresholds.iter().zip(&s.accuracy) {
        let _ = writeln!(out, "{t:.2},{acc:.6}");
    }
    out
}

#[derive(Serialize)]
struct ExevalReport {
    presence_threshold: f64,
    ex: EvalReport,
    oks_map: f64,
}

fn exeval(ctx: &Ctx, a: ExevalArgs) -> CliResult<()> {
    let r = &ctx.resolver;
    let format = r.choice(a.format, "format", Format::Text)?;
    let window = r.window(a.window.padding, a.window.grid_w, a.window.grid_h)?;
    let fixed = r.opt(a.presence_threshold, "presence-threshold")?;
    if let Some(t) = fixed {
        probability(t, "presence threshold")?;
    }
    let balance = r.opt(a.balance_seed, "balance-seed")?;
    let kappas = ctx.kappas()?;
    let doc = load_gt(&a.gt)?;
    let gts = instances(&doc, &a.gt)?;
    let preds = load_preds(&a.pred)?.instances();

    let pairs = presence_pairs(&gts, &preds, &kappas, &window)?;
    let sweep = if pairs.is_empty() {
        log::warn!("no matched keypoints; presence sweep skipped");
        None
    } else {
        let flags: Vec<bool> = pairs.iter().map(|p| p.present).collect();
        let scores: Vec<f64> = pairs.iter().map(|p| p.presence).collect();
        Some(presence_sweep(&flags, &scores, balance)?)
    };
    let threshold = match (fixed, &sweep) {
        (Some(t), _) => t,
        (None, Some(s)) if !s.degenerate => s.best_threshold,
        _ => 0.5,
    };
    log::info!("presence threshold {threshold:.2}");
    let sim = Similarity::ExOks { window, presence_threshold: threshold };
    let mut ex = evaluate(ctx, &gts, &preds, doc.images.len(), &kappas, sim)?;
    ex.presence = sweep.clone();
    let oks = evaluate(ctx, &gts, &preds, doc.images.len(), &kappas, Similarity::Oks)?;

    if let (Some(path), Some(s)) = (&a.sweep_csv, &sweep) {
        write_file(path, sweep_csv(s).as_bytes())?;
    }
    let bytes = match format {
        Format::Text => {
            let mut s = report_text("Ex-mAP", &ex);
            let _ = writeln!(s, "mAP {:.3}", oks.map);
            let _ = writeln!(s, "presence-threshold {threshold:.2}");
            if let Some(sw) = &sweep {
                let _ = writeln!(s, "sweep-accuracy {:.6}", sw.best_accuracy);
            }
            s.into_bytes()
        }
        Format::Json => json(&ExevalReport { presence_threshold: threshold, ex, oks_map: oks.map }),
    };
    emit(a.out.as_deref(), &bytes)
}

/// `√(0.53 · box area)` with the box estimated as the window shrunk by the padding.
fn window_scale(window: &ActivationWindow, padding: f64) -> f64 {
    (BBOX_AREA_FACTOR * window.rect().area()).sqrt() / padding
}

struct DecodeSettings {
    method: Method,
    blur: f64,
    threshold: f64,
    scale: Option<f64>,
    padding: f64,
    image_id: u64,
}

fn keypoint_maps(file: &PmapFile, path: &Path) -> CliResult<Vec<ProbabilityMap>> {
    if file.len() != NUM_KEYPOINTS {
        return Err(CliError::Data(anyhow!("{}: expected {NUM_KEYPOINTS} maps, found {}", path.display(), file.len())));
    }
    Ok(file.maps().with_context(|| format!("invalid maps in {}", path.display()))?)
}

fn decode_one(
    index: usize,
    path: &Path,
    expert: Option<&Path>,
    s: &DecodeSettings,
    kappas: &KappaTable,
) -> CliResult<PredictionEntry> {
    let file = load_pmap(path)?;
    let maps = keypoint_maps(&file, path)?;
    let expert_maps = match expert {
        Some(p) => Some(keypoint_maps(&load_pmap(p)?, p)?),
        None => None,
    };
    let scale = s.scale.unwrap_or_else(|| window_scale(file.window(), s.padding));
    let mut keypoints = Vec::with_capacity(NUM_KEYPOINTS);
    for (k, map) in maps.iter().enumerate() {
        let params = kappas.params(scale, k)?;
        let presence = f64::from(file.presence()[k]);
        let d = match s.method {
            Method::Argmax => argmax_decode(map),
            Method::Udp => udp_decode(map, s.blur)?,
            Method::ExpectedOks => expected_oks_decode(map, &params),
            Method::DoubleHeatmap => {
                let expert = &expert_maps.as_ref().expect("expert maps loaded")[k];
                fuse_double(map, expert, &params, PresenceProbability::new(presence)?, s.threshold)
                    .with_context(|| format!("keypoint {k} of {}", path.display()))?
                    .keypoint
            }
        };
        keypoints.push(Keypoint::predicted(d.location.x, d.location.y, d.score.clamp(0.0, 1.0), Some(presence)));
    }
    let score = keypoints.iter().map(|k| k.confidence).sum::<f64>() / NUM_KEYPOINTS as f64;
    let inst = PoseInstance::new(index as u64, s.image_id, *file.window().rect(), None, keypoints)?.with_score(score);
    let mut entry = PredictionEntry::from_instance(&inst);
    entry.pmap = Some(path.display().to_string());
    Ok(entry)
}

fn decode(ctx: &Ctx, a: DecodeArgs) -> CliResult<()> {
    let r = &ctx.resolver;
    let settings = DecodeSettings {
        method: r.choice(a.method, "method", Method::ExpectedOks)?,
        blur: positive(r.get(a.blur_sigma, "blur-sigma", DEFAULT_BLUR_SIGMA)?, "blur sigma")?,
        threshold: probability(r.get(a.presence_threshold, "presence-threshold", 0.5)?, "presence threshold")?,
        scale: r.opt(a.scale, "scale")?.map(|s| positive(s, "scale")).transpose()?,
        padding: r.get(a.padding, "padding", WindowConfig::default().padding)?,
        image_id: a.image_id.unwrap_or(0),
    };
    if settings.padding < 1.0 {
        return Err(usage("padding must be at least 1"));
    }
    let double = settings.method == Method::DoubleHeatmap;
    if double && a.expert.len() != a.pmap.len() {
        return Err(usage("double-heatmap needs one --expert file per --pmap file"));
    }
    if !double && !a.expert.is_empty() {
        return Err(usage("--expert only applies to --method double-heatmap"));
    }
    let kappas = ctx.kappas()?;
    let entries = ctx.install(|| {
        a.pmap
            .par_iter()
            .enumerate()
            .map(|(i, p)| decode_one(i, p, a.expert.get(i).map(PathBuf::as_path), &settings, &kappas))
            .collect::<CliResult<Vec<_>>>()
    })?;
    let mut bytes = PredictionDocument(entries).to_bytes();
    bytes.push(b'\n');
    emit(a.out.as_deref(), &bytes)
}

fn domain_text(domain: &[f64; 5]) -> String {
    let mut s = String::from("area,percent\n");
    for (area, p) in KeypointArea::ALL.iter().zip(domain) {
        let _ = writeln!(s, "{},{p:.6}", area.label());
    }
    s
}

fn cropgen(ctx: &Ctx, a: CropgenArgs) -> CliResult<()> {
    let r = &ctx.resolver;
    let seed: u64 = r.required(a.seed, "seed")?;
    let d = CropStrength::default();
    let strength = CropStrength::new(
        r.get(a.strength_min, "strength-min", d.min_frac)?,
        r.get(a.strength_max, "strength-max", d.max_frac)?,
    )
    .map_err(|e| usage(e.to_string()))?;
    let window = r.window(a.window.padding, a.window.grid_w, a.window.grid_h)?;
    let doc = load_gt(&a.gt)?;
    let by_image = annotations_by_image(&doc);
    let crops = ctx.install(|| {
        doc.images
            .par_iter()
            .map(|img| {
                let anns = by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
                crop_image(img, anns, &strength, seed, &window)
            })
            .collect::<posemap::Result<Vec<_>>>()
    })?;
    let set = assemble(&doc, crops);
    write_file(&a.out, &set.gt.to_bytes())?;
    if let Some(path) = &a.manifest {
        write_file(path, set.manifest_csv().as_bytes())?;
    }
    if let Some(path) = &a.dropped {
        let mut csv = String::from("annotation_id,image_id\n");
        for d in &set.dropped {
            let _ = writeln!(csv, "{},{}", d.annotation_id, d.image_id);
        }
        write_file(path, csv.as_bytes())?;
    }
    let mut s =
        format!("images {}\nkept {}\ndropped {}\n", set.gt.images.len(), set.gt.annotations.len(), set.dropped.len());
    match &set.domain {
        Some(domain) => s.push_str(&domain_text(domain)),
        None => log::warn!("no labeled keypoints in the output"),
    }
    emit(None, s.as_bytes())
}

/// Samples from PMAP-backed predictions: each GT keypoint that lies inside
/// the matched prediction's map window, paired with that map.
fn pmap_samples(ctx: &Ctx, gt_path: &Path, pred_path: &Path, kappas: &KappaTable) -> CliResult<Vec<CalibrationSample>> {
    let doc = load_gt(gt_path)?;
    let gts = instances(&doc, gt_path)?;
    let pdoc = load_preds(pred_path)?;
    let mut preds = pdoc.instances();
    for (i, p) in preds.iter_mut().enumerate() {
        p.id = i as u64;
    }
    let base = pred_path.parent().unwrap_or(Path::new(""));
    let jobs: Vec<(&PoseInstance, PathBuf)> = greedy_pairs(&gts, &preds, kappas)
        .into_iter()
        .filter_map(|(g, p)| pdoc.0[p.id as usize].pmap.as_ref().map(|m| (g, base.join(m))))
        .collect();
    if jobs.is_empty() {
        return Err(CliError::Data(anyhow!("no matched prediction references a PMAP file")));
    }
    let per_pair = ctx.install(|| {
        jobs.par_iter()
            .map(|(gt, path)| -> CliResult<Vec<CalibrationSample>> {
                let file = load_pmap(path)?;
                let maps = file.maps().with_context(|| format!("invalid maps in {}", path.display()))?;
                let mut out = Vec::new();
                for (kp, map) in gt.keypoints.iter().zip(maps) {
                    if !kp.is_labeled() || kp.presence == Some(0.0) {
                        continue;
                    }
                    if let Some((col, row)) = map.window().cell_of(&kp.point()) {
                        out.push(CalibrationSample::new(map, col, row)?);
                    }
                }
                Ok(out)
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    Ok(per_pair.into_iter().flatten().collect())
}

#[derive(Serialize)]
struct CalibrationReport {
    samples: usize,
    temperature: f64,
    objective_before: f64,
    objective_after: f64,
    before: CoverageHistogram,
    after: CoverageHistogram,
    curve: Vec<(f64, f64)>,
}

fn calibrate(ctx: &Ctx, a: CalibrateArgs) -> CliResult<()> {
    let r = &ctx.resolver;
    let format = r.choice(a.format, "format", Format::Text)?;
    let grid = match r.opt(a.t_grid, "t-grid")? {
        Some(s) => parse_t_grid(&s)?,
        None => default_t_grid(),
    };
    let samples = match (a.synthetic, &a.gt, &a.pred) {
        (Some(n), _, _) => {
            if n == 0 {
                return Err(usage("--synthetic needs at least one sample"));
            }
            let seed: u64 = r.required(a.seed, "seed")?;
            let samples = synthetic_calibrated(n, &SyntheticConfig::default(), seed)?;
            match a.corrupt {
                Some(t) => apply_temperature(&samples, positive(t, "corrupting temperature")?)?,
                None => samples,
            }
        }
        (None, Some(gt), Some(pred)) => pmap_samples(ctx, gt, pred, &ctx.kappas()?)?,
        _ => return Err(usage("calibrate needs --synthetic N or --gt with --pred")),
    };
    if samples.is_empty() {
        return Err(CliError::Data(anyhow!("no ground-truth keypoint falls inside a map window")));
    }
    let before = coverage_histogram(&samples)?;
    let fit = fit_temperature(&samples, &grid)?;
    let after = coverage_histogram(&apply_temperature(&samples, fit.temperature)?)?;
    log::info!("T* = {} over {} samples", fit.temperature, samples.len());

    if let Some(path) = &a.histogram_csv {
        let mut csv = String::from("bin_lo,bin_hi,count_before,fraction_before,count_after,fraction_after\n");
        for i in 0..before.counts.len() {
            let lo = i as f64 * 0.05;
            let _ = writeln!(
                csv,
                "{lo:.2},{:.2},{},{:.6},{},{:.6}",
                lo + 0.05,
                before.counts[i],
                before.fractions[i],
                after.counts[i],
                after.fractions[i]
            );
        }
        write_file(path, csv.as_bytes())?;
    }
    if let Some(path) = &a.curve_csv {
        write_file(path, fit.curve_csv().as_bytes())?;
    }
    let report = CalibrationReport {
        samples: samples.len(),
        temperature: fit.temperature,
        objective_before: before.objective(),
        objective_after: after.objective(),
        before,
        after,
        curve: fit.curve,
    };
    let bytes = match format {
        Format::Text => format!(
            "samples {}\ntemperature {:.6}\nobjective-before {:.9}\nobjective-after {:.9}\nmax-deviation-before {:.6}\nmax-deviation-after {:.6}\n",
            report.samples,
            report.temperature,
            report.objective_before,
            report.objective_after,
            report.before.max_deviation(),
            report.after.max_deviation()
        )
        .into_bytes(),
        Format::Json => json(&report),
    };
    emit(a.out.as_deref(), &bytes)
}

#[derive(Serialize)]
struct KeypointFit {
    keypoint: String,
    kappa: f64,
    #[serde(flatten)]
    report: FitReport,
}

fn fit_text(f: &KeypointFit) -> String {
    let r = &f.report;
    let mut s = format!(
        "keypoint {}\nkappa {:.6}\nfinal-loss {:.9}\nlocation-error {:.6}\nsupport {}\nmass-radius-90 {:.6}\nentropy {:.6}\niterations {}\nhalvings {}\n",
        f.keypoint, f.kappa, r.final_loss, r.location_error, r.support_size, r.mass_radius, r.entropy, r.iterations, r.halvings
    );
    for (radius, mass) in &r.mass_within {
        let _ = writeln!(s, "mass-within-{radius} {mass:.6}");
    }
    s
}

fn fit(ctx: &Ctx, a: FitArgs) -> CliResult<()> {
    let r = &ctx.resolver;
    let format = r.choice(a.format, "format", Format::Text)?;
    let (x, y) = match (a.x, a.y) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(usage("--x and --y are required")),
    };
    let grid_w: usize = r.get(a.grid_w, "grid-w", 48)?;
    let grid_h: usize = r.get(a.grid_h, "grid-h", 64)?;
    if grid_w == 0 || grid_h == 0 {
        return Err(usage("grid sizes must be positive"));
    }
    let window = ActivationWindow::new(Rect::new(0.0, 0.0, grid_w as f64, grid_h as f64)?, grid_w, grid_h)?;
    let gt = Point::new(x, y);
    if !window.contains(&gt) {
        return Err(usage(format!("target ({x}, {y}) outside the {grid_w}x{grid_h} window")));
    }
    let scale = positive(r.get(a.scale, "scale", DEFAULT_FIT_SCALE)?, "scale")?;
    let loss =
        LossConfig::new(r.get(a.alpha, "alpha", LossConfig::default().alpha)?, LossConfig::default().sobel_epsilon)
            .map_err(|e| usage(e.to_string()))?;
    let normalizer = match r.choice(a.normalizer, "normalizer", NormalizerArg::Sparsemax)? {
        NormalizerArg::Sparsemax => Normalizer::Sparsemax,
        NormalizerArg::Softmax => Normalizer::Softmax,
    };
    let (init, seed) = match a.init_scale {
        Some(s) if s < 0.0 || !s.is_finite() => return Err(usage("--init-scale must be non-negative")),
        Some(s) => (Init::Random { scale: s }, r.required(a.seed, "seed")?),
        None => (Init::Zeros, r.get(a.seed, "seed", 0)?),
    };
    let kappas = ctx.kappas()?;
    let mut base = FitConfig::new(OksParams::new(scale, 0.1)?, loss);
    base.window = window;
    base.step = positive(r.get(a.step, "step", base.step)?, "step")?;
    base.iterations = r.get(a.iterations, "iterations", base.iterations)?;
    if base.iterations == 0 {
        return Err(usage("--iterations must be at least 1"));
    }
    base.normalizer = normalizer;
    base.init = init;
    base.seed = seed;

    let targets: Vec<(String, f64)> = if a.all_keypoints {
        if a.trace.is_some() {
            return Err(usage("--trace applies to single fits only"));
        }
        KEYPOINT_NAMES.iter().enumerate().map(|(k, n)| (n.to_string(), kappas.get(k))).collect()
    } else {
        let explicit = r.opt(a.kappa, "kappa")?;
        match (explicit, &a.keypoint) {
            (Some(k), _) => vec![(a.keypoint.clone().unwrap_or_else(|| "custom".into()), positive(k, "kappa")?)],
            (None, Some(name)) => {
                let k = KappaTable::index_of(name).ok_or_else(|| usage(format!("unknown keypoint '{name}'")))?;
                vec![(KEYPOINT_NAMES[k].to_string(), kappas.get(k))]
            }
            (None, None) => return Err(usage("one of --keypoint, --kappa or --all-keypoints is required")),
        }
    };
    let fits = ctx.install(|| {
        targets
            .par_iter()
            .map(|(name, kappa)| -> CliResult<(ProbabilityMap, KeypointFit)> {
                let cfg = FitConfig { params: OksParams::new(scale, *kappa)?, ..base };
                let (map, report) = fit_map(&gt, &cfg)?;
                Ok((map, KeypointFit { keypoint: name.clone(), kappa: *kappa, report }))
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    if let Some(path) = &a.trace {
        write_file(path, fits[0].1.report.trace_csv().as_bytes())?;
    }
    if let Some(path) = &a.pmap_out {
        let maps: Vec<ProbabilityMap> = fits.iter().map(|(m, _)| m.clone()).collect();
        write_file(path, &write_pmap(&PmapFile::from_maps(&maps, &vec![1.0; maps.len()])?))?;
    }
    let bytes = match (format, a.all_keypoints) {
        (Format::Json, _) => json(&fits.iter().map(|(_, f)| f).collect::<Vec<_>>()),
        (Format::Text, false) => fit_text(&fits[0].1).into_bytes(),
        (Format::Text, true) => {
            let mut s = String::from("keypoint,kappa,mass_radius_90,support,location_error,final_loss\n");
            for (_, f) in &fits {
                let r = &f.report;
                let _ = writeln!(
                    s,
                    "{},{:.6},{:.6},{},{:.6},{:.9}",
                    f.keypoint, f.kappa, r.mass_radius, r.support_size, r.location_error, r.final_loss
                );
            }
            s.into_bytes()
        }
    };
    emit(None, &bytes)
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> CliResult<()> {
    let r = &ctx.resolver;
    let window = r.window(a.window.padding, a.window.grid_w, a.window.grid_h)?;
    let balance = r.opt(a.balance_seed, "balance-seed")?;
    let bins: usize = r.get(a.bins, "bins", 10)?;
    if bins < 2 {
        return Err(usage("--bins must be at least 2"));
    }
    let kappas = ctx.kappas()?;
    let doc = load_gt(&a.gt)?;
    let gts = instances(&doc, &a.gt)?;
    let preds = load_preds(&a.pred)?.instances();
    let pairs = presence_pairs(&gts, &preds, &kappas, &window)?;
    if pairs.is_empty() {
        return Err(CliError::Data(anyhow!("no matched keypoints to sweep")));
    }
    let flags: Vec<bool> = pairs.iter().map(|p| p.present).collect();
    let presence: Vec<f64> = pairs.iter().map(|p| p.presence).collect();
    let confidence: Vec<f64> = pairs.iter().map(|p| p.confidence.clamp(0.0, 1.0)).collect();
    let ps = presence_sweep(&flags, &presence, balance)?;
    let cs = presence_sweep(&flags, &confidence, balance)?;
    let rel = posemap::calibration::presence_reliability(&flags, &presence, bins)?;
    if ps.degenerate {
        log::warn!("only one presence class among matched keypoints");
    }
    if let Some(path) = &a.curve_csv {
        let mut csv = String::from("threshold,presence_accuracy,confidence_accuracy\n");
        for i in 0..ps.thresholds.len() {
            let _ = writeln!(csv, "{:.2},{:.6},{:.6}", ps.thresholds[i], ps.accuracy[i], cs.accuracy[i]);
        }
        write_file(path, csv.as_bytes())?;
    }
    if let Some(path) = &a.reliability_csv {
        write_file(path, rel.to_csv().as_bytes())?;
    }
    let s = format!(
        "keypoints {}\npositives {}\nnegatives {}\npresence-threshold {:.2}\npresence-accuracy {:.6}\nconfidence-threshold {:.2}\nconfidence-accuracy {:.6}\npresence-ece {:.6}\n",
        ps.positives + ps.negatives,
        ps.positives,
        ps.negatives,
        ps.best_threshold,
        ps.best_accuracy,
        cs.best_threshold,
        cs.best_accuracy,
        rel.ece
    );
    emit(None, s.as_bytes())
}

fn areas(ctx: &Ctx, a: AreasArgs) -> CliResult<()> {
    let window = ctx.resolver.window(a.window.padding, a.window.grid_w, a.window.grid_h)?;
    let doc = load_gt(&a.gt)?;
    let gts = instances(&doc, &a.gt)?;
    let mut contexts = Vec::with_capacity(gts.len());
    for inst in &gts {
        let img = doc.image(inst.image_id).expect("validated documents reference known images");
        let extent =
            ImageExtent::new(img.width, img.height).with_context(|| format!("image {} has an empty extent", img.id))?;
        contexts.push((inst, window_from_bbox(&inst.bbox, &window)?, extent));
    }
    let domain = domain_vector(contexts.iter().map(|(instance, window, image)| AreaContext {
        instance,
        window,
        image: *image,
    }))?;
    emit(None, domain_text(&domain).as_bytes())
}
