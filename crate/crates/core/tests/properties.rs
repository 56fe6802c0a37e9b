use approx::assert_abs_diff_eq;
use ndarray::Array2;
use posemap::calibration::{coverage_histogram, fit_temperature, presence_reliability, CalibrationSample};
use posemap::cropgen::{transform_instance, CropSpec};
use posemap::decoder::{expected_oks_decode, udp_decode, DEFAULT_BLUR_SIGMA};
use posemap::geometry::{boundary_distance, classify_keypoint, window_from_bbox};
use posemap::interop::{parse_gt, read_pmap, write_pmap, GtAnnotation, GtDocument, GtImage, PmapFile};
use posemap::metrics::{ex_oks_keypoint, mean_ap, presence_sweep, Similarity};
use posemap::oks::{expected_oks_map, oks_similarity, DenseOksLoss};
use posemap::probmap::{coverage_of_point, sparsemax, temperature_scale};
use posemap::*;
use proptest::prelude::*;
use serde_json::Map;

fn window(x0: f64, y0: f64, cell: f64, w: usize, h: usize) -> ActivationWindow {
    ActivationWindow::new(Rect::new(x0, y0, x0 + cell * w as f64, y0 + cell * h as f64).unwrap(), w, h).unwrap()
}

fn map_from(win: ActivationWindow, raw: &[f64]) -> ProbabilityMap {
    let sum: f64 = raw.iter().sum();
    let values = Array2::from_shape_vec((win.grid_h(), win.grid_w()), raw.iter().map(|v| v / sum).collect()).unwrap();
    ProbabilityMap::new(win, values, 0).unwrap()
}

fn raw_map(cells: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![3 => 0.01f64..1.0, 1 => Just(0.0)], cells)
        .prop_filter("some mass", |v| v.iter().any(|x| *x > 0.0))
}

fn person(points: &[(f64, f64)], bbox: Rect, score: f64) -> PoseInstance {
    let mut kps: Vec<Keypoint> = points.iter().map(|(x, y)| Keypoint::labeled(*x, *y, 2)).collect();
    kps.resize(NUM_KEYPOINTS, Keypoint::unlabeled());
    PoseInstance::new(0, 0, bbox, None, kps).unwrap().with_score(score)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn grid_round_trip(
        x0 in -500.0f64..500.0, y0 in -500.0f64..500.0, cell in 0.1f64..10.0,
        w in 1usize..64, h in 1usize..64, u in -2.0f64..2.0, v in -2.0f64..2.0,
    ) {
        let win = window(x0, y0, cell, w, h);
        let p = Point::new(x0 + u * cell * w as f64, y0 + v * cell * h as f64);
        let back = win.grid_to_image(&win.image_to_grid(&p));
        prop_assert!((back.x - p.x).abs() <= 1e-12 * (1.0 + p.x.abs()));
        prop_assert!((back.y - p.y).abs() <= 1e-12 * (1.0 + p.y.abs()));
    }

    #[test]
    fn window_holds_padded_box_with_target_aspect(
        x in -100.0f64..100.0, y in -100.0f64..100.0, bw in 1.0f64..300.0, bh in 1.0f64..300.0,
        padding in 1.0f64..2.0,
    ) {
        let bbox = Rect::from_xywh(x, y, bw, bh).unwrap();
        let cfg = WindowConfig { padding, ..WindowConfig::default() };
        let win = window_from_bbox(&bbox, &cfg).unwrap();
        let r = win.rect();
        let tol = 1e-9 * (1.0 + bw.max(bh));
        prop_assert!(r.width() + tol >= bw * padding && r.height() + tol >= bh * padding);
        // Minimal: one padded side is kept as is.
        prop_assert!((r.width() - bw * padding).abs() <= tol || (r.height() - bh * padding).abs() <= tol);
        prop_assert!((r.width() / r.height() - cfg.aspect_w_h()).abs() <= 1e-9);
        prop_assert!(r.contains_rect(&bbox));
    }

    #[test]
    fn areas_partition_the_plane(
        px in -400.0f64..400.0, py in -400.0f64..400.0,
        x in -100.0f64..200.0, y in -100.0f64..200.0, bw in 1.0f64..150.0, bh in 1.0f64..150.0,
    ) {
        let bbox = Rect::from_xywh(x, y, bw, bh).unwrap();
        let win = window_from_bbox(&bbox, &WindowConfig::default()).unwrap();
        let image = ImageExtent::new(200, 150).unwrap();
        let p = Point::new(px, py);
        let area = classify_keypoint(&p, &bbox, &win, &image);
        prop_assert_eq!(area.in_window(), win.contains(&p));
        match area {
            KeypointArea::A => prop_assert!(bbox.contains(&p)),
            KeypointArea::B | KeypointArea::D => prop_assert!(image.contains(&p) && !bbox.contains(&p)),
            KeypointArea::C | KeypointArea::E => prop_assert!(!image.contains(&p)),
        }
    }

    #[test]
    fn boundary_distance_is_lipschitz(
        ax in -50.0f64..50.0, ay in -50.0f64..50.0, bx in -50.0f64..50.0, by in -50.0f64..50.0,
    ) {
        let r = Rect::new(-10.0, -5.0, 20.0, 15.0).unwrap();
        let (a, b) = (Point::new(ax, ay), Point::new(bx, by));
        prop_assert!((boundary_distance(&r, &a) - boundary_distance(&r, &b)).abs() <= a.distance(&b) + 1e-12);
        prop_assert_eq!(boundary_distance(&r, &Point::new(ax.clamp(-10.0, 20.0), -5.0)), 0.0);
    }

    #[test]
    fn sparsemax_is_the_nearest_simplex_point(
        z in prop::collection::vec(-3.0f64..3.0, 2..40),
        seeds in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 40), 20),
    ) {
        let p = sparsemax(&z).unwrap();
        let d = |q: &[f64]| q.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let best = d(&p);
        for s in &seeds {
            let raw = &s[..z.len()];
            let sum: f64 = raw.iter().sum::<f64>().max(1e-12);
            let q: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            prop_assert!(best <= d(&q) + 1e-12);
        }
    }

    #[test]
    fn sparsemax_shift_invariance_is_exact_for_dyadic_inputs(
        z in prop::collection::vec(-1024i32..1024, 1..64), c in -64i32..64,
    ) {
        let z: Vec<f64> = z.into_iter().map(|v| v as f64 / 256.0).collect();
        let shifted: Vec<f64> = z.iter().map(|v| v + c as f64 / 8.0).collect();
        prop_assert_eq!(sparsemax(&z).unwrap(), sparsemax(&shifted).unwrap());
    }

    #[test]
    fn sparsemax_shift_invariance_for_general_inputs(
        z in prop::collection::vec(-5.0f64..5.0, 1..64), c in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in sparsemax(&z).unwrap().iter().zip(sparsemax(&shifted).unwrap()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn temperature_keeps_argmax_cells(raw in raw_map(36), t in 0.05f64..20.0) {
        let map = map_from(window(0.0, 0.0, 1.0, 6, 6), &raw);
        let scaled = temperature_scale(&map, t).unwrap();
        let argmax = |m: &ProbabilityMap| {
            let max = m.values().iter().copied().fold(0.0, f64::max);
            m.values().iter().map(|v| *v == max).collect::<Vec<_>>()
        };
        prop_assert_eq!(argmax(&map), argmax(&scaled));
        for (a, b) in map.values().iter().zip(scaled.values()) {
            prop_assert_eq!(*a == 0.0, *b == 0.0);
        }
    }

    #[test]
    fn coverage_is_monotone_in_cell_value(raw in raw_map(25)) {
        let map = map_from(window(0.0, 0.0, 1.0, 5, 5), &raw);
        let v = map.values();
        for (i, a) in v.iter().enumerate() {
            for (j, b) in v.iter().enumerate() {
                if a <= b {
                    prop_assert!(coverage_of_point(&map, i % 5, i / 5) >= coverage_of_point(&map, j % 5, j / 5));
                }
            }
        }
    }

    #[test]
    fn expected_map_is_linear(a in raw_map(64), b in raw_map(64), lambda in 0.0f64..1.0) {
        let win = window(0.0, 0.0, 2.0, 8, 8);
        let params = OksParams::new(20.0, 0.1).unwrap();
        let (p, q) = (map_from(win, &a), map_from(win, &b));
        let mix = p.values() * lambda + q.values() * (1.0 - lambda);
        let m = ProbabilityMap::new(win, mix, 0).unwrap();
        let lhs = expected_oks_map(&m, &params);
        let rhs = expected_oks_map(&p, &params) * lambda + expected_oks_map(&q, &params) * (1.0 - lambda);
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((l - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_hot_at_nearest_cell_minimizes_alpha_zero_loss(gx in 0.01f64..7.99, gy in 0.01f64..7.99, kappa in 0.03f64..0.3) {
        let win = window(0.0, 0.0, 1.0, 8, 8);
        let gt = Point::new(gx, gy);
        let loss = DenseOksLoss::new(&win, &gt, &OksParams::new(10.0, kappa).unwrap(), LossConfig::new(0.0, 1e-12).unwrap()).unwrap();
        let mut best = (f64::INFINITY, 0, 0);
        for row in 0..8 {
            for col in 0..8 {
                let l = loss.value(ProbabilityMap::one_hot(win, col, row, 0).unwrap().values());
                if l < best.0 {
                    best = (l, col, row);
                }
            }
        }
        let (col, row) = win.cell_of(&gt).unwrap();
        prop_assert_eq!((best.1, best.2), (col, row));
        // Linear objective: any map is a mixture of one-hots, so none does better.
        let uniform = ProbabilityMap::uniform(win, 0);
        prop_assert!(loss.value(uniform.values()) >= best.0);
    }

    #[test]
    fn oks_decreases_with_distance_and_grows_with_scale(d1 in 0.0f64..50.0, d2 in 0.0f64..50.0, s in 1.0f64..100.0, k in 0.01f64..0.3) {
        let p = OksParams::new(s, k).unwrap();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(oks_similarity(lo, &p) >= oks_similarity(hi, &p));
        let wider = OksParams::new(s * 1.5, k).unwrap();
        prop_assert!(oks_similarity(hi, &wider) >= oks_similarity(hi, &p));
    }

    #[test]
    fn decoders_are_bounded_and_translation_equivariant(raw in raw_map(100), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        let win = window(0.0, 0.0, 1.0, 10, 10);
        let params = OksParams::new(20.0, 0.1).unwrap();
        let map = map_from(win, &raw);
        let e = expected_oks_decode(&map, &params);
        let u = udp_decode(&map, DEFAULT_BLUR_SIGMA).unwrap();
        for d in [&e, &u] {
            let cx = d.grid_location.x.floor() + 0.5;
            let cy = d.grid_location.y.floor() + 0.5;
            prop_assert!((d.grid_location.x - cx).hypot(d.grid_location.y - cy) <= 0.5 * 2f64.sqrt() + 1e-12);
        }
        // Compared on the sampled surface: refinement is parabolic, not an exact maximization.
        let surface = expected_oks_map(&map, &params);
        let col = (u.grid_location.x.floor() as usize).min(9);
        let row = (u.grid_location.y.floor() as usize).min(9);
        prop_assert!(e.score >= surface[[row, col]]);

        let moved = map.with_window(win.translate(dx, dy)).unwrap();
        let e2 = expected_oks_decode(&moved, &params);
        prop_assert!((e2.location.x - e.location.x - dx).abs() <= 1e-9);
        prop_assert!((e2.location.y - e.location.y - dy).abs() <= 1e-9);
    }

    #[test]
    fn ex_oks_with_presence_true_is_oks(gx in -20.0f64..20.0, gy in -20.0f64..20.0, px in -20.0f64..20.0, py in -20.0f64..20.0) {
        let win = window(-10.0, -10.0, 1.0, 20, 20);
        let params = OksParams::new(15.0, 0.1).unwrap();
        let (g, p) = (Point::new(gx, gy), Point::new(px, py));
        let v = ex_oks_keypoint(&g, true, &p, true, &win, &params);
        prop_assert_eq!(v.similarity, oks_similarity(g.distance(&p), &params));
        for (a, b) in [(false, true), (true, false), (false, false)] {
            let s = ex_oks_keypoint(&g, a, &p, b, &win, &params).similarity;
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn map_is_invariant_to_monotone_score_rescaling(
        noise in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.01f64..1.0), 12),
    ) {
        let kappas = KappaTable::default();
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for (i, (nx, ny, score)) in noise.iter().enumerate() {
            let image = (i / 3) as u64;
            let ox = 60.0 * (i % 3) as f64;
            let pts = [(ox + 10.0, 10.0), (ox + 20.0, 30.0), (ox + 30.0, 50.0)];
            let mut g = person(&pts, Rect::new(ox, 0.0, ox + 40.0, 60.0).unwrap(), 1.0);
            g.image_id = image;
            let moved: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (x + nx, y + ny)).collect();
            let mut p = person(&moved, g.bbox, *score);
            p.image_id = image;
            gts.push(g);
            preds.push(p);
        }
        let base = mean_ap(&gts, &preds, &kappas, &Similarity::Oks).unwrap().ap;
        let rescaled: Vec<PoseInstance> = preds.iter().map(|p| p.clone().with_score(p.score.powi(3) * 0.5)).collect();
        prop_assert_eq!(base, mean_ap(&gts, &rescaled, &kappas, &Similarity::Oks).unwrap().ap);
        prop_assert_eq!(mean_ap(&gts, &gts, &kappas, &Similarity::Oks).unwrap().ap, 1.0);
    }

    #[test]
    fn sweep_beats_the_class_prior(data in prop::collection::vec((any::<bool>(), 0.0f64..1.0), 1..200)) {
        let (flags, scores): (Vec<bool>, Vec<f64>) = data.into_iter().unzip();
        let s = presence_sweep(&flags, &scores, None).unwrap();
        let prior = flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64;
        prop_assert!(s.best_accuracy + 1e-12 >= prior.max(1.0 - prior));
    }

    #[test]
    fn crop_shift_is_undone_exactly(
        pts in prop::collection::vec((0i32..6400, 0i32..6400), 1..17), x0 in 0u32..40, y0 in 0u32..40,
    ) {
        let pts: Vec<(f64, f64)> = pts.into_iter().map(|(x, y)| (x as f64 / 64.0, y as f64 / 64.0)).collect();
        let bbox = Rect::new(0.0, 0.0, 100.0, 100.0).unwrap();
        let inst = person(&pts, bbox, 1.0);
        let crop = CropSpec { image_id: 0, rect: Rect::new(x0 as f64, y0 as f64, 100.0, 100.0).unwrap(), seed: 0 };
        if let Some(ext) = transform_instance(&inst, &crop, &WindowConfig::default()).unwrap() {
            for ((k, orig), area) in ext.instance.keypoints.iter().zip(&inst.keypoints).zip(&ext.areas) {
                if orig.is_labeled() {
                    prop_assert_eq!((k.x + x0 as f64, k.y + y0 as f64), (orig.x, orig.y));
                    prop_assert_eq!(k.presence == Some(1.0), area.unwrap().in_window());
                }
            }
        }
    }

    #[test]
    fn histogram_fractions_sum_to_one_and_mix(a in prop::collection::vec(raw_map(16), 1..20), b in prop::collection::vec(raw_map(16), 1..20)) {
        let win = window(0.0, 0.0, 1.0, 4, 4);
        let samples = |raws: &[Vec<f64>]| -> Vec<CalibrationSample> {
            raws.iter().enumerate().map(|(i, r)| CalibrationSample::new(map_from(win, r), i % 4, (i / 4) % 4).unwrap()).collect()
        };
        let (sa, sb) = (samples(&a), samples(&b));
        let ha = coverage_histogram(&sa).unwrap();
        prop_assert!((ha.fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let all: Vec<_> = sa.iter().chain(&sb).cloned().collect();
        let hb = coverage_histogram(&sb).unwrap();
        prop_assert_eq!(coverage_histogram(&all).unwrap(), ha.merge(&hb));
        let fit = fit_temperature(&sa, &posemap::calibration::default_t_grid()).unwrap();
        let at_one = fit.curve.iter().find(|(t, _)| *t == 1.0).unwrap().1;
        prop_assert!(fit.objective <= at_one);
    }

    #[test]
    fn ece_is_bounded(data in prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 1..100), bins in 2usize..20) {
        let (flags, scores): (Vec<bool>, Vec<f64>) = data.into_iter().unzip();
        let r = presence_reliability(&flags, &scores, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.ece));
        let exact: Vec<f64> = flags.iter().map(|f| *f as u8 as f64).collect();
        prop_assert_eq!(presence_reliability(&flags, &exact, bins).unwrap().ece, 0.0);
    }
}

fn gt_doc_strategy() -> impl Strategy<Value = GtDocument> {
    let ann = (
        0.0f64..500.0,
        0.0f64..500.0,
        1.0f64..200.0,
        1.0f64..200.0,
        prop::option::of(1.0f64..1e5),
        prop::collection::vec((-100.0f64..600.0, -100.0f64..600.0, 0u8..3), NUM_KEYPOINTS),
        prop::option::of(prop::collection::vec(0u8..2, NUM_KEYPOINTS)),
    );
    prop::collection::vec(ann, 0..6).prop_map(|anns| {
        let images = vec![GtImage { id: 1, width: 640, height: 480, extra: Map::new() }];
        let annotations = anns
            .into_iter()
            .enumerate()
            .map(|(i, (x, y, w, h, area, kps, presence))| GtAnnotation {
                id: i as u64 + 1,
                image_id: 1,
                bbox: [x, y, w, h],
                area,
                keypoints: kps
                    .into_iter()
                    .flat_map(|(kx, ky, v)| if v == 0 { [0.0, 0.0, 0.0] } else { [kx, ky, v as f64] })
                    .collect(),
                presence,
                extra: Map::new(),
            })
            .collect();
        GtDocument { images, annotations, extra: Map::new() }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gt_json_round_trips(doc in gt_doc_strategy()) {
        let bytes = doc.to_bytes();
        let parsed = parse_gt(&bytes).unwrap();
        prop_assert_eq!(&parsed, &doc);
        prop_assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn pmap_round_trips(k in 0usize..4, w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let win = window(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 2.5, w, h);
        let maps: Vec<ProbabilityMap> = (0..k)
            .map(|_| map_from(win, &(0..w * h).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>()))
            .collect();
        let presence: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let file = if k == 0 {
            PmapFile::new(win, Vec::new(), Vec::new()).unwrap()
        } else {
            PmapFile::from_maps(&maps, &presence).unwrap()
        };
        let bytes = write_pmap(&file);
        let back = read_pmap(&bytes).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(write_pmap(&back), bytes);
    }

    #[test]
    fn parsers_are_total(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_gt(&bytes);
        let _ = posemap::interop::parse_predictions(&bytes);
        let _ = read_pmap(&bytes);
        let mut pmap = b"PMAP".to_vec();
        pmap.extend_from_slice(&bytes);
        let _ = read_pmap(&pmap);
    }
}

#[test]
fn fitted_maps_stay_on_the_simplex_and_sharpen_with_kappa() {
    use posemap::fitlab::{fit_map, FitConfig};
    let gt = Point::new(24.2, 31.7);
    let mut radii = Vec::new();
    let mut kappas: Vec<f64> = KappaTable::default().0.to_vec();
    kappas.sort_by(f64::total_cmp);
    kappas.dedup();
    for k in kappas {
        let cfg = FitConfig::new(OksParams::new(40.0, k).unwrap(), LossConfig::new(0.08, 1e-12).unwrap());
        let (map, report) = fit_map(&gt, &cfg).unwrap();
        assert_abs_diff_eq!(map.values().sum(), 1.0, epsilon = 1e-12);
        assert!(map.values().iter().all(|v| *v >= 0.0));
        assert!(report.trace.windows(2).all(|w| w[1] <= w[0]));
        radii.push(report.mass_radius);
    }
    assert!(radii.windows(2).all(|w| w[0] < w[1]), "{radii:?}");
}
