mod common;

use common::*;
use posemap::geometry::{domain_vector, window_from_bbox, AreaContext};
use posemap::interop::{parse_gt, write_pmap, PmapFile};
use posemap::{ActivationWindow, ImageExtent, ProbabilityMap, Rect, WindowConfig};
use tempfile::tempdir;

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempdir().unwrap();
    let gt = crowd_document(6);
    let gt_path = write_json(dir.path(), "gt.json", &gt);
    let pred_path = write_json(dir.path(), "pred.json", &perfect_predictions(&gt));
    let out = stdout(&run(&["eval", "--gt", path(&gt_path), "--pred", path(&pred_path)]));
    assert!(out.starts_with("mAP 1.000\n"), "{out}");
    assert!(out.contains("AP@0.95 1.000"));
    assert!(out.contains("gt 12\n"), "{out}");
}

#[test]
fn jobs_do_not_change_results() {
    let dir = tempdir().unwrap();
    let gt = crowd_document(9);
    let gt_path = write_json(dir.path(), "gt.json", &gt);
    let mut preds = perfect_predictions(&gt);
    for (i, p) in preds.as_array_mut().unwrap().iter_mut().enumerate() {
        p["score"] = serde_json::json!(0.3 + 0.07 * i as f64 % 0.6);
        for (j, v) in p["keypoints"].as_array_mut().unwrap().iter_mut().enumerate() {
            if j % 3 == 0 {
                *v = serde_json::json!(v.as_f64().unwrap() + (i % 4) as f64 * 1.5);
            }
        }
    }
    let pred_path = write_json(dir.path(), "pred.json", &preds);
    let eval = |jobs: &str| {
        stdout(&run(&["eval", "--gt", path(&gt_path), "--pred", path(&pred_path), "--format", "json", "--jobs", jobs]))
    };
    assert_eq!(eval("1"), eval("4"));

    let crop = |jobs: &str, name: &str| {
        let out = dir.path().join(name);
        stdout(&run(&["cropgen", "--gt", path(&gt_path), "--out", path(&out), "--seed", "7", "--jobs", jobs]));
        std::fs::read(out).unwrap()
    };
    assert_eq!(crop("1", "a.json"), crop("3", "b.json"));
}

#[test]
fn cropgen_is_reproducible_and_seed_sensitive() {
    let dir = tempdir().unwrap();
    let gt_path = write_json(dir.path(), "gt.json", &crowd_document(12));
    let crop = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let manifest = dir.path().join(format!("{name}.csv"));
        let summary = stdout(&run(&[
            "cropgen",
            "--gt",
            path(&gt_path),
            "--out",
            path(&out),
            "--manifest",
            path(&manifest),
            "--seed",
            seed,
        ]));
        (std::fs::read(out).unwrap(), std::fs::read(manifest).unwrap(), summary)
    };
    let a = crop("7", "a.json");
    let b = crop("7", "b.json");
    let c = crop("8", "c.json");
    assert_eq!(a, b);
    assert_ne!(a.1, c.1);
    assert!(String::from_utf8(a.1).unwrap().starts_with("image_id,x0,y0,x1,y1,seed\n"));
    assert!(a.2.contains("area,percent\nA,"), "{}", a.2);
    parse_gt(&a.0).expect("cropgen output parses");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempdir().unwrap();
    let gt_path = write_json(dir.path(), "gt.json", &crowd_document(5));
    let cfg = dir.path().join("posemap.conf");
    std::fs::write(&cfg, "# crop settings\nseed = 7\nstrength_min = 0.6\n").unwrap();
    let crop = |args: &[&str], name: &str| {
        let out = dir.path().join(name);
        let mut all = vec!["cropgen", "--gt", path(&gt_path), "--out", path(&out)];
        all.extend_from_slice(args);
        stdout(&run(&all));
        std::fs::read(out).unwrap()
    };
    let from_file = crop(&["--config", path(&cfg)], "a.json");
    let from_flags = crop(&["--seed", "7", "--strength-min", "0.6"], "b.json");
    let overridden = crop(&["--config", path(&cfg), "--seed", "9"], "c.json");
    let flags_9 = crop(&["--seed", "9", "--strength-min", "0.6"], "d.json");
    assert_eq!(from_file, from_flags);
    assert_eq!(overridden, flags_9);
    assert_ne!(from_file, overridden);
}

#[test]
fn kappa_table_flag_changes_scores() {
    let dir = tempdir().unwrap();
    let gt = crowd_document(3);
    let gt_path = write_json(dir.path(), "gt.json", &gt);
    let mut preds = perfect_predictions(&gt);
    for p in preds.as_array_mut().unwrap() {
        let kps = p["keypoints"].as_array_mut().unwrap();
        kps[0] = serde_json::json!(kps[0].as_f64().unwrap() + 6.0);
    }
    let pred_path = write_json(dir.path(), "pred.json", &preds);
    let table = dir.path().join("kappa.txt");
    std::fs::write(&table, "nose = 0.001\n").unwrap();
    let base = ["eval", "--gt", path(&gt_path), "--pred", path(&pred_path)];
    let plain = stdout(&run(&base));
    let mut with = base.to_vec();
    with.extend(["--kappa-table", path(&table)]);
    let tight = stdout(&run(&with));
    assert!(plain.contains("AP@0.95 1.000"), "{plain}");
    assert!(!tight.contains("AP@0.95 1.000"), "{tight}");

    let env = posemap().args(base).env("POSEMAP_KAPPA_TABLE", &table).output().unwrap();
    assert_eq!(stdout(&env), tight);
}

#[test]
fn areas_matches_library_domain_vector() {
    let dir = tempdir().unwrap();
    let doc = crowd_document(8);
    let gt_path = write_json(dir.path(), "gt.json", &doc);
    let out = stdout(&run(&["areas", "--gt", path(&gt_path)]));

    let parsed = parse_gt(&std::fs::read(&gt_path).unwrap()).unwrap();
    let insts = parsed.instances().unwrap();
    let cfg = WindowConfig::default();
    let windows: Vec<ActivationWindow> = insts.iter().map(|i| window_from_bbox(&i.bbox, &cfg).unwrap()).collect();
    let extent = ImageExtent::new(640, 480).unwrap();
    let v = domain_vector(insts.iter().zip(&windows).map(|(instance, window)| AreaContext {
        instance,
        window,
        image: extent,
    }))
    .unwrap();
    let mut expected = String::from("area,percent\n");
    for (label, p) in ["A", "B", "C", "D", "E"].iter().zip(v) {
        expected.push_str(&format!("{label},{p:.6}\n"));
    }
    assert_eq!(out, expected);
    assert!(out.contains("A,100.000000"), "all synthetic keypoints lie in their boxes: {out}");
}

#[test]
fn exit_codes() {
    let dir = tempdir().unwrap();
    let gt_path = write_json(dir.path(), "gt.json", &crowd_document(2));
    let missing = dir.path().join("missing.json");
    let code = |args: &[&str]| run(args).status.code();

    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["--version"]), Some(0));
    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["eval", "--gt", path(&gt_path)]), Some(1));
    assert_eq!(code(&["eval", "--gt", path(&gt_path), "--pred", path(&gt_path), "--bogus"]), Some(1));
    assert_eq!(code(&["cropgen", "--gt", path(&gt_path), "--out", path(&dir.path().join("x.json"))]), Some(1));
    assert_eq!(code(&["fit", "--x", "500", "--y", "3", "--keypoint", "nose"]), Some(1));
    assert_eq!(code(&["calibrate", "--corrupt", "0.5"]), Some(1));

    assert_eq!(code(&["eval", "--gt", path(&missing), "--pred", path(&gt_path)]), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, b"{\"images\": [}").unwrap();
    let out = run(&["areas", "--gt", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "colour = red\n").unwrap();
    assert_eq!(code(&["areas", "--gt", path(&gt_path), "--config", path(&cfg)]), Some(1));
}

fn one_hot_pmap(dir: &std::path::Path, name: &str, cells: &[(usize, usize)]) -> std::path::PathBuf {
    let w = ActivationWindow::new(Rect::new(100.0, 50.0, 196.0, 178.0).unwrap(), 48, 64).unwrap();
    let maps: Vec<ProbabilityMap> =
        cells.iter().enumerate().map(|(k, (c, r))| ProbabilityMap::one_hot(w, *c, *r, k).unwrap()).collect();
    let presence: Vec<f64> = (0..cells.len()).map(|k| if k == 3 { 0.2 } else { 0.9 }).collect();
    let p = dir.join(name);
    std::fs::write(&p, write_pmap(&PmapFile::from_maps(&maps, &presence).unwrap())).unwrap();
    p
}

#[test]
fn decode_one_hot_maps_to_cell_centers() {
    let dir = tempdir().unwrap();
    let cells: Vec<(usize, usize)> = (0..17).map(|k| (5 + 2 * k, 3 + 3 * k)).collect();
    let pmap = one_hot_pmap(dir.path(), "a.pmap", &cells);
    for method in ["argmax", "udp", "expected-oks"] {
        let out = stdout(&run(&["decode", "--pmap", path(&pmap), "--method", method, "--image-id", "42"]));
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let e = &v[0];
        assert_eq!(e["image_id"], 42);
        assert_eq!(e["pmap"], path(&pmap));
        let kps = e["keypoints"].as_array().unwrap();
        for (k, (c, r)) in cells.iter().enumerate() {
            let (x, y) = (kps[3 * k].as_f64().unwrap(), kps[3 * k + 1].as_f64().unwrap());
            let (ex, ey) = (100.0 + 2.0 * (*c as f64 + 0.5), 50.0 + 2.0 * (*r as f64 + 0.5));
            assert!((x - ex).abs() < 1e-9 && (y - ey).abs() < 1e-9, "{method} k={k}: ({x}, {y}) vs ({ex}, {ey})");
        }
        assert!((e["presence"][3].as_f64().unwrap() - 0.2).abs() < 1e-6);
    }
    let wrong = one_hot_pmap(dir.path(), "short.pmap", &cells[..5]);
    assert_eq!(run(&["decode", "--pmap", path(&wrong)]).status.code(), Some(2));
    assert_eq!(run(&["decode", "--pmap", path(&pmap), "--method", "double-heatmap"]).status.code(), Some(1));
}

#[test]
fn decode_double_heatmap_uses_expert_inside_its_window() {
    let dir = tempdir().unwrap();
    let cells: Vec<(usize, usize)> = (0..17).map(|k| (20 + k % 3, 30 + k % 4)).collect();
    let wide = one_hot_pmap(dir.path(), "wide.pmap", &cells);
    let out = stdout(&run(&["decode", "--pmap", path(&wide), "--expert", path(&wide), "--method", "double-heatmap"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 1);
}

#[test]
fn fit_reaches_target() {
    let out = stdout(&run(&["fit", "--x", "24.2", "--y", "31.7", "--keypoint", "nose", "--alpha", "0"]));
    let err: f64 = out.lines().find_map(|l| l.strip_prefix("location-error ")).unwrap().parse().unwrap();
    assert!(err < 0.5, "{out}");

    let dir = tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let pm = dir.path().join("fit.pmap");
    stdout(&run(&[
        "fit",
        "--x",
        "10",
        "--y",
        "50",
        "--kappa",
        "0.1",
        "--iterations",
        "40",
        "--trace",
        path(&trace),
        "--pmap-out",
        path(&pm),
    ]));
    let csv = std::fs::read_to_string(trace).unwrap();
    assert!(csv.starts_with("iteration,loss\n"));
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(posemap::interop::read_pmap(&std::fs::read(pm).unwrap()).unwrap().len() == 1);
}

#[test]
fn calibrate_synthetic_recovers_temperature() {
    let dir = tempdir().unwrap();
    let hist = dir.path().join("hist.csv");
    let out = stdout(&run(&[
        "calibrate",
        "--synthetic",
        "3000",
        "--corrupt",
        "0.5",
        "--seed",
        "3",
        "--histogram-csv",
        path(&hist),
    ]));
    let t: f64 = out.lines().find_map(|l| l.strip_prefix("temperature ")).unwrap().parse().unwrap();
    let step = 2f64.powf(1.0 / 15.0);
    assert!(t >= 2.0 / step - 1e-9 && t <= 2.0 * step + 1e-9, "{out}");
    assert_eq!(std::fs::read_to_string(hist).unwrap().lines().count(), 21);
    assert_eq!(run(&["calibrate", "--synthetic", "10"]).status.code(), Some(1));
}

#[test]
fn calibrate_from_pmap_predictions() {
    let dir = tempdir().unwrap();
    let (x, y, w, h) = (110.0, 60.0, 70.0, 100.0);
    let pts = skeleton(x, y, w, h);
    let gt = gt_document(&[(1, 640, 480)], vec![gt_annotation(1, 1, [x, y, w, h], 0.53 * w * h, &pts)]);
    let gt_path = write_json(dir.path(), "gt.json", &gt);
    let win = ActivationWindow::new(Rect::new(100.0, 50.0, 196.0, 178.0).unwrap(), 48, 64).unwrap();
    let maps: Vec<ProbabilityMap> = pts
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let (c, r) = win.cell_of(&posemap::Point::new(p.0, p.1)).unwrap();
            ProbabilityMap::one_hot(win, c, r, k).unwrap()
        })
        .collect();
    std::fs::write(dir.path().join("p.pmap"), write_pmap(&PmapFile::from_maps(&maps, &[1.0; 17]).unwrap())).unwrap();
    let mut pred = prediction(1, 0.9, &pts);
    pred["pmap"] = serde_json::json!("p.pmap");
    let pred_path = write_json(dir.path(), "pred.json", &serde_json::json!([pred]));
    let out = stdout(&run(&["calibrate", "--gt", path(&gt_path), "--pred", path(&pred_path), "--t-grid", "0.5,1,2"]));
    assert!(out.starts_with("samples 17\n"), "{out}");
}

#[test]
fn exeval_and_sweep_run_on_cropped_sets() {
    let dir = tempdir().unwrap();
    let gt_path = write_json(dir.path(), "gt.json", &crowd_document(10));
    let cropped = dir.path().join("crop.json");
    stdout(&run(&[
        "cropgen",
        "--gt",
        path(&gt_path),
        "--out",
        path(&cropped),
        "--seed",
        "5",
        "--strength-min",
        "0.5",
        "--strength-max",
        "0.7",
    ]));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&cropped).unwrap()).unwrap();
    let mut preds = perfect_predictions(&doc);
    for (p, a) in preds.as_array_mut().unwrap().iter_mut().zip(doc["annotations"].as_array().unwrap()) {
        let pres: Vec<f64> =
            a["presence"].as_array().unwrap().iter().map(|v| 0.1 + 0.8 * v.as_f64().unwrap()).collect();
        p["presence"] = serde_json::json!(pres);
    }
    let pred_path = write_json(dir.path(), "pred.json", &preds);
    let sweep_csv = dir.path().join("sweep.csv");
    let out =
        stdout(&run(&["exeval", "--gt", path(&cropped), "--pred", path(&pred_path), "--sweep-csv", path(&sweep_csv)]));
    assert!(out.starts_with("Ex-mAP 1.000\n"), "{out}");
    assert!(std::fs::read_to_string(sweep_csv).unwrap().starts_with("threshold,accuracy\n"));

    let out = stdout(&run(&["sweep", "--gt", path(&cropped), "--pred", path(&pred_path)]));
    assert!(out.contains("presence-accuracy 1.000000"), "{out}");
}
