use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use avtopo::data::dataset::{mask_path, read_mask_png, write_mask_png};
use avtopo::data::{fragment_mask_detailed, TreeTopology};
use avtopo::Mask;

fn avtopo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avtopo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, seed: u64) {
    let o = avtopo(&["synth", "--out", s(dir), "--count", &count.to_string(), "--seed", &seed.to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut names: Vec<PathBuf> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            let bytes = fs::read(&p).unwrap();
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out
}

fn flood_fill_count(m: &Mask) -> usize {
    let (h, w) = m.dims();
    let mut seen = vec![false; h * w];
    let mut n = 0;
    for start in 0..h * w {
        if seen[start] || !m.get(start / w, start % w) {
            continue;
        }
        n += 1;
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(p) = q.pop_front() {
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            for (dr, dc) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && m.get(nr as usize, nc as usize) {
                        seen[j] = true;
                        q.push_back(j);
                    }
                }
            }
        }
    }
    n
}

#[test]
fn synth_zero_count_creates_empty_layout() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("empty");
    synth(&out, 0, 0);
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 0);
    assert_eq!(fs::read_dir(out.join("masks")).unwrap().count(), 0);
}

#[test]
fn synth_is_byte_reproducible_and_sidecars_match_masks() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, 200, 42);
    synth(&b, 200, 42);
    let fa = files(&a);
    let count = |suffix: &str| fa.iter().filter(|(p, _)| p.to_str().unwrap().ends_with(suffix)).count();
    assert_eq!((count(".png") - count("_crossing.png"), count("_topo.json")), (200 * 3, 200));
    assert_eq!(fa, files(&b));
    for i in 0..200u64 {
        let id = format!("synth_{:06}", 42 + i);
        let topo = TreeTopology::read(&a, &id).unwrap();
        for (kind, class) in [("artery", &topo.artery), ("vein", &topo.vein)] {
            let m = read_mask_png(&mask_path(&a, &id, kind)).unwrap();
            assert_eq!(class.component_count, flood_fill_count(&m), "{id} {kind}");
        }
    }
}

#[test]
fn synth_reports_unwritable_destination() {
    let t = tempfile::tempdir().unwrap();
    let blocker = t.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = avtopo(&["synth", "--out", s(&blocker.join("sub")), "--count", "1"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("error"), "{}", stderr(&o));
    let o = avtopo(&["synth", "--out", s(t.path()), "--count", "1", "--width-min", "4", "--width-max", "2"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one_and_help_lists_defaults() {
    assert_eq!(code(&avtopo(&["bogus"])), 1);
    assert_eq!(code(&avtopo(&["metrics", "--pred", "x"])), 1);
    let help = |cmd: &str| {
        let o = avtopo(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        String::from_utf8(o.stdout).unwrap()
    };
    let m = help("metrics");
    assert!(m.contains("--junction-tol") && m.contains("[default: 3]") && m.contains("[default: 2]"), "{m}");
    let e = help("eval");
    assert!(e.contains("--plots") && e.contains("[default: 0.5]"), "{e}");
    let sy = help("synth");
    assert!(sy.contains("--depth") && sy.contains("--width-min") && sy.contains("[default: 64]"), "{sy}");
    let tr = help("train");
    for want in ["batch_size = 10", "lr = 0.001", "patience = 10", "max_epochs = 500", "alpha = 0.65", "cldice_weight = 0.5", "image_size = 512"] {
        assert!(tr.contains(want), "train help lacks {want}");
    }
    assert!(help("ablate").contains("--variants"));
}

#[test]
fn default_config_dump_has_published_values() {
    let o = avtopo(&["train", "--print-config"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: toml::Value = toml::from_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(v["train"]["batch_size"].as_integer(), Some(10));
    assert_eq!(v["train"]["lr"].as_float(), Some(1e-3));
    assert_eq!(v["train"]["patience"].as_integer(), Some(10));
    assert_eq!(v["train"]["max_epochs"].as_integer(), Some(500));
    assert_eq!(v["train"]["loss"]["alpha"].as_float(), Some(0.65));
    assert_eq!(v["train"]["loss"]["cldice_weight"].as_float(), Some(0.5));
    assert_eq!(v["data"]["image_size"].as_integer(), Some(512));
    let grids: Vec<i64> = v["model"]["tffm"]["grids"].as_array().unwrap().iter().map(|x| x.as_integer().unwrap()).collect();
    let ks: Vec<i64> = v["model"]["tffm"]["neighbors"].as_array().unwrap().iter().map(|x| x.as_integer().unwrap()).collect();
    assert_eq!(grids, [20, 24, 28, 32, 32]);
    assert_eq!(ks, [5, 7, 9, 12, 15]);
}

#[test]
fn train_refuses_bad_inputs_without_leaving_a_run_dir() {
    let t = tempfile::tempdir().unwrap();
    let run = t.path().join("run");
    let o = avtopo(&["train", "--data", s(&t.path().join("missing")), "--out", s(&run)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!run.exists());
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatch_sise = 4\n").unwrap();
    let o = avtopo(&["train", "--config", s(&cfg), "--data", s(t.path()), "--out", s(&run)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.batch_sise"), "{}", stderr(&o));
    assert!(!run.exists());
}

fn desk_config(dir: &Path, epochs: usize, batch: usize, extra: &str) -> PathBuf {
    let p = dir.join(format!("desk{epochs}_{batch}.toml"));
    let text = format!(
        "[data]\nimage_size = 64\n\n[train]\nbatch_size = {batch}\nmax_epochs = {epochs}\nlr = 0.003\n{extra}\n[train.loss]\nloss = \"tversky\"\n"
    );
    fs::write(&p, text).unwrap();
    p
}

fn log_rows(run: &Path) -> Vec<String> {
    // wall time is the only column allowed to differ between runs
    fs::read_to_string(run.join("log.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn train_eval_roundtrip() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 20, 0);
    let short = desk_config(t.path(), 2, 8, "");
    let long = desk_config(t.path(), 3, 8, "");
    let (r2, r3) = (t.path().join("r2"), t.path().join("r3"));
    for (cfg, run) in [(&short, &r2), (&long, &r3)] {
        let o = avtopo(&["train", "--config", s(cfg), "--data", s(&data), "--out", s(run)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["config.toml", "log.csv", "best.ckpt", "best.json"] {
        assert!(r2.join(f).is_file(), "{f}");
    }
    let (a, b) = (log_rows(&r2), log_rows(&r3));
    assert_eq!(a.len(), 3);
    assert_eq!(a[..], b[..3]);
    let resolved: toml::Value = toml::from_str(&fs::read_to_string(r2.join("config.toml")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["tffm"]["grids"].as_array().unwrap()[4].as_integer(), Some(4));

    let o = avtopo(&["train", "--config", s(&short), "--data", s(&data), "--out", s(&r2)]);
    assert_eq!(code(&o), 1, "existing run dir must not be overwritten");

    let ckpt = r2.join("best.ckpt");
    let rep = |name: &str, plots: bool| {
        let path = t.path().join(name).join("report.json");
        let mut args = vec!["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&path)];
        if plots {
            args.push("--plots");
        }
        let o = avtopo(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        path
    };
    let (e1, e2) = (rep("e1", true), rep("e2", false));
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    assert_eq!(fs::read(e1.with_extension("csv")).unwrap(), fs::read(e2.with_extension("csv")).unwrap());
    let report: Value = serde_json::from_slice(&fs::read(&e1).unwrap()).unwrap();
    assert_eq!(report["samples"].as_array().unwrap().len(), 20);
    let csv = fs::read_to_string(e1.with_extension("csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let mut want = vec!["id".to_string()];
    for scope in ["artery", "vein", "combined"] {
        for f in ["dice", "iou", "hd95", "cldice", "betti0_err", "skeleton_f1", "junction_precision", "junction_recall", "junction_f1", "pred_components", "gt_components"] {
            want.push(format!("{scope}_{f}"));
        }
    }
    assert_eq!(header, want);
    assert_eq!(csv.lines().count(), 21);
    let plots = t.path().join("e1").join("report_plots");
    assert!(plots.join("metrics.svg").is_file());
    assert_eq!(fs::read_dir(&plots).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count(), 20);

    // a sidecar describing a different network is rejected
    let side = r2.join("best.json");
    let mut meta: Value = serde_json::from_slice(&fs::read(&side).unwrap()).unwrap();
    meta["backbone"]["channels"] = serde_json::json!([4, 8, 16, 32, 64]);
    fs::write(&side, serde_json::to_vec(&meta).unwrap()).unwrap();
    let o = avtopo(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&t.path().join("bad.json"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn eval_of_an_overfit_run_is_near_perfect() {
    let t = tempfile::tempdir().unwrap();
    let one = t.path().join("one");
    synth(&one, 1, 5);
    let data = t.path().join("data");
    for sub in ["images", "masks"] {
        fs::create_dir_all(data.join(sub)).unwrap();
    }
    for copy in 0..10 {
        let id = format!("copy{copy:02}");
        fs::copy(one.join("images/synth_000005.png"), data.join(format!("images/{id}.png"))).unwrap();
        for kind in ["artery", "vein"] {
            fs::copy(mask_path(&one, "synth_000005", kind), mask_path(&data, &id, kind)).unwrap();
        }
    }
    let mut off = String::from("patience = 40\n");
    for t in ["rotation", "vertical_flip", "horizontal_flip", "translation", "contrast", "intensity_shift", "gaussian_noise", "gaussian_blur"] {
        off.push_str(&format!("[train.augmentation.{t}]\nenabled = false\nprobability = 0.0\n"));
    }
    let cfg = desk_config(t.path(), 25, 1, &off);
    let run = t.path().join("run");
    let o = avtopo(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = t.path().join("r.json");
    let o = avtopo(&["eval", "--ckpt", s(&run.join("best.ckpt")), "--data", s(&data), "--report", s(&report), "--split", "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let dice = v["aggregate"]["combined"]["dice"].as_f64().unwrap();
    assert!(dice >= 0.9, "train-set Dice {dice}");
}

#[test]
fn metrics_against_itself_fragments_and_missing_files() {
    let t = tempfile::tempdir().unwrap();
    let gt = t.path().join("gt");
    synth(&gt, 12, 100);
    let o = avtopo(&["metrics", "--pred", s(&gt), "--gt", s(&gt), "--report", s(&t.path().join("same/report.json"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&fs::read(t.path().join("same/report.json")).unwrap()).unwrap();
    for r in v["samples"].as_array().unwrap() {
        for scope in ["artery", "vein", "combined"] {
            assert_eq!(r[scope]["dice"].as_f64(), Some(1.0));
            assert_eq!(r[scope]["cldice"].as_f64(), Some(1.0));
            assert_eq!(r[scope]["betti0_err"].as_f64(), Some(0.0));
        }
    }
    assert!(t.path().join("same/report.csv").is_file());

    let pred = t.path().join("pred");
    fs::create_dir_all(pred.join("masks")).unwrap();
    let mut injected = Vec::new();
    for i in 0..12u64 {
        let id = format!("synth_{:06}", 100 + i);
        let mut row = Vec::new();
        for kind in ["artery", "vein"] {
            let m = read_mask_png(&mask_path(&gt, &id, kind)).unwrap();
            let n = (i % 3) as usize;
            let f = fragment_mask_detailed(&m, n, 3, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
            write_mask_png(&mask_path(&pred, &id, kind), &f.mask).unwrap();
            row.push(f.breaks.len() as f64);
        }
        injected.push((id, row));
    }
    let rpath = t.path().join("frag/report.json");
    let o = avtopo(&["metrics", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&rpath), "--junction-tol", "4", "--skel-tol", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&fs::read(&rpath).unwrap()).unwrap();
    let samples = v["samples"].as_array().unwrap();
    assert!(injected.iter().any(|(_, r)| r[0] > 0.0));
    for (id, breaks) in &injected {
        let r = samples.iter().find(|r| r["id"] == id.as_str()).unwrap();
        assert_eq!(r["artery"]["betti0_err"].as_f64(), Some(breaks[0]), "{id}");
        assert_eq!(r["vein"]["betti0_err"].as_f64(), Some(breaks[1]), "{id}");
    }

    let victim = mask_path(&gt, "synth_000105", "vein");
    fs::remove_file(&victim).unwrap();
    let o = avtopo(&["metrics", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&t.path().join("x.json"))]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("synth_000105"), "{}", stderr(&o));
    fs::remove_file(mask_path(&pred, "synth_000107", "artery")).unwrap();
    let o = avtopo(&["metrics", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&t.path().join("x.json"))]);
    assert!(stderr(&o).contains("synth_000107"), "{}", stderr(&o));
}

#[test]
fn ablation_table_rows_and_failures() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 20, 7);
    let cfg = desk_config(t.path(), 1, 8, "");
    let variants = t.path().join("v.toml");
    fs::write(
        &variants,
        "[[variant]]\nname = \"baseline\"\nloss = \"tversky\"\ntffm = false\n\n\
         [[variant]]\nname = \"+tffm\"\nloss = \"tversky\"\ntffm = true\n\n\
         [[variant]]\nname = \"+tffm+cldice\"\nloss = \"tversky+cldice\"\ntffm = true\n\n\
         [[variant]]\nname = \"baseline\"\nloss = \"tversky\"\ntffm = false\n",
    )
    .unwrap();
    let out = t.path().join("ab");
    let o = avtopo(&["ablate", "--config", s(&cfg), "--variants", s(&variants), "--out", s(&out), "--data", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("variant,seed,status,best_epoch,epochs,artery_dice"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["baseline", "+tffm", "+tffm+cldice", "baseline"]);
    assert!(rows[1..].iter().all(|r| r.split(',').nth(1) == Some("0") && r.split(',').nth(2) == Some("ok")));
    assert_eq!(rows[1], rows[4]);
    assert!(out.join("config.toml").is_file());

    let bad = t.path().join("bad.toml");
    fs::write(&bad, "[[variant]]\nname = \"ok\"\nloss = \"tversky\"\ntffm = false\n\n[[variant]]\nname = \"broken\"\ncldice_weight = -1.0\n").unwrap();
    let out2 = t.path().join("ab2");
    let o = avtopo(&["ablate", "--config", s(&cfg), "--variants", s(&bad), "--out", s(&out2), "--data", s(&data)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("broken"));
    let table = fs::read_to_string(out2.join("ablation.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().contains(",ok,"));
    assert!(table.lines().nth(2).unwrap().starts_with("broken,0,failed: "));

    let one = t.path().join("one.toml");
    fs::write(&one, "[[variant]]\nname = \"solo\"\n").unwrap();
    let o = avtopo(&["ablate", "--config", s(&cfg), "--variants", s(&one), "--out", s(&t.path().join("ab3")), "--data", s(&data)]);
    assert_eq!(code(&o), 1);
}
