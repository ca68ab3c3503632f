use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pressmap_core::metrics::GroupedReport;
use pressmap_core::nn::gradcheck::op_suite;
use pressmap_core::pmt::PmtTensor;
use pressmap_core::projection::{GridGeometry, PressureImage};
use pressmap_core::synth::SynthConfig;
use serde_json::{json, Value};

fn pressmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pressmap")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = pressmap(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: PathBuf, v: &impl serde::Serialize) -> PathBuf {
    std::fs::write(&path, serde_json::to_string(v).unwrap()).unwrap();
    path
}

fn small_dataset(dir: &Path, seed: u64) -> PathBuf {
    let cfg = SynthConfig { n_v: 200, ..SynthConfig::balanced(6, seed) };
    let c = write(dir.join(format!("gen{seed}.json")), &cfg);
    let out = dir.join(format!("data{seed}"));
    ok(&["gen", "--config", s(&c), "--out", s(&out)]);
    out
}

fn run_config(dir: &Path, lr: f64) -> PathBuf {
    let v = json!({
        "net": { "enc_channels": [4, 6, 6], "enc_strides": [2, 2, 2], "mesh_hidden": 12, "vertex_hidden": 6 },
        "train": { "epochs": 2, "batch_size": 2, "adam": { "lr": lr } }
    });
    write(dir.join(format!("run{lr}.json")), &v)
}

#[test]
fn gen_is_reproducible_and_validates_config() {
    let t = tempfile::tempdir().unwrap();
    let a = small_dataset(t.path(), 4);
    let cfg = SynthConfig { n_v: 200, ..SynthConfig::balanced(6, 4) };
    let c = write(t.path().join("again.json"), &cfg);
    let b = t.path().join("again");
    ok(&["gen", "--config", s(&c), "--out", s(&b)]);
    for f in ["manifest.json", "samples/s00002_depth.pmt", "samples/s00005_pressure.pmt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let bad = write(t.path().join("bad.json"), &json!({ "n_v": 200, "mass_range_kg": [80.0, 40.0] }));
    let o = pressmap(&["gen", "--config", s(&bad), "--out", s(&t.path().join("bad"))]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}

#[test]
fn model_and_stats_files_are_written() {
    let t = tempfile::tempdir().unwrap();
    ok(&["model", "--out", s(&t.path().join("m")), "--n-v", "200"]);
    assert!(t.path().join("m/female/header.json").exists());
    assert!(t.path().join("m/male/header.json").exists());

    let d = small_dataset(t.path(), 5);
    let out = t.path().join("stats.json");
    ok(&["stats", "--data", s(&d), "--out", s(&out)]);
    let j: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let cached = PmtTensor::load(out.with_extension("pmt")).unwrap().to_f64();
    assert_eq!(cached.len(), 7);
    assert_eq!(j["sigma_p"].as_f64().unwrap(), cached[5]);
}

#[test]
fn training_commands_are_seeded_and_lr_zero_is_a_no_op() {
    let t = tempfile::tempdir().unwrap();
    let d = small_dataset(t.path(), 6);
    let cfg = run_config(t.path(), 1e-3);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--data", s(&d), "--config", s(&cfg), "--seed", "3", "--out", s(out)]);
    }
    for f in ["params.pmt", "history.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }

    let zero = run_config(t.path(), 0.0);
    let z = t.path().join("zero");
    ok(&["train", "--data", s(&d), "--config", s(&zero), "--seed", "3", "--out", s(&z)]);
    let zero_params = PmtTensor::load(z.join("params.pmt")).unwrap();
    let init = {
        let n = pressmap_core::nn::BodyMapNet::load(&z).unwrap();
        let fresh = pressmap_core::nn::BodyMapNet::new(n.config.clone(), n.norm.clone()).unwrap();
        fresh.params.flat()
    };
    // Weight decay still acts through the gradient, but a zero step size
    // leaves every parameter where it started.
    assert_eq!(zero_params.to_f64(), init);

    let ws = t.path().join("ws");
    ok(&["train-ws", "--data", s(&d), "--mesh-net", s(&a), "--config", s(&cfg), "--out", s(&ws)]);
    let h: Value = serde_json::from_str(&std::fs::read_to_string(ws.join("history.json")).unwrap()).unwrap();
    assert_eq!(h["epoch_loss"].as_array().unwrap().len(), 2);
    let cont = t.path().join("ws2");
    ok(&[
        "train-ws", "--data", s(&d), "--mesh-net", s(&a), "--init", s(&ws), "--config", s(&cfg),
        "--pose-filter", "supine", "--out", s(&cont),
    ]);

    let report = ok(&["eval", "--data", s(&d), "--checkpoint", s(&a), "--ws", s(&ws), "--group-by", "pose-category"]);
    let g: GroupedReport = serde_json::from_str(&report).unwrap();
    assert_eq!(g.overall.count, 6);
    assert_eq!(g.groups.values().map(|x| x.count).sum::<usize>(), 6);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    let cats: std::collections::BTreeSet<&str> =
        m["entries"].as_array().unwrap().iter().map(|e| e["pose_category"].as_str().unwrap()).collect();
    assert_eq!(g.groups.keys().map(String::as_str).collect::<std::collections::BTreeSet<_>>(), cats);
}

#[test]
fn eval_groups_partition_samples() {
    let t = tempfile::tempdir().unwrap();
    let d = small_dataset(t.path(), 7);
    let cfg = run_config(t.path(), 1e-3);
    let net = t.path().join("net");
    ok(&["train", "--data", s(&d), "--config", s(&cfg), "--fim-toggles", "xyz,global", "--out", s(&net)]);

    let out = t.path().join("r.json");
    let o = Command::new(env!("CARGO_BIN_EXE_pressmap"))
        .args(["eval", "--data", s(&d), "--checkpoint", s(&net), "--group-by", "cover", "--out", s(&out)])
        .env("PRESSMAP_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    let g: GroupedReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(g.groups.keys().cloned().collect::<Vec<_>>(), ["cover1", "cover2", "uncovered"]);
    let weighted: f64 = g.groups.values().map(|x| x.mean.mpjpe_mm * x.count as f64).sum::<f64>() / 6.0;
    assert!((weighted - g.overall.mean.mpjpe_mm).abs() < 1e-9);

    let single = ok(&["eval", "--data", s(&d), "--checkpoint", s(&net)]);
    let one: GroupedReport = serde_json::from_str(&single).unwrap();
    assert_eq!(one.overall, g.overall);

    let csv = ok(&["eval", "--data", s(&d), "--checkpoint", s(&net), "--group-by", "cover", "--format", "csv", "--cover-filter", "cover2"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("group,count,mpjpe_mm"));
    assert!(lines[1].starts_with("all,2,"));
    assert!(lines[2].starts_with("cover2,2,"));
    assert_eq!(lines.len(), 3);

    let o = pressmap(&["eval", "--data", s(&d), "--checkpoint", s(&net), "--pose-filter", "prone"]);
    assert!(!o.status.success());
}

#[test]
fn projection_round_trips_on_a_flat_mesh() {
    let t = tempfile::tempdir().unwrap();
    let g = GridGeometry::centered(4, 3, 0.05, [0.0, 0.0]).unwrap();
    let values = vec![0.0, 2.0, 3.5, 0.0, 1.0, 0.0, 7.0, 0.0, 0.25, 4.0, 0.0, 9.0];
    let img = PressureImage::new(g, values.clone()).unwrap();
    let ip = t.path().join("img.pmt");
    img.save(&ip).unwrap();
    let mut verts = Vec::new();
    for r in 0..4 {
        for c in 0..3 {
            let [x, y] = g.cell_center(r, c);
            verts.extend([x - 0.01, y, 0.0, x + 0.01, y + 0.005, 0.0]);
        }
    }
    let mp = t.path().join("mesh.pmt");
    PmtTensor::f64(&[24, 3], verts).unwrap().save(&mp).unwrap();

    let vp = t.path().join("vp.pmt");
    let ply = t.path().join("vp.ply");
    ok(&["project", "to3d", "--pressure", s(&ip), "--mesh", s(&mp), "--out", s(&vp), "--ply", s(&ply)]);
    let per_vertex = PmtTensor::load(&vp).unwrap().to_f64();
    assert_eq!(per_vertex.len(), 24);
    assert!(std::fs::read_to_string(&ply).unwrap().contains("element vertex 24"));

    let back = t.path().join("back.pmt");
    ok(&["project", "to2d", "--pressure", s(&ip), "--mesh", s(&mp), "--vertex-pressure", s(&vp), "--out", s(&back)]);
    let b = PressureImage::load(&back).unwrap();
    for (x, y) in b.values.iter().zip(&values) {
        assert!((x - y).abs() <= 1e-12);
    }

    let o = pressmap(&["project", "to2d", "--pressure", s(&ip), "--mesh", s(&mp), "--out", s(&back)]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_reports_every_op_and_fails_loudly_when_corrupted() {
    let out = ok(&["gradcheck", "--seed", "1"]);
    for c in op_suite(1, None).unwrap() {
        assert!(out.contains(&c.name), "missing {}", c.name);
    }
    assert!(out.contains("gradient checks passed"));

    let o = pressmap(&["gradcheck", "--corrupt-vjp", "sigmoid"]);
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("FAIL"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("failed"));
}
