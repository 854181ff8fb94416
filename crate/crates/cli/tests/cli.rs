use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use jointseg::dti::{simulate_dwi, single_shell_protocol};
use jointseg::io::{read_nifti, write_nifti, NiftiDatatype};
use jointseg::volume::{GridSpec, TensorVolume, Volume};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_jointseg"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The default simulated dataset, shared by the segmentation tests.
fn dataset() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = scratch("dataset");
        let o = run(&["simulate", "--out-dir", s(&d), "--seed", "11"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        d
    })
}

fn segment(out: &Path, extra: &[&str]) -> Output {
    let d = dataset();
    let mut args = vec![
        "segment".to_string(),
        "--config".into(),
        d.join("config.toml").display().to_string(),
        "--t1".into(),
        d.join("t1.nii.gz").display().to_string(),
        "--fa".into(),
        d.join("fa.nii.gz").display().to_string(),
        "--dirs".into(),
        d.join("dirs.nii.gz").display().to_string(),
        "--out-dir".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|a| a.to_string()));
    bin().args(&args).output().unwrap()
}

fn labels(p: &Path) -> Vec<i64> {
    read_nifti(p).unwrap().data().iter().map(|&v| v as i64).collect()
}

fn dice(a: &[i64], b: &[i64], c: i64) -> f64 {
    let both = a.iter().zip(b).filter(|(x, y)| **x == c && **y == c).count();
    let na = a.iter().filter(|x| **x == c).count();
    let nb = b.iter().filter(|x| **x == c).count();
    2.0 * both as f64 / (na + nb) as f64
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn simulate_is_reproducible() {
    let (a, b) = (scratch("sim_a"), scratch("sim_b"));
    for d in [&a, &b] {
        assert_eq!(code(&run(&["simulate", "--out-dir", s(d), "--seed", "4"])), 0);
    }
    for f in ["t1.nii.gz", "fa.nii.gz", "dirs.nii.gz", "labels.nii.gz", "atlas.nii.gz", "atlas.txt", "truth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn single_class_simulation_has_one_label() {
    let d = scratch("sim_one");
    let cfg = d.join("c.toml");
    std::fs::write(&cfg, "[simulate]\nclasses = 1\ngrid = 8\n").unwrap();
    assert_eq!(code(&run(&["simulate", "--config", s(&cfg), "--out-dir", s(&d)])), 0);
    assert!(labels(&d.join("labels.nii.gz")).iter().all(|&l| l == 1));
}

#[test]
fn segment_recovers_the_simulated_labels() {
    let out = scratch("seg_auto");
    let o = segment(&out, &["--qc", "--deterministic", "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let truth = labels(&dataset().join("labels.nii.gz"));
    let got = labels(&out.join("labels.nii.gz"));
    for c in 1..=4 {
        let d = dice(&got, &truth, c);
        assert!(d >= 0.9, "class {c}: Dice {d}");
    }
    let post = read_nifti(&out.join("posteriors.nii.gz")).unwrap();
    assert_eq!(post.channels(), 4);
    assert!(out.join("qc").join("axial_000.png").exists());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let trace = report["bound_trace"].as_array().unwrap();
    for w in trace.windows(2) {
        let (a, b) = (w[0].as_f64().unwrap(), w[1].as_f64().unwrap());
        assert!(b >= a - 1e-8 * a.abs());
    }
    let total: f64 = report["classes"].as_array().unwrap().iter().map(|c| c["expected_volume_mm3"].as_f64().unwrap()).sum();
    let masked = report["masked_volume_mm3"].as_f64().unwrap();
    assert!((total - masked).abs() < 1e-6 * masked, "{total} vs {masked}");
    assert!(report.get("wall_time_s").is_none());
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (scratch("seg_t1"), scratch("seg_t4"));
    assert_eq!(code(&segment(&a, &["--deterministic", "--threads", "1"])), 0);
    assert_eq!(code(&segment(&b, &["--deterministic", "--threads", "4"])), 0);
    for f in ["labels.nii.gz", "posteriors.nii.gz", "report.json", "affine.txt", "volumes.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn given_identity_matches_registration() {
    let (auto, fixed) = (scratch("seg_reg"), scratch("seg_identity"));
    let affine = fixed.join("identity.txt");
    std::fs::write(&affine, "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").unwrap();
    assert_eq!(code(&segment(&auto, &[])), 0);
    assert_eq!(code(&segment(&fixed, &["--affine", s(&affine)])), 0);
    let (a, b) = (labels(&auto.join("labels.nii.gz")), labels(&fixed.join("labels.nii.gz")));
    let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64;
    assert!(agree >= 0.99, "{agree}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(auto.join("report.json")).unwrap()).unwrap();
    assert!(report["wall_time_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = run(&["segment", "--out-dir", "/tmp/unused"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let d = scratch("errors");
    let bad_cfg = d.join("bad.toml");
    std::fs::write(&bad_cfg, "[gem]\nmaxiter = 3\n").unwrap();
    let o = run(&["simulate", "--config", s(&bad_cfg), "--out-dir", s(&d)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("error[config]") && err.contains("max_iter"), "{err}");

    let broken = d.join("t1.nii");
    std::fs::write(&broken, [0u8; 40]).unwrap();
    let ds = dataset();
    let o = bin()
        .args(["segment", "--atlas", s(&ds.join("atlas.nii.gz")), "--t1", s(&broken)])
        .args(["--fa", s(&ds.join("fa.nii.gz")), "--dirs", s(&ds.join("dirs.nii.gz")), "--out-dir", s(&d)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[data]"));

    let o = bin()
        .args(["segment", "--t1", s(&ds.join("t1.nii.gz"))])
        .args(["--fa", s(&ds.join("fa.nii.gz")), "--dirs", s(&ds.join("dirs.nii.gz")), "--out-dir", s(&d)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "missing atlas");
}

fn write_protocol(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let p = single_shell_protocol(n, 1000.0).unwrap();
    let bval = dir.join("dwi.bval");
    let bvec = dir.join("dwi.bvec");
    let vals: Vec<String> = p.bvals().iter().map(|b| format!("{b:?}")).collect();
    std::fs::write(&bval, vals.join(" ") + "\n").unwrap();
    let rows: Vec<String> = (0..3)
        .map(|a| p.bvecs().iter().map(|g| format!("{:?}", g[a])).collect::<Vec<_>>().join(" "))
        .collect();
    std::fs::write(&bvec, rows.join("\n") + "\n").unwrap();
    (bval, bvec)
}

fn phantom_dwi(dir: &Path, tensor: [f64; 6]) -> PathBuf {
    let g = GridSpec::isotropic([4, 3, 2], 2.0, [0.0; 3]).unwrap();
    let t = TensorVolume::new(g.clone(), vec![tensor; g.num_voxels()]).unwrap();
    let proto = single_shell_protocol(41, 1000.0).unwrap();
    let dwi = simulate_dwi(&t, 1000.0, &proto).unwrap();
    let p = dir.join("dwi.nii.gz");
    write_nifti(&dwi, &p, NiftiDatatype::Float64).unwrap();
    p
}

/// `sqrt(3/2) |λ - mean(λ)| / |λ|`.
fn analytic_fa(l: [f64; 3]) -> f64 {
    let m = (l[0] + l[1] + l[2]) / 3.0;
    let dev: f64 = l.iter().map(|x| (x - m).powi(2)).sum();
    let norm: f64 = l.iter().map(|x| x * x).sum();
    (1.5 * dev / norm).sqrt()
}

#[test]
fn tensor_features_of_a_single_tensor_phantom() {
    let d = scratch("tensor");
    let dwi = phantom_dwi(&d, [1.7e-3, 0.3e-3, 0.3e-3, 0.0, 0.0, 0.0]);
    let (bval, bvec) = write_protocol(&d, 41);
    let o = run(&["tensor-features", "--dwi", s(&dwi), "--bval", s(&bval), "--bvec", s(&bvec), "--out-dir", s(&d), "--resample", "1.0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fa = read_nifti(&d.join("fa.nii.gz")).unwrap();
    let want = analytic_fa([1.7e-3, 0.3e-3, 0.3e-3]);
    assert!(fa.data().iter().all(|f| (f - want).abs() < 1e-6), "{want}");
    let dirs = read_nifti(&d.join("dirs.nii.gz")).unwrap();
    assert!(dirs.data().chunks(3).all(|v| (v[0].abs() - 1.0).abs() < 1e-6));
    let r = read_nifti(&d.join("fa_resampled.nii.gz")).unwrap();
    assert_eq!(r.grid().dims(), [7, 5, 3]);
    assert!(r.data().iter().all(|f| (f - want).abs() < 1e-6));
}

#[test]
fn isotropic_phantom_has_zero_fa() {
    let d = scratch("tensor_iso");
    let dwi = phantom_dwi(&d, [1e-3, 1e-3, 1e-3, 0.0, 0.0, 0.0]);
    let (bval, bvec) = write_protocol(&d, 41);
    let o = run(&["tensor-features", "--dwi", s(&dwi), "--bval", s(&bval), "--bvec", s(&bvec), "--out-dir", s(&d)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fa = read_nifti(&d.join("fa.nii.gz")).unwrap();
    assert!(fa.data().iter().all(|f| f.abs() < 1e-6));
}

#[test]
fn tensor_volume_input() {
    let d = scratch("tensor_input");
    let g = GridSpec::isotropic([2, 2, 2], 1.0, [0.0; 3]).unwrap();
    let t = Volume::new(g, 6, [2.0, 1.0, 1.0, 0.0, 0.0, 0.0].repeat(8)).unwrap();
    let p = d.join("t.nii");
    write_nifti(&t, &p, NiftiDatatype::Float64).unwrap();
    assert_eq!(code(&run(&["tensor-features", "--tensor", s(&p), "--out-dir", s(&d)])), 0);
    let fa = read_nifti(&d.join("fa.nii.gz")).unwrap();
    let want = analytic_fa([2.0, 1.0, 1.0]);
    assert!(fa.data().iter().all(|f| (f - want).abs() < 1e-6));
}

#[test]
fn missing_bvecs_file_is_a_protocol_error() {
    let d = scratch("tensor_missing");
    let dwi = phantom_dwi(&d, [1.7e-3, 0.3e-3, 0.3e-3, 0.0, 0.0, 0.0]);
    let (bval, _) = write_protocol(&d, 41);
    let o = run(&["tensor-features", "--dwi", s(&dwi), "--bval", s(&bval), "--bvec", s(&d.join("nope.bvec")), "--out-dir", s(&d)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("protocol"));
}

#[test]
fn segment_from_a_dwi_series() {
    let d = scratch("seg_dwi");
    let ds = dataset();
    // one tensor per voxel aligned with the simulated directions
    let t1 = read_nifti(&ds.join("t1.nii.gz")).unwrap();
    let dirs = read_nifti(&ds.join("dirs.nii.gz")).unwrap();
    let fa = read_nifti(&ds.join("fa.nii.gz")).unwrap();
    let tensors: Vec<[f64; 6]> = dirs
        .data()
        .chunks(3)
        .zip(fa.data())
        .map(|(v, &f)| {
            let l2 = 1e-3 * (1.0 - 0.9 * f);
            let l1 = 1e-3 + 1e-3 * f;
            let m = |i: usize, j: usize| (l1 - l2) * v[i] * v[j] + if i == j { l2 } else { 0.0 };
            [m(0, 0), m(1, 1), m(2, 2), m(0, 1), m(0, 2), m(1, 2)]
        })
        .collect();
    let tv = TensorVolume::new(t1.grid().clone(), tensors).unwrap();
    let proto = single_shell_protocol(30, 1000.0).unwrap();
    let dwi = simulate_dwi(&tv, 500.0, &proto).unwrap();
    let dwi_path = d.join("dwi.nii.gz");
    write_nifti(&dwi, &dwi_path, NiftiDatatype::Float32).unwrap();
    let (bval, bvec) = write_protocol(&d, 30);
    let id = d.join("id.txt");
    std::fs::write(&id, "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").unwrap();
    let o = bin()
        .args(["segment", "--config", s(&ds.join("config.toml")), "--t1", s(&ds.join("t1.nii.gz"))])
        .args(["--dwi", s(&dwi_path), "--bval", s(&bval), "--bvec", s(&bvec)])
        .args(["--affine", s(&id), "--out-dir", s(&d)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let truth = labels(&ds.join("labels.nii.gz"));
    let got = labels(&d.join("labels.nii.gz"));
    for c in 1..=4 {
        assert!(dice(&got, &truth, c) >= 0.9, "class {c}");
    }
}
