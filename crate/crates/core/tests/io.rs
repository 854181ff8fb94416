use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use jointseg::gem::{run_gem, GemInputs, Hyperparams, SharingGroups};
use jointseg::io::{read_config, read_header, read_nifti, write_nifti, NiftiDatatype};
use jointseg::synth::default_dataset;
use jointseg::volume::{GridSpec, Volume};
use jointseg::Error;
use nalgebra::Matrix4;

/// Minimal NIfTI-1 writer built from the published field offsets.
fn fixture(dims: [i16; 3], code: i16, srow: [[f32; 4]; 3], slope: f32, inter: f32, payload: &[u8], big: bool) -> Vec<u8> {
    let mut b = vec![0u8; 352];
    let i16b = |v: i16| if big { v.to_be_bytes() } else { v.to_le_bytes() };
    let f32b = |v: f32| if big { v.to_be_bytes() } else { v.to_le_bytes() };
    let i32b = |v: i32| if big { v.to_be_bytes() } else { v.to_le_bytes() };
    b[0..4].copy_from_slice(&i32b(348));
    let dim = [3, dims[0], dims[1], dims[2], 1, 1, 1, 1];
    for (k, d) in dim.iter().enumerate() {
        b[40 + 2 * k..42 + 2 * k].copy_from_slice(&i16b(*d));
    }
    b[70..72].copy_from_slice(&i16b(code));
    b[108..112].copy_from_slice(&f32b(352.0));
    b[112..116].copy_from_slice(&f32b(slope));
    b[116..120].copy_from_slice(&f32b(inter));
    b[254..256].copy_from_slice(&i16b(1));
    for (r, row) in srow.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            let at = 280 + 16 * r + 4 * k;
            b[at..at + 4].copy_from_slice(&f32b(*v));
        }
    }
    b[344..348].copy_from_slice(b"n+1\0");
    b.extend_from_slice(payload);
    b
}

const SROW: [[f32; 4]; 3] = [[2.0, 0.0, 0.0, -3.0], [0.0, 1.0, 0.0, 4.0], [0.0, 0.0, 0.5, 1.25]];

fn srow_affine() -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for k in 0..4 {
            m[(r, k)] = SROW[r][k] as f64;
        }
    }
    m
}

fn grid() -> GridSpec {
    GridSpec::new([3, 4, 5], srow_affine()).unwrap()
}

fn tmp(dir: &tempfile::TempDir, name: &str) -> std::path::PathBuf {
    dir.path().join(name)
}

fn sample_volume(channels: usize, dt: NiftiDatatype) -> Volume {
    let g = grid();
    let n = g.num_voxels() * channels;
    let data = (0..n)
        .map(|i| match dt {
            NiftiDatatype::Uint8 => (i * 7 % 256) as f64,
            NiftiDatatype::Int16 => (i as f64 * 613.0) % 65536.0 - 32768.0,
            NiftiDatatype::Float32 => ((i as f32).sin() * 1e3) as f64,
            NiftiDatatype::Float64 => (i as f64).sqrt() * std::f64::consts::PI,
        })
        .collect();
    Volume::new(g, channels, data).unwrap()
}

#[test]
fn round_trip_every_datatype_plain_and_gzip() {
    let dir = tempfile::tempdir().unwrap();
    for dt in [NiftiDatatype::Uint8, NiftiDatatype::Int16, NiftiDatatype::Float32, NiftiDatatype::Float64] {
        for channels in [1, 3] {
            for ext in ["nii", "nii.gz"] {
                let v = sample_volume(channels, dt);
                let p = tmp(&dir, &format!("v.{ext}"));
                write_nifti(&v, &p, dt).unwrap();
                let back = read_nifti(&p).unwrap();
                assert_eq!(back.grid().affine(), v.grid().affine(), "{dt:?} {ext}");
                assert_eq!(back.channels(), channels);
                let same = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "{dt:?} {channels} {ext}");
            }
        }
    }
}

#[test]
fn single_voxel_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = tmp(&dir, "one.nii");
    let v = Volume::new(GridSpec::isotropic([1, 1, 1], 1.0, [0.0; 3]).unwrap(), 1, vec![5.0]).unwrap();
    write_nifti(&v, &p, NiftiDatatype::Float32).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(i32::from_le_bytes(bytes[0..4].try_into().unwrap()), 348);
    assert_eq!(&bytes[344..348], b"n+1\0");
    assert_eq!(f32::from_le_bytes(bytes[108..112].try_into().unwrap()), 352.0);
    assert_eq!(bytes.len(), 352 + 4);
    assert_eq!(&bytes[352..], &5.0f32.to_le_bytes());
    assert_eq!(f32::from_le_bytes(bytes[112..116].try_into().unwrap()), 1.0);
    assert_eq!(f32::from_le_bytes(bytes[116..120].try_into().unwrap()), 0.0);
}

#[test]
fn dim_field_of_a_multichannel_volume() {
    let dir = tempfile::tempdir().unwrap();
    let p = tmp(&dir, "m.nii");
    let g = GridSpec::isotropic([10, 11, 12], 1.0, [0.0; 3]).unwrap();
    write_nifti(&Volume::zeros(g, 3), &p, NiftiDatatype::Float32).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let dim: Vec<i16> = (0..8).map(|k| i16::from_le_bytes([bytes[40 + 2 * k], bytes[41 + 2 * k]])).collect();
    assert_eq!(dim, vec![4, 10, 11, 12, 3, 1, 1, 1]);
    assert_eq!(read_header(&p).unwrap().dim, [4, 10, 11, 12, 3, 1, 1, 1]);
}

#[test]
fn slope_and_intercept_are_applied() {
    let dir = tempfile::tempdir().unwrap();
    let p = tmp(&dir, "s.nii");
    let payload: Vec<u8> = [3i16, -1].iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&p, fixture([2, 1, 1], 4, SROW, 2.0, 1.0, &payload, false)).unwrap();
    assert_eq!(read_nifti(&p).unwrap().data(), &[7.0, -1.0]);
    // zero slope means unscaled
    std::fs::write(&p, fixture([2, 1, 1], 4, SROW, 0.0, 1.0, &payload, false)).unwrap();
    assert_eq!(read_nifti(&p).unwrap().data(), &[3.0, -1.0]);
}

#[test]
fn big_endian_reads_like_its_little_endian_twin() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f32> = (0..60).map(|i| i as f32 * 0.25 - 3.0).collect();
    let le: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let be: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    let (pl, pb) = (tmp(&dir, "le.nii"), tmp(&dir, "be.nii"));
    std::fs::write(&pl, fixture([3, 4, 5], 16, SROW, 1.0, 0.0, &le, false)).unwrap();
    std::fs::write(&pb, fixture([3, 4, 5], 16, SROW, 1.0, 0.0, &be, true)).unwrap();
    let a = read_nifti(&pl).unwrap();
    let b = read_nifti(&pb).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.grid().affine(), &srow_affine());
    assert_eq!(a.data()[5], 5.0 * 0.25 - 3.0);
}

#[test]
fn gzip_variant_reads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let payload: Vec<u8> = (0..60).flat_map(|i| (i as f64 * 1.5).to_le_bytes()).collect();
    let raw = fixture([3, 4, 5], 64, SROW, 1.0, 0.0, &payload, false);
    let mut enc = GzEncoder::new(Vec::new(), Compression::best());
    enc.write_all(&raw).unwrap();
    let (p, pz) = (tmp(&dir, "a.nii"), tmp(&dir, "a.nii.gz"));
    std::fs::write(&p, &raw).unwrap();
    std::fs::write(&pz, enc.finish().unwrap()).unwrap();
    assert_eq!(read_nifti(&p).unwrap(), read_nifti(&pz).unwrap());
}

#[test]
fn labels_survive_int16() {
    let dir = tempfile::tempdir().unwrap();
    let p = tmp(&dir, "l.nii.gz");
    let g = GridSpec::isotropic([4, 4, 4], 1.0, [0.0; 3]).unwrap();
    let v = Volume::new(g, 1, (0..64).map(|i| (i * 511 % 32767) as f64).collect()).unwrap();
    write_nifti(&v, &p, NiftiDatatype::Int16).unwrap();
    assert_eq!(read_nifti(&p).unwrap(), v);
}

#[test]
fn format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = tmp(&dir, "bad.nii");
    std::fs::write(&p, fixture([2, 1, 1], 8, SROW, 1.0, 0.0, &[0; 8], false)).unwrap();
    assert!(matches!(read_nifti(&p), Err(Error::UnsupportedDatatype(8))));
    let msg = read_nifti(&p).unwrap_err().to_string();
    assert!(msg.contains('8'), "{msg}");
    std::fs::write(&p, fixture([2, 2, 2], 16, SROW, 1.0, 0.0, &[0; 12], false)).unwrap();
    assert!(matches!(read_nifti(&p), Err(Error::Corrupt { .. })));
    std::fs::write(&p, [0u8; 100]).unwrap();
    assert!(matches!(read_nifti(&p), Err(Error::Corrupt { .. })));
    assert!(matches!(read_nifti(Path::new("/nonexistent/x.nii")), Err(Error::Io { .. })));
    let v = Volume::zeros(grid(), 1);
    assert!(matches!(
        write_nifti(&v, Path::new("/nonexistent/dir/x.nii"), NiftiDatatype::Float32),
        Err(Error::Io { .. })
    ));
}

#[test]
fn config_file_limits_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let p = tmp(&dir, "run.toml");
    std::fs::write(&p, "[gem]\nmax_iter = 5\n").unwrap();
    let cfg = read_config(&p).unwrap();
    let d = default_dataset(2).unwrap();
    let atlas = jointseg::synth::default_atlas();
    let inp = GemInputs {
        structural: &d.structural,
        diffusion: &d.diffusion,
        atlas: &atlas,
        affine: &Matrix4::identity(),
        hyper: &Hyperparams::flat(4, 1),
        sharing: &SharingGroups::independent(4),
    };
    let r = run_gem(&inp, &cfg.gem_options()).unwrap();
    assert!(r.iterations <= 5, "{}", r.iterations);
}

#[test]
fn config_errors_name_the_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = tmp(&dir, "bad.toml");
    std::fs::write(&p, "seed = 3\n[model\n").unwrap();
    let e = read_config(&p).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    let m = e.to_string();
    assert!(m.contains("bad.toml") && m.contains("line 2"), "{m}");
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
    #[test]
    fn round_trip_is_identity(
        dims in proptest::array::uniform3(1usize..5),
        channels in 1usize..4,
        diag in proptest::array::uniform3(0.25f32..4.0),
        offset in proptest::array::uniform3(-100f32..100.0),
        seed in 0u64..1000,
        gz in proptest::bool::ANY,
    ) {
        let mut a = Matrix4::identity();
        for k in 0..3 {
            a[(k, k)] = diag[k] as f64;
            a[(k, 3)] = offset[k] as f64;
        }
        let g = GridSpec::new(dims, a).unwrap();
        let n = g.num_voxels() * channels;
        let data: Vec<f64> = (0..n).map(|i| ((i as u64 + 1) * (seed + 7)) as f64 / 13.0 - 50.0).collect();
        let v = Volume::new(g, channels, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(if gz { "p.nii.gz" } else { "p.nii" });
        write_nifti(&v, &p, NiftiDatatype::Float64).unwrap();
        proptest::prop_assert_eq!(read_nifti(&p).unwrap(), v);
    }
}
