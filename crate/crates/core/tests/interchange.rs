use std::fs;
use std::path::Path;

use ingredient_core::numerics::{RasterImage, Tensor};
use ingredient_core::refnet::{
    load_model, probe_parity, read_probe, save_model, write_probe, ModelSpec, MANIFEST, PROBE_EXPECTED, PROBE_INPUT,
};
use ingredient_core::synth;

fn saved(dir: &Path) -> ModelSpec {
    let m = ModelSpec::reference(synth::class_names(), 11).unwrap();
    save_model(&m, dir).unwrap();
    m
}

fn probe_image() -> RasterImage {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    synth::render_single(Some(2), 80, &mut rng)
}

#[test]
fn probe_written_by_primary_has_zero_gap() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved(dir.path());
    let rec = write_probe(&m, &probe_image(), dir.path()).unwrap();
    assert_eq!(rec.expected.len(), m.num_classes());
    let sum: f32 = rec.expected.iter().sum();
    assert!((sum - 1.0).abs() < 1e-5);
    assert_eq!(read_probe(dir.path(), m.input_size).unwrap(), rec);
    assert_eq!(probe_parity(dir.path()).unwrap(), 0.0);
}

#[test]
fn parity_gap_is_max_abs() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved(dir.path());
    let rec = write_probe(&m, &probe_image(), dir.path()).unwrap();
    let mut shifted = rec.expected.clone();
    shifted[4] += 5e-5;
    shifted[0] -= 2e-5;
    let text: String = shifted.iter().map(|p| format!("{p:e}\n")).collect();
    fs::write(dir.path().join(PROBE_EXPECTED), text).unwrap();
    let gap = probe_parity(dir.path()).unwrap();
    assert!(gap > 4e-5 && gap < 1e-4, "{gap}");
}

#[test]
fn malformed_probe_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved(dir.path());
    write_probe(&m, &probe_image(), dir.path()).unwrap();

    fs::write(dir.path().join(PROBE_EXPECTED), "0.5\n0.5\n").unwrap();
    assert!(probe_parity(dir.path()).is_err());
    fs::write(dir.path().join(PROBE_EXPECTED), "0.5\nhalf\n").unwrap();
    assert!(probe_parity(dir.path()).is_err());

    write_probe(&m, &probe_image(), dir.path()).unwrap();
    fs::write(dir.path().join(PROBE_INPUT), [0u8; 12]).unwrap();
    assert!(probe_parity(dir.path()).is_err());
}

/// Another writer may order records differently; only the grammar matters.
#[test]
fn record_order_is_free_within_sections() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved(dir.path());
    let path = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap();
    let (mut tensors, rest): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.starts_with("tensor "));
    tensors.reverse();
    let (mut classes, other): (Vec<&str>, Vec<&str>) = rest.into_iter().partition(|l| l.starts_with("class "));
    classes.reverse();
    let reordered: String = tensors.iter().chain(&classes).chain(&other).map(|l| format!("{l}\n")).collect();
    fs::write(&path, reordered).unwrap();

    let back = load_model(dir.path()).unwrap();
    assert_eq!(back, m);
    let x = Tensor::filled(vec![3, 64, 64], -0.2);
    assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn tensor_files_are_little_endian_row_major() {
    let dir = tempfile::tempdir().unwrap();
    let m = saved(dir.path());
    let bytes = fs::read(dir.path().join("head.bias.bin")).unwrap();
    assert_eq!(bytes.len(), 4 * m.num_classes());
    let w = fs::read(dir.path().join("stem.conv.weight.bin")).unwrap();
    // [out, in, kh, kw]: element (1, 2, 0, 1) sits at 1*27 + 2*9 + 0*3 + 1
    let i = (27 + 18 + 1) * 4;
    let v = f32::from_le_bytes([w[i], w[i + 1], w[i + 2], w[i + 3]]);
    assert_eq!(v, m.stem.weight.data()[46]);
}
