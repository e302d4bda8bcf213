//! Directory interchange format.
//!
//! ```text
//! format 1
//! input_size 64
//! class 0 carrot
//! class 1 background
//! block 0 0 16 16 2 0
//! tensor stem.conv.weight 16x3x3x3 stem.conv.weight.bin
//! ```
//!
//! Each tensor file holds little-endian f32 values in row-major order
//! with no header.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Block, BlockSpec, ConvNorm, ModelSpec, STEM_STRIDE};
use crate::error::{Error, Result};
use crate::numerics::{RasterImage, Tensor};

pub const MANIFEST: &str = "manifest.txt";

fn layer_tensors(prefix: &str, l: &ConvNorm) -> Vec<(String, Tensor)> {
    let c = l.out_channels();
    let vec_t = |v: &Vec<f32>| Tensor::new(vec![c], v.clone()).expect("norm length checked");
    vec![
        (format!("{prefix}.conv.weight"), l.weight.clone()),
        (format!("{prefix}.norm.scale"), vec_t(&l.scale)),
        (format!("{prefix}.norm.shift"), vec_t(&l.shift)),
        (format!("{prefix}.norm.mean"), vec_t(&l.running_mean)),
        (format!("{prefix}.norm.var"), vec_t(&l.running_var)),
    ]
}

fn model_tensors(m: &ModelSpec) -> Vec<(String, Tensor)> {
    let mut out = layer_tensors("stem", &m.stem);
    for b in &m.blocks {
        out.extend(layer_tensors(&format!("block.{}", b.spec.index), &b.layer));
    }
    out.push(("head.weight".into(), m.head_weight.clone()));
    out.push((
        "head.bias".into(),
        Tensor::new(vec![m.head_bias.len()], m.head_bias.clone()).expect("length"),
    ));
    out
}

fn dims_string(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save_model(m: &ModelSpec, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    m.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    writeln!(manifest, "format 1").unwrap();
    writeln!(manifest, "input_size {}", m.input_size).unwrap();
    for (i, c) in m.class_names.iter().enumerate() {
        writeln!(manifest, "class {i} {c}").unwrap();
    }
    for b in &m.blocks {
        let s = &b.spec;
        writeln!(
            manifest,
            "block {} {} {} {} {} {}",
            s.index, s.stage, s.in_channels, s.out_channels, s.stride, s.prunable as u8
        )
        .unwrap();
    }
    for (name, t) in model_tensors(m) {
        let file = format!("{name}.bin");
        writeln!(manifest, "tensor {name} {} {file}", dims_string(t.dims())).unwrap();
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

struct Parsed {
    format: Option<u32>,
    input_size: Option<usize>,
    classes: Vec<(usize, String)>,
    blocks: Vec<BlockSpec>,
    tensors: HashMap<String, Tensor>,
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelSpec> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let err = |line: usize, msg: String| Error::Manifest {
        path: manifest_path.clone(),
        msg: if line > 0 { format!("line {line}: {msg}") } else { msg },
    };

    let mut p = Parsed {
        format: None,
        input_size: None,
        classes: Vec::new(),
        blocks: Vec::new(),
        tensors: HashMap::new(),
    };
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let fields: Vec<&str> = raw.split(' ').collect();
        if raw.trim().is_empty() {
            continue;
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| err(ln, format!("bad integer `{s}`")));
        match fields[0] {
            "format" if fields.len() == 2 => {
                let v = num(fields[1])?;
                if v != 1 {
                    return Err(err(ln, format!("unsupported format version {v}")));
                }
                p.format = Some(v as u32);
            }
            "input_size" if fields.len() == 2 => p.input_size = Some(num(fields[1])?),
            "class" if fields.len() >= 3 => {
                // class names may contain spaces
                p.classes.push((num(fields[1])?, fields[2..].join(" ")));
            }
            "block" if fields.len() == 7 => {
                let prunable = match fields[6] {
                    "0" => false,
                    "1" => true,
                    other => return Err(err(ln, format!("prunable flag `{other}`"))),
                };
                p.blocks.push(BlockSpec {
                    index: num(fields[1])?,
                    stage: num(fields[2])?,
                    in_channels: num(fields[3])?,
                    out_channels: num(fields[4])?,
                    stride: num(fields[5])?,
                    prunable,
                });
            }
            "tensor" if fields.len() == 4 => {
                let name = fields[1].to_string();
                if p.tensors.contains_key(&name) {
                    return Err(err(ln, format!("duplicate tensor name `{name}`")));
                }
                let dims = fields[2]
                    .split('x')
                    .map(num)
                    .collect::<Result<Vec<_>>>()?;
                let path: PathBuf = dir.join(fields[3]);
                let bytes = fs::read(&path).map_err(|_| err(ln, format!("missing tensor file {}", path.display())))?;
                let need = dims.iter().product::<usize>() * 4;
                if bytes.len() != need {
                    return Err(err(
                        ln,
                        format!("tensor `{name}` dims {} needs {need} bytes, file has {}", fields[2], bytes.len()),
                    ));
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                p.tensors.insert(name, Tensor::new(dims, data)?);
            }
            other => return Err(err(ln, format!("unrecognized record `{other}` ({} fields)", fields.len()))),
        }
    }
    if p.format.is_none() {
        return Err(err(0, "missing `format` record".into()));
    }
    let input_size = p.input_size.ok_or_else(|| err(0, "missing `input_size` record".into()))?;

    let mut by_index = BTreeMap::new();
    for (i, name) in p.classes {
        if by_index.insert(i, name).is_some() {
            return Err(err(0, format!("class index {i} repeated")));
        }
    }
    if by_index.keys().copied().ne(0..by_index.len()) {
        return Err(err(0, "class indices are not contiguous from 0".into()));
    }
    let class_names: Vec<String> = by_index.into_values().collect();

    let mut take = |name: &str| {
        p.tensors
            .remove(name)
            .ok_or_else(|| err(0, format!("missing tensor `{name}`")))
    };
    let mut layer = |prefix: &str, stride: usize| -> Result<ConvNorm> {
        let weight = take(&format!("{prefix}.conv.weight"))?;
        let mut vec_of = |n: &str| take(&format!("{prefix}.norm.{n}")).map(|t| t.into_data());
        Ok(ConvNorm {
            weight,
            stride,
            scale: vec_of("scale")?,
            shift: vec_of("shift")?,
            running_mean: vec_of("mean")?,
            running_var: vec_of("var")?,
        })
    };
    let stem = layer("stem", STEM_STRIDE)?;
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for spec in p.blocks {
        let l = layer(&format!("block.{}", spec.index), spec.stride)?;
        blocks.push(Block { spec, layer: l });
    }
    let head_weight = take("head.weight")?;
    let head_bias = take("head.bias")?.into_data();
    if let Some(extra) = p.tensors.keys().min() {
        return Err(err(0, format!("unexpected tensor `{extra}`")));
    }

    let m = ModelSpec {
        input_size,
        class_names,
        stem,
        blocks,
        head_weight,
        head_bias,
    };
    m.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(m)
}

/// Preprocessed probe input: `3×S×S` little-endian f32, no header.
pub const PROBE_INPUT: &str = "probe.bin";
/// Expected class probabilities, one decimal per line in class order.
pub const PROBE_EXPECTED: &str = "probe_expected.txt";

/// A probe input and the probabilities the exporting side recorded for it.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub input: Tensor,
    pub expected: Vec<f32>,
}

/// Writes a probe record for `img` next to a saved model.
pub fn write_probe(m: &ModelSpec, img: &RasterImage, dir: impl AsRef<Path>) -> Result<ProbeRecord> {
    let dir = dir.as_ref();
    let input = m.preprocess(img)?;
    let expected = m.forward(&input)?;
    let bytes: Vec<u8> = input.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.join(PROBE_INPUT);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    let text: String = expected.iter().map(|p| format!("{p:e}\n")).collect();
    let path = dir.join(PROBE_EXPECTED);
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(ProbeRecord { input, expected })
}

pub fn read_probe(dir: impl AsRef<Path>, input_size: usize) -> Result<ProbeRecord> {
    let dir = dir.as_ref();
    let path = dir.join(PROBE_INPUT);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let dims = vec![3, input_size, input_size];
    if bytes.len() != dims.iter().product::<usize>() * 4 {
        return Err(Error::Manifest {
            path,
            msg: format!("probe input has {} bytes, expected {dims:?} f32", bytes.len()),
        });
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let input = Tensor::new(dims, data)?;

    let path = dir.join(PROBE_EXPECTED);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let expected = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f32>().map_err(|_| Error::Manifest {
                path: path.clone(),
                msg: format!("bad probability `{l}`"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeRecord { input, expected })
}

/// Loads the model in `dir`, runs its probe and returns the max-abs
/// difference from the recorded probabilities.
pub fn probe_parity(dir: impl AsRef<Path>) -> Result<f32> {
    let dir = dir.as_ref();
    let m = load_model(dir)?;
    let rec = read_probe(dir, m.input_size)?;
    if rec.expected.len() != m.num_classes() {
        return Err(Error::shape(
            format!("{} probabilities", m.num_classes()),
            format!("{}", rec.expected.len()),
        ));
    }
    let got = m.forward(&rec.input)?;
    Ok(got.iter().zip(&rec.expected).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
}

#[cfg(test)]
mod tests {
    use super::super::BACKGROUND;
    use super::*;

    fn model() -> ModelSpec {
        ModelSpec::reference(vec!["carrot".into(), "green onion".into(), BACKGROUND.into()], 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_model(&m, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, m);
        let x = Tensor::filled(vec![3, 64, 64], 0.3);
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn manifest_text_layout() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "format 1");
        assert_eq!(lines[1], "input_size 64");
        assert_eq!(lines[3], "class 1 green onion");
        assert_eq!(lines[5], "block 0 0 16 16 2 0");
        assert_eq!(lines[6], "block 1 0 16 16 1 1");
        assert!(lines.contains(&"tensor stem.conv.weight 16x3x3x3 stem.conv.weight.bin"));
        assert!(lines.contains(&"tensor head.weight 3x128 head.weight.bin"));
        assert!(!text.contains('\r'));
    }

    fn write(dir: &Path, manifest: &str, files: &[(&str, usize)]) {
        fs::write(dir.join(MANIFEST), manifest).unwrap();
        for (f, n) in files {
            fs::write(dir.join(f), vec![0u8; *n]).unwrap();
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "format 1\ninput_size 4\ntensor t 2x2 t.bin\n", &[("t.bin", 8)]);
        let e = load_model(dir.path()).unwrap_err().to_string();
        assert!(e.contains("needs 16 bytes"), "{e}");
    }

    #[test]
    fn duplicate_and_missing_tensors() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "format 1\ninput_size 4\ntensor t 2 t.bin\ntensor t 2 t.bin\n",
            &[("t.bin", 8)],
        );
        let e = load_model(dir.path()).unwrap_err().to_string();
        assert!(e.contains("duplicate tensor"), "{e}");

        write(dir.path(), "format 1\ninput_size 4\ntensor t 2 gone.bin\n", &[]);
        let e = load_model(dir.path()).unwrap_err().to_string();
        assert!(e.contains("missing tensor file"), "{e}");
    }

    #[test]
    fn structural_problems_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, text.replace("format 1", "format 2")).unwrap();
        assert!(load_model(dir.path()).is_err());

        fs::write(&path, text.replace("class 2 background", "class 2 plate")).unwrap();
        assert!(load_model(dir.path()).unwrap_err().to_string().contains("background"));

        fs::write(&path, text.replace("block 1 0 16 16 1 1", "block 1 0 16 16 1 0")).unwrap();
        assert!(load_model(dir.path()).is_err());

        let no_head: String = text.lines().filter(|l| !l.contains("head.bias")).map(|l| format!("{l}\n")).collect();
        fs::write(&path, no_head).unwrap();
        assert!(load_model(dir.path()).unwrap_err().to_string().contains("head.bias"));

        assert!(load_model(dir.path().join("nowhere")).is_err());
    }
}
