//! On-disk formats: `.dcst` tensors, episode bundles, tube directories and
//! checkpoints. Every file is written to a temporary sibling and renamed
//! into place.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::pipeline::{ModelParams, PARAM_NAMES};
use crate::tensor::Tensor;
use crate::video::{MaskTube, TransformSpec, SCALE_GRID};

pub const MAGIC: &[u8; 4] = b"DCST";
pub const VERSION: u8 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Serializes a tensor; values are stored as 32-bit floats.
pub fn encode_dcst(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument("rank above 255".into()))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument("dimension above u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dcst(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "missing DCST header"));
    }
    if bytes[4] != VERSION {
        return Err(format_err(path, format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let body = &bytes[6..];
    if body.len() < 4 * rank {
        return Err(format_err(path, "truncated shape"));
    }
    let shape: Vec<usize> = body[..4 * rank]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let data_bytes = &body[4 * rank..];
    let numel: usize = shape.iter().product();
    if data_bytes.len() != 4 * numel {
        return Err(format_err(path, format!("expected {numel} values, found {} bytes", data_bytes.len())));
    }
    let data = data_bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(shape, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    atomic_write(path, &encode_dcst(t)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_dcst(&fs::read(path)?, path)
}

/// `key = value` lines, ignoring blanks and `#` comments.
fn meta_value(text: &str, key: &str, path: &Path) -> Result<String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string())
        .ok_or_else(|| format_err(path, format!("missing `{key}`")))
}

fn meta_parse<T: std::str::FromStr>(text: &str, key: &str, path: &Path) -> Result<T> {
    let v = meta_value(text, key, path)?;
    v.parse().map_err(|_| format_err(path, format!("bad value `{v}` for `{key}`")))
}

pub fn write_episode(dir: &Path, ep: &Episode) -> Result<()> {
    write_tensor(&dir.join("support.dcst"), &ep.support_img)?;
    write_tensor(&dir.join("support_mask.dcst"), &ep.support_mask)?;
    write_tensor(&dir.join("query.dcst"), &ep.query_img)?;
    write_tensor(&dir.join("query_mask.dcst"), &ep.query_mask)?;
    atomic_write(
        &dir.join("meta.txt"),
        format!("class_id = {}\nseed = {}\n", ep.class_id, ep.seed).as_bytes(),
    )
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path)?;
    Ok(Episode {
        support_img: read_tensor(&dir.join("support.dcst"))?,
        support_mask: read_tensor(&dir.join("support_mask.dcst"))?,
        query_img: read_tensor(&dir.join("query.dcst"))?,
        query_mask: read_tensor(&dir.join("query_mask.dcst"))?,
        class_id: meta_parse(&meta, "class_id", &meta_path)?,
        seed: meta_parse(&meta, "seed", &meta_path)?,
    })
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("frame_{t:04}.dcst"))
}

pub fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("masks").join(format!("mask_{t:04}.dcst"))
}

fn scale_text(spec: &TransformSpec) -> String {
    spec.scale().to_string()
}

pub fn write_tube(dir: &Path, tube: &MaskTube) -> Result<()> {
    tube.validate()?;
    for (t, (f, m)) in tube.frames.iter().zip(&tube.masks).enumerate() {
        write_tensor(&frame_path(dir, t), f)?;
        write_tensor(&mask_path(dir, t), m)?;
    }
    let mut meta = format!("class_id = {}\nseed = {}\nT = {}\n# t dx dy flip scale\n", tube.class_id, tube.seed, tube.len());
    for (t, s) in tube.transforms.iter().enumerate() {
        meta.push_str(&format!("{t} {} {} {} {}\n", s.dx, s.dy, u8::from(s.flip), scale_text(s)));
    }
    atomic_write(&dir.join("meta.txt"), meta.as_bytes())
}

pub fn read_tube(dir: &Path) -> Result<MaskTube> {
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path)?;
    let len: usize = meta_parse(&meta, "T", &meta_path)?;
    let mut transforms = Vec::with_capacity(len);
    for line in meta.lines().filter(|l| !l.contains('=') && !l.trim_start().starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || format_err(&meta_path, format!("bad transform line `{line}`"));
        if f.len() != 5 || f[0].parse::<usize>().ok() != Some(transforms.len()) {
            return Err(bad());
        }
        let scale: f64 = f[4].parse().map_err(|_| bad())?;
        let scale_index = SCALE_GRID
            .iter()
            .position(|&s| (f64::from(s) / 10.0 - scale).abs() < 1e-9)
            .ok_or_else(bad)?;
        transforms.push(TransformSpec {
            dx: f[1].parse().map_err(|_| bad())?,
            dy: f[2].parse().map_err(|_| bad())?,
            flip: match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            },
            scale_index,
        });
    }
    if transforms.len() != len {
        return Err(format_err(&meta_path, format!("T = {len} but {} transform lines", transforms.len())));
    }
    let tube = MaskTube {
        frames: (0..len).map(|t| read_tensor(&frame_path(dir, t))).collect::<Result<_>>()?,
        masks: (0..len).map(|t| read_tensor(&mask_path(dir, t))).collect::<Result<_>>()?,
        transforms,
        class_id: meta_parse(&meta, "class_id", &meta_path)?,
        seed: meta_parse(&meta, "seed", &meta_path)?,
    };
    tube.validate()?;
    Ok(tube)
}

/// Parameters, configuration and optimizer step count of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
    pub step: u64,
}

impl Checkpoint {
    /// File names a complete checkpoint directory contains.
    pub fn file_names() -> Vec<String> {
        PARAM_NAMES
            .iter()
            .map(|n| format!("{n}.dcst"))
            .chain(["optimizer.txt".to_string(), "config.txt".to_string()])
            .collect()
    }
}

pub fn write_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    for (name, t) in PARAM_NAMES.iter().zip(ck.params.tensors()) {
        write_tensor(&dir.join(format!("{name}.dcst")), t)?;
    }
    atomic_write(&dir.join("optimizer.txt"), format!("step = {}\n", ck.step).as_bytes())?;
    atomic_write(&dir.join("config.txt"), ck.config.to_text().as_bytes())
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if let Some(missing) = Checkpoint::file_names().iter().map(|n| dir.join(n)).find(|p| !p.is_file()) {
        return Err(Error::CheckpointMissing(missing));
    }
    let config = RunConfig::parse(&fs::read_to_string(dir.join("config.txt"))?)?;
    let tensors = PARAM_NAMES
        .iter()
        .map(|n| read_tensor(&dir.join(format!("{n}.dcst"))))
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(&config.model, tensors)?;
    let opt_path = dir.join("optimizer.txt");
    let step = meta_parse(&fs::read_to_string(&opt_path)?, "step", &opt_path)?;
    Ok(Checkpoint { config, params, step })
}
