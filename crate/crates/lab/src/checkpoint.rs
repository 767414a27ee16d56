//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.txt` and `weights.bin`.
//! The manifest is line-oriented `key = value` text:
//!
//! ```text
//! format = guided-lora-checkpoint/1
//! kind = teacher
//! meta.model.hidden_width = 128
//! tensor name=block0.linear1.W0 shape=128x128 dtype=f64 offset=...
//! ```
//!
//! `weights.bin` is the concatenation of all tensors as little-endian `f64`,
//! at the byte offsets listed in the manifest. A teacher checkpoint holds
//! every base parameter; an adapter checkpoint holds only `*.lora.A` and
//! `*.lora.B` and names its teacher by the SHA-256 of the teacher's blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use guided_lora_core::denoiser::{Denoiser, DenoiserConfig};
use guided_lora_core::diffusion::{make_schedule, NoiseSchedule};
use guided_lora_core::lora::{adapter_param_ids, attach_adapters, freeze_base, LayerFilter};
use guided_lora_core::numerics::ParamId;
use sha2::{Digest, Sha256};

use crate::{LabError, Result};

pub const FORMAT: &str = "guided-lora-checkpoint/1";
pub const MANIFEST: &str = "manifest.txt";
pub const WEIGHTS: &str = "weights.bin";

const A_SUFFIX: &str = ".lora.A";
const B_SUFFIX: &str = ".lora.B";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Teacher,
    Adapters,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Teacher => "teacher",
            Kind::Adapters => "adapters",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: Kind,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = format!("format = {FORMAT}\nkind = {}\n", self.kind.as_str());
        for (k, v) in &self.meta {
            out.push_str(&format!("meta.{k} = {v}\n"));
        }
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "tensor name={} shape={} dtype=f64 offset={}\n",
                t.name,
                shape.join("x"),
                t.offset
            ));
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut format = None;
        let mut kind = None;
        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            let at = |m: String| format!("line {}: {m}", i + 1);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                tensors.push(parse_tensor(rest).map_err(at)?);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            match k {
                "format" => format = Some(v.to_string()),
                "kind" => {
                    kind = Some(match v {
                        "teacher" => Kind::Teacher,
                        "adapters" => Kind::Adapters,
                        _ => return Err(at(format!("unknown kind `{v}`"))),
                    })
                }
                _ => match k.strip_prefix("meta.") {
                    Some(key) => {
                        if meta.insert(key.to_string(), v.to_string()).is_some() {
                            return Err(at(format!("duplicate key `{k}`")));
                        }
                    }
                    None => return Err(at(format!("unknown key `{k}`"))),
                },
            }
        }
        match format.as_deref() {
            Some(FORMAT) => {}
            Some(other) => return Err(format!("unsupported format `{other}`")),
            None => return Err("missing `format` line".into()),
        }
        let kind = kind.ok_or("missing `kind` line")?;
        let mut seen = std::collections::BTreeSet::new();
        for t in &tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(format!("tensor `{}` listed twice", t.name));
            }
        }
        Ok(Self {
            kind,
            meta,
            tensors,
        })
    }

    pub fn meta(&self, key: &str) -> std::result::Result<&str, String> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format!("missing meta.{key}"))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<T, String> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| format!("meta.{key}: cannot parse `{v}`"))
    }
}

fn parse_tensor(rest: &str) -> std::result::Result<TensorEntry, String> {
    let mut name = None;
    let mut shape = None;
    let mut offset = None;
    for field in rest.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| format!("bad tensor field `{field}`"))?;
        match k {
            "name" => name = Some(v.to_string()),
            "shape" => {
                let dims: std::result::Result<Vec<usize>, _> =
                    v.split('x').map(str::parse).collect();
                shape = Some(dims.map_err(|_| format!("bad shape `{v}`"))?);
            }
            "dtype" if v == "f64" => {}
            "dtype" => return Err(format!("unsupported dtype `{v}`")),
            "offset" => offset = Some(v.parse().map_err(|_| format!("bad offset `{v}`"))?),
            _ => return Err(format!("unknown tensor field `{k}`")),
        }
    }
    Ok(TensorEntry {
        name: name.ok_or("tensor without name")?,
        shape: shape.ok_or("tensor without shape")?,
        offset: offset.ok_or("tensor without offset")?,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `ids` from `model` into `dir`. Returns the blob hash.
fn write_checkpoint(
    dir: &Path,
    kind: Kind,
    meta: BTreeMap<String, String>,
    model: &Denoiser,
    ids: &[ParamId],
) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(ids.len());
    for &id in ids {
        let p = model.params().get(id);
        tensors.push(TensorEntry {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            offset: blob.len(),
        });
        for v in p.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        kind,
        meta,
        tensors,
    };
    let weights = dir.join(WEIGHTS);
    fs::write(&weights, &blob).map_err(|e| LabError::io(&weights, e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.render()).map_err(|e| LabError::io(&path, e))?;
    Ok(sha256_hex(&blob))
}

struct RawCheckpoint {
    dir: PathBuf,
    manifest: Manifest,
    blob: Vec<u8>,
}

impl RawCheckpoint {
    fn read(dir: &Path, expect: Kind) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        let manifest = Manifest::parse(&text).map_err(|m| bad(dir, m))?;
        if manifest.kind != expect {
            return Err(bad(
                dir,
                format!(
                    "expected a {} checkpoint, found {}",
                    expect.as_str(),
                    manifest.kind.as_str()
                ),
            ));
        }
        let weights = dir.join(WEIGHTS);
        let blob = fs::read(&weights).map_err(|e| LabError::io(&weights, e))?;
        let mut end = 0;
        for t in &manifest.tensors {
            if t.offset != end {
                return Err(bad(
                    dir,
                    format!(
                        "tensor `{}` at offset {} (expected {end})",
                        t.name, t.offset
                    ),
                ));
            }
            end += 8 * t.numel();
        }
        if end != blob.len() {
            return Err(bad(
                dir,
                format!("blob is {} bytes, manifest describes {end}", blob.len()),
            ));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            blob,
        })
    }

    fn values(&self, t: &TensorEntry) -> Vec<f64> {
        self.blob[t.offset..t.offset + 8 * t.numel()]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    }

    fn meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.manifest.meta_parse(key).map_err(|m| bad(&self.dir, m))
    }

    fn hash(&self) -> String {
        sha256_hex(&self.blob)
    }

    /// Copies every listed tensor into the parameter of the same name.
    fn restore(&self, model: &mut Denoiser) -> Result<()> {
        for t in &self.manifest.tensors {
            let id = model
                .params()
                .id(&t.name)
                .ok_or_else(|| bad(&self.dir, format!("unknown parameter `{}`", t.name)))?;
            if model.params().get(id).shape() != t.shape.as_slice() {
                return Err(bad(
                    &self.dir,
                    format!(
                        "`{}` has shape {:?}, model expects {:?}",
                        t.name,
                        t.shape,
                        model.params().get(id).shape()
                    ),
                ));
            }
            model.params_mut().set_values(id, &self.values(t))?;
        }
        Ok(())
    }
}

fn bad(dir: &Path, message: impl Into<String>) -> LabError {
    LabError::Checkpoint {
        path: dir.to_path_buf(),
        message: message.into(),
    }
}

fn teacher_meta(cfg: &DenoiserConfig, sched: &NoiseSchedule) -> BTreeMap<String, String> {
    let (beta_min, beta_max) = sched.beta_range();
    [
        ("model.data_dim", cfg.data_dim.to_string()),
        ("model.hidden_width", cfg.hidden_width.to_string()),
        ("model.num_blocks", cfg.num_blocks.to_string()),
        ("model.time_embed_dim", cfg.time_embed_dim.to_string()),
        ("model.cond_embed_dim", cfg.cond_embed_dim.to_string()),
        ("model.num_classes", cfg.num_classes.to_string()),
        ("schedule.steps", sched.steps().to_string()),
        ("schedule.beta_min", format!("{beta_min:?}")),
        ("schedule.beta_max", format!("{beta_max:?}")),
        ("data.gmm", "default".to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Saves every base parameter of `model`. Returns the teacher hash.
pub fn save_teacher(dir: &Path, model: &Denoiser, sched: &NoiseSchedule) -> Result<String> {
    if model.has_adapters() {
        return Err(LabError::Failed(
            "refusing to save an adapted model as a teacher".into(),
        ));
    }
    let ids: Vec<ParamId> = model.params().iter().map(|(id, _)| id).collect();
    write_checkpoint(
        dir,
        Kind::Teacher,
        teacher_meta(model.config(), sched),
        model,
        &ids,
    )
}

#[derive(Debug)]
pub struct LoadedTeacher {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    pub hash: String,
}

pub fn load_teacher(dir: &Path) -> Result<LoadedTeacher> {
    let raw = RawCheckpoint::read(dir, Kind::Teacher)?;
    let cfg = DenoiserConfig {
        data_dim: raw.meta("model.data_dim")?,
        hidden_width: raw.meta("model.hidden_width")?,
        num_blocks: raw.meta("model.num_blocks")?,
        time_embed_dim: raw.meta("model.time_embed_dim")?,
        cond_embed_dim: raw.meta("model.cond_embed_dim")?,
        num_classes: raw.meta("model.num_classes")?,
        timesteps: raw.meta("schedule.steps")?,
    };
    let schedule = make_schedule(
        cfg.timesteps,
        raw.meta("schedule.beta_min")?,
        raw.meta("schedule.beta_max")?,
    )?;
    let mut model = Denoiser::build(cfg, 0)?;
    let expected: Vec<&str> = model.params().iter().map(|(_, p)| p.name()).collect();
    let listed: Vec<&str> = raw
        .manifest
        .tensors
        .iter()
        .map(|t| t.name.as_str())
        .collect();
    if let Some(missing) = expected.iter().find(|n| !listed.contains(n)) {
        return Err(bad(dir, format!("missing parameter `{missing}`")));
    }
    raw.restore(&mut model)?;
    Ok(LoadedTeacher {
        model,
        schedule,
        hash: raw.hash(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterMeta {
    pub guidance_s: f64,
    pub rank: usize,
    pub alpha: f64,
    pub teacher_hash: String,
}

/// Saves only the adapter factors of a distilled `model`.
pub fn save_adapters(dir: &Path, model: &Denoiser, meta: &AdapterMeta) -> Result<String> {
    let ids = adapter_param_ids(model);
    if ids.is_empty() {
        return Err(guided_lora_core::Error::NoAdapters.into());
    }
    let entries: BTreeMap<String, String> = [
        ("guidance_s", format!("{:?}", meta.guidance_s)),
        ("rank", meta.rank.to_string()),
        ("alpha", format!("{:?}", meta.alpha)),
        ("teacher_hash", meta.teacher_hash.clone()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_checkpoint(dir, Kind::Adapters, entries, model, &ids)
}

#[derive(Debug)]
pub struct LoadedStudent {
    /// Teacher weights with adapters attached; base frozen.
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    pub meta: AdapterMeta,
}

/// Loads a teacher and grafts the adapters onto it. Fails unless the
/// adapters were trained against exactly this teacher.
pub fn load_student(teacher_dir: &Path, adapters_dir: &Path) -> Result<LoadedStudent> {
    let LoadedTeacher {
        mut model,
        schedule,
        hash,
    } = load_teacher(teacher_dir)?;
    let raw = RawCheckpoint::read(adapters_dir, Kind::Adapters)?;
    let meta = AdapterMeta {
        guidance_s: raw.meta("guidance_s")?,
        rank: raw.meta("rank")?,
        alpha: raw.meta("alpha")?,
        teacher_hash: raw.meta("teacher_hash")?,
    };
    if meta.teacher_hash != hash {
        return Err(bad(
            adapters_dir,
            format!(
                "adapters were trained against teacher {}, but {} has hash {hash}",
                meta.teacher_hash,
                teacher_dir.display()
            ),
        ));
    }
    let mut layers = Vec::new();
    for t in &raw.manifest.tensors {
        if let Some(layer) = t.name.strip_suffix(A_SUFFIX) {
            layers.push(layer.to_string());
        } else if !t.name.ends_with(B_SUFFIX) {
            return Err(bad(
                adapters_dir,
                format!("non-adapter tensor `{}`", t.name),
            ));
        }
    }
    if let Some(unknown) = layers.iter().find(|l| model.layer(l).is_none()) {
        return Err(bad(adapters_dir, format!("no layer named `{unknown}`")));
    }
    if 2 * layers.len() != raw.manifest.tensors.len() {
        return Err(bad(
            adapters_dir,
            "every adapter needs exactly one A and one B",
        ));
    }
    attach_adapters(
        &mut model,
        meta.rank,
        meta.alpha,
        &LayerFilter::Named(layers),
        0,
    )?;
    freeze_base(&mut model);
    raw.restore(&mut model)?;
    Ok(LoadedStudent {
        model,
        schedule,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use guided_lora_core::diffusion::NoiseSchedule;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            hidden_width: 8,
            num_blocks: 1,
            time_embed_dim: 4,
            cond_embed_dim: 3,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let m = Manifest {
            kind: Kind::Adapters,
            meta: [("rank".to_string(), "8".to_string())]
                .into_iter()
                .collect(),
            tensors: vec![TensorEntry {
                name: "x.lora.A".into(),
                shape: vec![8, 2],
                offset: 0,
            }],
        };
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn manifest_errors() {
        assert!(Manifest::parse("kind = teacher\n")
            .unwrap_err()
            .contains("format"));
        let e = Manifest::parse("format = guided-lora-checkpoint/1\nkind = teacher\nbogus = 1\n")
            .unwrap_err();
        assert!(e.contains("line 3"), "{e}");
        let dup = "format = guided-lora-checkpoint/1\nkind = teacher\n\
                   tensor name=a shape=1 dtype=f64 offset=0\ntensor name=a shape=1 dtype=f64 offset=8\n";
        assert!(Manifest::parse(dup).unwrap_err().contains("twice"));
    }

    #[test]
    fn teacher_and_student_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sched = NoiseSchedule::default();
        let teacher = Denoiser::build(small(), 3).unwrap();
        let hash = save_teacher(&dir.path().join("t"), &teacher, &sched).unwrap();
        let loaded = load_teacher(&dir.path().join("t")).unwrap();
        assert_eq!(loaded.hash, hash);
        for ((_, a), (_, b)) in teacher.params().iter().zip(loaded.model.params().iter()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.values(), b.values());
        }
        assert_eq!(loaded.schedule, sched);

        let mut student = loaded.model;
        attach_adapters(&mut student, 2, 4.0, &LayerFilter::AdmitsRank, 9).unwrap();
        freeze_base(&mut student);
        let b = student.params().id("block0.linear1.lora.B").unwrap();
        student.params_mut().set_values(b, &[0.25; 16]).unwrap();
        let meta = AdapterMeta {
            guidance_s: 3.0,
            rank: 2,
            alpha: 4.0,
            teacher_hash: hash,
        };
        save_adapters(&dir.path().join("a"), &student, &meta).unwrap();
        let text = fs::read_to_string(dir.path().join("a").join(MANIFEST)).unwrap();
        assert!(text
            .lines()
            .filter(|l| l.starts_with("tensor"))
            .all(|l| l.contains(".lora.")));

        let back = load_student(&dir.path().join("t"), &dir.path().join("a")).unwrap();
        assert_eq!(back.meta, meta);
        for ((_, a), (_, b)) in student.params().iter().zip(back.model.params().iter()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.values(), b.values());
            assert_eq!(a.is_frozen(), b.is_frozen());
        }
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let sched = NoiseSchedule::default();
        let t1 = Denoiser::build(small(), 1).unwrap();
        let t2 = Denoiser::build(small(), 2).unwrap();
        let h1 = save_teacher(&dir.path().join("t1"), &t1, &sched).unwrap();
        save_teacher(&dir.path().join("t2"), &t2, &sched).unwrap();
        let mut s = t1.clone();
        attach_adapters(&mut s, 2, 2.0, &LayerFilter::AdmitsRank, 0).unwrap();
        let meta = AdapterMeta {
            guidance_s: 3.0,
            rank: 2,
            alpha: 2.0,
            teacher_hash: h1,
        };
        save_adapters(&dir.path().join("a"), &s, &meta).unwrap();
        assert!(load_student(&dir.path().join("t1"), &dir.path().join("a")).is_ok());
        let err = load_student(&dir.path().join("t2"), &dir.path().join("a")).unwrap_err();
        assert!(err.to_string().contains("trained against teacher"), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Denoiser::build(small(), 1).unwrap();
        save_teacher(dir.path(), &t, &NoiseSchedule::default()).unwrap();
        let w = dir.path().join(WEIGHTS);
        let mut bytes = fs::read(&w).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&w, bytes).unwrap();
        assert!(matches!(
            load_teacher(dir.path()),
            Err(LabError::Checkpoint { .. })
        ));
    }
}
