//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.json` and one safetensors
//! archive per block (`block{l}.safetensors`, `head.safetensors`) or per
//! scion (`scion{l}.safetensors`). Tensor names inside an archive are the
//! hierarchical parameter names relative to that block or scion, buffers
//! included. Directories are written under a temporary name and renamed into
//! place, so a checkpoint either exists completely or not at all.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use scion_core::distill::TrainRecord;
use scion_core::graft::{self, GraftKind, WrappedScion};
use scion_core::netzoo::{self, ArchSpec, BlockwiseNetwork};
use scion_core::nn::param::StateEntry;
use scion_core::Scalar;
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const RECORDS: &str = "records.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Network,
    Scions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScionEntry {
    pub index: usize,
    pub file: String,
    /// `[out, in]` of the teacher-to-student adaption.
    pub pre: Option<[usize; 2]>,
    /// `[out, in]` of the student-to-teacher adaption.
    pub post: Option<[usize; 2]>,
    pub head: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub kind: CheckpointKind,
    pub scalar: String,
    /// Network architecture, or the student architecture of the scions.
    pub arch: ArchSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_arch: Option<ArchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graft_kind: Option<GraftKind>,
    /// Block index (stage 1) or depth (stage 2) this checkpoint completes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scions: Vec<ScionEntry>,
    pub files: Vec<String>,
}

fn scalar_name() -> &'static str {
    if std::mem::size_of::<Scalar>() == 8 {
        "f64"
    } else {
        "f32"
    }
}

fn dtype() -> Dtype {
    if std::mem::size_of::<Scalar>() == 8 {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

struct Owned {
    name: String,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn collect(visit: impl FnOnce(&mut dyn FnMut(&str, StateEntry<'_>))) -> Vec<Owned> {
    let mut out = Vec::new();
    visit(&mut |name, e| {
        out.push(Owned {
            name: name.to_owned(),
            shape: e.shape.to_vec(),
            bytes: e.values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        })
    });
    out
}

fn write_archive(path: &Path, tensors: &[Owned]) -> Result<()> {
    let views = tensors
        .iter()
        .map(|t| Ok((t.name.clone(), TensorView::new(dtype(), t.shape.clone(), &t.bytes)?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, None)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Overwrites every named entry from the archive; names must match exactly.
fn read_archive(path: &Path, visit: impl FnOnce(&mut dyn FnMut(&str, &[usize], &mut [Scalar]))) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let st = SafeTensors::deserialize(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let mut seen = 0usize;
    let mut err: Option<anyhow::Error> = None;
    visit(&mut |name, shape, values| {
        if err.is_some() {
            return;
        }
        let r = (|| -> Result<()> {
            let t = st.tensor(name).map_err(|_| anyhow!("missing tensor `{name}`"))?;
            if t.dtype() != dtype() {
                bail!("tensor `{name}` is {:?}, this build reads {:?}", t.dtype(), dtype());
            }
            if t.shape() != shape {
                bail!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape());
            }
            let width = std::mem::size_of::<Scalar>();
            for (v, chunk) in values.iter_mut().zip(t.data().chunks_exact(width)) {
                *v = Scalar::from_le_bytes(chunk.try_into().expect("scalar width"));
            }
            Ok(())
        })();
        match r {
            Ok(()) => seen += 1,
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e.context(format!("loading {}", path.display())));
    }
    if seen != st.names().len() {
        bail!("{}: archive has {} tensors, model expects {seen}", path.display(), st.names().len());
    }
    Ok(())
}

fn staging(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

fn publish(tmp: &Path, dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("replacing {}", dir.display()))?;
    }
    fs::rename(tmp, dir).with_context(|| format!("publishing {}", dir.display()))
}

fn fresh_staging(dir: &Path) -> Result<PathBuf> {
    let tmp = staging(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    Ok(tmp)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: CheckpointManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.format != FORMAT_VERSION {
        bail!("{}: unsupported checkpoint format {}", path.display(), m.format);
    }
    if m.scalar != scalar_name() {
        bail!("{}: written with {} scalars, this build uses {}", path.display(), m.scalar, scalar_name());
    }
    Ok(m)
}

pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file()
}

pub fn save_network(dir: &Path, net: &BlockwiseNetwork, spec: &ArchSpec) -> Result<()> {
    let tmp = fresh_staging(dir)?;
    let mut files = Vec::new();
    for (i, b) in net.blocks.iter().enumerate() {
        let file = format!("block{}.safetensors", i + 1);
        write_archive(&tmp.join(&file), &collect(|f| b.layers.visit_state("", f)))?;
        files.push(file);
    }
    if let Some(h) = &net.head {
        write_archive(&tmp.join("head.safetensors"), &collect(|f| h.visit_state("", f)))?;
        files.push("head.safetensors".into());
    }
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION,
        kind: CheckpointKind::Network,
        scalar: scalar_name().into(),
        arch: spec.clone(),
        teacher_arch: None,
        graft_kind: None,
        unit: None,
        scions: Vec::new(),
        files,
    };
    write_json(&tmp.join(MANIFEST), &manifest)?;
    publish(&tmp, dir)
}

pub fn load_network(dir: &Path) -> Result<(BlockwiseNetwork, ArchSpec)> {
    let m = read_manifest(dir)?;
    if m.kind != CheckpointKind::Network {
        bail!("{} holds scions, not a network", dir.display());
    }
    let mut net = netzoo::build_network(&m.arch, 0)?;
    for (i, b) in net.blocks.iter_mut().enumerate() {
        read_archive(&dir.join(format!("block{}.safetensors", i + 1)), |f| b.layers.visit_state_mut("", f))?;
    }
    if let Some(h) = &mut net.head {
        read_archive(&dir.join("head.safetensors"), |f| h.visit_state_mut("", f))?;
    }
    Ok((net, m.arch))
}

/// What a scion checkpoint completes.
#[derive(Debug, Clone, Copy)]
pub struct ScionTag {
    pub kind: GraftKind,
    pub unit: usize,
}

pub fn save_scions(
    dir: &Path,
    scions: &[WrappedScion],
    student: &ArchSpec,
    teacher: &ArchSpec,
    tag: ScionTag,
    records: &[TrainRecord],
) -> Result<()> {
    let tmp = fresh_staging(dir)?;
    let mut entries = Vec::new();
    for s in scions {
        let file = format!("scion{}.safetensors", s.index);
        write_archive(&tmp.join(&file), &collect(|f| s.visit_state("", f)))?;
        let shape = |a: &graft::AdaptionModule| [a.out_channels(), a.in_channels()];
        entries.push(ScionEntry {
            index: s.index,
            file,
            pre: s.pre.as_ref().map(shape),
            post: s.post.as_ref().map(shape),
            head: s.head.is_some(),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION,
        kind: CheckpointKind::Scions,
        scalar: scalar_name().into(),
        arch: student.clone(),
        teacher_arch: Some(teacher.clone()),
        graft_kind: Some(tag.kind),
        unit: Some(tag.unit),
        files: entries.iter().map(|e| e.file.clone()).collect(),
        scions: entries,
    };
    write_json(&tmp.join(MANIFEST), &manifest)?;
    write_json(&tmp.join(RECORDS), &records)?;
    publish(&tmp, dir)
}

/// Loads the scions stored in `dir`, shaped against `teacher`.
pub fn load_scions(dir: &Path, teacher: &BlockwiseNetwork) -> Result<Vec<WrappedScion>> {
    let m = read_manifest(dir)?;
    if m.kind != CheckpointKind::Scions {
        bail!("{} holds a network, not scions", dir.display());
    }
    let student = netzoo::build_network(&m.arch, 0)?;
    let mut all: HashMap<usize, WrappedScion> = graft::wrap_student(&student, teacher, 0)?
        .into_iter()
        .map(|s| (s.index, s))
        .collect();
    let mut out = Vec::with_capacity(m.scions.len());
    for e in &m.scions {
        let mut s = all.remove(&e.index).ok_or_else(|| anyhow!("scion index {} out of range", e.index))?;
        let shape = |a: &graft::AdaptionModule| [a.out_channels(), a.in_channels()];
        if s.pre.as_ref().map(shape) != e.pre || s.post.as_ref().map(shape) != e.post || s.head.is_some() != e.head {
            bail!("{}: scion {} does not fit the teacher", dir.display(), e.index);
        }
        read_archive(&dir.join(&e.file), |f| s.visit_state_mut("", f))?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_records(dir: &Path) -> Result<Vec<TrainRecord>> {
    let path = dir.join(RECORDS);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(serde_json::from_str(&fs::read_to_string(&path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use scion_core::netzoo::{TOY_CNN, TOY_RESNET};

    #[test]
    fn network_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ArchSpec::new(TOY_RESNET, 10).with_width(4).with_resolution(8, 8);
        let mut net = netzoo::build_network(&spec, 5).unwrap();
        net.visit_state_mut("", &mut |_, _, v| v.iter_mut().enumerate().for_each(|(i, x)| *x += i as Scalar * 0.01));
        let path = dir.path().join("net");
        save_network(&path, &net, &spec).unwrap();
        let (back, spec_back) = load_network(&path).unwrap();
        assert_eq!(spec_back, spec);
        assert_eq!(back.state_snapshot(), net.state_snapshot());
    }

    #[test]
    fn scion_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let tspec = ArchSpec::new(TOY_CNN, 10).with_width(8).with_resolution(8, 8);
        let sspec = ArchSpec::new(TOY_CNN, 10).with_width(4).with_resolution(8, 8);
        let teacher = netzoo::build_network(&tspec, 0).unwrap();
        let scions = graft::wrap_student(&netzoo::build_network(&sspec, 1).unwrap(), &teacher, 9).unwrap();
        let path = dir.path().join("s");
        let tag = ScionTag { kind: GraftKind::NetGraft, unit: 4 };
        save_scions(&path, &scions[1..], &sspec, &tspec, tag, &[]).unwrap();
        let back = load_scions(&path, &teacher).unwrap();
        assert_eq!(back, scions[1..].to_vec());
        assert!(!staging(&path).exists());
    }
}
