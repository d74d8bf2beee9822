//! Single-file checkpoint archive.
//!
//! Layout: magic `LAPTCKPT`, u32 archive version, u32 member count, then
//! per member a u32 name length, the UTF-8 name, a u64 byte length and the
//! bytes. Members are `metadata.json` followed by one tensor file per
//! parameter tensor. All integers little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, AutoencoderArch, AutoencoderConfig};
use crate::denoiser::{Denoiser, DenoiserArch, DenoiserConfig};
use crate::diffusion::ScheduleDescriptor;
use crate::error::{Error, Result};
use crate::nn::Layout;
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor_io::{self, Tensor};
use crate::train::TrainRun;

pub const MAGIC: &[u8; 8] = b"LAPTCKPT";
pub const ARCHIVE_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;
const METADATA: &str = "metadata.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStage {
    Autoencoder,
    Base,
    Posttrain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: CheckpointStage,
    pub seed: u64,
    /// The full run configuration that produced this checkpoint.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub autoencoder: Autoencoder,
    /// Present from the base stage on.
    pub diffusion: Option<DiffusionState>,
    /// Path of the JSON-lines training log, if one was written.
    pub log: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub schedule: ScheduleDescriptor,
    pub run: TrainRun,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.diffusion.as_ref().map_or(0, |d| d.run.step)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimMeta {
    step: u64,
    config: AdamWConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    schema_version: u32,
    stage: CheckpointStage,
    step: u64,
    seed: u64,
    config: serde_json::Value,
    config_hash: String,
    schedule: Option<ScheduleDescriptor>,
    alpha_bar_t: Option<f64>,
    autoencoder: AutoencoderConfig,
    denoiser: Option<DenoiserConfig>,
    optimizer: Option<OptimMeta>,
    decoder_optimizer: Option<OptimMeta>,
    denoiser_calls: u64,
    log: Option<String>,
}

fn push_member(out: &mut Vec<u8>, name: &str, bytes: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn layout_members(prefix: &str, layout: &Layout, params: &[f32]) -> Result<Vec<(String, Vec<u8>)>> {
    layout
        .specs()
        .iter()
        .map(|s| {
            let t = Tensor::new(s.shape.clone(), s.slot.of(params).to_vec())?;
            Ok((format!("{prefix}/{}.tnsr", s.name), tensor_io::encode(&t)?))
        })
        .collect()
}

fn flat(name: String, v: &[f32]) -> Result<(String, Vec<u8>)> {
    Ok((name, tensor_io::encode(&Tensor::new(vec![v.len().max(1)], if v.is_empty() { vec![0.0] } else { v.to_vec() })?)?))
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let ae = &ckpt.autoencoder;
    let d = ckpt.diffusion.as_ref();
    let meta = Metadata {
        schema_version: SCHEMA_VERSION,
        stage: ckpt.stage,
        step: ckpt.step(),
        seed: ckpt.seed,
        config: ckpt.config.clone(),
        config_hash: ckpt.config_hash.clone(),
        schedule: d.map(|d| d.schedule.clone()),
        alpha_bar_t: d
            .map(|d| d.schedule.build().map(|s| s.alpha_bar(s.steps())))
            .transpose()?,
        autoencoder: ae.arch.config.clone(),
        denoiser: d.map(|d| d.run.denoiser.arch.config.clone()),
        optimizer: d.map(|d| OptimMeta {
            step: d.run.optimizer.step,
            config: d.run.optimizer.config,
        }),
        decoder_optimizer: d.and_then(|d| d.run.decoder_optimizer.as_ref()).map(|o| OptimMeta {
            step: o.step,
            config: o.config,
        }),
        denoiser_calls: d.map_or(0, |d| d.run.denoiser_calls),
        log: ckpt.log.clone(),
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json("checkpoint metadata", e))?;
    let mut members = vec![(METADATA.to_string(), json)];
    members.extend(layout_members("autoencoder", &ae.arch.layout, &ae.params)?);
    members.push(flat("autoencoder/latent_scale.tnsr".into(), &[ae.latent_scale])?);
    if let Some(d) = d {
        let den = &d.run.denoiser;
        members.extend(layout_members("denoiser", &den.arch.layout, &den.params)?);
        members.push(flat("optimizer/m.tnsr".into(), &d.run.optimizer.m)?);
        members.push(flat("optimizer/v.tnsr".into(), &d.run.optimizer.v)?);
        if let Some(o) = &d.run.decoder_optimizer {
            members.push(flat("decoder_optimizer/m.tnsr".into(), &o.m)?);
            members.push(flat("decoder_optimizer/v.tnsr".into(), &o.v)?);
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(members.len() as u32).to_le_bytes());
    for (name, bytes) in &members {
        push_member(&mut out, name, bytes);
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.context,
                self.pos as u64,
                format!("truncated {what}: expected {n} bytes, found {}", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Members<'a> {
    items: Vec<(String, &'a [u8], u64)>,
    context: &'a str,
}

impl<'a> Members<'a> {
    fn get(&self, name: &str) -> Result<(&'a [u8], u64)> {
        self.items
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, b, o)| (*b, *o))
            .ok_or_else(|| Error::format(self.context, 0, format!("missing member `{name}`")))
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let (bytes, _) = self.get(name)?;
        tensor_io::decode(bytes, &format!("{} member `{name}`", self.context))
    }

    fn params(&self, prefix: &str, layout: &Layout) -> Result<Vec<f32>> {
        let mut out = vec![0.0f32; layout.len()];
        for s in layout.specs() {
            let name = format!("{prefix}/{}.tnsr", s.name);
            let t = self.tensor(&name)?;
            if t.dims != s.shape {
                let (_, offset) = self.get(&name)?;
                return Err(Error::format(
                    self.context,
                    offset,
                    format!("member `{name}` has shape {:?}, expected {:?}", t.dims, s.shape),
                ));
            }
            s.slot.of_mut(&mut out).copy_from_slice(&t.data);
        }
        Ok(out)
    }

    fn flat(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let t = self.tensor(name)?;
        if len == 0 {
            return Ok(Vec::new());
        }
        if t.data.len() != len {
            let (_, offset) = self.get(name)?;
            return Err(Error::format(
                self.context,
                offset,
                format!("member `{name}` holds {} values, expected {len}", t.data.len()),
            ));
        }
        Ok(t.data)
    }
}

pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, context };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(context, 0, "bad magic: expected \"LAPTCKPT\""));
    }
    r.pos = MAGIC.len();
    let version = r.u32("archive version")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::format(
            context,
            8,
            format!("unsupported archive version {version} (expected {ARCHIVE_VERSION})"),
        ));
    }
    let count = r.u32("member count")?;
    let mut items = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = r.u32("member name length")? as usize;
        let name_off = r.pos as u64;
        let name = std::str::from_utf8(r.take(nlen, "member name")?)
            .map_err(|_| Error::format(context, name_off, "member name is not UTF-8"))?
            .to_string();
        let blen = r.u64("member length")? as usize;
        let off = r.pos as u64;
        let data = r.take(blen, &format!("member `{name}`"))?;
        items.push((name, data, off));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(context, r.pos as u64, "trailing bytes after last member"));
    }
    let members = Members { items, context };

    let (meta_bytes, meta_off) = members.get(METADATA)?;
    let raw: serde_json::Value = serde_json::from_slice(meta_bytes).map_err(|e| Error::json(format!("{context} metadata"), e))?;
    let schema = raw.get("schema_version").and_then(|v| v.as_u64());
    if schema != Some(SCHEMA_VERSION as u64) {
        return Err(Error::format(
            context,
            meta_off,
            format!("metadata schema_version {schema:?} is not the supported version {SCHEMA_VERSION}"),
        ));
    }
    let meta: Metadata = serde_json::from_value(raw).map_err(|e| Error::json(format!("{context} metadata"), e))?;

    let ae_arch = AutoencoderArch::new(&meta.autoencoder)?;
    let ae_params = members.params("autoencoder", &ae_arch.layout)?;
    let scale = members.flat("autoencoder/latent_scale.tnsr", 1)?[0];
    let autoencoder = Autoencoder::new(ae_arch, ae_params, scale)?;

    let diffusion = match (meta.schedule, meta.denoiser, meta.optimizer) {
        (Some(schedule), Some(dcfg), Some(om)) => {
            let sched = schedule.build()?;
            sched.validate(meta.alpha_bar_t)?;
            let arch = DenoiserArch::new(&dcfg)?;
            let params = members.params("denoiser", &arch.layout)?;
            let n = params.len();
            let optimizer = AdamW {
                config: om.config,
                step: om.step,
                m: members.flat("optimizer/m.tnsr", n)?,
                v: members.flat("optimizer/v.tnsr", n)?,
            };
            let dn = autoencoder.arch.decoder_range().len();
            let decoder_optimizer = meta
                .decoder_optimizer
                .map(|o| -> Result<AdamW> {
                    Ok(AdamW {
                        config: o.config,
                        step: o.step,
                        m: members.flat("decoder_optimizer/m.tnsr", dn)?,
                        v: members.flat("decoder_optimizer/v.tnsr", dn)?,
                    })
                })
                .transpose()?;
            Some(DiffusionState {
                schedule,
                run: TrainRun {
                    denoiser: Denoiser::new(arch, params)?,
                    optimizer,
                    decoder_optimizer,
                    step: meta.step,
                    denoiser_calls: meta.denoiser_calls,
                },
            })
        }
        (None, None, None) => None,
        _ => {
            return Err(Error::format(
                context,
                meta_off,
                "metadata must give schedule, denoiser and optimizer together",
            ))
        }
    };
    Ok(Checkpoint {
        stage: meta.stage,
        seed: meta.seed,
        config: meta.config,
        config_hash: meta.config_hash,
        autoencoder,
        diffusion,
        log: meta.log,
    })
}
