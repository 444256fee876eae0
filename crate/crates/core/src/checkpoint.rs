//! Single-file checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "SGCK"
//! version  u32
//! hlen     u64      length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON (see CheckpointHeader)
//! payload  f32 values of every block in header.blocks order
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Each entry of `header.blocks` gives a block's name, owning section, shape and
//! offset (in f32 values) into the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::BatchSampler;
use crate::error::{Error, Result};
use crate::networks::{
    build_discriminator, build_generator, build_segmentor, ArchConfig, DiscriminatorParams, GeneratorParams,
    ModelBundle, ParamSet, SegmentorParams,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, Trainer, TrainingState, UpdateCounters};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SGCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub section: String,
    pub name: String,
    pub layer: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub section: String,
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHeader {
    pub config: TrainConfig,
    pub config_digest: String,
    pub iteration: u64,
    pub counters: UpdateCounters,
    pub rng: ChaCha8Rng,
    pub sampler: BatchSampler,
    pub sampler_len: usize,
    pub optimizers: Vec<OptimizerEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub arch: ArchConfig,
    /// Networks present: any of "generator", "discriminator", "segmentor".
    pub networks: Vec<String>,
    pub blocks: Vec<BlockEntry>,
    pub training: Option<TrainingHeader>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub generator: Option<GeneratorParams<f32>>,
    pub discriminator: Option<DiscriminatorParams<f32>>,
    pub segmentor: Option<SegmentorParams<f32>>,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn into_bundle(self) -> Result<ModelBundle> {
        match (self.generator, self.discriminator, self.segmentor) {
            (Some(generator), Some(discriminator), Some(segmentor)) => {
                Ok(ModelBundle { generator, discriminator, segmentor })
            }
            _ => Err(Error::InvalidState("checkpoint does not hold a full model".into())),
        }
    }

    /// Resumes training on `dataset` (checkpoint must carry training state).
    pub fn into_trainer(self, dataset: &crate::data::Dataset) -> Result<Trainer> {
        let state = self
            .training
            .clone()
            .ok_or_else(|| Error::InvalidState("checkpoint carries no training state".into()))?;
        Trainer::resume(dataset, self.into_bundle()?, state)
    }
}

/// Hex SHA-256 of a training configuration's JSON form.
pub fn config_digest(config: &TrainConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(config).expect("config serializes")))
}

struct Writer {
    blocks: Vec<BlockEntry>,
    payload: Vec<u8>,
    offset: usize,
}

impl Writer {
    fn push(&mut self, section: &str, name: &str, layer: &str, shape: &[usize], data: &[f32]) {
        self.blocks.push(BlockEntry {
            section: section.into(),
            name: name.into(),
            layer: layer.into(),
            shape: shape.to_vec(),
            offset: self.offset,
        });
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.offset += data.len();
    }

    fn params(&mut self, section: &str, p: &ParamSet<f32>) {
        for b in p.blocks() {
            self.push(section, &b.name, &b.layer, b.tensor.shape(), b.tensor.data());
        }
    }

    fn moments(&mut self, section: &str, p: &ParamSet<f32>, opt: &Adam) {
        let (m, v) = opt.moments();
        for (kind, all) in [("m", m), ("v", v)] {
            for (b, data) in p.blocks().iter().zip(all) {
                self.push(&format!("{section}.{kind}"), &b.name, &b.layer, b.tensor.shape(), data);
            }
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode(arch: &ArchConfig, networks: Vec<String>, w: Writer, training: Option<TrainingHeader>) -> Vec<u8> {
    let header = CheckpointHeader { version: FORMAT_VERSION, arch: arch.clone(), networks, blocks: w.blocks, training };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + w.payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn new_writer() -> Writer {
    Writer { blocks: Vec::new(), payload: Vec::new(), offset: 0 }
}

/// Serialized bytes of a model without training state.
pub fn encode_bundle(bundle: &ModelBundle) -> Vec<u8> {
    let mut w = new_writer();
    w.params("generator", &bundle.generator.params);
    w.params("discriminator", &bundle.discriminator.params);
    w.params("segmentor", &bundle.segmentor.params);
    let nets = ["generator", "discriminator", "segmentor"].map(String::from).to_vec();
    encode(bundle.arch(), nets, w, None)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    write_atomic(path, &encode_bundle(bundle))
}

/// Saves a segmentor alone (e.g. a pretrained judge).
pub fn save_segmentor(s: &SegmentorParams<f32>, path: &Path) -> Result<()> {
    let mut w = new_writer();
    w.params("segmentor", &s.params);
    write_atomic(path, &encode(&s.config, vec!["segmentor".into()], w, None))
}

/// Saves parameters plus optimizer moments, counters, sampler and random state.
pub fn save_trainer(t: &Trainer, path: &Path) -> Result<()> {
    let b = &t.bundle;
    let mut w = new_writer();
    w.params("generator", &b.generator.params);
    w.params("discriminator", &b.discriminator.params);
    w.params("segmentor", &b.segmentor.params);
    w.moments("opt.generator", &b.generator.params, &t.opt_g);
    w.moments("opt.discriminator", &b.discriminator.params, &t.opt_d);
    w.moments("opt.segmentor", &b.segmentor.params, &t.opt_s);
    let state = t.state();
    let opt_entry = |section: &str, o: &Adam| OptimizerEntry { section: section.into(), config: o.config, step: o.step_count() };
    let training = TrainingHeader {
        config_digest: config_digest(&state.config),
        config: state.config,
        iteration: state.iteration,
        counters: state.counters,
        rng: state.rng,
        sampler: state.sampler,
        sampler_len: state.sampler_len,
        optimizers: vec![
            opt_entry("opt.generator", &t.opt_g),
            opt_entry("opt.discriminator", &t.opt_d),
            opt_entry("opt.segmentor", &t.opt_s),
        ],
    };
    let nets = ["generator", "discriminator", "segmentor"].map(String::from).to_vec();
    write_atomic(path, &encode(b.arch(), nets, w, Some(training)))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Parses and verifies checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 + 32 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing checkpoint signature or truncated file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("content hash mismatch"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.version != version {
        return Err(corrupt("header version disagrees with the preamble"));
    }
    let payload = &body[16 + hlen..];
    if payload.len() % 4 != 0 {
        return Err(corrupt("payload is not a whole number of f32 values"));
    }
    let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let block = |e: &BlockEntry| -> Result<Tensor<f32>> {
        let n: usize = e.shape.iter().product();
        let data = values.get(e.offset..e.offset + n).ok_or_else(|| corrupt(format!("block {} out of range", e.name)))?;
        Ok(Tensor::new(e.shape.clone(), data.to_vec()))
    };
    let section = |name: &str, reference: &ParamSet<f32>| -> Result<ParamSet<f32>> {
        let entries: Vec<&BlockEntry> = header.blocks.iter().filter(|b| b.section == name).collect();
        let mut out = reference.clone();
        if entries.len() != out.blocks().len() {
            return Err(corrupt(format!("section {name} has {} blocks, expected {}", entries.len(), out.blocks().len())));
        }
        for (dst, e) in out.blocks_mut().iter_mut().zip(entries) {
            if dst.name != e.name || dst.tensor.shape() != e.shape.as_slice() {
                return Err(corrupt(format!("section {name}: unexpected block {} {:?}", e.name, e.shape)));
            }
            dst.tensor = block(e)?;
        }
        Ok(out)
    };
    let arch = &header.arch;
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let has = |n: &str| header.networks.iter().any(|x| x == n);
    let generator = if has("generator") {
        let mut g = build_generator::<f32>(arch, &mut rng)?;
        g.params = section("generator", &g.params)?;
        Some(g)
    } else {
        None
    };
    let discriminator = if has("discriminator") {
        let mut d = build_discriminator::<f32>(arch, &mut rng)?;
        d.params = section("discriminator", &d.params)?;
        Some(d)
    } else {
        None
    };
    let segmentor = if has("segmentor") {
        let mut s = build_segmentor::<f32>(arch, &mut rng)?;
        s.params = section("segmentor", &s.params)?;
        Some(s)
    } else {
        None
    };
    let training = match &header.training {
        None => None,
        Some(th) => {
            let (g, d, s) = match (&generator, &discriminator, &segmentor) {
                (Some(g), Some(d), Some(s)) => (g, d, s),
                _ => return Err(corrupt("training state without a full model")),
            };
            let optimizer = |sec: &str, p: &ParamSet<f32>| -> Result<Adam> {
                let entry = th
                    .optimizers
                    .iter()
                    .find(|o| o.section == sec)
                    .ok_or_else(|| corrupt(format!("missing optimizer {sec}")))?;
                let m = section(&format!("{sec}.m"), p)?;
                let v = section(&format!("{sec}.v"), p)?;
                let flat = |ps: ParamSet<f32>| ps.blocks().iter().map(|b| b.tensor.data().to_vec()).collect();
                Adam::from_state(entry.config, entry.step, flat(m), flat(v), p)
            };
            Some(TrainingState {
                config: th.config.clone(),
                iteration: th.iteration,
                counters: th.counters,
                rng: th.rng.clone(),
                sampler: th.sampler.clone(),
                sampler_len: th.sampler_len,
                opt_g: optimizer("opt.generator", &g.params)?,
                opt_d: optimizer("opt.discriminator", &d.params)?,
                opt_s: optimizer("opt.segmentor", &s.params)?,
            })
        }
    };
    Ok(Checkpoint { header, generator, discriminator, segmentor, training })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a full model.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    load_checkpoint(path)?.into_bundle()
}

/// Loads the segmentor from either a full model or a segmentor-only file.
pub fn load_segmentor(path: &Path) -> Result<SegmentorParams<f32>> {
    load_checkpoint(path)?
        .segmentor
        .ok_or_else(|| Error::InvalidState(format!("{} holds no segmentor", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes_dataset, ShapesConfig};

    fn arch() -> ArchConfig {
        ArchConfig { image_size: 16, n_s: 4, n_c: 3, n_z: 8, base_channels: 4, ..ArchConfig::reference(4, 3) }
    }

    #[test]
    fn bundle_round_trip_is_bitwise() {
        let bundle = ModelBundle::new(&arch(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let bytes = encode_bundle(&bundle);
        let back = decode(&bytes).unwrap().into_bundle().unwrap();
        for (a, b) in [
            (&bundle.generator.params, &back.generator.params),
            (&bundle.discriminator.params, &back.discriminator.params),
            (&bundle.segmentor.params, &back.segmentor.params),
        ] {
            for (x, y) in a.blocks().iter().zip(b.blocks()) {
                let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&x.tensor), bits(&y.tensor), "{}", x.name);
                assert_eq!(x.layer, y.layer);
            }
        }
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let bundle = ModelBundle::new(&arch(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let bytes = encode_bundle(&bundle);
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut versioned = bytes;
        versioned[4] = 9;
        let err = decode(&versioned).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 9, expected: 1 }));
        assert!(err.to_string().contains('9') && err.to_string().contains('1'));
    }

    #[test]
    fn segmentor_only_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = build_segmentor::<f32>(&arch(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let path = dir.path().join("s.ckpt");
        save_segmentor(&s, &path).unwrap();
        assert_eq!(load_segmentor(&path).unwrap(), s);
        assert!(load_bundle(&path).is_err());
    }

    #[test]
    fn resume_continues_the_same_stream() {
        let ds = generate_shapes_dataset(&ShapesConfig { image_size: 16, count: 12, ..Default::default() }).unwrap();
        let cfg = TrainConfig { m: 4, n_repeat: 2, epochs: 2, snapshot_count: 1, ..TrainConfig::new(arch()) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");

        let mut full = Trainer::new(cfg.clone(), &ds).unwrap();
        for _ in 0..2 {
            full.outer_iteration(&ds).unwrap();
        }
        save_trainer(&full, &path).unwrap();
        let next = full.outer_iteration(&ds).unwrap();

        let mut resumed = load_checkpoint(&path).unwrap().into_trainer(&ds).unwrap();
        assert_eq!(resumed.iteration, 2);
        let again = resumed.outer_iteration(&ds).unwrap();
        assert_eq!(next, again);
        assert_eq!(resumed.bundle, full.bundle);
        assert_eq!(resumed.counters, full.counters);
    }
}
