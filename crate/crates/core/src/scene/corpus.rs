//! `.psgc` corpus container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PSGC" | u32 version | u32 len, manifest JSON, u32 crc32
//! per scene: u32 len, record, u32 crc32
//! ```
//!
//! A record holds the scene id (u16 length + UTF-8), `H W C` as u32, the
//! feature map as f64 row-major, the object count, each mask as a u32 run
//! count followed by u32 runs, the labels as u16, and the annotated and
//! hidden triplets as a u32 count followed by `(u16, u16, u16)` entries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode_rle, encode_rle, CorpusConfig, RleMask, Scene, SceneGraph, Triplet};
use crate::codec::{to_u16, to_u32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numeric::Array;

const MAGIC: &[u8; 4] = b"PSGC";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: Option<CorpusConfig>,
    pub num_scenes: usize,
    pub scene_ids: Vec<String>,
}

fn write_triplets(w: &mut ByteWriter, triplets: &[Triplet]) -> Result<()> {
    w.u32(to_u32(triplets.len(), "triplet count")?);
    for t in triplets {
        w.u16(to_u16(t.subject, "subject index")?);
        w.u16(to_u16(t.object, "object index")?);
        w.u16(to_u16(t.predicate, "predicate")?);
    }
    Ok(())
}

fn read_triplets(r: &mut ByteReader<'_>) -> Result<Vec<Triplet>> {
    let n = r.u32()? as usize;
    if n.saturating_mul(6) > r.remaining() {
        return Err(r.error(format!("{n} triplets exceed record size")));
    }
    (0..n)
        .map(|_| Ok(Triplet::new(r.u16()? as usize, r.u16()? as usize, r.u16()? as usize)))
        .collect()
}

fn encode_scene(scene: &Scene) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    let id = scene.scene_id.as_bytes();
    w.u16(to_u16(id.len(), "scene id length")?);
    w.bytes(id);
    for &d in scene.features.shape() {
        w.u32(to_u32(d, "feature dimension")?);
    }
    for &v in scene.features.data() {
        w.f64(v);
    }
    w.u32(to_u32(scene.masks.len(), "object count")?);
    for m in &scene.masks {
        let rle = encode_rle(m);
        w.u32(to_u32(rle.runs.len(), "run count")?);
        for &run in &rle.runs {
            w.u32(run);
        }
    }
    for &l in &scene.labels {
        w.u16(to_u16(l, "object label")?);
    }
    write_triplets(&mut w, &scene.graph.triplets)?;
    write_triplets(&mut w, &scene.hidden)?;
    Ok(w.buf)
}

fn decode_scene(payload: &[u8], context: &str) -> Result<Scene> {
    let mut r = ByteReader::new(payload, context);
    let id_len = r.u16()? as usize;
    let scene_id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| r.error("scene id is not UTF-8"))?
        .to_string();
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let len = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .filter(|&x| x.saturating_mul(8) <= r.remaining())
        .ok_or_else(|| r.error(format!("feature map {h}x{w}x{c} exceeds record size")))?;
    let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let features = Array::new(vec![h, w, c], data)?;
    let n = r.u32()? as usize;
    if n > r.remaining() {
        return Err(r.error(format!("{n} objects exceed record size")));
    }
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let runs_len = r.u32()? as usize;
        if runs_len.saturating_mul(4) > r.remaining() {
            return Err(r.error("mask runs exceed record size"));
        }
        let runs = (0..runs_len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mask = decode_rle(&RleMask {
            height: h,
            width: w,
            runs,
        })
        .map_err(|e| r.error(e.to_string()))?;
        masks.push(mask);
    }
    let labels = (0..n).map(|_| Ok(r.u16()? as usize)).collect::<Result<Vec<_>>>()?;
    let triplets = read_triplets(&mut r)?;
    let hidden = read_triplets(&mut r)?;
    r.finish()?;
    Ok(Scene {
        scene_id,
        features,
        masks,
        labels,
        graph: SceneGraph { triplets },
        hidden,
    })
}

/// Serializes scenes (and optionally the config that produced them).
pub fn write_corpus(scenes: &[Scene], config: Option<&CorpusConfig>) -> Result<Vec<u8>> {
    let manifest = CorpusManifest {
        config: config.cloned(),
        num_scenes: scenes.len(),
        scene_ids: scenes.iter().map(|s| s.scene_id.clone()).collect(),
    };
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(CORPUS_VERSION);
    w.checked_block(&serde_json::to_vec(&manifest)?);
    for scene in scenes {
        w.checked_block(&encode_scene(scene)?);
    }
    Ok(w.buf)
}

/// Parses and validates a corpus produced by [`write_corpus`].
pub fn read_corpus(bytes: &[u8]) -> Result<(CorpusManifest, Vec<Scene>)> {
    let mut r = ByteReader::new(bytes, "corpus header");
    if r.take(4)? != MAGIC {
        return Err(r.error("bad magic, not a .psgc corpus"));
    }
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    r.set_context("corpus manifest");
    let manifest: CorpusManifest =
        serde_json::from_slice(r.checked_block()?).map_err(|e| r.error(format!("manifest: {e}")))?;
    if manifest.scene_ids.len() != manifest.num_scenes {
        return Err(r.error("manifest scene index does not match scene count"));
    }
    let (classes, predicates) = match &manifest.config {
        Some(c) => (Some(c.num_object_classes), Some(c.num_predicates)),
        None => (None, None),
    };
    let mut scenes = Vec::with_capacity(manifest.num_scenes);
    for (k, id) in manifest.scene_ids.iter().enumerate() {
        r.set_context(format!("scene {id} (record {k})"));
        let payload = r.checked_block()?;
        let scene = decode_scene(payload, r.context())?;
        if &scene.scene_id != id {
            return Err(r.error(format!("record holds scene {}", scene.scene_id)));
        }
        scene
            .validate(classes, predicates)
            .map_err(|e| r.error(e.to_string()))?;
        scenes.push(scene);
    }
    r.set_context("corpus trailer");
    r.finish()?;
    Ok((manifest, scenes))
}

pub fn save_corpus(path: impl AsRef<Path>, scenes: &[Scene], config: Option<&CorpusConfig>) -> Result<()> {
    std::fs::write(path, write_corpus(scenes, config)?)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<Scene>)> {
    read_corpus(&std::fs::read(path)?)
}
