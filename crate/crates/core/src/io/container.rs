//! Sectioned binary container used for grids, models, heads and scorers.
//!
//! ```text
//! magic      [u8; 8]
//! version    u32
//! sections   u32
//! section*   tag [u8; 4] | u64 length | payload | u32 crc32(payload)
//! ```
//!
//! All numbers little-endian; model parameters are f64.

use std::path::Path;

use crate::error::{check_dim, Error, FormatError, Result};
use crate::gmm::{DiagGaussian, Mixture};
use crate::grid::{FeatureGrid, LabelGrid};
use crate::io::bytes::{ByteReader, ByteWriter};
use crate::mlp::{Dense, Mlp};
use crate::continual::{AdaptiveHead, HeadMeta};
use crate::model::{Decoder, GmmClassModel};
use crate::ood::{InlierTerm, OodScorer};
use crate::retrieval::{ClusterState, EmbeddingIndex, IndexConfig, Modality};

pub const CONTAINER_VERSION: u32 = 1;

pub const MODEL_MAGIC: &[u8; 8] = b"DLENGMDL";
pub const FEATURES_MAGIC: &[u8; 8] = b"DLENGFEA";
pub const LABELS_MAGIC: &[u8; 8] = b"DLENGLAB";
pub const HEAD_MAGIC: &[u8; 8] = b"DLENGHED";
pub const SCORER_MAGIC: &[u8; 8] = b"DLENGSCR";
pub const INDEX_MAGIC: &[u8; 8] = b"DLENGIDX";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

impl Section {
    pub fn new(tag: &[u8; 4], payload: Vec<u8>) -> Self {
        Self { tag: *tag, payload }
    }

    pub fn tag_str(&self) -> String {
        String::from_utf8_lossy(&self.tag).into_owned()
    }
}

pub fn encode_container(magic: &[u8; 8], sections: &[Section]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(magic).u32(CONTAINER_VERSION).u32(sections.len() as u32);
    for s in sections {
        w.bytes(&s.tag)
            .u64(s.payload.len() as u64)
            .bytes(&s.payload)
            .u32(crc32fast::hash(&s.payload));
    }
    w.into_inner()
}

pub fn decode_container(magic: &[u8; 8], bytes: &[u8]) -> Result<Vec<Section>, FormatError> {
    let mut r = ByteReader::new(bytes, "container header");
    let found = r.take(magic.len().min(bytes.len()))?;
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: magic.to_vec(),
            found: found.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut sections = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut tag = [0u8; 4];
        tag.copy_from_slice(r.take(4)?);
        let len = r.u64()? as usize;
        if len > r.remaining() {
            return Err(FormatError::Truncated(format!(
                "section {} declares {len} bytes",
                String::from_utf8_lossy(&tag)
            )));
        }
        let payload = r.take(len)?.to_vec();
        let crc = r.u32()?;
        if crc != crc32fast::hash(&payload) {
            return Err(FormatError::ChecksumMismatch {
                section: String::from_utf8_lossy(&tag).into_owned(),
            });
        }
        sections.push(Section { tag, payload });
    }
    r.expect_end()?;
    Ok(sections)
}

pub(crate) fn expect_tag<'a>(sections: &'a [Section], index: usize, tag: &[u8; 4]) -> Result<&'a Section, FormatError> {
    let s = sections.get(index).ok_or_else(|| {
        FormatError::Truncated(format!("missing section {}", String::from_utf8_lossy(tag)))
    })?;
    if &s.tag != tag {
        return Err(FormatError::UnexpectedSection {
            expected: String::from_utf8_lossy(tag).into_owned(),
            found: s.tag_str(),
        });
    }
    Ok(s)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---- parameter blocks ----

pub(crate) fn put_mlp(w: &mut ByteWriter, mlp: &Mlp) {
    w.u32(mlp.depth() as u32);
    for l in mlp.layers() {
        w.u32(l.inputs as u32).u32(l.outputs as u32).f64s(&l.weights).f64s(&l.bias);
    }
}

pub(crate) fn get_mlp(r: &mut ByteReader) -> Result<Mlp> {
    let depth = r.usize32()?;
    let mut layers = Vec::with_capacity(depth.min(64));
    for _ in 0..depth {
        let inputs = r.usize32()?;
        let outputs = r.usize32()?;
        let weights = r.f64s(inputs * outputs)?;
        let bias = r.f64s(outputs)?;
        layers.push(Dense { inputs, outputs, weights, bias });
    }
    Mlp::from_layers(layers)
}

pub(crate) fn put_mixture(w: &mut ByteWriter, m: &Mixture) {
    w.u32(m.len() as u32).u32(m.dim() as u32);
    for c in &m.components {
        w.f64s(&c.mean).f64s(&c.var);
    }
}

pub(crate) fn get_mixture(r: &mut ByteReader) -> Result<Mixture> {
    let count = r.usize32()?;
    let dim = r.usize32()?;
    let mut components = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let mean = r.f64s(dim)?;
        let var = r.f64s(dim)?;
        components.push(DiagGaussian { mean, var });
    }
    Mixture::new(components)
}

fn put_decoder(w: &mut ByteWriter, d: &Decoder) {
    match d {
        Decoder::Identity { dim } => {
            w.u8(0).u32(*dim as u32);
        }
        Decoder::Mlp(m) => {
            w.u8(1);
            put_mlp(w, m);
        }
    }
}

fn get_decoder(r: &mut ByteReader) -> Result<Decoder> {
    match r.u8()? {
        0 => Ok(Decoder::Identity { dim: r.usize32()? }),
        1 => Ok(Decoder::Mlp(get_mlp(r)?)),
        other => Err(FormatError::Malformed(format!("decoder kind {other}")).into()),
    }
}

fn decoder_section(model: &GmmClassModel) -> Section {
    let mut w = ByteWriter::new();
    put_decoder(&mut w, &model.decoder);
    Section::new(b"DECO", w.into_inner())
}

fn mixtures_section(mixtures: &[Mixture]) -> Section {
    let mut w = ByteWriter::new();
    w.u32(mixtures.len() as u32);
    for m in mixtures {
        put_mixture(&mut w, m);
    }
    Section::new(b"MIXS", w.into_inner())
}

pub(crate) fn get_mixtures(payload: &[u8]) -> Result<Vec<Mixture>> {
    let mut r = ByteReader::new(payload, "mixtures");
    let n = r.usize32()?;
    let out = (0..n).map(|_| get_mixture(&mut r)).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    Ok(out)
}

/// Bytes hashed for the model digest.
pub fn model_payload(model: &GmmClassModel) -> Vec<u8> {
    let mut bytes = decoder_section(model).payload;
    bytes.extend(mixtures_section(&model.mixtures).payload);
    bytes
}

pub fn encode_model(model: &GmmClassModel) -> Vec<u8> {
    encode_container(MODEL_MAGIC, &[decoder_section(model), mixtures_section(&model.mixtures)])
}

pub fn decode_model(bytes: &[u8]) -> Result<GmmClassModel> {
    let sections = decode_container(MODEL_MAGIC, bytes)?;
    let deco = expect_tag(&sections, 0, b"DECO")?;
    let mut r = ByteReader::new(&deco.payload, "decoder");
    let decoder = get_decoder(&mut r)?;
    r.expect_end()?;
    let mixtures = get_mixtures(&expect_tag(&sections, 1, b"MIXS")?.payload)?;
    GmmClassModel::new(decoder, mixtures)
}

pub fn write_model(path: &Path, model: &GmmClassModel) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn read_model(path: &Path) -> Result<GmmClassModel> {
    decode_model(&std::fs::read(path)?)
}

// ---- grids ----

pub fn encode_feature_grids(grids: &[FeatureGrid]) -> Vec<u8> {
    let sections: Vec<Section> = grids
        .iter()
        .map(|g| {
            let mut w = ByteWriter::new();
            w.str(&g.frame_id)
                .u32(g.height as u32)
                .u32(g.width as u32)
                .u32(g.dim as u32)
                .f64s(g.data());
            Section::new(b"FEAT", w.into_inner())
        })
        .collect();
    encode_container(FEATURES_MAGIC, &sections)
}

pub fn decode_feature_grids(bytes: &[u8]) -> Result<Vec<FeatureGrid>> {
    let sections = decode_container(FEATURES_MAGIC, bytes)?;
    (0..sections.len())
        .map(|i| {
            let s = expect_tag(&sections, i, b"FEAT")?;
            let mut r = ByteReader::new(&s.payload, "feature grid");
            let id = r.str()?;
            let h = r.usize32()?;
            let w = r.usize32()?;
            let d = r.usize32()?;
            let data = r.f64s(h * w * d)?;
            r.expect_end()?;
            FeatureGrid::new(id, h, w, d, data)
        })
        .collect()
}

pub fn encode_label_grids(grids: &[LabelGrid]) -> Vec<u8> {
    let sections: Vec<Section> = grids
        .iter()
        .map(|g| {
            let mut w = ByteWriter::new();
            w.str(&g.frame_id).u32(g.height as u32).u32(g.width as u32);
            for l in &g.labels {
                w.u32(*l);
            }
            Section::new(b"LABL", w.into_inner())
        })
        .collect();
    encode_container(LABELS_MAGIC, &sections)
}

pub fn decode_label_grids(bytes: &[u8]) -> Result<Vec<LabelGrid>> {
    let sections = decode_container(LABELS_MAGIC, bytes)?;
    (0..sections.len())
        .map(|i| {
            let s = expect_tag(&sections, i, b"LABL")?;
            let mut r = ByteReader::new(&s.payload, "label grid");
            let id = r.str()?;
            let h = r.usize32()?;
            let w = r.usize32()?;
            if r.remaining() != h * w * 4 {
                return Err(FormatError::Truncated("label grid payload".into()).into());
            }
            let labels = (0..h * w).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            LabelGrid::new(id, h, w, labels)
        })
        .collect()
}

pub fn write_feature_grids(path: &Path, grids: &[FeatureGrid]) -> Result<()> {
    write_atomic(path, &encode_feature_grids(grids))
}

pub fn read_feature_grids(path: &Path) -> Result<Vec<FeatureGrid>> {
    decode_feature_grids(&std::fs::read(path)?)
}

pub fn write_label_grids(path: &Path, grids: &[LabelGrid]) -> Result<()> {
    write_atomic(path, &encode_label_grids(grids))
}

pub fn read_label_grids(path: &Path) -> Result<Vec<LabelGrid>> {
    decode_label_grids(&std::fs::read(path)?)
}

// ---- adaptive heads ----

fn head_sections(head: &AdaptiveHead) -> [Section; 3] {
    let mut meta = ByteWriter::new();
    meta.u32(head.class_id)
        .str(&head.name)
        .u64(head.meta.sample_count as u64)
        .u64(head.meta.seed)
        .f64(head.meta.lambda)
        .u64(head.meta.epochs as u64)
        .f64(head.meta.learning_rate);
    let mut proj = ByteWriter::new();
    put_mlp(&mut proj, &head.projection);
    let mut mix = ByteWriter::new();
    put_mixture(&mut mix, &head.mixture);
    [
        Section::new(b"HMET", meta.into_inner()),
        Section::new(b"PROJ", proj.into_inner()),
        Section::new(b"PHIN", mix.into_inner()),
    ]
}

/// Bytes hashed for a head digest.
pub fn head_payload(head: &AdaptiveHead) -> Vec<u8> {
    head_sections(head).into_iter().flat_map(|s| s.payload).collect()
}

/// Any number of heads, three sections each.
pub fn encode_heads(heads: &[AdaptiveHead]) -> Vec<u8> {
    let sections: Vec<Section> = heads.iter().flat_map(head_sections).collect();
    encode_container(HEAD_MAGIC, &sections)
}

pub fn decode_heads(bytes: &[u8]) -> Result<Vec<AdaptiveHead>> {
    let sections = decode_container(HEAD_MAGIC, bytes)?;
    if sections.len() % 3 != 0 {
        return Err(FormatError::Malformed(format!("{} head sections", sections.len())).into());
    }
    (0..sections.len() / 3)
        .map(|h| {
            let mut r = ByteReader::new(&expect_tag(&sections, 3 * h, b"HMET")?.payload, "head metadata");
            let class_id = r.u32()?;
            let name = r.str()?;
            let meta = HeadMeta {
                sample_count: r.u64()? as usize,
                seed: r.u64()?,
                lambda: r.f64()?,
                epochs: r.u64()? as usize,
                learning_rate: r.f64()?,
            };
            r.expect_end()?;
            let mut r = ByteReader::new(&expect_tag(&sections, 3 * h + 1, b"PROJ")?.payload, "head projection");
            let projection = get_mlp(&mut r)?;
            r.expect_end()?;
            let mut r = ByteReader::new(&expect_tag(&sections, 3 * h + 2, b"PHIN")?.payload, "head mixture");
            let mixture = get_mixture(&mut r)?;
            r.expect_end()?;
            check_dim(projection.output_dim(), mixture.dim())?;
            Ok(AdaptiveHead { class_id, name, projection, mixture, meta })
        })
        .collect()
}

pub fn write_heads(path: &Path, heads: &[AdaptiveHead]) -> Result<()> {
    write_atomic(path, &encode_heads(heads))
}

pub fn read_heads(path: &Path) -> Result<Vec<AdaptiveHead>> {
    decode_heads(&std::fs::read(path)?)
}

// ---- OoD scorer ----

fn scorer_sections(scorer: &OodScorer) -> [Section; 4] {
    let mut cfg = ByteWriter::new();
    cfg.u8(scorer.inlier_term.code());
    let mut mlp = ByteWriter::new();
    put_mlp(&mut mlp, &scorer.mlp);
    let mut out = ByteWriter::new();
    put_mixture(&mut out, &scorer.out_density);
    let mut inl = ByteWriter::new();
    put_mixture(&mut inl, &scorer.in_density);
    [
        Section::new(b"SCFG", cfg.into_inner()),
        Section::new(b"SMLP", mlp.into_inner()),
        Section::new(b"SOUT", out.into_inner()),
        Section::new(b"SINN", inl.into_inner()),
    ]
}

pub fn scorer_payload(scorer: &OodScorer) -> Vec<u8> {
    scorer_sections(scorer).into_iter().flat_map(|s| s.payload).collect()
}

pub fn encode_scorer(scorer: &OodScorer) -> Vec<u8> {
    encode_container(SCORER_MAGIC, &scorer_sections(scorer))
}

pub fn decode_scorer(bytes: &[u8]) -> Result<OodScorer> {
    let sections = decode_container(SCORER_MAGIC, bytes)?;
    let cfg = &expect_tag(&sections, 0, b"SCFG")?.payload;
    let mut r = ByteReader::new(cfg, "scorer config");
    let code = r.u8()?;
    r.expect_end()?;
    let inlier_term = InlierTerm::from_code(code)
        .ok_or_else(|| FormatError::Malformed(format!("inlier term code {code}")))?;
    let mut r = ByteReader::new(&expect_tag(&sections, 1, b"SMLP")?.payload, "scorer perceptron");
    let mlp = get_mlp(&mut r)?;
    r.expect_end()?;
    let mut r = ByteReader::new(&expect_tag(&sections, 2, b"SOUT")?.payload, "out density");
    let out_density = get_mixture(&mut r)?;
    r.expect_end()?;
    let mut r = ByteReader::new(&expect_tag(&sections, 3, b"SINN")?.payload, "in density");
    let in_density = get_mixture(&mut r)?;
    r.expect_end()?;
    if mlp.depth() != 3 {
        return Err(FormatError::Malformed(format!("scorer perceptron has {} layers", mlp.depth())).into());
    }
    check_mixture_dims(&[out_density.clone(), in_density.clone()], mlp.output_dim())?;
    Ok(OodScorer { mlp, out_density, in_density, inlier_term })
}

pub fn write_scorer(path: &Path, scorer: &OodScorer) -> Result<()> {
    write_atomic(path, &encode_scorer(scorer))
}

pub fn read_scorer(path: &Path) -> Result<OodScorer> {
    decode_scorer(&std::fs::read(path)?)
}

// ---- retrieval index ----

pub fn encode_index(index: &EmbeddingIndex) -> Result<Vec<u8>> {
    let mut cfg = ByteWriter::new();
    let c = &index.config;
    cfg.u8(index.modality.code())
        .u32(index.dim as u32)
        .u32(c.k as u32)
        .f64(c.alpha)
        .u32(c.warmup_per_cluster as u32)
        .u64(c.seed)
        .u8(index.is_warm() as u8);
    let state = index.clusters();
    let mut cent = ByteWriter::new();
    cent.u64(state.updates).u32(state.centroids.len() as u32);
    for (centroid, count) in state.centroids.iter().zip(&state.counts) {
        cent.f64s(centroid).u64(*count);
    }
    let mut asgn = ByteWriter::new();
    for &a in index.assignment() {
        asgn.u32(a as u32);
    }
    let store = crate::io::store::encode_store(index.dim, index.records())?;
    Ok(encode_container(
        INDEX_MAGIC,
        &[
            Section::new(b"ICFG", cfg.into_inner()),
            Section::new(b"CENT", cent.into_inner()),
            Section::new(b"ASGN", asgn.into_inner()),
            Section::new(b"STOR", store),
        ],
    ))
}

pub fn decode_index(bytes: &[u8]) -> Result<EmbeddingIndex> {
    let sections = decode_container(INDEX_MAGIC, bytes)?;
    let mut r = ByteReader::new(&expect_tag(&sections, 0, b"ICFG")?.payload, "index config");
    let modality = Modality::from_code(r.u8()?)?;
    let dim = r.usize32()?;
    let config = IndexConfig {
        k: r.usize32()?,
        alpha: r.f64()?,
        warmup_per_cluster: r.usize32()?,
        seed: r.u64()?,
    };
    let warm = r.u8()? != 0;
    r.expect_end()?;
    let mut r = ByteReader::new(&expect_tag(&sections, 1, b"CENT")?.payload, "centroids");
    let mut state = ClusterState::new(config.k, config.alpha)?;
    state.updates = r.u64()?;
    let n = r.usize32()?;
    if n > config.k {
        return Err(FormatError::Malformed(format!("{n} centroids for k = {}", config.k)).into());
    }
    for _ in 0..n {
        state.centroids.push(r.f64s(dim)?);
        state.counts.push(r.u64()?);
    }
    r.expect_end()?;
    let payload = &expect_tag(&sections, 2, b"ASGN")?.payload;
    let mut r = ByteReader::new(payload, "assignments");
    let assignment = (0..payload.len() / 4).map(|_| r.usize32()).collect::<Result<Vec<_>, _>>()?;
    r.expect_end()?;
    let (_, records) = crate::io::store::decode_store(&expect_tag(&sections, 3, b"STOR")?.payload, Some(dim))?;
    EmbeddingIndex::from_parts(modality, dim, config, records, state, assignment, warm)
}

pub fn write_index(path: &Path, index: &EmbeddingIndex) -> Result<()> {
    write_atomic(path, &encode_index(index)?)
}

pub fn read_index(path: &Path) -> Result<EmbeddingIndex> {
    decode_index(&std::fs::read(path)?)
}

pub(crate) fn check_mixture_dims(mixtures: &[Mixture], dim: usize) -> Result<()> {
    for m in mixtures {
        check_dim(dim, m.dim())?;
    }
    Ok(())
}
