//! Binary model container: a small metadata header plus named tensor
//! records, with an optional optimizer-state section.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "NMTF" | version u32 | meta_len u64 | meta (key=value lines, UTF-8)
//! tensor_count u64 | { name_len u16, name, rank u8, extents u64*, f32 data* }*
//! opt_flag u8 | [ kind_len u16, kind, slot_count u64,
//!                { t u64, has_m u8 [tensor], has_v u8 [tensor] }* ]
//! ```

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::layers::DepthMode;
use crate::optim::Optimizer;
use crate::seq2seq::{Arch, Seq2SeqConfig, Seq2SeqModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NMTF";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct OptimizerSlots {
    pub kind: String,
    pub slots: Vec<(Option<Tensor>, Option<Tensor>, u64)>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSlots>,
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = u16::from_le_bytes(read_exact::<2>(r)?) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let rank = read_exact::<1>(r)?[0] as usize;
    if !(1..=3).contains(&rank) {
        return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_exact::<8>(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f32::from_le_bytes(read_exact::<4>(r)?));
    }
    Ok((name, Tensor::new(shape, data)))
}

/// Writes parameters (and optionally optimizer state) under the given
/// metadata.
pub fn save(
    path: &Path,
    meta: &BTreeMap<String, String>,
    params: &ParamSet,
    optimizer: Option<(&str, &Optimizer)>,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mut meta_text = String::new();
    for (k, v) in meta {
        assert!(!v.contains('\n'), "metadata value with newline");
        meta_text.push_str(k);
        meta_text.push('=');
        meta_text.push_str(v);
        meta_text.push('\n');
    }
    w.write_all(&(meta_text.len() as u64).to_le_bytes())?;
    w.write_all(meta_text.as_bytes())?;

    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (_, p) in params.iter() {
        write_tensor(&mut w, &p.name, &p.value)?;
    }

    match optimizer {
        None => w.write_all(&[0u8])?,
        Some((kind, opt)) => {
            w.write_all(&[1u8])?;
            let kind_bytes = kind.as_bytes();
            w.write_all(&(kind_bytes.len() as u16).to_le_bytes())?;
            w.write_all(kind_bytes)?;
            let slots = opt.export_slots();
            w.write_all(&(slots.len() as u64).to_le_bytes())?;
            for (m, v, t) in &slots {
                w.write_all(&t.to_le_bytes())?;
                match m {
                    Some(m) => {
                        w.write_all(&[1u8])?;
                        write_tensor(&mut w, "m", m)?;
                    }
                    None => w.write_all(&[0u8])?,
                }
                match v {
                    Some(v) => {
                        w.write_all(&[1u8])?;
                        write_tensor(&mut w, "v", v)?;
                    }
                    None => w.write_all(&[0u8])?,
                }
            }
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open checkpoint {}: {e}", path.display()))
    })?);
    let magic = read_exact::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact::<4>(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = u64::from_le_bytes(read_exact::<8>(&mut r)?) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta_text = String::from_utf8(meta_bytes)
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }

    let count = u64::from_le_bytes(read_exact::<8>(&mut r)?) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut r)?);
    }

    let opt_flag = read_exact::<1>(&mut r)?[0];
    let optimizer = match opt_flag {
        0 => None,
        1 => {
            let kind_len = u16::from_le_bytes(read_exact::<2>(&mut r)?) as usize;
            let mut kind = vec![0u8; kind_len];
            r.read_exact(&mut kind)?;
            let kind = String::from_utf8(kind)
                .map_err(|_| Error::Format("optimizer kind is not UTF-8".into()))?;
            let slot_count = u64::from_le_bytes(read_exact::<8>(&mut r)?) as usize;
            let mut slots = Vec::with_capacity(slot_count);
            for _ in 0..slot_count {
                let t = u64::from_le_bytes(read_exact::<8>(&mut r)?);
                let m = match read_exact::<1>(&mut r)?[0] {
                    1 => Some(read_tensor(&mut r)?.1),
                    _ => None,
                };
                let v = match read_exact::<1>(&mut r)?[0] {
                    1 => Some(read_tensor(&mut r)?.1),
                    _ => None,
                };
                slots.push((m, v, t));
            }
            Some(OptimizerSlots { kind, slots })
        }
        other => {
            return Err(Error::Format(format!(
                "bad optimizer-section flag {other}"
            )))
        }
    };
    Ok(Checkpoint {
        meta,
        tensors,
        optimizer,
    })
}

/// Metadata describing a translation model's architecture plus the
/// fingerprints of the vocabularies it was trained with.
pub fn model_meta(
    config: &Seq2SeqConfig,
    src_fingerprint: u64,
    tgt_fingerprint: u64,
) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        meta.insert(k.to_string(), v);
    };
    put("arch", config.arch.name().to_string());
    put("src-vocab", config.src_vocab.to_string());
    put("tgt-vocab", config.tgt_vocab.to_string());
    put("embed-dim", config.embed_dim.to_string());
    put("hidden-dim", config.hidden_dim.to_string());
    put("depth-enc", config.depth_enc.to_string());
    put("depth-dec", config.depth_dec.to_string());
    put(
        "depth-mode",
        match config.depth_mode {
            DepthMode::Stacked => "stacked",
            DepthMode::Transition => "transition",
            DepthMode::Alternating => "alternating",
        }
        .to_string(),
    );
    put("attention", config.attention.to_string());
    put("coverage", config.coverage.to_string());
    put(
        "fertility-cap",
        config.fertility_cap.map_or("0".to_string(), |f| f.to_string()),
    );
    put("dropout", config.dropout.to_string());
    put("init-from-source", config.init_from_source.to_string());
    put("src-vocab-fingerprint", format!("{src_fingerprint:016x}"));
    put("tgt-vocab-fingerprint", format!("{tgt_fingerprint:016x}"));
    meta
}

fn meta_get<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
}

fn meta_parse<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| Error::Format(format!("bad checkpoint metadata `{key}`")))
}

/// Architecture description back out of checkpoint metadata.
pub fn config_from_meta(meta: &BTreeMap<String, String>) -> Result<Seq2SeqConfig> {
    let arch = Arch::parse(meta_get(meta, "arch")?)
        .ok_or_else(|| Error::Format("unknown arch in checkpoint".into()))?;
    let depth_mode = DepthMode::parse(meta_get(meta, "depth-mode")?)
        .ok_or_else(|| Error::Format("unknown depth-mode in checkpoint".into()))?;
    let fertility: f32 = meta_parse(meta, "fertility-cap")?;
    Ok(Seq2SeqConfig {
        arch,
        src_vocab: meta_parse(meta, "src-vocab")?,
        tgt_vocab: meta_parse(meta, "tgt-vocab")?,
        embed_dim: meta_parse(meta, "embed-dim")?,
        hidden_dim: meta_parse(meta, "hidden-dim")?,
        depth_enc: meta_parse(meta, "depth-enc")?,
        depth_dec: meta_parse(meta, "depth-dec")?,
        depth_mode,
        attention: meta_parse(meta, "attention")?,
        coverage: meta_parse(meta, "coverage")?,
        fertility_cap: (fertility > 0.0).then_some(fertility),
        dropout: meta_parse(meta, "dropout")?,
        init_from_source: meta_parse(meta, "init-from-source")?,
    })
}

/// Vocabulary fingerprints recorded in the metadata.
pub fn fingerprints_from_meta(meta: &BTreeMap<String, String>) -> Result<(u64, u64)> {
    let src = u64::from_str_radix(meta_get(meta, "src-vocab-fingerprint")?, 16)
        .map_err(|_| Error::Format("bad src vocabulary fingerprint".into()))?;
    let tgt = u64::from_str_radix(meta_get(meta, "tgt-vocab-fingerprint")?, 16)
        .map_err(|_| Error::Format("bad tgt vocabulary fingerprint".into()))?;
    Ok((src, tgt))
}

/// Rebuilds a translation model from a checkpoint: the architecture comes
/// from the metadata, every parameter value from its tensor record.
pub fn restore_model(ckpt: &Checkpoint) -> Result<Seq2SeqModel> {
    let config = config_from_meta(&ckpt.meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Seq2SeqModel::new(config, &mut rng);
    let by_name: BTreeMap<&str, &Tensor> = ckpt
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    if by_name.len() != ckpt.tensors.len() {
        return Err(Error::Format("duplicate tensor record".into()));
    }
    let mut used = 0usize;
    for i in 0..model.params.len() {
        let id = crate::graph::ParamId(i);
        let name = model.params.get(id).name.clone();
        let t = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Format(format!("checkpoint lacks a record for parameter `{name}`"))
        })?;
        if t.shape() != model.params.value(id).shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?} in the checkpoint, model wants {:?}",
                t.shape(),
                model.params.value(id).shape()
            )));
        }
        *model.params.value_mut(id) = (*t).clone();
        used += 1;
    }
    if used != ckpt.tensors.len() {
        return Err(Error::Format(
            "checkpoint carries tensor records the model does not use".into(),
        ));
    }
    Ok(model)
}
