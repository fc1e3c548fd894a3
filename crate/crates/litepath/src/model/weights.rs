//! The `LPW1` tensor container: magic bytes, a line-oriented text header, a
//! tensor table of (name, dtype, shape, offset), and raw little-endian
//! payloads. Round trips are bit-exact; the same container carries model
//! bundles, checkpoints, and per-slide feature caches.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    AbmilConfig, AbmilHead, Encoder, EncoderConfig, ModelBundle, ProjectionHead, ScoringConfig,
    ScoringNet,
};
use crate::numerics::{SeededRng, Tensor};

pub const MAGIC: &[u8; 4] = b"LPW1";
const DTYPE_F64: u8 = 0;

/// Serializes named tensors with a text header into the container byte image.
pub fn write_container(header: &BTreeMap<String, String>, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut header_text = String::new();
    for (k, v) in header {
        header_text.push_str(k);
        header_text.push_str(" = ");
        header_text.push_str(v);
        header_text.push('\n');
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_text.len() as u32).to_le_bytes());
    out.extend_from_slice(header_text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let bytes = t.to_le_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        offset += bytes.len() as u64;
        payload.extend_from_slice(&bytes);
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("container truncated".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a container byte image into its header map and named tensors.
pub fn read_container(bytes: &[u8]) -> Result<(BTreeMap<String, String>, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not an LPW1 file".to_string()));
    }
    let header_len = r.u32()? as usize;
    let header_text = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::Format("header is not UTF-8".to_string()))?;
    let mut header = BTreeMap::new();
    for line in header_text.lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            header.insert(k.to_string(), v.to_string());
        }
    }
    let n_tensors = r.u32()? as usize;
    let mut metas = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".to_string()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()? as usize;
        let nbytes = r.u64()? as usize;
        metas.push((name, shape, offset, nbytes));
    }
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?;
    let mut tensors = Vec::with_capacity(n_tensors);
    for (name, shape, offset, nbytes) in metas {
        if offset + nbytes > payload.len() || nbytes % 8 != 0 {
            return Err(Error::Format(format!("tensor {name} payload out of range")));
        }
        let data: Vec<f64> = payload[offset..offset + nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((header, tensors))
}

pub fn write_container_file(
    path: &Path,
    header: &BTreeMap<String, String>,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = write_container(header, tensors);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_container_file(path: &Path) -> Result<(BTreeMap<String, String>, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_container(&bytes)
}

/// SHA-256 hex of a serialized container; the identity used for cache
/// addressing and report stamps.
pub fn weights_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn put(header: &mut BTreeMap<String, String>, k: &str, v: impl ToString) {
    header.insert(k.to_string(), v.to_string());
}

fn get<'a>(header: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
    header
        .get(k)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Format(format!("missing header key {k}")))
}

fn get_usize(header: &BTreeMap<String, String>, k: &str) -> Result<usize> {
    get(header, k)?
        .parse()
        .map_err(|_| Error::Format(format!("bad integer for {k}")))
}

fn get_f64(header: &BTreeMap<String, String>, k: &str) -> Result<f64> {
    get(header, k)?
        .parse()
        .map_err(|_| Error::Format(format!("bad float for {k}")))
}

/// Canonical byte image of a bundle: header describes every sub-model's
/// config, tensor table carries all parameter values in a fixed order.
pub fn serialize_bundle(bundle: &ModelBundle) -> Vec<u8> {
    let mut header = BTreeMap::new();
    put(&mut header, "format", "lpw1-bundle");
    let e = &bundle.encoder.cfg;
    put(&mut header, "encoder.input_size", e.input_size);
    put(&mut header, "encoder.patch_size", e.patch_size);
    put(&mut header, "encoder.embed_dim", e.embed_dim);
    put(&mut header, "encoder.depth", e.depth);
    put(&mut header, "encoder.heads", e.heads);
    put(&mut header, "encoder.mlp_ratio", e.mlp_ratio);
    put(&mut header, "encoder.output_dim", e.output_dim);
    put(&mut header, "encoder.split_after_block", e.split_after_block);
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, p) in bundle.encoder.named_params() {
        tensors.push((format!("encoder.{name}"), &p.value));
    }
    if let Some(a) = &bundle.abmil {
        put(&mut header, "abmil.present", "true");
        put(&mut header, "abmil.in_dim", a.cfg.in_dim);
        put(&mut header, "abmil.hidden", a.cfg.hidden);
        put(&mut header, "abmil.attn_dim", a.cfg.attn_dim);
        put(&mut header, "abmil.n_classes", a.cfg.n_classes);
        put(&mut header, "abmil.dropout", a.cfg.dropout);
        put(&mut header, "abmil.gated", a.cfg.gated);
        for (name, p) in a.named_params() {
            tensors.push((format!("abmil.{name}"), &p.value));
        }
    } else {
        put(&mut header, "abmil.present", "false");
    }
    if let Some(s) = &bundle.scorer {
        put(&mut header, "scorer.present", "true");
        put(&mut header, "scorer.in_dim", s.cfg.in_dim);
        put(&mut header, "scorer.hidden", s.cfg.hidden);
        put(&mut header, "scorer.attn_dim", s.cfg.attn_dim);
        put(&mut header, "scorer.dropout", s.cfg.dropout);
        for (name, p) in s.named_params() {
            tensors.push((format!("scorer.{name}"), &p.value));
        }
    } else {
        put(&mut header, "scorer.present", "false");
    }
    put(&mut header, "projections", bundle.projections.len());
    for (i, proj) in bundle.projections.iter().enumerate() {
        put(
            &mut header,
            &format!("projection.{i}.teacher_dim"),
            proj.teacher_dim(),
        );
        tensors.push((format!("projection.{i}.w"), &proj.linear.w.value));
        tensors.push((format!("projection.{i}.b"), &proj.linear.b.value));
    }
    write_container(&header, &tensors)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<String> {
    let bytes = serialize_bundle(bundle);
    let hash = weights_hash(&bytes);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(hash)
}

fn fill_params(
    target: Vec<(String, &mut crate::numerics::Parameter)>,
    prefix: &str,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, p) in target {
        let full = format!("{prefix}.{name}");
        let t = tensors
            .get(&full)
            .ok_or_else(|| Error::Format(format!("missing tensor {full}")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "tensor {full} shape {:?} vs expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<(ModelBundle, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let hash = weights_hash(&bytes);
    let (header, tensor_list) = read_container(&bytes)?;
    if get(&header, "format")? != "lpw1-bundle" {
        return Err(Error::Format("not a bundle container".to_string()));
    }
    let tensors: BTreeMap<String, Tensor> = tensor_list.into_iter().collect();

    let cfg = EncoderConfig {
        input_size: get_usize(&header, "encoder.input_size")?,
        patch_size: get_usize(&header, "encoder.patch_size")?,
        embed_dim: get_usize(&header, "encoder.embed_dim")?,
        depth: get_usize(&header, "encoder.depth")?,
        heads: get_usize(&header, "encoder.heads")?,
        mlp_ratio: get_usize(&header, "encoder.mlp_ratio")?,
        output_dim: get_usize(&header, "encoder.output_dim")?,
        split_after_block: get_usize(&header, "encoder.split_after_block")?,
    };
    // structure from config, values from the tensor table
    let mut scratch = SeededRng::new(0);
    let mut encoder = Encoder::init(cfg, &mut scratch)?;
    fill_params(encoder.named_params_mut(), "encoder", &tensors)?;

    let abmil = if get(&header, "abmil.present")? == "true" {
        let cfg = AbmilConfig {
            in_dim: get_usize(&header, "abmil.in_dim")?,
            hidden: get_usize(&header, "abmil.hidden")?,
            attn_dim: get_usize(&header, "abmil.attn_dim")?,
            n_classes: get_usize(&header, "abmil.n_classes")?,
            dropout: get_f64(&header, "abmil.dropout")?,
            gated: get(&header, "abmil.gated")? == "true",
        };
        let mut head = AbmilHead::init(cfg, &mut scratch)?;
        fill_params(head.named_params_mut(), "abmil", &tensors)?;
        Some(head)
    } else {
        None
    };

    let scorer = if get(&header, "scorer.present")? == "true" {
        let cfg = ScoringConfig {
            in_dim: get_usize(&header, "scorer.in_dim")?,
            hidden: get_usize(&header, "scorer.hidden")?,
            attn_dim: get_usize(&header, "scorer.attn_dim")?,
            dropout: get_f64(&header, "scorer.dropout")?,
        };
        let mut net = ScoringNet::init(cfg, &mut scratch)?;
        fill_params(net.named_params_mut(), "scorer", &tensors)?;
        Some(net)
    } else {
        None
    };

    let n_proj = get_usize(&header, "projections")?;
    let mut projections = Vec::with_capacity(n_proj);
    for i in 0..n_proj {
        let dim = get_usize(&header, &format!("projection.{i}.teacher_dim"))?;
        let mut proj = ProjectionHead::init(encoder.cfg.output_dim, dim, &mut scratch);
        let w = tensors
            .get(&format!("projection.{i}.w"))
            .ok_or_else(|| Error::Format(format!("missing projection.{i}.w")))?;
        let b = tensors
            .get(&format!("projection.{i}.b"))
            .ok_or_else(|| Error::Format(format!("missing projection.{i}.b")))?;
        proj.linear.w.value = w.clone();
        proj.linear.b.value = b.clone();
        projections.push(proj);
    }

    Ok((
        ModelBundle {
            encoder,
            abmil,
            scorer,
            projections,
        },
        hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_bundle() -> ModelBundle {
        let mut rng = SeededRng::new(42);
        let cfg = EncoderConfig {
            input_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            output_dim: 6,
            split_after_block: 1,
        };
        let encoder = Encoder::init(cfg, &mut rng).unwrap();
        let abmil = AbmilHead::init(
            AbmilConfig {
                in_dim: 6,
                hidden: 10,
                attn_dim: 4,
                n_classes: 3,
                dropout: 0.25,
                gated: false,
            },
            &mut rng,
        )
        .unwrap();
        let scorer = ScoringNet::init(
            ScoringConfig {
                in_dim: 16,
                hidden: 8,
                attn_dim: 4,
                dropout: 0.25,
            },
            &mut rng,
        )
        .unwrap();
        let projections = vec![
            ProjectionHead::init(6, 12, &mut rng),
            ProjectionHead::init(6, 9, &mut rng),
        ];
        ModelBundle {
            encoder,
            abmil: Some(abmil),
            scorer: Some(scorer),
            projections,
        }
    }

    #[test]
    fn bundle_roundtrip_bit_exact() {
        let bundle = sample_bundle();
        let dir = std::env::temp_dir().join("litepath_weights_test");
        let path = dir.join("bundle.lpw");
        let hash = save_bundle(&bundle, &path).unwrap();
        let (loaded, hash2) = load_bundle(&path).unwrap();
        assert_eq!(hash, hash2);
        assert_eq!(serialize_bundle(&bundle), serialize_bundle(&loaded));
        for ((n1, p1), (n2, p2)) in bundle
            .encoder
            .named_params()
            .iter()
            .zip(loaded.encoder.named_params().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(p1.value.data(), p2.value.data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn serialization_is_deterministic() {
        let bundle = sample_bundle();
        assert_eq!(serialize_bundle(&bundle), serialize_bundle(&bundle));
    }

    #[test]
    fn bad_magic_rejected() {
        let bundle = sample_bundle();
        let mut bytes = serialize_bundle(&bundle);
        bytes[0] = b'X';
        assert!(read_container(&bytes).is_err());
    }

    #[test]
    fn generic_container_roundtrip() {
        let mut header = BTreeMap::new();
        header.insert("kind".to_string(), "cache".to_string());
        header.insert("slide".to_string(), "s01".to_string());
        let t1 = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 4.0, 1e-300, -7.0]).unwrap();
        let t2 = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let bytes = write_container(
            &header,
            &[("emb".to_string(), &t1), ("scores".to_string(), &t2)],
        );
        let (h, ts) = read_container(&bytes).unwrap();
        assert_eq!(h.get("slide").unwrap(), "s01");
        assert_eq!(ts[0].1, t1);
        assert_eq!(ts[1].1, t2);
    }
}
