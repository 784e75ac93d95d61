//! Binary container for the dataset owner's watermark secret.
//!
//! Layout (little-endian): `b"RMRK"`, `u32` schema version, then sections,
//! each a `u64` byte length followed by the payload:
//!
//! 1. carriers: `u32 m, u32 d, u64 seed`, then `m * d` `f32` row-major
//! 2. selection: JSON text
//! 3. embed params: JSON text
//! 4. image shape `u32 c, h, w` and clean originals: `u32 count`, then per
//!    entry `u32 class, u32 index` and `c*h*w` bytes
//! 5. marked images, same layout as 4
//! 6. marker digest: hex text
//!
//! A trailing SHA-256 of everything before it detects truncation and bit rot.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{quantize_8bit, to_u8, MarkingSelection};
use crate::error::{Error, Result};
use crate::marker::EmbedParams;
use crate::nn::Shape3;
use crate::stats::CarrierSet;

pub const SECRET_MAGIC: &[u8; 4] = b"RMRK";
pub const SECRET_SCHEMA_VERSION: u32 = 1;

/// Everything only the dataset owner knows.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkSecret {
    pub carriers: CarrierSet,
    pub selection: MarkingSelection,
    /// `(class, index)` -> clean image.
    pub clean_originals: BTreeMap<(usize, usize), Vec<f32>>,
    /// `(class, index)` -> marked image as released.
    pub marked_images: BTreeMap<(usize, usize), Vec<f32>>,
    pub image_shape: Shape3,
    pub embed_params: EmbedParams,
    pub marker_model_digest: String,
    pub schema_version: u32,
}

impl WatermarkSecret {
    pub fn validate(&self) -> Result<()> {
        self.carriers.validate()?;
        let keys: Vec<(usize, usize)> = self.selection.pairs();
        let stored: Vec<(usize, usize)> = self.clean_originals.keys().copied().collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        if sorted != stored {
            return Err(Error::Corrupt(
                "clean originals do not match the marking selection".into(),
            ));
        }
        if !self.marked_images.is_empty()
            && self.marked_images.keys().ne(self.clean_originals.keys())
        {
            return Err(Error::Corrupt(
                "marked images do not match the clean originals".into(),
            ));
        }
        if let Some(&(c, _)) = keys.iter().find(|(c, _)| *c >= self.carriers.class_count) {
            return Err(Error::UnknownClass {
                index: c,
                classes: self.carriers.class_count,
            });
        }
        let n = self.image_shape.len();
        if let Some((k, _)) = self
            .clean_originals
            .iter()
            .chain(&self.marked_images)
            .find(|(_, v)| v.len() != n)
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{} images", self.image_shape),
                found: format!("bad image at {k:?}"),
            });
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.carriers.class_count
    }

    /// `(class, clean, marked)` triples in class-then-index order.
    pub fn pairs(&self) -> Vec<(usize, &[f32], &[f32])> {
        self.clean_originals
            .iter()
            .filter_map(|(k, clean)| {
                self.marked_images
                    .get(k)
                    .map(|m| (k.0, clean.as_slice(), m.as_slice()))
            })
            .collect()
    }

    /// SHA-256 of the serialized container.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(encode(self)?)))
    }
}

fn section(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::invalid(format!("{what} {v} does not fit the secret format")))
}

fn encode_images(shape: Shape3, images: &BTreeMap<(usize, usize), Vec<f32>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&u32_of(images.len(), "image count")?);
    for (&(c, i), img) in images {
        out.extend_from_slice(&u32_of(c, "class")?);
        out.extend_from_slice(&u32_of(i, "index")?);
        if img.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_string(),
                found: format!("{} values", img.len()),
            });
        }
        if let Some(v) = img.iter().find(|v| quantize_8bit(**v) != **v) {
            return Err(Error::invalid(format!(
                "image ({c}, {i}) has value {v} off the 8-bit grid and cannot be stored exactly"
            )));
        }
        out.extend(img.iter().map(|v| to_u8(*v)));
    }
    Ok(out)
}

fn encode(s: &WatermarkSecret) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SECRET_MAGIC);
    out.extend_from_slice(&s.schema_version.to_le_bytes());

    let cs = &s.carriers;
    let mut carriers = Vec::with_capacity(16 + 4 * cs.vectors.len());
    carriers.extend_from_slice(&u32_of(cs.class_count, "class count")?);
    carriers.extend_from_slice(&u32_of(cs.feature_dim, "feature dim")?);
    carriers.extend_from_slice(&cs.seed.to_le_bytes());
    for v in &cs.vectors {
        carriers.extend_from_slice(&v.to_le_bytes());
    }
    section(&mut out, &carriers);
    section(&mut out, serde_json::to_string(&s.selection)?.as_bytes());
    section(&mut out, serde_json::to_string(&s.embed_params)?.as_bytes());

    let mut shape = Vec::new();
    for v in [s.image_shape.c, s.image_shape.h, s.image_shape.w] {
        shape.extend_from_slice(&u32_of(v, "image dimension")?);
    }
    let mut originals = shape.clone();
    originals.extend(encode_images(s.image_shape, &s.clean_originals)?);
    section(&mut out, &originals);
    let mut marked = shape;
    marked.extend(encode_images(s.image_shape, &s.marked_images)?);
    section(&mut out, &marked);
    section(&mut out, s.marker_model_digest.as_bytes());

    let check = Sha256::digest(&out);
    out.extend_from_slice(&check);
    Ok(out)
}

pub fn save_secret(secret: &WatermarkSecret, path: &Path) -> Result<()> {
    secret.validate()?;
    let bytes = encode(secret)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let out = &self.buf[self.pos..e];
                self.pos = e;
                Ok(out)
            }
            None => Err(Error::Corrupt(format!(
                "secret truncated while reading {what}"
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn section(&mut self, what: &str) -> Result<Reader<'a>> {
        let len = usize::try_from(self.u64(what)?)
            .map_err(|_| Error::Corrupt(format!("{what} too long")))?;
        Ok(Reader {
            buf: self.take(len, what)?,
            pos: 0,
        })
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes in {what}",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

type ImageMap = BTreeMap<(usize, usize), Vec<f32>>;

fn decode_images(r: &mut Reader<'_>, what: &str) -> Result<(Shape3, ImageMap)> {
    let shape = Shape3::new(
        r.u32(what)? as usize,
        r.u32(what)? as usize,
        r.u32(what)? as usize,
    );
    let count = r.u32(what)?;
    let mut images = BTreeMap::new();
    for _ in 0..count {
        let c = r.u32(what)? as usize;
        let i = r.u32(what)? as usize;
        let px = r.take(shape.len(), what)?;
        images.insert((c, i), px.iter().map(|&b| b as f32 / 255.0).collect());
    }
    r.finish(what)?;
    Ok((shape, images))
}

fn decode(bytes: &[u8]) -> Result<WatermarkSecret> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != SECRET_MAGIC {
        return Err(Error::Corrupt("not a watermark secret (bad magic)".into()));
    }
    let version = r.u32("schema version")?;
    if version != SECRET_SCHEMA_VERSION {
        return Err(Error::UnsupportedSchema {
            found: version,
            supported: SECRET_SCHEMA_VERSION,
        });
    }
    if bytes.len() < 40 {
        return Err(Error::Corrupt("secret truncated".into()));
    }
    let (body, check) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != check {
        return Err(Error::Corrupt(
            "secret checksum mismatch (truncated or damaged file)".into(),
        ));
    }
    r.buf = body;

    let mut c = r.section("carriers")?;
    let m = c.u32("carriers")? as usize;
    let d = c.u32("carriers")? as usize;
    let seed = c.u64("carriers")?;
    let raw = c.take(m * d * 4, "carriers")?;
    c.finish("carriers")?;
    let vectors = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let carriers = CarrierSet {
        vectors,
        feature_dim: d,
        class_count: m,
        seed,
    };

    let sel = r.section("selection")?;
    let selection: MarkingSelection = serde_json::from_slice(sel.buf)?;
    let params = r.section("embed params")?;
    let embed_params: EmbedParams = serde_json::from_slice(params.buf)?;
    let (image_shape, clean_originals) = decode_images(&mut r.section("originals")?, "originals")?;
    let (marked_shape, marked_images) =
        decode_images(&mut r.section("marked images")?, "marked images")?;
    if marked_shape != image_shape && !marked_images.is_empty() {
        return Err(Error::Corrupt(
            "marked and original image shapes differ".into(),
        ));
    }
    let digest = r.section("marker digest")?;
    let marker_model_digest = String::from_utf8(digest.buf.to_vec())
        .map_err(|_| Error::Corrupt("marker digest is not text".into()))?;
    r.finish("secret")?;

    let secret = WatermarkSecret {
        carriers,
        selection,
        clean_originals,
        marked_images,
        image_shape,
        embed_params,
        marker_model_digest,
        schema_version: version,
    };
    secret
        .validate()
        .map_err(|e| Error::Corrupt(format!("secret contents inconsistent: {e}")))?;
    Ok(secret)
}

pub fn load_secret(path: &Path) -> Result<WatermarkSecret> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::generate_carriers;

    pub(crate) fn sample_secret() -> WatermarkSecret {
        let carriers = generate_carriers(3, 16, 5).unwrap();
        let mut per_class = BTreeMap::new();
        per_class.insert(0, vec![0, 3]);
        per_class.insert(1, vec![1]);
        per_class.insert(2, vec![]);
        let selection = MarkingSelection {
            wm_ratio: 0.5,
            per_class_indices: per_class,
            seed: 4,
        };
        let shape = Shape3::new(3, 2, 2);
        let img = |k: usize| {
            (0..12)
                .map(|j| ((j * 17 + k * 31) % 256) as f32 / 255.0)
                .collect::<Vec<f32>>()
        };
        let mut clean = BTreeMap::new();
        let mut marked = BTreeMap::new();
        for (k, key) in [(0, 0), (0, 3), (1, 1)].into_iter().enumerate() {
            clean.insert(key, img(k));
            marked.insert(key, img(k + 7));
        }
        WatermarkSecret {
            carriers,
            selection,
            clean_originals: clean,
            marked_images: marked,
            image_shape: shape,
            embed_params: EmbedParams::default(),
            marker_model_digest: "ab12".into(),
            schema_version: SECRET_SCHEMA_VERSION,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.rmrk");
        let s = sample_secret();
        save_secret(&s, &p).unwrap();
        let back = load_secret(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest().unwrap(), s.digest().unwrap());
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..4], b"RMRK");
    }

    #[test]
    fn future_schema_is_rejected() {
        let mut bytes = encode(&sample_secret()).unwrap();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::UnsupportedSchema { found: 999, .. })
        ));
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encode(&sample_secret()).unwrap();
        for cut in [3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Corrupt(_))),
                "cut at {cut}"
            );
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn keys_must_match_selection() {
        let mut s = sample_secret();
        s.clean_originals.remove(&(0, 3));
        assert!(s.validate().is_err());
    }

    #[test]
    fn off_grid_pixels_are_refused() {
        let mut s = sample_secret();
        s.clean_originals.get_mut(&(1, 1)).unwrap()[0] = 0.1234;
        assert!(encode(&s).is_err());
    }
}
