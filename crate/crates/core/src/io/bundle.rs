//! TPTB: little-endian, unpadded.
//!
//! ```text
//! "TPTB" | version u32 = 1 | D C P S N u32 | temperature f32 | name_table_len u32
//! name table: UTF-8, '\n'-separated; C class names, then optional metadata lines
//! base text features: C·D f32, row-major
//! jacobians: C·D·P f32, class-major, then feature dimension, then prompt coordinate
//! per sample: label u32, then N·D f32 image features (view 0 = original)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::feature_model::{FeatureBundle, FeatureRows, Sample, UNIT_NORM_TOLERANCE};

pub const MAGIC: [u8; 4] = *b"TPTB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleHeader {
    pub version: u32,
    pub dim: u32,
    pub num_classes: u32,
    pub prompt_dim: u32,
    pub num_samples: u32,
    pub views_per_sample: u32,
    pub temperature: f32,
    pub name_table_len: u32,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated reading {what}: needed {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }
}

fn parse_header(r: &mut Reader<'_>) -> Result<BundleHeader> {
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"TPTB\""),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let mut counts = [0u32; 5];
    for (i, (slot, name)) in counts.iter_mut().zip(["D", "C", "P", "S", "N"]).enumerate() {
        *slot = r.u32(name)?;
        if *slot == 0 {
            return Err(Error::Format {
                offset: (8 + 4 * i) as u64,
                message: format!("{name} must be at least 1"),
            });
        }
    }
    let temperature = f32::from_le_bytes(r.take(4, "temperature")?.try_into().unwrap());
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Format {
            offset: 28,
            message: format!("temperature must be positive, got {temperature}"),
        });
    }
    let name_table_len = r.u32("name table length")?;
    let [dim, num_classes, prompt_dim, num_samples, views_per_sample] = counts;
    Ok(BundleHeader {
        version,
        dim,
        num_classes,
        prompt_dim,
        num_samples,
        views_per_sample,
        temperature,
        name_table_len,
    })
}

pub fn decode_bundle(buf: &[u8]) -> Result<FeatureBundle> {
    let mut r = Reader { buf, pos: 0 };
    let h = parse_header(&mut r)?;
    let (d, c, p, s, n) = (
        h.dim as usize,
        h.num_classes as usize,
        h.prompt_dim as usize,
        h.num_samples as usize,
        h.views_per_sample as usize,
    );

    let table_start = r.pos;
    let table = r.take(h.name_table_len as usize, "name table")?;
    let table = std::str::from_utf8(table).map_err(|e| Error::Format {
        offset: (table_start + e.valid_up_to()) as u64,
        message: "name table is not valid UTF-8".into(),
    })?;
    let mut lines: Vec<String> = if table.is_empty() {
        Vec::new()
    } else {
        table.split('\n').map(str::to_owned).collect()
    };
    if lines.len() < c {
        return Err(Error::Format {
            offset: table_start as u64,
            message: format!("name table has {} entries, expected at least {c}", lines.len()),
        });
    }
    let metadata = lines.split_off(c);

    let cd = c.checked_mul(d).ok_or_else(|| r.err("size overflow"))?;
    let text_start = r.pos;
    let text = r.f32s(cd, "base text features")?;
    let text = rows_at(c, d, text, text_start)?;
    let jac_start = r.pos;
    let jac = r.f32s(cd.checked_mul(p).ok_or_else(|| r.err("size overflow"))?, "jacobians")?;
    if let Some(i) = jac.iter().position(|x| !x.is_finite()) {
        return Err(Error::Format {
            offset: (jac_start + 4 * i) as u64,
            message: "non-finite jacobian entry".into(),
        });
    }
    let mut samples = Vec::with_capacity(s.min(1 << 20));
    for si in 0..s {
        let label_at = r.pos;
        let label = r.u32(&format!("label of sample {si}"))? as usize;
        if label >= c {
            return Err(Error::Format {
                offset: label_at as u64,
                message: format!("label {label} of sample {si} out of range for {c} classes"),
            });
        }
        let feats_start = r.pos;
        let feats = r.f32s(n * d, &format!("image features of sample {si}"))?;
        samples.push(Sample {
            label,
            image_features: rows_at(n, d, feats, feats_start)?,
        });
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes after last sample", buf.len() - r.pos)));
    }
    FeatureBundle::new(h.temperature, lines, text, &jac, p, samples)?.with_metadata(metadata)
}

/// Builds unit-norm rows, reporting a bad row at its byte offset.
fn rows_at(rows: usize, cols: usize, data: Vec<f32>, start: usize) -> Result<FeatureRows> {
    for (i, row) in data.chunks_exact(cols).enumerate() {
        let at = (start + 4 * i * cols) as u64;
        if let Some(j) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::Format {
                offset: at + 4 * j as u64,
                message: format!("non-finite feature in row {i}"),
            });
        }
        let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Format {
                offset: at,
                message: format!("row {i} has norm {norm}, expected unit norm"),
            });
        }
    }
    FeatureRows::from_f32(rows, cols, data)
}

pub fn encode_bundle(bundle: &FeatureBundle) -> Vec<u8> {
    let mut table = bundle.class_names().join("\n");
    for line in bundle.metadata() {
        table.push('\n');
        table.push_str(line);
    }
    let (d, c, p) = (bundle.dim(), bundle.num_classes(), bundle.prompt_dim());
    let n = bundle.views_per_sample();
    let mut out =
        Vec::with_capacity(HEADER_LEN + table.len() + 4 * (c * d * (1 + p) + bundle.num_samples() * (1 + n * d)));
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        d as u32,
        c as u32,
        p as u32,
        bundle.num_samples() as u32,
        n as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&bundle.stored_temperature().to_le_bytes());
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(table.as_bytes());
    let put = |out: &mut Vec<u8>, xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    put(&mut out, bundle.base_text().stored());
    put(&mut out, &bundle.jacobians_f32());
    for sample in bundle.samples() {
        out.extend_from_slice(&(sample.label as u32).to_le_bytes());
        put(&mut out, sample.image_features.stored());
    }
    out
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&buf)
}

pub fn write_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_bundle(bundle)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_model::test_support::{random_bundle, TestRng};

    #[test]
    fn header_layout() {
        let mut rng = TestRng::new(1);
        let b = random_bundle(&mut rng, 3, 2, 2, 1, 1);
        let bytes = encode_bundle(&b);
        assert_eq!(&bytes[..4], b"TPTB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        let ntl = u32::from_le_bytes(bytes[32..36].try_into().unwrap()) as usize;
        assert_eq!(&bytes[36..36 + ntl], b"class_0\nclass_1");
        assert_eq!(bytes.len(), 36 + ntl + 4 * (2 * 3 + 2 * 3 * 2 + (1 + 3)));
    }

    #[test]
    fn version_2_rejected() {
        let mut rng = TestRng::new(1);
        let mut bytes = encode_bundle(&random_bundle(&mut rng, 3, 2, 2, 1, 1));
        bytes[4] = 2;
        match decode_bundle(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut rng = TestRng::new(1);
        let mut bytes = encode_bundle(&random_bundle(&mut rng, 3, 2, 2, 1, 1));
        bytes[0] = b'X';
        assert!(matches!(decode_bundle(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn metadata_lines_survive() {
        let mut rng = TestRng::new(2);
        let b = random_bundle(&mut rng, 3, 2, 2, 1, 1)
            .with_metadata(vec!["crop=0.5-1.0".into(), "flip=0.5".into()])
            .unwrap();
        let back = decode_bundle(&encode_bundle(&b)).unwrap();
        assert_eq!(back.metadata(), b.metadata());
        assert_eq!(back, b);
    }

    #[test]
    fn non_unit_rows_rejected_at_their_offset() {
        let mut rng = TestRng::new(3);
        let b = random_bundle(&mut rng, 3, 2, 2, 1, 1);
        let mut bytes = encode_bundle(&b);
        let ntl = u32::from_le_bytes(bytes[32..36].try_into().unwrap()) as usize;
        let at = 36 + ntl;
        bytes[at..at + 4].copy_from_slice(&3.0f32.to_le_bytes());
        match decode_bundle(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, at as u64),
            other => panic!("{other:?}"),
        }
    }
}
