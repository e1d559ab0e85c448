//! Binary checkpoint format.
//!
//! All numeric fields are little-endian. Layout:
//!
//! ```text
//! magic       8 bytes  "UDNCKPT\0"
//! version     u32      currently 1
//! flags       u32      bit 0: parameters stored as f64 (otherwise f32)
//! variant     u8       0 = local, 1 = non-local
//! channels    u8       1 = grayscale, 3 = color
//! reserved    u16      0
//! stages      u32
//! kernel_h    u32
//! kernel_w    u32
//! filters     u32
//! group       u32      P
//! window_h    u32
//! window_w    u32
//! rbf_kernels u32      M
//! rbf_lo      f32      center range
//! rbf_hi      f32
//! precision   f32      shared RBF precision a
//! layers      stages × [raw v (F·L), scale s (F), group u (P, non-local only), π (F·M), α]
//! ```

use std::fs;
use std::path::Path;

use crate::conv::FilterBank;
use crate::error::{Error, Result};
use crate::network::{Architecture, LayerParams, NetworkParams, Variant};
use crate::nonlocal::GroupWeights;
use crate::rbf::{make_centers, ClipRange, RbfMixture};
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"UDNCKPT\0";
pub const VERSION: u32 = 1;
const FLAG_F64: u32 = 1;
const FLAG_TRAIN_PRECISION: u32 = 2;

pub fn encode_checkpoint<T: Real>(params: &NetworkParams<T>) -> Vec<u8> {
    let a = &params.arch;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if a.train_precision { FLAG_TRAIN_PRECISION } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.push(match a.variant {
        Variant::Local => 0,
        Variant::NonLocal => 1,
    });
    out.push(a.channels as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [
        a.stages,
        a.kernel.0,
        a.kernel.1,
        a.filters,
        a.group,
        a.window.0,
        a.window.1,
        a.rbf_kernels,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let precision = params.layers.first().map_or(0.0, |l| l.rbf.precision.f64());
    for v in [a.rbf_range.lo, a.rbf_range.hi, precision] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut put = |values: &[T]| {
        for v in values {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    };
    for layer in &params.layers {
        put(&layer.bank.raw);
        put(&layer.bank.scale);
        if let Some(g) = &layer.group {
            put(&g.raw);
        }
        put(&layer.rbf.coeffs);
        if layer.train_precision {
            put(&[layer.rbf.precision]);
        }
        put(&[layer.alpha]);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Codec("truncated checkpoint".into()))?;
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

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn value(&mut self, wide: bool) -> Result<f64> {
        if wide {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        } else {
            self.f32()
        }
    }
}

/// Decodes a checkpoint; when `expected` is given, the stored variant must match it.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], expected: Option<Variant>) -> Result<NetworkParams<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| Error::Codec("truncated header".into()))? != MAGIC {
        return Err(Error::Codec("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let flags = r.u32()?;
    if flags & !(FLAG_F64 | FLAG_TRAIN_PRECISION) != 0 {
        return Err(Error::Codec(format!("unknown checkpoint flags {flags:#x}")));
    }
    let wide = flags & FLAG_F64 != 0;
    let train_precision = flags & FLAG_TRAIN_PRECISION != 0;
    let variant = match r.u8()? {
        0 => Variant::Local,
        1 => Variant::NonLocal,
        v => return Err(Error::Codec(format!("unknown variant tag {v}"))),
    };
    if let Some(e) = expected {
        if e != variant {
            return Err(Error::VariantMismatch {
                expected: e.name().into(),
                found: variant.name().into(),
            });
        }
    }
    let channels = r.u8()? as usize;
    let _reserved = r.u16()?;
    let stages = r.usize()?;
    let kernel = (r.usize()?, r.usize()?);
    let filters = r.usize()?;
    let group = r.usize()?;
    let window = (r.usize()?, r.usize()?);
    let rbf_kernels = r.usize()?;
    let rbf_range = ClipRange::new(r.f32()?, r.f32()?).map_err(|e| Error::Codec(e.to_string()))?;
    let precision = r.f32()?;
    let arch = Architecture {
        variant,
        channels,
        kernel,
        filters,
        stages,
        group,
        window,
        rbf_kernels,
        rbf_range,
        train_precision,
    };
    arch.validate().map_err(|e| Error::Codec(e.to_string()))?;
    if !(precision > 0.0) {
        return Err(Error::Codec("non-positive RBF precision".into()));
    }
    let centers: Vec<T> = make_centers(rbf_kernels, rbf_range.lo, rbf_range.hi)?
        .into_iter()
        .map(T::c)
        .collect();
    let geometry = arch.geometry();
    let mut read = |n: usize| -> Result<Vec<T>> {
        (0..n).map(|_| r.value(wide).map(T::c)).collect()
    };
    let mut layers = Vec::with_capacity(stages);
    for _ in 0..stages {
        let raw = read(filters * geometry.support())?;
        let scale = read(filters)?;
        let g = match variant {
            Variant::Local => None,
            Variant::NonLocal => Some(GroupWeights::new(read(group)?)),
        };
        let coeffs = read(filters * rbf_kernels)?;
        let layer_precision = if train_precision { read(1)?[0] } else { T::c(precision) };
        let alpha = read(1)?[0];
        layers.push(LayerParams {
            bank: FilterBank::new(geometry, raw, scale)?,
            group: g,
            rbf: RbfMixture::new(centers.clone(), layer_precision, coeffs)
                .map_err(|e| Error::Codec(e.to_string()))?,
            alpha,
            train_precision,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Codec(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(NetworkParams { arch, layers })
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, params: &NetworkParams<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, expected: Option<Variant>) -> Result<NetworkParams<T>> {
    decode_checkpoint(&fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::InitConfig;

    fn small(variant: Variant) -> NetworkParams<f32> {
        let arch = Architecture {
            variant,
            channels: 3,
            kernel: (3, 3),
            filters: 4,
            stages: 2,
            group: 4,
            window: (9, 9),
            rbf_kernels: 7,
            rbf_range: ClipRange::RBF,
            train_precision: false,
        };
        let mut init = InitConfig::for_architecture(&arch);
        init.alpha = -0.25;
        NetworkParams::init(arch, &init).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for v in [Variant::Local, Variant::NonLocal] {
            let p = small(v);
            let bytes = encode_checkpoint(&p);
            let q: NetworkParams<f32> = decode_checkpoint(&bytes, Some(v)).unwrap();
            assert_eq!(p, q);
            assert_eq!(encode_checkpoint(&q), bytes);
        }
    }

    #[test]
    fn trained_precision_round_trips_per_layer() {
        let mut p = small(Variant::NonLocal);
        p.arch.train_precision = true;
        for (t, layer) in p.layers.iter_mut().enumerate() {
            layer.train_precision = true;
            layer.rbf.precision = 0.01 * (t + 1) as f32;
        }
        let bytes = encode_checkpoint(&p);
        let q: NetworkParams<f32> = decode_checkpoint(&bytes, None).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.parameter_count(), p.arch.parameter_count());
    }

    #[test]
    fn truncated_and_corrupt() {
        let bytes = encode_checkpoint(&small(Variant::Local));
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint::<f32>(&bytes[..cut], None),
                Err(Error::Codec(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad, None), Err(Error::Codec(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint::<f32>(&extra, None), Err(Error::Codec(_))));
    }

    #[test]
    fn version_and_variant_checks() {
        let mut bytes = encode_checkpoint(&small(Variant::Local));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, Some(Variant::NonLocal)),
            Err(Error::VariantMismatch { .. })
        ));
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, None),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }
}
