//! Binary model checkpoints.
//!
//! A checkpoint stores the model configuration plus every tensor in the
//! parameter store (trainable weights and batch norm running statistics)
//! as little-endian f64, so checkpoints are portable across the scalar
//! types the model can run in. Loading rebuilds the network from the stored
//! configuration and overwrites the freshly initialized store entry by
//! entry, with name and shape checks.

use std::io::{Read, Write};

use crate::wire::{
    read_exact, read_f64, read_string, read_u16, read_u32, read_u8, write_f64, write_string,
    write_u16, write_u32,
};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SvtNet, Variant};
use crate::params::ParamStore;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SVTN";
const VERSION: u16 = 1;

/// Writes the configuration and the full parameter store.
pub fn save<S: Scalar, W: Write>(
    w: &mut W,
    config: &ModelConfig,
    store: &ParamStore<S>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u16(w, VERSION)?;
    w.write_all(&[config.variant.tag()])?;
    w.write_all(&[u8::from(config.csvt_softmax_over_voxels)])?;
    write_u32(w, config.base_channels as u32)?;
    write_u32(w, config.feature_dim as u32)?;
    write_u32(w, config.reduction as u32)?;
    write_u32(w, config.n_tokens as u32)?;
    write_f64(w, config.quant_step)?;
    write_f64(w, config.gem_p_init)?;
    write_u32(w, store.len() as u32)?;
    for (_, entry) in store.iter() {
        write_string(w, &entry.name)?;
        w.write_all(&[u8::from(entry.trainable)])?;
        write_u32(w, entry.value.nrows() as u32)?;
        write_u32(w, entry.value.ncols() as u32)?;
        for v in entry.value.iter() {
            write_f64(w, v.to_f64_value())?;
        }
    }
    Ok(())
}

/// Reads back a model. When `expected_variant` is given, a checkpoint of a
/// different variant is rejected before any tensor is read.
pub fn load<S: Scalar, R: Read>(
    r: &mut R,
    expected_variant: Option<Variant>,
) -> Result<(SvtNet, ParamStore<S>)> {
    let magic = read_exact::<R, 4>(r)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let variant = Variant::from_tag(read_u8(r)?)
        .ok_or_else(|| Error::Parse("unknown variant tag in checkpoint".into()))?;
    if let Some(expected) = expected_variant {
        if variant != expected {
            return Err(Error::VariantMismatch {
                found: variant.as_str().to_string(),
                expected: expected.as_str().to_string(),
            });
        }
    }
    let csvt_softmax_over_voxels = read_u8(r)? != 0;
    let base_channels = read_u32(r)? as usize;
    let feature_dim = read_u32(r)? as usize;
    let reduction = read_u32(r)? as usize;
    let n_tokens = read_u32(r)? as usize;
    let quant_step = read_f64(r)?;
    let gem_p_init = read_f64(r)?;
    let config = ModelConfig {
        variant,
        quant_step,
        base_channels,
        feature_dim,
        reduction,
        n_tokens,
        csvt_softmax_over_voxels,
        gem_p_init,
    };
    let (model, mut store) = SvtNet::build::<S>(&config, 0);
    let n_entries = read_u32(r)? as usize;
    if n_entries != store.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {n_entries} tensors, model defines {}",
            store.len()
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = read_string(r)?;
        if name != store.name(id) {
            return Err(Error::Parse(format!(
                "checkpoint tensor {name:?} does not match model tensor {:?}",
                store.name(id)
            )));
        }
        let trainable = read_u8(r)? != 0;
        if trainable != store.is_trainable(id) {
            return Err(Error::Parse(format!("trainability mismatch for {name:?}")));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let expect = store.value(id).dim();
        if (rows, cols) != expect {
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                details: format!("{name}: ({rows}, {cols}) vs {expect:?}"),
            });
        }
        let mut value = Array2::zeros((rows, cols));
        for v in value.iter_mut() {
            *v = S::of(read_f64(r)?);
        }
        *store.value_mut(id) = value;
    }
    Ok((model, store))
}

/// Convenience wrappers over file paths.
pub fn save_file<S: Scalar>(
    path: &std::path::Path,
    config: &ModelConfig,
    store: &ParamStore<S>,
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    save(&mut file, config, store)?;
    Ok(file.flush()?)
}

pub fn load_file<S: Scalar>(
    path: &std::path::Path,
    expected_variant: Option<Variant>,
) -> Result<(SvtNet, ParamStore<S>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    load(&mut file, expected_variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn roundtrip_store(variant: Variant) {
        let config = ModelConfig::tiny(variant);
        let (_, mut store) = SvtNet::build::<f64>(&config, 77);
        // Perturb a buffer so running statistics are exercised too.
        let rm = store.find("conv0.bn.running_mean").unwrap();
        store.value_mut(rm)[[0, 0]] = 0.25;
        let mut bytes = Vec::new();
        save(&mut bytes, &config, &store).unwrap();
        let (model, loaded) = load::<f64, _>(&mut Cursor::new(&bytes), Some(variant)).unwrap();
        assert_eq!(model.config(), &config);
        assert_eq!(loaded.len(), store.len());
        for (id, entry) in store.iter() {
            assert_eq!(entry.name, loaded.name(id));
            assert_eq!(&entry.value, loaded.value(id), "{}", entry.name);
        }
    }

    #[test]
    fn roundtrips_every_variant() {
        for v in [Variant::Svt, Variant::Asvt, Variant::Csvt] {
            roundtrip_store(v);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let err = load::<f64, _>(&mut Cursor::new(b"NOPE....".to_vec()), None).unwrap_err();
        assert!(matches!(err, Error::BadMagic));
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn rejects_wrong_variant() {
        let config = ModelConfig::tiny(Variant::Asvt);
        let (_, store) = SvtNet::build::<f64>(&config, 1);
        let mut bytes = Vec::new();
        save(&mut bytes, &config, &store).unwrap();
        let err =
            load::<f64, _>(&mut Cursor::new(&bytes), Some(Variant::Csvt)).unwrap_err();
        match &err {
            Error::VariantMismatch { found, expected } => {
                assert_eq!(found, "asvt");
                assert_eq!(expected, "csvt");
            }
            other => panic!("expected variant mismatch, got {other:?}"),
        }
        assert!(err.to_string().starts_with("variant mismatch"));
    }

    #[test]
    fn rejects_truncation_anywhere() {
        let config = ModelConfig::tiny(Variant::Svt);
        let (_, store) = SvtNet::build::<f64>(&config, 2);
        let mut bytes = Vec::new();
        save(&mut bytes, &config, &store).unwrap();
        for cut in [3usize, 5, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = load::<f64, _>(&mut Cursor::new(&bytes[..cut]), None).unwrap_err();
            assert!(
                matches!(err, Error::Truncated),
                "cut {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn rejects_unknown_version() {
        let config = ModelConfig::tiny(Variant::Svt);
        let (_, store) = SvtNet::build::<f64>(&config, 3);
        let mut bytes = Vec::new();
        save(&mut bytes, &config, &store).unwrap();
        bytes[4] = 0xFF;
        let err = load::<f64, _>(&mut Cursor::new(&bytes), None).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion(_)));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = ModelConfig::tiny(Variant::Svt);
        let (_, store) = SvtNet::build::<f64>(&config, 4);
        save_file(&path, &config, &store).unwrap();
        let (model, loaded) = load_file::<f64>(&path, None).unwrap();
        assert_eq!(model.config(), &config);
        let w = store.find("conv1x1.weight").unwrap();
        assert_eq!(store.value(w), loaded.value(w));
    }
}
