//! Checkpoint container: magic, u16 version, u32 header length, JSON header,
//! then every parameter as little-endian f64 in layout order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_layout, Model, TensorInfo};
use crate::config::BackboneSpec;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LTR3OCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    backbone: String,
    feature_dim: usize,
    n_classes: usize,
    k: usize,
    tensors: Vec<TensorInfo>,
}

impl Model {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            backbone: self.spec.to_string(),
            feature_dim: self.feature_dim(),
            n_classes: self.n_classes,
            k: self.k,
            tensors: self.layout.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R, path: &Path) -> Result<Model> {
        let bad = |msg: &str| Error::cache(path, msg);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not an LTR3O checkpoint"));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(|_| bad("truncated file"))?;
        if u16::from_le_bytes(b2) != CHECKPOINT_VERSION {
            return Err(bad("version mismatch"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated file"))?;
        let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut json).map_err(|_| bad("truncated file"))?;
        let header: Header = serde_json::from_slice(&json)?;
        let spec: BackboneSpec = header.backbone.parse()?;
        let layout = build_layout(&spec, header.n_classes);
        if layout != header.tensors || spec.feature_dim() != header.feature_dim {
            return Err(bad("shape mismatch: tensor layout disagrees with backbone"));
        }
        let total = layout.last().map(|t| t.offset + t.len()).unwrap_or(0);
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != total * 8 {
            return Err(bad("truncated file"));
        }
        let params = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Model { spec, n_classes: header.n_classes, k: header.k, layout, params })
    }

    pub fn load(path: &Path) -> Result<Model> {
        let f = io::BufReader::new(fs::File::open(path)?);
        Model::read_checkpoint(f, path)
    }

    /// Copies weights from a compatible checkpoint (for example pretrained
    /// backbone weights).
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let other = Model::load(path)?;
        if other.layout != self.layout {
            return Err(Error::Shape(format!(
                "checkpoint {} has backbone {} with {} classes; model has {} with {}",
                path.display(),
                other.spec,
                other.n_classes,
                self.spec,
                self.n_classes
            )));
        }
        self.params = other.params;
        Ok(())
    }
}
