//! Attention-map export: per modality, the mass each secondary position
//! receives, as an 8-bit PGM plus the raw tensors in checkpoint format.

use std::path::{Path, PathBuf};

use super::mwca::MwcaBlock;
use crate::error::Result;
use crate::imgio;
use crate::tensor::{checkpoint, Tape, Tensor};

/// Write one grey PGM per modality (`attn_<name>.pgm`) and all raw maps to
/// `attn_maps.mwca` in `dir`. Returns the written paths.
pub fn dump_attention_maps(
    block: &MwcaBlock,
    x: &Tensor,
    ys: &[Tensor],
    names: &[String],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let tape = Tape::inference();
    let maps = block.attention_mass(&tape, x, ys)?;
    let mut written = Vec::new();
    let mut raw = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let name = names
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("modality{i}"));
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let path = dir.join(format!("attn_{name}.pgm"));
        imgio::write_pgm(&path, w, h, &imgio::to_grey(map.data()))?;
        written.push(path);
        raw.push((format!("attention.{name}"), map.clone()));
    }
    let raw_path = dir.join("attn_maps.mwca");
    checkpoint::save(&raw_path, &raw)?;
    written.push(raw_path);
    Ok(written)
}

/// Row-major argmax of a 2D map; ties resolve to the lowest index so tests
/// are deterministic.
pub fn argmax_2d(map: &Tensor) -> (usize, usize) {
    assert_eq!(map.rank(), 2);
    let w = map.shape()[1];
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &v) in map.data().iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    (best.0 / w, best.0 % w)
}
