//! Class activation maps for GAP-based classifier heads, in three analytical
//! variants, plus CSV/PGM export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::attention::sa_forward;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which head produced a class activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamProvenance {
    Gap,
    Sa,
    FullFc,
}

/// Single-channel spatial contribution map for one class.
#[derive(Debug, Clone)]
pub struct Cam {
    pub values: Tensor,
    pub class_id: usize,
    pub provenance: CamProvenance,
}

/// Export format for [`heatmap_export`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

fn check_weights(op: &'static str, f: &Tensor, w_c: &Tensor) -> Result<()> {
    if f.rank() != 3 {
        return Err(Error::shape(op, format!("feature map {:?}", f.shape())));
    }
    if w_c.rank() != 1 || w_c.len() != f.shape()[0] {
        return Err(Error::shape(
            op,
            format!(
                "class weights {:?} vs {} channels",
                w_c.shape(),
                f.shape()[0]
            ),
        ));
    }
    Ok(())
}

/// Plain-GAP activation map: per-position inner product of the channel fiber
/// with the class weights.
pub fn cam_gap(f: &Tensor, w_c: &Tensor, class_id: usize) -> Result<Cam> {
    check_weights("cam_gap", f, w_c)?;
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut values = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in 0..c {
                acc += w_c.data()[k] * f.at3(k, i, j);
            }
            *values.at2_mut(i, j) = acc;
        }
    }
    Ok(Cam {
        values,
        class_id,
        provenance: CamProvenance::Gap,
    })
}

/// Attention-weighted activation map: the plain-GAP map rescaled positionwise
/// by the attention weights `p` computed from `f` itself.
pub fn cam_sa(f: &Tensor, w_c: &Tensor, class_id: usize) -> Result<Cam> {
    check_weights("cam_sa", f, w_c)?;
    let base = cam_gap(f, w_c, class_id)?;
    let (_, att, _) = sa_forward(f)?;
    let mut values = base.values;
    for (v, pv) in values.data_mut().iter_mut().zip(att.p.data()) {
        *v *= pv;
    }
    Ok(Cam {
        values,
        class_id,
        provenance: CamProvenance::Sa,
    })
}

/// Activation map of a position-wise fully-connected head: per-position dot
/// product with position-specific weights `w_full [H x W x C]`.
pub fn cam_full_fc(f: &Tensor, w_full: &Tensor, class_id: usize) -> Result<Cam> {
    if f.rank() != 3 {
        return Err(Error::shape("cam_full_fc", format!("feature map {:?}", f.shape())));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if w_full.shape() != [h, w, c] {
        return Err(Error::shape(
            "cam_full_fc",
            format!("weights {:?} vs [{h}, {w}, {c}]", w_full.shape()),
        ));
    }
    let mut values = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in 0..c {
                acc += w_full.at3(i, j, k) * f.at3(k, i, j);
            }
            *values.at2_mut(i, j) = acc;
        }
    }
    Ok(Cam {
        values,
        class_id,
        provenance: CamProvenance::FullFc,
    })
}

/// Quantizes a map to 8-bit gray by affine min-max normalization; a constant
/// map exports as mid-gray 128.
pub fn quantize_gray(values: &Tensor) -> Vec<u8> {
    let min = values.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![128; values.len()];
    }
    values
        .data()
        .iter()
        .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
        .collect()
}

/// Writes a CAM to disk as headerless CSV (one row per `i`, full-precision
/// decimals) or as binary 8-bit PGM (P5) after min-max normalization.
pub fn heatmap_export(cam: &Cam, path: &Path, format: HeatmapFormat) -> Result<()> {
    if !cam.values.is_finite() {
        return Err(Error::NonFinite(format!(
            "heatmap for class {}",
            cam.class_id
        )));
    }
    let (h, w) = (cam.values.shape()[0], cam.values.shape()[1]);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        HeatmapFormat::Csv => {
            for i in 0..h {
                let row: Vec<String> = (0..w)
                    .map(|j| format!("{}", cam.values.at2(i, j)))
                    .collect();
                writeln!(out, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
            }
        }
        HeatmapFormat::Pgm => {
            write!(out, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
            out.write_all(&quantize_gray(&cam.values))
                .map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses a headerless CSV written by [`heatmap_export`] back into a tensor.
pub fn parse_heatmap_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|tok| tok.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::parse(path, format!("line {}: {e}", ln + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(path, format!("ragged row at line {}", ln + 1)));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, "empty heatmap csv"));
    }
    let (h, w) = (rows.len(), rows[0].len());
    Tensor::from_vec(&[h, w], rows.into_iter().flatten().collect())
}
