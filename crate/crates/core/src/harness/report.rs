use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, write_atomic, AblationTable, Result, RunRecord};
use crate::losses::{location_loss_between, scale_weight, Centroid, LocationKind};

/// `pred_pixels gt_pixels w` for pixel counts `1..=max_pixels`, normalized by
/// `area`. Tab-separated with a header line.
pub fn weight_grid(max_pixels: usize, step: usize, area: usize) -> Result<String> {
    let mut s = String::from("pred_pixels\tgt_pixels\tw\n");
    let counts: Vec<usize> = (1..=max_pixels).step_by(step.max(1)).collect();
    for &p in &counts {
        for &g in &counts {
            let w = scale_weight(p as f64 / area as f64, g as f64 / area as f64)?;
            s.push_str(&format!("{p}\t{g}\t{w}\n"));
        }
    }
    Ok(s)
}

/// Location term of every variant for a predicted centroid displaced by
/// `(dx, dy)` from a ground-truth centroid in the middle of a `dims` image.
pub fn location_grid(max_offset: i64, step: usize, dims: (usize, usize)) -> Result<String> {
    let (h, w) = dims;
    let gt = Centroid {
        x: (w as f64 + 1.0) / 2.0,
        y: (h as f64 + 1.0) / 2.0,
    };
    let mut s = String::from("dx\tdy\tpolar\tl1\tl2\n");
    for dy in (-max_offset..=max_offset).step_by(step.max(1)) {
        for dx in (-max_offset..=max_offset).step_by(step.max(1)) {
            let pred = Centroid {
                x: gt.x + dx as f64,
                y: gt.y + dy as f64,
            };
            let v = [LocationKind::Polar, LocationKind::L1, LocationKind::L2]
                .iter()
                .map(|&k| location_loss_between(pred, gt, k, dims))
                .collect::<std::result::Result<Vec<f64>, _>>()?;
            s.push_str(&format!("{dx}\t{dy}\t{}\t{}\t{}\n", v[0], v[1], v[2]));
        }
    }
    Ok(s)
}

/// `label seed epoch loss`, epoch 0 being the loss before training.
pub fn loss_curves(records: &[RunRecord]) -> String {
    let mut s = String::from("label\tseed\tepoch\tloss\n");
    for r in records {
        s.push_str(&format!("{}\t{}\t0\t{}\n", r.label, r.seed, r.initial_loss.loss));
        for e in &r.history {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.label, r.seed, e.epoch, e.loss));
        }
    }
    s
}

/// Writes `records.json`, `loss_curves.tsv`, `weight_grid.tsv`,
/// `location_grid.tsv` and, given a table, `comparison.csv` and
/// `comparison.json`. Returns the written paths.
pub fn emit_report(records: &[RunRecord], table: Option<&AblationTable>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut files: Vec<(&str, String)> = vec![
        ("records.json", serde_json::to_string_pretty(records).expect("records serialize")),
        ("loss_curves.tsv", loss_curves(records)),
        ("weight_grid.tsv", weight_grid(100, 1, 256 * 256)?),
        ("location_grid.tsv", location_grid(100, 5, (256, 256))?),
    ];
    if let Some(t) = table {
        files.push(("comparison.csv", t.to_csv()));
        files.push(("comparison.json", t.to_json()));
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = out_dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
