//! Benchmark-style prediction files.
//!
//! `<dir>/<scene_id>.txt` lists one object per line as
//! `predicted_masks/<scene_id>_<k>.txt <class> <confidence>`, and each mask
//! file holds one `0`/`1` line per scene point.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::aggregate::FinalObject;
use crate::error::{io_err, MpaError, Result};

pub const MASK_DIR: &str = "predicted_masks";

pub fn summary_path(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join(format!("{scene_id}.txt"))
}

pub fn write_predictions(dir: &Path, scene_id: &str, num_points: usize, objects: &[FinalObject]) -> Result<()> {
    let masks = dir.join(MASK_DIR);
    std::fs::create_dir_all(&masks).map_err(io_err(&masks))?;
    let mut summary = String::new();
    for (k, obj) in objects.iter().enumerate() {
        let name = format!("{MASK_DIR}/{scene_id}_{k}.txt");
        let _ = writeln!(summary, "{name} {} {:.6}", obj.class, obj.confidence);
        let mut bits = vec![b'0'; num_points];
        for &i in &obj.points {
            if i >= num_points {
                return Err(MpaError::Invalid(format!("mask index {i} outside {num_points} points")));
            }
            bits[i] = b'1';
        }
        let mut text = String::with_capacity(2 * num_points);
        for b in bits {
            text.push(b as char);
            text.push('\n');
        }
        let path = dir.join(&name);
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    let path = summary_path(dir, scene_id);
    std::fs::write(&path, summary).map_err(io_err(&path))
}

/// Reads predictions for one scene; a missing summary file yields `None`.
pub fn read_predictions(dir: &Path, scene_id: &str, num_points: usize) -> Result<Option<Vec<FinalObject>>> {
    let path = summary_path(dir, scene_id);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let parse_err = |line: usize, msg: String| MpaError::Parse { path: path.clone(), line, msg };
    let mut objects = Vec::new();
    for (n, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [mask, class, conf] = parts.as_slice() else {
            return Err(parse_err(n, format!("expected '<mask> <class> <confidence>', found '{line}'")));
        };
        let class: usize = class.parse().map_err(|e| parse_err(n, format!("bad class: {e}")))?;
        let confidence: f64 = conf.parse().map_err(|e| parse_err(n, format!("bad confidence: {e}")))?;
        let mask_path = dir.join(mask);
        let bits = std::fs::read_to_string(&mask_path).map_err(io_err(&mask_path))?;
        let mut points = Vec::new();
        let mut count = 0;
        for (i, b) in bits.lines().enumerate() {
            match b.trim() {
                "0" => {}
                "1" => points.push(i),
                other => {
                    return Err(MpaError::Parse {
                        path: mask_path.clone(),
                        line: i + 1,
                        msg: format!("expected 0 or 1, found '{other}'"),
                    })
                }
            }
            count += 1;
        }
        if count != num_points {
            return Err(MpaError::Parse {
                path: mask_path,
                line: count,
                msg: format!("{count} mask lines for {num_points} scene points"),
            });
        }
        objects.push(FinalObject { points, class, confidence });
    }
    Ok(Some(objects))
}
