//! ASCII PLY reader and writer for scenes.
//!
//! The vertex element carries exactly these properties, in order:
//! `float x y z nx ny nz red green blue`, `int semantic_label instance_id`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{io_err, MpaError, Result};
use crate::geom::Vec3;
use crate::scene::{is_object_class, Scene, ScenePoint, NUM_CLASSES};

const PROPERTIES: [(&str, &str); 11] = [
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("float", "nx"),
    ("float", "ny"),
    ("float", "nz"),
    ("float", "red"),
    ("float", "green"),
    ("float", "blue"),
    ("int", "semantic_label"),
    ("int", "instance_id"),
];

/// Renders a scene as ASCII PLY. Floats are written at `f32` precision.
pub fn scene_to_ply(scene: &Scene) -> String {
    let mut out = String::with_capacity(64 * scene.len() + 512);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", scene.len());
    for (ty, name) in PROPERTIES {
        let _ = writeln!(out, "property {ty} {name}");
    }
    out.push_str("end_header\n");
    for p in &scene.points {
        let f = |v: Vec3| v.map(|x| x as f32);
        let [x, y, z] = f(p.position);
        let [nx, ny, nz] = f(p.normal);
        let [r, g, b] = f(p.color);
        let _ = writeln!(out, "{x} {y} {z} {nx} {ny} {nz} {r} {g} {b} {} {}", p.semantic, p.instance);
    }
    out
}

/// Writes `<dir>/<scene_id>.ply` and returns its path.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format!("{}.ply", scene.scene_id));
    std::fs::write(&path, scene_to_ply(scene)).map_err(io_err(&path))?;
    Ok(path)
}

/// Reads a scene; its id is the file stem.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
    parse_scene(&text, id, path)
}

pub fn parse_scene(text: &str, scene_id: String, path: &Path) -> Result<Scene> {
    let err = |line: usize, msg: String| MpaError::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    let mut next_header = |expect: &str| -> Result<(usize, &str)> {
        loop {
            match lines.next() {
                Some((_, l)) if l.starts_with("comment") || l.starts_with("obj_info") => continue,
                Some(x) => return Ok(x),
                None => return Err(err(0, format!("unexpected end of file, expected {expect}"))),
            }
        }
    };

    let (n, l) = next_header("magic")?;
    if l != "ply" {
        return Err(err(n, format!("expected 'ply', found '{l}'")));
    }
    let (n, l) = next_header("format")?;
    if l != "format ascii 1.0" {
        return Err(err(n, format!("unsupported format line '{l}'")));
    }
    let (n, l) = next_header("element vertex")?;
    let count = match l.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["element", "vertex", c] => c.parse::<usize>().map_err(|e| err(n, format!("bad vertex count: {e}")))?,
        _ => return Err(err(n, format!("expected 'element vertex <count>', found '{l}'"))),
    };
    for (ty, name) in PROPERTIES {
        let (n, l) = next_header("property")?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts != ["property", ty, name] {
            return Err(err(n, format!("expected 'property {ty} {name}', found '{l}'")));
        }
    }
    let (n, l) = next_header("end_header")?;
    if l != "end_header" {
        return Err(err(n, format!("expected 'end_header', found '{l}'")));
    }

    let mut points = Vec::with_capacity(count);
    let mut last_line = n;
    for (n, l) in lines.by_ref() {
        if l.is_empty() {
            continue;
        }
        last_line = n;
        if points.len() == count {
            return Err(err(n, format!("more vertex rows than the declared {count}")));
        }
        let tokens: Vec<&str> = l.split_whitespace().collect();
        if tokens.len() != PROPERTIES.len() {
            return Err(err(n, format!("expected {} values, found {}", PROPERTIES.len(), tokens.len())));
        }
        let mut f = [0.0f64; 9];
        for (slot, tok) in f.iter_mut().zip(&tokens[..9]) {
            *slot = tok.parse::<f32>().map_err(|e| err(n, format!("bad float '{tok}': {e}")))? as f64;
        }
        let semantic: i64 = tokens[9].parse().map_err(|e| err(n, format!("bad semantic label: {e}")))?;
        let instance: i32 = tokens[10].parse().map_err(|e| err(n, format!("bad instance id: {e}")))?;
        if semantic < 0 || semantic as usize >= NUM_CLASSES {
            return Err(err(n, format!("semantic label {semantic} outside 0..{NUM_CLASSES}")));
        }
        let semantic = semantic as usize;
        if (instance >= 0) != is_object_class(semantic) || instance < -1 {
            return Err(err(n, format!("instance id {instance} inconsistent with class {semantic}")));
        }
        let normal = [f[3], f[4], f[5]];
        let len = crate::geom::norm(normal);
        if (len - 1.0).abs() > 1e-5 {
            return Err(err(n, format!("normal is not unit length ({len})")));
        }
        points.push(ScenePoint {
            position: [f[0], f[1], f[2]],
            normal,
            color: [f[6], f[7], f[8]],
            semantic,
            instance,
        });
    }
    if points.len() != count {
        return Err(err(last_line, format!("declared {count} vertices, found {}", points.len())));
    }
    Ok(Scene { scene_id, points })
}

/// Writes a bare point set (`x y z` plus one integer tag) for debugging dumps.
pub fn save_tagged_points(path: &Path, points: &[(Vec3, i64)], tag_name: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", points.len());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    let _ = writeln!(out, "property int {tag_name}");
    out.push_str("end_header\n");
    for (p, tag) in points {
        let [x, y, z] = p.map(|v| v as f32);
        let _ = writeln!(out, "{x} {y} {z} {tag}");
    }
    std::fs::write(path, out).map_err(io_err(path))
}
