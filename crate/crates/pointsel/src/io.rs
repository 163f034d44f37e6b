//! Dataset file formats: "x,y,z" point text files, "path,label" manifests,
//! and OFF meshes (vertices read directly, faces used for area-weighted
//! surface sampling).

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{cross, norm, sub, Point3, PointCloud, RngSeed};

fn parse_err(context: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.display().to_string(),
        message: message.into(),
    }
}

/// Read a point cloud from text, one "x,y,z" line per point.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut positions = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, format!("line {}: expected x,y,z", lineno + 1)));
        }
        let mut p = [0.0; 3];
        for (axis, field) in fields.iter().enumerate() {
            p[axis] = field
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?;
        }
        positions.push(p);
    }
    if positions.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let mut cloud = PointCloud::new(positions);
    cloud.id = path.display().to_string();
    Ok(cloud)
}

/// Write a point cloud as "x,y,z" lines.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::new();
    for p in &cloud.positions {
        out.push_str(&format!("{},{},{}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a dataset manifest: one "path,label_index" line per sample.
/// Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(std::path::PathBuf, usize)>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (sample_path, label) = line
            .rsplit_once(',')
            .ok_or_else(|| parse_err(path, format!("line {}: expected path,label", lineno + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?;
        entries.push((base.join(sample_path.trim()), label));
    }
    Ok(entries)
}

/// Load one sample file as a cloud of `points` points. OFF meshes are
/// surface-sampled; xyz text files are used as-is.
pub fn load_sample(path: &Path, points: usize, seed: RngSeed) -> Result<PointCloud> {
    let is_off = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("off"))
        .unwrap_or(false);
    if is_off {
        let mesh = read_off(path)?;
        Ok(sample_mesh_surface(&mesh, points, seed))
    } else {
        read_xyz(path)
    }
}

/// Triangle mesh read from an OFF file. Faces with more than three
/// vertices are fan-triangulated.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn read_off(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path)?;
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
        .into_iter();

    let header = tokens.next().ok_or_else(|| parse_err(path, "empty file"))?;
    // Some exporters glue the counts onto the OFF keyword ("OFF490 518 0").
    let mut pending: Vec<String> = Vec::new();
    if let Some(rest) = header.strip_prefix("OFF") {
        if !rest.is_empty() {
            pending.push(rest.to_string());
        }
    } else {
        return Err(parse_err(path, "missing OFF header"));
    }
    let mut next = move || pending.pop().or_else(|| tokens.next());

    let take_usize = |what: &str, next: &mut dyn FnMut() -> Option<String>| -> Result<usize> {
        next()
            .ok_or_else(|| parse_err(path, format!("missing {what}")))?
            .parse()
            .map_err(|e| parse_err(path, format!("{what}: {e}")))
    };
    let n_vertices = take_usize("vertex count", &mut next)?;
    let n_faces = take_usize("face count", &mut next)?;
    let _n_edges = take_usize("edge count", &mut next)?;

    let take_f64 = |what: &str, next: &mut dyn FnMut() -> Option<String>| -> Result<f64> {
        next()
            .ok_or_else(|| parse_err(path, format!("missing {what}")))?
            .parse()
            .map_err(|e| parse_err(path, format!("{what}: {e}")))
    };

    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let x = take_f64("vertex", &mut next)?;
        let y = take_f64("vertex", &mut next)?;
        let z = take_f64("vertex", &mut next)?;
        vertices.push([x, y, z]);
    }
    let mut triangles = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let arity = take_usize("face arity", &mut next)?;
        let mut idx = Vec::with_capacity(arity);
        for _ in 0..arity {
            let v = take_usize("face index", &mut next)?;
            if v >= n_vertices {
                return Err(parse_err(path, format!("face index {v} out of range")));
            }
            idx.push(v);
        }
        for k in 1..arity.saturating_sub(1) {
            triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    if vertices.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(Mesh { vertices, triangles })
}

/// Sample `points` points on the mesh surface, triangle picked
/// proportionally to area. Falls back to vertex resampling for meshes
/// without faces.
pub fn sample_mesh_surface(mesh: &Mesh, points: usize, seed: RngSeed) -> PointCloud {
    let mut rng = seed.rng();
    let areas: Vec<f64> = mesh
        .triangles
        .iter()
        .map(|t| {
            let a = mesh.vertices[t[0]];
            let e1 = sub(mesh.vertices[t[1]], a);
            let e2 = sub(mesh.vertices[t[2]], a);
            0.5 * norm(cross(e1, e2))
        })
        .collect();
    let total: f64 = areas.iter().sum();
    let mut positions = Vec::with_capacity(points);
    if total <= 1e-300 {
        for _ in 0..points {
            let v = mesh.vertices[rng.gen_range(0..mesh.vertices.len())];
            positions.push(v);
        }
    } else {
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cdf.push(acc);
        }
        for _ in 0..points {
            let u = rng.gen::<f64>() * total;
            let ti = cdf.partition_point(|&c| c < u).min(areas.len() - 1);
            let t = mesh.triangles[ti];
            // uniform barycentric sample
            let mut r1: f64 = rng.gen();
            let mut r2: f64 = rng.gen();
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            let a = mesh.vertices[t[0]];
            let b = mesh.vertices[t[1]];
            let c = mesh.vertices[t[2]];
            positions.push([
                a[0] + r1 * (b[0] - a[0]) + r2 * (c[0] - a[0]),
                a[1] + r1 * (b[1] - a[1]) + r2 * (c[1] - a[1]),
                a[2] + r1 * (b[2] - a[2]) + r2 * (c[2] - a[2]),
            ]);
        }
    }
    PointCloud::new(positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn xyz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");
        let cloud = PointCloud::new(vec![[1.5, -2.0, 0.25], [0.0, 3.0, -1.0]]);
        write_xyz(&path, &cloud).unwrap();
        let back = read_xyz(&path).unwrap();
        assert_eq!(cloud.positions, back.positions);
    }

    #[test]
    fn manifest_parses_paths_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "a/cloud0.xyz,0").unwrap();
        writeln!(f, "b/cloud1.xyz,3").unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].1, 3);
        assert!(entries[0].0.ends_with("a/cloud0.xyz"));
    }

    #[test]
    fn off_unit_square_samples_in_plane() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("square.off");
        std::fs::write(
            &path,
            "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n",
        )
        .unwrap();
        let mesh = read_off(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        assert_eq!(mesh.triangles.len(), 2);
        let cloud = sample_mesh_surface(&mesh, 256, RngSeed(1));
        assert_eq!(cloud.len(), 256);
        for p in &cloud.positions {
            assert!(p[2].abs() < 1e-12);
            assert!((-1e-12..=1.0 + 1e-12).contains(&p[0]));
            assert!((-1e-12..=1.0 + 1e-12).contains(&p[1]));
        }
    }

    #[test]
    fn off_bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.off");
        std::fs::write(&path, "PLY\n0 0 0\n").unwrap();
        assert!(read_off(&path).is_err());
    }
}
