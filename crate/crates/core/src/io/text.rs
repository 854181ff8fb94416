//! Plain-text side files: affines and atlas manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;

use super::nifti::read_nifti;
use crate::atlas::ProbAtlas;
use crate::error::{Error, Result};
use crate::gem::SharingGroups;

/// Four rows of four numbers, one row per line. `#` starts a comment.
pub fn parse_affine(text: &str) -> Result<Matrix4<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("affine: bad number {t:?}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        return Err(Error::Format("affine must be 4 rows of 4 numbers".into()));
    }
    let m = Matrix4::from_fn(|r, c| rows[r][c]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("affine has non-finite entries".into()));
    }
    if m.fixed_view::<1, 4>(3, 0) != nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0) {
        return Err(Error::Format("affine last row must be 0 0 0 1".into()));
    }
    Ok(m)
}

/// Shortest round-trip representation of every entry.
pub fn format_affine(m: &Matrix4<f64>) -> String {
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:?}", m[(r, c)])).collect();
        writeln!(s, "{}", row.join(" ")).unwrap();
    }
    s
}

pub fn read_affine(path: &Path) -> Result<Matrix4<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_affine(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_affine(m: &Matrix4<f64>, path: &Path) -> Result<()> {
    fs::write(path, format_affine(m)).map_err(|e| Error::io(path, e))
}

/// One line of an atlas manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub channel: usize,
    pub name: String,
    pub background: bool,
    pub gaussian_group: usize,
    pub beta_group: usize,
    pub dsw_group: usize,
}

/// Atlas manifest: one line per channel,
/// `channel name role gaussian_group beta_group dsw_group`, with role
/// `background` or `foreground`. `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasManifest {
    /// Ordered by channel.
    pub entries: Vec<ManifestEntry>,
}

impl AtlasManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Format(format!("atlas manifest line {}: {m}", n + 1));
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 6 {
                return Err(err("expected `channel name role gaussian beta dsw`"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(&format!("bad integer {s:?}")));
            let background = match t[2] {
                "background" => true,
                "foreground" => false,
                other => return Err(err(&format!("role must be background or foreground, got {other:?}"))),
            };
            entries.push(ManifestEntry {
                channel: num(t[0])?,
                name: t[1].to_string(),
                background,
                gaussian_group: num(t[3])?,
                beta_group: num(t[4])?,
                dsw_group: num(t[5])?,
            });
        }
        entries.sort_by_key(|e| e.channel);
        if entries.iter().enumerate().any(|(k, e)| e.channel != k) {
            return Err(Error::Format("atlas manifest channels must be 0..C-1, each once".into()));
        }
        Ok(Self { entries })
    }

    /// Independent groups for every class.
    pub fn for_atlas(atlas: &ProbAtlas) -> Self {
        let entries = atlas
            .names()
            .iter()
            .zip(atlas.background())
            .enumerate()
            .map(|(k, (name, &background))| ManifestEntry {
                channel: k,
                name: name.clone(),
                background,
                gaussian_group: k,
                beta_group: k,
                dsw_group: k,
            })
            .collect();
        Self { entries }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# channel name role gaussian_group beta_group dsw_group\n");
        for e in &self.entries {
            let role = if e.background { "background" } else { "foreground" };
            writeln!(
                s,
                "{} {} {role} {} {} {}",
                e.channel, e.name, e.gaussian_group, e.beta_group, e.dsw_group
            )
            .unwrap();
        }
        s
    }

    pub fn sharing(&self) -> Result<SharingGroups> {
        SharingGroups::new(
            self.entries.iter().map(|e| e.gaussian_group).collect(),
            self.entries.iter().map(|e| e.beta_group).collect(),
            self.entries.iter().map(|e| e.dsw_group).collect(),
        )
    }
}

/// `atlas.nii.gz` → `atlas.txt`.
pub fn manifest_path(atlas: &Path) -> PathBuf {
    let name = atlas.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(name);
    atlas.with_file_name(format!("{stem}.txt"))
}

/// Reads an atlas volume and its manifest; returns the atlas and the
/// manifest's sharing groups.
pub fn read_atlas(path: &Path) -> Result<(ProbAtlas, SharingGroups)> {
    let probs = read_nifti(path)?;
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest =
        AtlasManifest::parse(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.entries.len() != probs.channels() {
        return Err(Error::Format(format!(
            "{} lists {} classes but the atlas has {} channels",
            mpath.display(),
            manifest.entries.len(),
            probs.channels()
        )));
    }
    let names = manifest.entries.iter().map(|e| e.name.clone()).collect();
    let bg = manifest.entries.iter().map(|e| e.background).collect();
    let atlas = ProbAtlas::new(probs, names)?.with_background(bg)?;
    Ok((atlas, manifest.sharing()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_text_round_trip_is_exact() {
        let m = Matrix4::new(0.1, 0.2, 1.0 / 3.0, -7.5, 1e-17, 1.0, 0.0, 2.0, 0.0, 0.0, 1.5, 3.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(parse_affine(&format_affine(&m)).unwrap(), m);
    }

    #[test]
    fn malformed_affines() {
        assert!(parse_affine("1 0 0 0\n0 1 0 0\n0 0 1 0\n").is_err());
        assert!(parse_affine("1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 1 1\n").is_err());
        assert!(parse_affine("1 0 0 x\n0 1 0 0\n0 0 1 0\n0 0 0 1\n").is_err());
        let m = parse_affine("# identity\n1 0 0 0\n0 1 0 0\n\n0 0 1 0\n0 0 0 1 # last\n").unwrap();
        assert_eq!(m, Matrix4::identity());
    }

    #[test]
    fn manifest_round_trip() {
        let text = "# c name role g b d\n1 wm foreground 1 1 1\n0 bg background 0 0 0\n2 wm_r foreground 1 2 2\n";
        let m = AtlasManifest::parse(text).unwrap();
        assert_eq!(m.entries[0].name, "bg");
        assert_eq!(AtlasManifest::parse(&m.to_text()).unwrap(), m);
        let s = m.sharing().unwrap();
        assert_eq!(s.gaussian_groups(), vec![vec![0], vec![1, 2]]);
    }

    #[test]
    fn manifest_errors() {
        assert!(AtlasManifest::parse("0 a background 0 0\n").is_err());
        assert!(AtlasManifest::parse("0 a middle 0 0 0\n").is_err());
        assert!(AtlasManifest::parse("1 a background 0 0 0\n").is_err());
    }

    #[test]
    fn manifest_path_strips_nifti_suffixes() {
        assert_eq!(manifest_path(Path::new("/d/atlas.nii.gz")), Path::new("/d/atlas.txt"));
        assert_eq!(manifest_path(Path::new("atlas.nii")), Path::new("atlas.txt"));
    }
}
