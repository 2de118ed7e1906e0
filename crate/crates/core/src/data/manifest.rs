//! Plain-text dataset manifests.
//!
//! ```text
//! # comments and blank lines are ignored
//! classes: background;circle;square
//! images/0000.ppm,0
//! images/0001.ppm,2,0.1,0.2,0.5,0.6
//! ```
//!
//! The `classes:` header must be the first non-comment line. Each record is
//! `path,label` optionally followed by a normalized `x1,y1,x2,y2` box.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::pnm;
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::tensor::Tensor;
use crate::train::{CompositeLossCfg, Dataset, DetectionTarget, Targets};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

fn parse_err(line: usize, detail: impl Into<String>) -> Error {
    Error::Parse { line, detail: detail.into() }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest> {
        let mut manifest: Option<Manifest> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some(m) = manifest.as_mut() else {
                let Some(rest) = line.strip_prefix("classes:") else {
                    return Err(parse_err(line_no, "expected `classes: name0;name1;...` header first"));
                };
                let names: Vec<String> = rest.split(';').map(|s| s.trim().to_string()).collect();
                if names.iter().any(String::is_empty) {
                    return Err(parse_err(line_no, "empty class name in header"));
                }
                manifest = Some(Manifest { class_names: names, records: Vec::new() });
                continue;
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 && fields.len() != 6 {
                return Err(parse_err(
                    line_no,
                    format!("expected 2 or 6 comma-separated fields, found {}", fields.len()),
                ));
            }
            if fields[0].is_empty() {
                return Err(parse_err(line_no, "empty path"));
            }
            let label: usize = fields[1]
                .parse()
                .map_err(|_| parse_err(line_no, format!("label `{}` is not a non-negative integer", fields[1])))?;
            if label >= m.class_names.len() {
                return Err(Error::data(format!(
                    "line {line_no}: label {label} outside the {} declared classes",
                    m.class_names.len()
                )));
            }
            let bbox = if fields.len() == 6 {
                let mut c = [0f32; 4];
                for (k, f) in fields[2..].iter().enumerate() {
                    c[k] =
                        f.parse().map_err(|_| parse_err(line_no, format!("box coordinate `{f}` is not a number")))?;
                    if !(0.0..=1.0).contains(&c[k]) {
                        return Err(Error::data(format!("line {line_no}: box coordinate {} outside [0, 1]", c[k])));
                    }
                }
                Some(BBox::new(c[0], c[1], c[2], c[3]))
            } else {
                None
            };
            m.records.push(ManifestRecord { path: fields[0].to_string(), label, bbox });
        }
        manifest.ok_or_else(|| parse_err(text.lines().count().max(1), "missing `classes:` header"))
    }

    /// Text form accepted by [`Manifest::parse`]; parsing it back yields an
    /// equal manifest.
    pub fn serialize(&self) -> Result<String> {
        let mut out = String::new();
        for name in &self.class_names {
            if name.is_empty() || name.contains([';', '\n', '\r']) || name.trim() != name {
                return Err(Error::data(format!("class name {name:?} cannot be written to a manifest")));
            }
        }
        writeln!(out, "classes: {}", self.class_names.join(";")).unwrap();
        for r in &self.records {
            if r.path.is_empty()
                || r.path.contains([',', '\n', '\r'])
                || r.path.trim() != r.path
                || r.path.starts_with('#')
            {
                return Err(Error::data(format!("path {:?} cannot be written to a manifest", r.path)));
            }
            match r.bbox {
                None => writeln!(out, "{},{}", r.path, r.label).unwrap(),
                Some(b) => writeln!(out, "{},{},{},{},{},{}", r.path, r.label, b.x1, b.y1, b.x2, b.y2).unwrap(),
            }
        }
        Ok(out)
    }

    pub fn has_boxes(&self) -> bool {
        self.records.iter().any(|r| r.bbox.is_some())
    }

    /// Reads every image (paths relative to `base`), resized to `res × res`
    /// and expanded to `channels`, and pairs it with its supervision.
    /// `detection` selects detection targets.
    pub fn load_dataset(&self, base: &Path, channels: usize, res: usize, detection: bool) -> Result<Dataset> {
        let per = channels * res * res;
        let mut data = Vec::with_capacity(self.records.len() * per);
        for r in &self.records {
            let img = pnm::read_image_pnm(&base.join(&r.path))?;
            let img = pnm::resize_nearest(&img, res, res);
            let img = pnm::to_channels(&img, channels).map_err(|e| Error::data(format!("{}: {e}", r.path)))?;
            data.extend_from_slice(img.data());
        }
        let images = Tensor::from_vec([self.records.len(), channels, res, res], data)?;
        let classes = self.class_names.len();
        let targets = if detection {
            Targets::Detection {
                targets: self.records.iter().map(|r| DetectionTarget { label: r.label, bbox: r.bbox }).collect(),
                cfg: CompositeLossCfg::new(classes),
            }
        } else {
            Targets::Labels(self.records.iter().map(|r| r.label).collect())
        };
        Dataset::new(images, targets, self.class_names.clone())
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(path)?)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    fs::write(path, manifest.serialize()?)?;
    Ok(())
}

/// Directory that relative manifest paths resolve against.
pub fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_one_record() {
        let m = Manifest::parse("classes: a;b\nimg.pgm,1\n").unwrap();
        assert_eq!(m.class_names, ["a", "b"]);
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].label, 1);
    }

    #[test]
    fn wrong_field_count_names_line() {
        let err = Manifest::parse("# c\nclasses: a;b\nx.pgm,0\nx.pgm,0,0.1,0.2,0.3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn boxes_are_canonicalized() {
        let m = Manifest::parse("classes: a;b\nx.ppm,1,0.1,0.2,0.5,0.6\ny.ppm,1,0.5,0.6,0.1,0.2\n").unwrap();
        assert_eq!(m.records[0].bbox.unwrap().coords(), [0.1, 0.2, 0.5, 0.6]);
        assert_eq!(m.records[1].bbox, m.records[0].bbox);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let err = Manifest::parse("classes: a;b\nx.pgm,2\n").unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(matches!(Manifest::parse("x.pgm,0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(Manifest::parse("classes: a;b\nx,0,0,0,2,1\n"), Err(Error::Data(_))));
    }

    #[test]
    fn serialize_is_a_fixed_point() {
        let text = "classes: bg;fg\n# note\na.ppm,0\nb.ppm,1,0.1,0.25,0.7,0.9\n";
        let m = Manifest::parse(text).unwrap();
        let s = m.serialize().unwrap();
        assert_eq!(Manifest::parse(&s).unwrap(), m);
        assert_eq!(Manifest::parse(&s).unwrap().serialize().unwrap(), s);
    }
}
