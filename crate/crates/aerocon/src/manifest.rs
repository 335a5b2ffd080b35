//! Text indexes of patch and mosaic directories.

use std::fmt::Write as _;

use aerocon_core::data::{AnimalKind, BBox};

pub const MANIFEST_HEADER: &str = "#kwd-manifest v1";
pub const BOXES_HEADER: &str = "#kwd-boxes v1";

/// One patch: where its image lives and where it was cut from. Unlabeled
/// patches carry no label (written as `-`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub path: String,
    pub label: Option<u8>,
    pub split: String,
    pub mosaic: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

fn token<'a>(it: &mut impl Iterator<Item = &'a str>, line: usize, what: &str) -> Result<&'a str, String> {
    it.next().ok_or_else(|| format!("line {line}: missing {what}"))
}

fn number(s: &str, line: usize, what: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("line {line}: bad {what} {s:?}"))
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let label = e.label.map_or_else(|| "-".to_string(), |l| l.to_string());
            writeln!(out, "{} {} {} {} {} {}", e.path, label, e.split, e.mosaic, e.x, e.y).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(format!("first line must be {MANIFEST_HEADER:?}"));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            let path = token(&mut it, n, "path")?.to_string();
            let label = match token(&mut it, n, "label")? {
                "-" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => return Err(format!("line {n}: label {other:?} is not 0, 1 or -")),
            };
            let split = token(&mut it, n, "split")?.to_string();
            let mosaic = number(token(&mut it, n, "mosaic id")?, n, "mosaic id")?;
            let x = number(token(&mut it, n, "x")?, n, "x")?;
            let y = number(token(&mut it, n, "y")?, n, "y")?;
            if it.next().is_some() {
                return Err(format!("line {n}: trailing fields"));
            }
            entries.push(Entry {
                path,
                label,
                split,
                mosaic,
                x,
                y,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.split == name)
    }
}

/// Ground-truth boxes of a mosaic collection, one line per animal:
/// `<mosaic-id> <x> <y> <w> <h> <kind>`.
pub fn render_boxes(boxes: &[(usize, BBox)]) -> String {
    let mut out = String::from(BOXES_HEADER);
    out.push('\n');
    for (m, b) in boxes {
        writeln!(out, "{m} {} {} {} {} {}", b.x, b.y, b.w, b.h, b.kind.as_str()).unwrap();
    }
    out
}

pub fn parse_boxes(text: &str) -> Result<Vec<(usize, BBox)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(BOXES_HEADER) {
        return Err(format!("first line must be {BOXES_HEADER:?}"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(' ').collect();
        let [m, x, y, w, h, kind] = f[..] else {
            return Err(format!("line {n}: expected 6 fields"));
        };
        let kind = AnimalKind::parse(kind).ok_or_else(|| format!("line {n}: unknown kind {kind:?}"))?;
        out.push((
            number(m, n, "mosaic id")?,
            BBox {
                x: number(x, n, "x")?,
                y: number(y, n, "y")?,
                w: number(w, n, "w")?,
                h: number(h, n, "h")?,
                kind,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            entries: vec![
                Entry {
                    path: "train/000000.ppm".into(),
                    label: Some(1),
                    split: "train".into(),
                    mosaic: 4,
                    x: 10,
                    y: 20,
                },
                Entry {
                    path: "pre/000001.ppm".into(),
                    label: None,
                    split: "pre".into(),
                    mosaic: 0,
                    x: 0,
                    y: 3,
                },
            ],
        };
        let text = m.render();
        assert_eq!(
            text,
            "#kwd-manifest v1\ntrain/000000.ppm 1 train 4 10 20\npre/000001.ppm - pre 0 0 3\n"
        );
        assert_eq!(Manifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn manifest_errors() {
        assert!(Manifest::parse("a 1 train 0 0 0\n").is_err());
        assert!(Manifest::parse("#kwd-manifest v1\na 2 train 0 0 0\n").is_err());
        assert!(Manifest::parse("#kwd-manifest v1\na 1 train 0 0\n").is_err());
    }

    #[test]
    fn boxes_round_trip() {
        let b = vec![(
            2,
            BBox {
                x: 1,
                y: 2,
                w: 3,
                h: 4,
                kind: AnimalKind::BeneathTree,
            },
        )];
        let text = render_boxes(&b);
        assert_eq!(parse_boxes(&text).unwrap(), b);
    }
}
