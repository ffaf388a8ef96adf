//! Best-effort reader for Kinect v2 `.skeleton` text dumps.
//!
//! Layout: frame count, then per frame a body count and per body one info
//! line (body id first), a joint count and one line per joint whose first
//! three values are camera-space `x y z`. Bodies are matched across frames
//! by id, in order of first appearance; frames where a body is absent are
//! zero.

use std::path::Path;

use crate::dataio::SkeletonSequence;
use crate::error::{Error, Result};

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            if !l.trim().is_empty() {
                return Ok((i + 1, l));
            }
        }
        Err(Error::parse(0, 1, "unexpected end of file"))
    }

    fn count(&mut self) -> Result<(usize, usize)> {
        let (line, text) = self.next_line()?;
        let n = text
            .trim()
            .parse()
            .map_err(|_| Error::parse(line, 1, format!("expected a count, found `{}`", text.trim())))?;
        Ok((line, n))
    }
}

/// Action label from a file name such as `S001C001P001R001A043`.
pub fn label_from_name(name: &str) -> Option<usize> {
    let i = name.rfind('A')?;
    let digits: String = name[i + 1..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse::<usize>().ok()?.checked_sub(1)
}

pub fn parse_ntu(text: &str, max_persons: usize, label: Option<usize>) -> Result<SkeletonSequence> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, frames) = lines.count()?;
    if frames == 0 {
        return Err(Error::parse(1, 1, "sequence has no frames"));
    }
    let mut joints = 0;
    let mut ids: Vec<String> = Vec::new();
    // Per body: frames of joints.
    let mut bodies: Vec<Vec<Vec<[f64; 3]>>> = Vec::new();
    for t in 0..frames {
        let (_, count) = lines.count()?;
        for _ in 0..count {
            let (_, info) = lines.next_line()?;
            let id = info.split_whitespace().next().unwrap_or("").to_string();
            let (jline, n) = lines.count()?;
            if joints == 0 {
                joints = n;
            } else if n != joints {
                return Err(Error::parse(jline, 1, format!("{n} joints, earlier bodies had {joints}")));
            }
            let mut pose = Vec::with_capacity(n);
            for _ in 0..n {
                let (line, text) = lines.next_line()?;
                let mut xyz = [0.0; 3];
                let mut toks = text.split_whitespace();
                for v in &mut xyz {
                    let tok = toks.next().ok_or_else(|| Error::parse(line, 1, "joint line too short"))?;
                    *v = tok
                        .parse()
                        .map_err(|_| Error::parse(line, 1, format!("invalid number `{tok}`")))?;
                }
                pose.push(xyz);
            }
            let slot = match ids.iter().position(|i| *i == id) {
                Some(s) => s,
                None => {
                    ids.push(id);
                    bodies.push(vec![Vec::new(); frames]);
                    bodies.len() - 1
                }
            };
            bodies[slot][t] = pose;
        }
    }
    if bodies.is_empty() {
        return Err(Error::Dataset("no bodies in any frame".into()));
    }
    // Keep the bodies present in the most frames.
    let mut order: Vec<usize> = (0..bodies.len()).collect();
    order.sort_by_key(|&b| std::cmp::Reverse(bodies[b].iter().filter(|f| !f.is_empty()).count()));
    order.truncate(max_persons.max(1));
    order.sort_unstable();
    let mut coords = Vec::with_capacity(order.len() * frames * joints * 3);
    for &b in &order {
        for f in &bodies[b] {
            if f.is_empty() {
                coords.resize(coords.len() + joints * 3, 0.0);
            } else {
                coords.extend(f.iter().flatten());
            }
        }
    }
    SkeletonSequence::new(joints, order.len(), frames, coords, label)
}

pub fn read_ntu(path: impl AsRef<Path>, max_persons: usize) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let label = path.file_stem().and_then(|s| label_from_name(&s.to_string_lossy()));
    parse_ntu(&text, max_persons, label).map_err(|e| e.in_file(path))
}
