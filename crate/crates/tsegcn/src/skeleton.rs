//! Graph description files and the bundled skeletons.
//!
//! ```text
//! # comment
//! n=3
//! name 0 root        (optional joint labels)
//! 0 1
//! 1 2
//! ```
//!
//! `;` may separate statements on one line.

use std::fs;
use std::path::Path;

use tsegcn_core::SkeletonGraph;

use crate::error::{Error, Result};

pub const KINECT_V2: &str = include_str!("../skeletons/kinect_v2.graph");
pub const TOY9: &str = include_str!("../skeletons/toy9.graph");

/// Left/right relabelling of the toy skeleton.
pub const TOY9_MIRROR: [usize; 9] = [0, 1, 2, 3, 4, 7, 8, 5, 6];

pub fn kinect_v2() -> SkeletonGraph {
    parse_graph(KINECT_V2).expect("bundled skeleton is valid")
}

pub fn toy9() -> SkeletonGraph {
    parse_graph(TOY9).expect("bundled skeleton is valid")
}

/// Bundled skeleton by name (`kinect_v2`, `toy9`).
pub fn bundled(name: &str) -> Option<SkeletonGraph> {
    match name {
        "kinect_v2" | "ntu" => Some(kinect_v2()),
        "toy9" | "toy" => Some(toy9()),
        _ => None,
    }
}

/// Bundled name or path to a graph file.
pub fn resolve(spec: &str) -> Result<SkeletonGraph> {
    match bundled(spec) {
        Some(g) => Ok(g),
        None => load_graph(spec),
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<SkeletonGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text).map_err(|e| e.in_file(path))
}

fn parse_index(tok: &str, line: usize, column: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::parse(line, column, format!("expected a joint index, found `{tok}`")))
}

pub fn parse_graph(text: &str) -> Result<SkeletonGraph> {
    let mut n: Option<(usize, usize)> = None;
    let mut edges = Vec::new();
    let mut names: Vec<Option<String>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut offset = 0;
        for stmt in content.split(';') {
            let column = offset + stmt.len() - stmt.trim_start().len() + 1;
            offset += stmt.len() + 1;
            let stmt = stmt.trim();
            if stmt.is_empty() {
                continue;
            }
            let Some((count, _)) = n else {
                let value = stmt
                    .strip_prefix("n=")
                    .or_else(|| stmt.strip_prefix("n ="))
                    .ok_or_else(|| Error::parse(line, column, "expected `n=<joints>` before edges"))?;
                let count = value
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse(line, column, format!("invalid joint count `{}`", value.trim())))?;
                if count == 0 {
                    return Err(Error::parse(line, column, "joint count must be positive"));
                }
                n = Some((count, line));
                names = vec![None; count];
                continue;
            };
            let toks: Vec<&str> = stmt.split_whitespace().collect();
            if toks[0] == "name" {
                if toks.len() != 3 {
                    return Err(Error::parse(line, column, "expected `name <index> <label>`"));
                }
                let i = parse_index(toks[1], line, column)?;
                if i >= count {
                    return Err(Error::parse(line, column, format!("joint {i} out of range for n={count}")));
                }
                names[i] = Some(toks[2].to_string());
                continue;
            }
            if toks.len() != 2 {
                return Err(Error::parse(line, column, format!("expected `<i> <j>`, found `{stmt}`")));
            }
            let i = parse_index(toks[0], line, column)?;
            let j = parse_index(toks[1], line, column)?;
            if i >= count || j >= count {
                return Err(Error::parse(
                    line,
                    column,
                    format!("edge ({i}, {j}) out of range for n={count}"),
                ));
            }
            if i == j {
                return Err(Error::parse(line, column, format!("self-loop on joint {i}")));
            }
            edges.push((i, j));
        }
    }
    let (count, header_line) = n.ok_or_else(|| Error::parse(1, 1, "missing `n=<joints>` header"))?;
    let g = SkeletonGraph::new(count, edges).map_err(|e| Error::parse(header_line, 1, e.to_string()))?;
    if names.iter().all(Option::is_some) {
        Ok(g.with_names(names.into_iter().flatten().collect())?)
    } else {
        Ok(g)
    }
}

/// Text form accepted by [`parse_graph`].
pub fn format_graph(g: &SkeletonGraph) -> String {
    let mut out = format!("n={}\n", g.n());
    if let Some(names) = g.names() {
        for (i, name) in names.iter().enumerate() {
            out.push_str(&format!("name {i} {name}\n"));
        }
    }
    for &(i, j) in g.edges() {
        out.push_str(&format!("{i} {j}\n"));
    }
    out
}
