//! Plain-text mesh file.
//!
//! ```text
//! meshcast-mesh v1
//! <N> <d> <F> <E>
//! N lines: d position coordinates
//! N lines: F feature values (empty line when F = 0)
//! E lines: <src> <dst>
//! N lines: 0 or 1 (1 = boundary node)
//! ```
//!
//! Fields on a line are separated by one space, every line ends with `\n`,
//! and reals use Rust's shortest round-trip formatting (`{:?}`), so a graph
//! survives a write/read cycle bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::MeshGraph;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MESH_MAGIC: &str = "meshcast-mesh v1";

fn join<T: Real>(out: &mut String, row: &[T]) {
    for (k, v) in row.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        write!(out, "{v:?}").expect("write to string");
    }
    out.push('\n');
}

pub fn write_mesh<T: Real, W: Write>(g: &MeshGraph<T>, mut w: W) -> Result<()> {
    let n = g.num_nodes();
    let mut s = String::new();
    writeln!(s, "{MESH_MAGIC}").unwrap();
    writeln!(s, "{} {} {} {}", n, g.dim, g.num_features, g.edges.len()).unwrap();
    for i in 0..n {
        join(&mut s, g.position(i));
    }
    for i in 0..n {
        join(&mut s, g.feature_row(i));
    }
    for &(a, b) in &g.edges {
        writeln!(s, "{a} {b}").unwrap();
    }
    for &b in &g.boundary {
        s.push(if b { '1' } else { '0' });
        s.push('\n');
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn parse_row<T: Real>(line: &str, width: usize, what: &str) -> Result<Vec<T>> {
    let row: Vec<T> = if line.is_empty() {
        Vec::new()
    } else {
        line.split(' ')
            .map(|tok| tok.parse::<T>().map_err(|_| Error::Parse(format!("bad real {tok:?} in {what}"))))
            .collect::<Result<_>>()?
    };
    if row.len() != width {
        return Err(Error::Parse(format!("{what}: expected {width} values, got {}", row.len())));
    }
    Ok(row)
}

pub fn read_mesh<T: Real, R: BufRead>(r: R) -> Result<MeshGraph<T>> {
    let mut lines = r.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("unexpected end of mesh file reading {what}")))?
            .map_err(Error::from)
    };
    if next("magic")? != MESH_MAGIC {
        return Err(Error::Parse("not a meshcast mesh file".into()));
    }
    let header = next("header")?;
    let dims: Vec<usize> = header
        .split(' ')
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [n, d, f, e] = dims[..] else {
        return Err(Error::Parse(format!("header needs 4 fields, got {header:?}")));
    };
    let mut positions = Vec::with_capacity(n * d);
    for _ in 0..n {
        positions.extend(parse_row::<T>(&next("positions")?, d, "positions")?);
    }
    let mut features = Vec::with_capacity(n * f);
    for _ in 0..n {
        features.extend(parse_row::<T>(&next("features")?, f, "features")?);
    }
    let mut edges = Vec::with_capacity(e);
    for _ in 0..e {
        let line = next("edges")?;
        let (a, b) = line
            .split_once(' ')
            .ok_or_else(|| Error::Parse(format!("bad edge {line:?}")))?;
        let parse = |t: &str| t.parse::<usize>().map_err(|_| Error::Parse(format!("bad edge {line:?}")));
        edges.push((parse(a)?, parse(b)?));
    }
    let mut boundary = Vec::with_capacity(n);
    for _ in 0..n {
        boundary.push(match next("boundary")?.as_str() {
            "0" => false,
            "1" => true,
            other => return Err(Error::Parse(format!("bad boundary flag {other:?}"))),
        });
    }
    MeshGraph::new(d, positions, f, features, edges, boundary)
}
