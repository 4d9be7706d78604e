//! CSV export and a compact little-endian binary format for [`ValueGrid`].
//!
//! Binary layout: magic `EXDPGRD1`, then `u32 d`, `u32 counts[d]`,
//! `f64 lo[d]`, `f64 hi[d]`, `u32 level`, `u64 n_steps`, `u64 save_every`,
//! `f64 horizon`, `f64 cfl_max`, `f64 min_weight`, 64 ASCII bytes of spec
//! hash, `u32 n_controls`, `u32 m`, `f64 controls[n_controls * m]`,
//! `u32 n_slices`, `f64 times[n_slices]`, `f64 values[..]`, `u8 has_argmax`
//! and, if set, `u32 argmax[..]`.

use std::io::{BufRead, Read, Write};

use super::{GridMeta, SpaceGrid, ValueGrid};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

const MAGIC: &[u8; 8] = b"EXDPGRD1";

/// Writes `t,x1..xd,v` rows, one per stored node.
pub fn write_csv<W: Write>(grid: &ValueGrid, mut w: W) -> Result<()> {
    let d = grid.space.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.push("v".into());
    writeln!(w, "{}", header.join(","))?;
    let mut x = vec![0.0; d];
    for (s, t) in grid.times.iter().enumerate() {
        for (node, v) in grid.slice(s).iter().enumerate() {
            grid.space.node_point(node, &mut x);
            let mut row = format!("{t:?}");
            for xi in &x {
                row.push_str(&format!(",{xi:?}"));
            }
            row.push_str(&format!(",{v:?}"));
            writeln!(w, "{row}")?;
        }
    }
    Ok(())
}

/// Reads a CSV written by [`write_csv`]. The layout is recovered from the
/// distinct coordinates per axis; the control data is not stored in CSV,
/// so the result carries no argmax and `spec` supplies the metadata.
pub fn read_csv<R: BufRead>(r: R, spec: &ProblemSpec, level: usize) -> Result<ValueGrid> {
    let d = spec.state_dim();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            let cols = line.split(',').count();
            if cols != d + 2 {
                return Err(Error::GridFormat(format!("header has {cols} columns, expected {}", d + 2)));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::GridFormat(format!("line {}: {e}", i + 1)))?;
        if row.len() != d + 2 {
            return Err(Error::GridFormat(format!("line {} has {} columns", i + 1, row.len())));
        }
        rows.push(row);
    }
    let distinct = |col: usize| -> Vec<f64> {
        let mut v: Vec<f64> = rows.iter().map(|r| r[col]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let times = distinct(0);
    let axes: Vec<Vec<f64>> = (1..=d).map(distinct).collect();
    let space = SpaceGrid::new(
        axes.iter().map(|a| a[0]).collect(),
        axes.iter().map(|a| a[a.len() - 1]).collect(),
        axes.iter().map(Vec::len).collect(),
    )?;
    let n_nodes = space.n_nodes();
    if rows.len() != times.len() * n_nodes {
        return Err(Error::GridFormat(format!(
            "{} rows do not form {} slices of {n_nodes} nodes",
            rows.len(),
            times.len()
        )));
    }
    let values = rows.iter().map(|r| r[d + 1]).collect();
    let n_steps = (times.len() - 1).max(1);
    Ok(ValueGrid {
        space,
        domain: spec.domain.clone(),
        times,
        values,
        argmax: None,
        controls: spec.control_space.level(level)?.mesh_points(),
        meta: GridMeta {
            spec_hash: spec.hash(),
            level,
            horizon: spec.horizon,
            n_steps,
            save_every: 1,
            cfl_max: f64::NAN,
            min_weight: f64::NAN,
        },
    })
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::GridFormat(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_binary<W: Write>(grid: &ValueGrid, mut w: W) -> Result<()> {
    let d = grid.space.dim();
    w.write_all(MAGIC)?;
    put_u32(&mut w, d)?;
    for &c in &grid.space.counts {
        put_u32(&mut w, c)?;
    }
    put_f64s(&mut w, &grid.space.lo)?;
    put_f64s(&mut w, &grid.space.hi)?;
    let meta = &grid.meta;
    put_u32(&mut w, meta.level)?;
    w.write_all(&(meta.n_steps as u64).to_le_bytes())?;
    w.write_all(&(meta.save_every as u64).to_le_bytes())?;
    put_f64s(&mut w, &[meta.horizon, meta.cfl_max, meta.min_weight])?;
    let hash = meta.spec_hash.as_bytes();
    if hash.len() != 64 {
        return Err(Error::GridFormat("spec hash must be 64 hex characters".into()));
    }
    w.write_all(hash)?;
    let m = grid.controls.first().map_or(0, Vec::len);
    put_u32(&mut w, grid.controls.len())?;
    put_u32(&mut w, m)?;
    for c in &grid.controls {
        put_f64s(&mut w, c)?;
    }
    put_u32(&mut w, grid.times.len())?;
    put_f64s(&mut w, &grid.times)?;
    put_f64s(&mut w, &grid.values)?;
    match &grid.argmax {
        Some(a) => {
            w.write_all(&[1])?;
            for &v in a {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| Error::GridFormat(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

/// Reads a grid written by [`write_binary`]; fails with
/// [`Error::HashMismatch`] unless it was solved for `spec`.
pub fn read_binary<R: Read>(r: R, spec: &ProblemSpec) -> Result<ValueGrid> {
    let mut c = Cursor { r };
    if &c.bytes::<8>()? != MAGIC {
        return Err(Error::GridFormat("bad magic".into()));
    }
    let d = c.u32()?;
    if d == 0 || d > 64 {
        return Err(Error::GridFormat(format!("implausible dimension {d}")));
    }
    let counts = (0..d).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let lo = c.f64s(d)?;
    let hi = c.f64s(d)?;
    let space = SpaceGrid::new(lo, hi, counts).map_err(|e| Error::GridFormat(e.to_string()))?;
    let level = c.u32()?;
    let n_steps = c.u64()?;
    let save_every = c.u64()?;
    let [horizon, cfl_max, min_weight]: [f64; 3] = c.f64s(3)?.try_into().expect("three values");
    let spec_hash = String::from_utf8(c.bytes::<64>()?.to_vec())
        .map_err(|_| Error::GridFormat("spec hash is not ASCII".into()))?;
    let expected = spec.hash();
    if spec_hash != expected {
        return Err(Error::HashMismatch {
            grid: spec_hash,
            spec: expected,
        });
    }
    let n_controls = c.u32()?;
    let m = c.u32()?;
    let controls = (0..n_controls).map(|_| c.f64s(m)).collect::<Result<Vec<_>>>()?;
    let n_slices = c.u32()?;
    let times = c.f64s(n_slices)?;
    let values = c.f64s(n_slices * space.n_nodes())?;
    let argmax = match c.bytes::<1>()?[0] {
        0 => None,
        1 => Some(
            (0..n_slices * space.n_nodes())
                .map(|_| c.u32().map(|v| v as u32))
                .collect::<Result<Vec<_>>>()?,
        ),
        other => return Err(Error::GridFormat(format!("bad argmax flag {other}"))),
    };
    Ok(ValueGrid {
        space,
        domain: spec.domain.clone(),
        times,
        values,
        argmax,
        controls,
        meta: GridMeta {
            spec_hash,
            level,
            horizon,
            n_steps,
            save_every,
            cfl_max,
            min_weight,
        },
    })
}
