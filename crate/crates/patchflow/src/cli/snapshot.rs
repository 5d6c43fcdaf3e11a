//! Resumable state snapshots.
//!
//! Layout: the PFLD header (`"PFLD"`, u32 n, u64 count, little-endian),
//! then positions, DX row-major, detDX, rho0 as float64 blocks, then a
//! `"PFXS"` extension block carrying everything else needed to resume a run
//! bit-for-bit (time, lattice geometry, weights, patch shape, coverage
//! grid, tracers).

use crate::fields::GridField;
use crate::flow::{FlowState, PatchShape};
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PFLD";
const EXT_MAGIC: &[u8; 4] = b"PFXS";

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_i64s(out: &mut Vec<u8>, xs: &[i64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> io::Result<&'a [u8]> {
        if self.buf.len() < k {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "snapshot truncated",
            ));
        }
        let (head, tail) = self.buf.split_at(k);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> io::Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, k: usize) -> io::Result<Vec<f64>> {
        let raw = self.take(8 * k)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i64s(&mut self, k: usize) -> io::Result<Vec<i64>> {
        let raw = self.take(8 * k)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn write_snapshot(s: &FlowState<f64>, path: &Path) -> io::Result<()> {
    let n = s.n;
    let count = s.len();
    let mut out = Vec::with_capacity(count * (n * n + 2 * n + 2) * 8 + 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    put_f64s(&mut out, &s.x);
    put_f64s(&mut out, &s.dx);
    put_f64s(&mut out, &s.det_dx);
    put_f64s(&mut out, &s.rho0);
    out.extend_from_slice(EXT_MAGIC);
    put_f64s(&mut out, &[s.t, s.h]);
    put_f64s(&mut out, &s.origin);
    put_f64s(&mut out, &s.alpha);
    put_f64s(&mut out, &s.weight);
    put_i64s(&mut out, &s.lattice);
    match &s.patch {
        None => out.push(0),
        Some(PatchShape::Ball { center, radius }) => {
            out.push(1);
            put_f64s(&mut out, center);
            put_f64s(&mut out, &[*radius]);
        }
        Some(PatchShape::Annulus {
            center,
            inner,
            outer,
        }) => {
            out.push(2);
            put_f64s(&mut out, center);
            put_f64s(&mut out, &[*inner, *outer]);
        }
    }
    match &s.rho0_grid {
        None => out.push(0),
        Some(g) => {
            out.push(1);
            for &d in &g.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, &g.origin);
            put_f64s(&mut out, &[g.h]);
            out.extend_from_slice(&(g.comps as u64).to_le_bytes());
            out.extend_from_slice(&(g.data.len() as u64).to_le_bytes());
            put_f64s(&mut out, &g.data);
        }
    }
    let tracers = s.tracer_alpha.len() / n.max(1);
    out.extend_from_slice(&(tracers as u64).to_le_bytes());
    put_f64s(&mut out, &s.tracer_alpha);
    put_f64s(&mut out, &s.tracer_x);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)
}

pub fn read_snapshot(path: &Path) -> io::Result<FlowState<f64>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader { buf: &raw };
    if r.take(4)? != MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "bad snapshot magic",
        ));
    }
    let n = r.u32()? as usize;
    let count = r.u64()? as usize;
    let x = r.f64s(count * n)?;
    let dx = r.f64s(count * n * n)?;
    let det_dx = r.f64s(count)?;
    let rho0 = r.f64s(count)?;
    if r.take(4)? != EXT_MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "missing snapshot extension block",
        ));
    }
    let t = r.f64()?;
    let h = r.f64()?;
    let origin = r.f64s(n)?;
    let alpha = r.f64s(count * n)?;
    let weight = r.f64s(count)?;
    let lattice = r.i64s(count * n)?;
    let patch = match r.u8()? {
        0 => None,
        1 => Some(PatchShape::Ball {
            center: r.f64s(n)?,
            radius: r.f64()?,
        }),
        2 => Some(PatchShape::Annulus {
            center: r.f64s(n)?,
            inner: r.f64()?,
            outer: r.f64()?,
        }),
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unknown patch tag {other}"),
            ))
        }
    };
    let rho0_grid = match r.u8()? {
        0 => None,
        _ => {
            let mut dims = Vec::with_capacity(n);
            for _ in 0..n {
                dims.push(r.u64()? as usize);
            }
            let gorigin = r.f64s(n)?;
            let gh = r.f64()?;
            let comps = r.u64()? as usize;
            let len = r.u64()? as usize;
            Some(GridField {
                n,
                dims,
                origin: gorigin,
                h: gh,
                comps,
                data: r.f64s(len)?,
            })
        }
    };
    let tracers = r.u64()? as usize;
    let tracer_alpha = r.f64s(tracers * n)?;
    let tracer_x = r.f64s(tracers * n)?;
    Ok(FlowState {
        n,
        h,
        t,
        origin,
        alpha,
        x,
        dx,
        det_dx,
        rho0,
        weight,
        lattice,
        patch,
        rho0_grid,
        tracer_alpha,
        tracer_x,
    })
}
