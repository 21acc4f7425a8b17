//! Versioned little-endian binary container for scenes and training state.
//!
//! ```text
//! magic "DOFSPLAT" | u32 version
//! u8 sh_degree | u64 n | n x 23 f64 (center, quaternion wxyz, scale, opacity, sh)
//! u64 m | m x (16 f64 view row-major, fx, fy, cx, cy, u64 width, u64 height, f, Q)
//! u8 has_iln  [u64 h1, h2, h3, coord_freqs, view_freqs, count, count x f64]
//! u8 has_optim [u64 iteration, u8 stage, adam, u64 m, m x adam, u8 has_iln_adam, adam]
//! adam = u64 step, u64 len, len x f64 m, len x f64 v
//! ```

use std::path::Path;

use nalgebra::{Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::iln::{IlnParams, PeConfig};
use crate::losses::Stage;
use crate::model::{CameraPose, Gaussian3D, LensParams, Scene, SH_COEFFS};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"DOFSPLAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewRecord {
    pub camera: CameraPose,
    pub lens: LensParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimRecord {
    pub iteration: u64,
    pub stage: Stage,
    pub gaussians: AdamState,
    pub lenses: Vec<AdamState>,
    pub iln: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub scene: Scene,
    pub views: Vec<ViewRecord>,
    pub iln: Option<IlnParams>,
    pub optim: Option<OptimRecord>,
}

impl Checkpoint {
    pub fn from_scene(scene: Scene) -> Self {
        Self { scene, ..Default::default() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(self.scene.sh_degree);
        w.u64(self.scene.len() as u64);
        for g in &self.scene.gaussians {
            w.f64s(g.center.as_slice());
            w.f64s(&g.rotation);
            w.f64s(g.scale.as_slice());
            w.f64(g.opacity);
            for sh in &g.sh {
                w.f64s(sh);
            }
        }
        w.u64(self.views.len() as u64);
        for v in &self.views {
            let c = &v.camera;
            for r in 0..4 {
                for col in 0..4 {
                    w.f64(c.view[(r, col)]);
                }
            }
            w.f64s(&[c.fx, c.fy, c.cx, c.cy]);
            w.u64(c.width as u64);
            w.u64(c.height as u64);
            w.f64s(&[v.lens.focal_distance, v.lens.aperture]);
        }
        match &self.iln {
            None => w.u8(0),
            Some(p) => {
                w.u8(1);
                for width in p.widths() {
                    w.u64(width as u64);
                }
                w.u64(p.pe.coord_freqs as u64);
                w.u64(p.pe.view_freqs as u64);
                let flat = p.to_flat();
                w.u64(flat.len() as u64);
                w.f64s(&flat);
            }
        }
        match &self.optim {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u64(o.iteration);
                w.u8(match o.stage {
                    Stage::Warmup => 0,
                    Stage::Refine => 1,
                });
                w.adam(&o.gaussians);
                w.u64(o.lenses.len() as u64);
                for s in &o.lenses {
                    w.adam(s);
                }
                match &o.iln {
                    None => w.u8(0),
                    Some(s) => {
                        w.u8(1);
                        w.adam(s);
                    }
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Malformed { offset: 0, what: "not a dofsplat container".into() });
        }
        let version = r.u32("version")?;
        if version > VERSION || version == 0 {
            return Err(Error::Version { found: version, supported: VERSION });
        }
        let sh_degree = r.u8("sh degree")?;
        if sh_degree > 1 {
            return Err(r.malformed_at(r.pos - 1, format!("sh degree {sh_degree} not supported")));
        }
        let n = r.count("gaussian count", 23 * 8)?;
        let mut gaussians = Vec::with_capacity(n);
        for _ in 0..n {
            let c = r.f64n::<3>("center")?;
            let rotation = r.f64n::<4>("rotation")?;
            let s = r.f64n::<3>("scale")?;
            let opacity = r.f64("opacity")?;
            let mut sh = [[0.0; 3]; SH_COEFFS];
            for v in sh.iter_mut() {
                *v = r.f64n::<3>("sh")?;
            }
            gaussians.push(Gaussian3D {
                center: Vector3::from(c),
                rotation,
                scale: Vector3::from(s),
                opacity,
                sh,
            });
        }
        let m = r.count("view count", 24 * 8)?;
        let mut views = Vec::with_capacity(m);
        for _ in 0..m {
            let vals = r.f64n::<16>("view matrix")?;
            let [fx, fy, cx, cy] = r.f64n::<4>("intrinsics")?;
            let width = r.u64("width")? as usize;
            let height = r.u64("height")? as usize;
            let [f, q] = r.f64n::<2>("lens")?;
            views.push(ViewRecord {
                camera: CameraPose { view: Matrix4::from_row_slice(&vals), fx, fy, cx, cy, width, height },
                lens: LensParams::new(f, q),
            });
        }
        let iln = match r.flag("ILN flag")? {
            false => None,
            true => {
                let start = r.pos;
                let widths = [r.u64("ILN width")? as usize, r.u64("ILN width")? as usize, r.u64("ILN width")? as usize];
                let pe = PeConfig { coord_freqs: r.u64("PE frequencies")? as usize, view_freqs: r.u64("PE frequencies")? as usize };
                if widths.iter().any(|w| *w == 0 || *w > 4096) || pe.coord_freqs > 32 || pe.view_freqs > 32 {
                    return Err(r.malformed_at(start, "implausible ILN shape".into()));
                }
                let mut params = IlnParams::with_widths(widths, pe, 0).zeros_like();
                let count_at = r.pos;
                let count = r.count("ILN parameter count", 8)?;
                if count != params.param_count() {
                    return Err(r.malformed_at(count_at, format!("ILN has {count} values, shape needs {}", params.param_count())));
                }
                let flat = r.f64vec(count, "ILN parameters")?;
                params.set_flat(&flat)?;
                Some(params)
            }
        };
        let optim = match r.flag("optimizer flag")? {
            false => None,
            true => {
                let iteration = r.u64("iteration")?;
                let stage = match r.u8("stage")? {
                    0 => Stage::Warmup,
                    1 => Stage::Refine,
                    s => return Err(r.malformed_at(r.pos - 1, format!("unknown stage {s}"))),
                };
                let gaussians = r.adam()?;
                let k = r.count("lens state count", 16)?;
                let lenses = (0..k).map(|_| r.adam()).collect::<Result<Vec<_>>>()?;
                let iln = if r.flag("ILN optimizer flag")? { Some(r.adam()?) } else { None };
                Some(OptimRecord { iteration, stage, gaussians, lenses, iln })
            }
        };
        if r.pos != bytes.len() {
            return Err(r.malformed_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { scene: Scene { gaussians, sh_degree }, views, iln, optim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    Checkpoint::from_scene(scene.clone()).save(path)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    Ok(Checkpoint::load(path)?.scene)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
    fn adam(&mut self, s: &AdamState) {
        self.u64(s.step);
        self.u64(s.m.len() as u64);
        self.f64s(&s.m);
        self.f64s(&s.v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn malformed_at(&self, offset: usize, what: String) -> Error {
        Error::Malformed { offset: offset as u64, what }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.malformed_at(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.malformed_at(self.pos - 1, format!("{what} must be 0 or 1, found {v}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// A record count, rejected early if the remaining bytes cannot hold it.
    fn count(&mut self, what: &str, min_record: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_record as u64) > left {
            return Err(self.malformed_at(at, format!("{what} {n} exceeds the remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64n<const N: usize>(&mut self, what: &str) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in out.iter_mut() {
            *v = self.f64(what)?;
        }
        Ok(out)
    }

    fn f64vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }

    fn adam(&mut self) -> Result<AdamState> {
        let step = self.u64("adam step")?;
        let len = self.count("adam length", 16)?;
        let m = self.f64vec(len, "adam first moment")?;
        let v = self.f64vec(len, "adam second moment")?;
        Ok(AdamState { m, v, step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut g = Gaussian3D::isotropic(Vector3::new(0.1, -0.2, 3.0), 0.05, 0.7, [0.3, 0.6, 0.9]);
        g.rotation = [0.9, 0.1, -0.3, 0.2];
        g.sh[2] = [0.01, -0.02, 0.03];
        Checkpoint {
            scene: Scene { gaussians: vec![g, Gaussian3D::isotropic(Vector3::zeros(), 1.0, 0.5, [0.5; 3])], sh_degree: 1 },
            views: vec![ViewRecord { camera: CameraPose::centered(32, 24, 30.0), lens: LensParams::new(2.5, 40.0) }],
            iln: Some(IlnParams::with_widths([2, 2, 2], PeConfig::default(), 3)),
            optim: Some(OptimRecord {
                iteration: 17,
                stage: Stage::Refine,
                gaussians: AdamState { m: vec![1.0, 2.0], v: vec![3.0, 4.0], step: 5 },
                lenses: vec![AdamState::new(2)],
                iln: None,
            }),
        }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
        let empty = Checkpoint::default();
        assert_eq!(Checkpoint::from_bytes(&empty.to_bytes()).unwrap(), empty);
        let bare = Checkpoint { iln: None, optim: None, ..sample() };
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 12, 40, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Malformed { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Malformed { .. })));
    }

    #[test]
    fn newer_version_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found, .. }) if found == VERSION + 1));
    }
}
