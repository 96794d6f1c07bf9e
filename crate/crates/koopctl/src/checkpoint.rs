//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "DKMPCKPT"
//! version  u32      1
//! family   u8       1 = deep Koopman, 2 = EDMD
//! stats    24 × f64 state min, state max, control min, control max
//! body     family specific, see below
//! ```
//!
//! Deep Koopman body: encoder, decoder (each `u32` layer count then per layer
//! `u32 in, u32 out, u8 activation, u8 has_bias, weights row-major, bias`),
//! then `A` and `B` as `u32 rows, u32 cols, data row-major`.
//!
//! EDMD body: `u8 lifting` (0 identity, 1 RBF); for RBF `u32 centers, f64
//! width, centers × 3 f64`; then `A` and `B` as above.

use std::path::Path;

use dkmpc_core::baseline::{EdmdModel, Lifting, RbfLifting};
use dkmpc_core::data::NormalizationStats;
use dkmpc_core::koopman::KoopmanModel;
use dkmpc_core::linalg::Matrix;
use dkmpc_core::nn::{Activation, DenseLayer, Mlp};
use dkmpc_core::{Control, State, CONTROL_DIM, STATE_DIM};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"DKMPCKPT";
pub const VERSION: u32 = 1;

const FAMILY_DK: u8 = 1;
const FAMILY_EDMD: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Dk(KoopmanModel),
    Edmd(EdmdModel),
}

impl Checkpoint {
    pub fn family(&self) -> &'static str {
        match self {
            Checkpoint::Dk(_) => "dk",
            Checkpoint::Edmd(_) => "rbf",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        match self {
            Checkpoint::Dk(m) => {
                w.u8(FAMILY_DK);
                w.stats(m.stats());
                w.mlp(m.encoder());
                w.mlp(m.decoder());
                w.matrix(m.a());
                w.matrix(m.b());
            }
            Checkpoint::Edmd(m) => {
                w.u8(FAMILY_EDMD);
                w.stats(m.stats());
                match &m.lifting {
                    Lifting::Identity => w.u8(0),
                    Lifting::Rbf(r) => {
                        w.u8(1);
                        w.u32(r.centers().len() as u32);
                        w.f64(r.width());
                        for c in r.centers() {
                            c.iter().for_each(|v| w.f64(*v));
                        }
                    }
                }
                w.matrix(m.a());
                w.matrix(m.b());
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let family = r.u8()?;
        let stats = r.stats()?;
        let ckpt = match family {
            FAMILY_DK => {
                let encoder = r.mlp()?;
                let decoder = r.mlp()?;
                let a = r.matrix()?;
                let b = r.matrix()?;
                Checkpoint::Dk(KoopmanModel::from_parts(encoder, decoder, a, b, stats).map_err(|e| e.to_string())?)
            }
            FAMILY_EDMD => {
                let lifting = match r.u8()? {
                    0 => Lifting::Identity,
                    1 => {
                        let n = r.u32()? as usize;
                        let width = r.f64()?;
                        let mut centers = Vec::with_capacity(n.min(1 << 16));
                        for _ in 0..n {
                            centers.push([r.f64()?, r.f64()?, r.f64()?]);
                        }
                        Lifting::Rbf(RbfLifting::new(centers, width).map_err(|e| e.to_string())?)
                    }
                    t => return Err(format!("unknown lifting tag {t}")),
                };
                let a = r.matrix()?;
                let b = r.matrix()?;
                Checkpoint::Edmd(EdmdModel::from_parts(lifting, a, b, stats).map_err(|e| e.to_string())?)
            }
            f => return Err(format!("unknown model family tag {f}")),
        };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        crate::io::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| CliError::format(path, m))
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn stats(&mut self, s: &NormalizationStats) {
        for v in s.state_min.iter().chain(&s.state_max).chain(&s.control_min).chain(&s.control_max) {
            self.f64(*v);
        }
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        m.as_slice().iter().for_each(|v| self.f64(*v));
    }
    fn mlp(&mut self, net: &Mlp) {
        self.u32(net.layers().len() as u32);
        for l in net.layers() {
            self.u32(l.in_dim() as u32);
            self.u32(l.out_dim() as u32);
            self.u8(match l.activation() {
                Activation::Identity => 0,
                Activation::Relu => 1,
            });
            self.u8(l.bias().is_some() as u8);
            l.weights().as_slice().iter().for_each(|v| self.f64(*v));
            if let Some(b) = l.bias() {
                b.iter().for_each(|v| self.f64(*v));
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

/// Upper bound on any single dimension read from a file, so a corrupt
/// header cannot request a huge allocation.
const MAX_DIM: usize = 1 << 16;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn dim(&mut self) -> Result<usize, String> {
        let d = self.u32()? as usize;
        if d > MAX_DIM {
            return Err(format!("dimension {d} exceeds {MAX_DIM}"));
        }
        Ok(d)
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn stats(&mut self) -> Result<NormalizationStats, String> {
        let mut arr = |n: usize| self.floats(n);
        let smin: State = arr(STATE_DIM)?.try_into().unwrap();
        let smax: State = arr(STATE_DIM)?.try_into().unwrap();
        let cmin: Control = arr(CONTROL_DIM)?.try_into().unwrap();
        let cmax: Control = arr(CONTROL_DIM)?.try_into().unwrap();
        NormalizationStats::new(smin, smax, cmin, cmax).map_err(|e| e.to_string())
    }
    fn matrix(&mut self) -> Result<Matrix, String> {
        let rows = self.dim()?;
        let cols = self.dim()?;
        let data = self.floats(rows * cols)?;
        Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
    }
    fn mlp(&mut self) -> Result<Mlp, String> {
        let n = self.dim()?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let in_dim = self.dim()?;
            let out_dim = self.dim()?;
            let act = match self.u8()? {
                0 => Activation::Identity,
                1 => Activation::Relu,
                t => return Err(format!("unknown activation tag {t}")),
            };
            let has_bias = match self.u8()? {
                0 => false,
                1 => true,
                t => return Err(format!("bad bias flag {t}")),
            };
            let w = Matrix::from_vec(out_dim, in_dim, self.floats(in_dim * out_dim)?).map_err(|e| e.to_string())?;
            let bias = if has_bias { Some(self.floats(out_dim)?) } else { None };
            layers.push(DenseLayer::new(w, bias, act).map_err(|e| e.to_string())?);
        }
        Mlp::new(layers).map_err(|e| e.to_string())
    }
}
