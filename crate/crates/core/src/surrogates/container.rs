//! Binary model container. Little-endian throughout; floats are stored as
//! raw IEEE-754 bits so a round trip is bit-exact.
//!
//! ```text
//! magic "UQSEPMDL" | version u32 | kind u8 | scaler | kind header | networks
//! ```

use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use super::{DeMember, DeepEnsemble, McDropoutModel, QuantileSurrogate, Standardizer, Surrogate};
use crate::error::{Error, Result};
use crate::losses::AlphaLevel;
use crate::nn::{Activation, MlpParams};

const MAGIC: &[u8; 8] = b"UQSEPMDL";
pub const FORMAT_VERSION: u32 = 1;

const KIND_EQR: u8 = 1;
const KIND_DE: u8 = 2;
const KIND_MC: u8 = 3;

pub(super) fn encode(model: &Surrogate) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION).unwrap();
    match model {
        Surrogate::Eqr(m) => {
            out.write_u8(KIND_EQR).unwrap();
            write_scaler(&mut out, &m.scaler);
            out.write_f64::<LE>(m.alpha.value()).unwrap();
            out.write_f64::<LE>(m.bag_fraction).unwrap();
            out.write_u32::<LE>(m.members.len() as u32).unwrap();
            for net in &m.members {
                write_net(&mut out, net);
            }
        }
        Surrogate::De(m) => {
            out.write_u8(KIND_DE).unwrap();
            write_scaler(&mut out, &m.scaler);
            out.write_f64::<LE>(m.bag_fraction).unwrap();
            out.write_u32::<LE>(m.members.len() as u32).unwrap();
            for member in &m.members {
                write_net(&mut out, &member.mean);
                write_net(&mut out, &member.log_var);
            }
        }
        Surrogate::McDropout(m) => {
            out.write_u8(KIND_MC).unwrap();
            write_scaler(&mut out, &m.scaler);
            out.write_f64::<LE>(m.dropout_rate).unwrap();
            out.write_u32::<LE>(m.n_passes as u32).unwrap();
            out.write_u64::<LE>(m.predict_seed).unwrap();
            write_net(&mut out, &m.params);
        }
    }
    out
}

fn write_vec(out: &mut Vec<u8>, v: &[f64]) {
    for &x in v {
        out.write_f64::<LE>(x).unwrap();
    }
}

fn write_scaler(out: &mut Vec<u8>, s: &Standardizer) {
    out.write_u32::<LE>(s.input_dim() as u32).unwrap();
    out.write_u32::<LE>(s.output_dim() as u32).unwrap();
    write_vec(out, &s.input_mean);
    write_vec(out, &s.input_scale);
    write_vec(out, &s.target_mean);
    write_vec(out, &s.target_scale);
}

fn write_net(out: &mut Vec<u8>, net: &MlpParams) {
    out.write_u8(match net.activation() {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    })
    .unwrap();
    out.write_u32::<LE>(net.layer_sizes().len() as u32).unwrap();
    for &s in net.layer_sizes() {
        out.write_u32::<LE>(s as u32).unwrap();
    }
    for (w, b) in net.weights().iter().zip(net.biases()) {
        for &v in w.iter() {
            out.write_f64::<LE>(v).unwrap();
        }
        write_vec(out, b.as_slice().expect("contiguous bias"));
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Format("truncated container".into())
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(truncated)
    }
    fn u32(&mut self) -> Result<usize> {
        self.0.read_u32::<LE>().map(|v| v as usize).map_err(truncated)
    }
    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(truncated)
    }
    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LE>().map_err(truncated)
    }
    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        self.bounded(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    /// Reject element counts that cannot fit in what is left.
    fn bounded(&self, n: usize, width: usize) -> Result<()> {
        let left = self.0.get_ref().len() as u64 - self.0.position();
        if (n as u64).saturating_mul(width as u64) > left {
            return Err(Error::Format("truncated container".into()));
        }
        Ok(())
    }
    fn scaler(&mut self) -> Result<Standardizer> {
        let d = self.u32()?;
        let o = self.u32()?;
        Ok(Standardizer {
            input_mean: self.vec(d)?,
            input_scale: self.vec(d)?,
            target_mean: self.vec(o)?,
            target_scale: self.vec(o)?,
        })
    }
    fn net(&mut self) -> Result<MlpParams> {
        let activation = match self.u8()? {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => return Err(Error::Format(format!("unknown activation tag {other}"))),
        };
        let n_sizes = self.u32()?;
        self.bounded(n_sizes, 4)?;
        let sizes: Vec<usize> = (0..n_sizes).map(|_| self.u32()).collect::<Result<_>>()?;
        if sizes.len() < 2 {
            return Err(Error::Format("network with fewer than two layer sizes".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let vals = self.vec(w[0] * w[1])?;
            weights.push(Array2::from_shape_vec((w[1], w[0]), vals).expect("sized"));
            biases.push(Array1::from(self.vec(w[1])?));
        }
        MlpParams::from_parts(&sizes, activation, weights, biases)
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<Surrogate> {
    let mut r = Reader(Cursor::new(bytes));
    let mut magic = [0u8; 8];
    r.0.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model container (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let model = match r.u8()? {
        KIND_EQR => {
            let scaler = r.scaler()?;
            let alpha = AlphaLevel::new(r.f64()?)?;
            let bag = r.f64()?;
            let n = r.u32()?;
            let members = (0..n).map(|_| r.net()).collect::<Result<_>>()?;
            Surrogate::Eqr(QuantileSurrogate::from_members(members, alpha, bag, scaler)?)
        }
        KIND_DE => {
            let scaler = r.scaler()?;
            let bag = r.f64()?;
            let n = r.u32()?;
            let members = (0..n)
                .map(|_| {
                    Ok(DeMember {
                        mean: r.net()?,
                        log_var: r.net()?,
                    })
                })
                .collect::<Result<_>>()?;
            Surrogate::De(DeepEnsemble::from_members(members, bag, scaler)?)
        }
        KIND_MC => {
            let scaler = r.scaler()?;
            let rate = r.f64()?;
            let passes = r.u32()?;
            let seed = r.u64()?;
            let params = r.net()?;
            Surrogate::McDropout(McDropoutModel::new(params, rate, passes, seed, scaler)?)
        }
        other => return Err(Error::Format(format!("unknown model kind {other}"))),
    };
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after model".into()));
    }
    Ok(model)
}
