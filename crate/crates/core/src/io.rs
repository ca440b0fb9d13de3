//! Field and trajectory persistence.
//!
//! # Field layout
//!
//! A field is a flat stream of records, one per retained wavevector in
//! space order (negative partners included). Each record is the wavevector
//! `(k1, k2, k3)` followed by the six reals `Re û₁, Im û₁, Re û₂, Im û₂,
//! Re û₃, Im û₃`.
//!
//! Binary (little endian):
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `SPDF` |
//! | 4 | version `u32` (= 1) |
//! | 4 | cutoff `u32` |
//! | 4 | record count `u32` |
//! | 60 × count | records: 3 × `i32`, 6 × `f64` |
//!
//! JSON: `{"cutoff": m, "records": [{"k": [k1,k2,k3], "c": [6 reals]}, ...]}`.
//!
//! # Trajectory checkpoint layout
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `SPDT` |
//! | 4 | version `u32` (= 1) |
//! | 4 | header length `u32` |
//! | n | header, JSON [`TrajectoryHeader`] |
//! | 8 × points | times |
//! | 48 × modes × points | states, coefficient blocks in space order |
//! | 48 × modes × points | variation (if flagged) |
//! | 48 × modes × points | convolution (if flagged) |
//! | 8 × steps × dim | Brownian increments |
//!
//! A block stores, per mode, the six reals of the field record (no
//! wavevector, the order is the space's mode order). All reals are `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::sde::Trajectory;
use crate::spectral::{Coeff, GalerkinSpace, SpectralField, WaveVector, COEFF_ZERO};

const FIELD_MAGIC: &[u8; 4] = b"SPDF";
const TRAJ_MAGIC: &[u8; 4] = b"SPDT";
const VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[derive(Serialize, Deserialize)]
struct FieldRecord {
    k: [i32; 3],
    c: [f64; 6],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldDocument {
    cutoff: u32,
    records: Vec<FieldRecord>,
}

fn coeff_reals(c: &Coeff) -> [f64; 6] {
    [c[0].re, c[0].im, c[1].re, c[1].im, c[2].re, c[2].im]
}

fn reals_coeff(r: &[f64; 6]) -> Coeff {
    [
        Complex64::new(r[0], r[1]),
        Complex64::new(r[2], r[3]),
        Complex64::new(r[4], r[5]),
    ]
}

fn build_field(space: &Arc<GalerkinSpace>, records: impl IntoIterator<Item = ([i32; 3], Coeff)>) -> Result<SpectralField> {
    let mut coeffs = vec![COEFF_ZERO; space.len()];
    let mut seen = vec![false; space.len()];
    for (k, c) in records {
        let i = space
            .index_of(WaveVector(k))
            .ok_or_else(|| fmt_err(format!("wavevector {k:?} is not retained at cutoff {}", space.cutoff())))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(fmt_err(format!("wavevector {k:?} appears twice")));
        }
        coeffs[i] = c;
    }
    let field = SpectralField::from_raw(space, coeffs);
    let tol = 1e-12 * (1.0 + field.norm());
    if field.divergence_residual() > tol {
        return Err(fmt_err("stored field is not divergence-free"));
    }
    if field.reality_residual() > tol {
        return Err(fmt_err("stored field violates the reality condition"));
    }
    Ok(field)
}

impl Serialize for SpectralField {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FieldDocument {
            cutoff: self.space().cutoff(),
            records: self
                .space()
                .modes()
                .iter()
                .zip(self.coeffs())
                .map(|(k, c)| FieldRecord { k: k.0, c: coeff_reals(c) })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpectralField {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = FieldDocument::deserialize(d)?;
        let space = GalerkinSpace::new(doc.cutoff).map_err(serde::de::Error::custom)?;
        build_field(&space, doc.records.iter().map(|r| (r.k, reals_coeff(&r.c)))).map_err(serde::de::Error::custom)
    }
}

pub fn field_to_json(f: &SpectralField) -> String {
    serde_json::to_string(f).expect("fields always serialize")
}

pub fn field_from_json(text: &str) -> Result<SpectralField> {
    serde_json::from_str(text).map_err(|e| fmt_err(e.to_string()))
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| fmt_err(format!("truncated input: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn get_i32(r: &mut impl Read) -> Result<i32> {
    Ok(get_u32(r)? as i32)
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| fmt_err(format!("truncated input: {e}")))?;
    Ok(f64::from_le_bytes(b))
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| fmt_err(format!("truncated input: {e}")))?;
    if &b != magic {
        return Err(fmt_err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = get_u32(r)?;
    if v != VERSION {
        return Err(fmt_err(format!("unsupported version {v}")));
    }
    Ok(())
}

pub fn write_field_binary(f: &SpectralField, w: &mut impl Write) -> Result<()> {
    w.write_all(FIELD_MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, f.space().cutoff())?;
    put_u32(w, f.space().len() as u32)?;
    for (k, c) in f.space().modes().iter().zip(f.coeffs()) {
        for v in k.0 {
            w.write_all(&v.to_le_bytes())?;
        }
        put_f64s(w, &coeff_reals(c))?;
    }
    Ok(())
}

pub fn read_field_binary(r: &mut impl Read) -> Result<SpectralField> {
    check_magic(r, FIELD_MAGIC)?;
    let cutoff = get_u32(r)?;
    let count = get_u32(r)? as usize;
    let space = GalerkinSpace::new(cutoff).map_err(|e| fmt_err(e.to_string()))?;
    if count > space.len() {
        return Err(fmt_err(format!("{count} records exceed the {} modes at cutoff {cutoff}", space.len())));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let k = [get_i32(r)?, get_i32(r)?, get_i32(r)?];
        let mut c = [0.0; 6];
        for v in c.iter_mut() {
            *v = get_f64(r)?;
        }
        records.push((k, reals_coeff(&c)));
    }
    build_field(&space, records)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Writes JSON for `*.json` paths and the binary layout otherwise.
pub fn save_field(path: &Path, f: &SpectralField) -> Result<()> {
    if is_json(path) {
        std::fs::write(path, field_to_json(f))?;
        return Ok(());
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_field_binary(f, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_field(path: &Path) -> Result<SpectralField> {
    if is_json(path) {
        return field_from_json(&std::fs::read_to_string(path)?);
    }
    read_field_binary(&mut BufReader::new(File::open(path)?))
}

/// Metadata block of a trajectory checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub cutoff: u32,
    pub dt: f64,
    pub seed: u64,
    pub replica: u64,
    pub points: usize,
    pub has_variation: bool,
    pub has_convolution: bool,
    /// decimal string, absent when the path is not generator driven
    pub rng_word_pos: Option<String>,
}

fn put_block(w: &mut impl Write, f: &SpectralField) -> Result<()> {
    for c in f.coeffs() {
        put_f64s(w, &coeff_reals(c))?;
    }
    Ok(())
}

fn get_block(r: &mut impl Read, space: &Arc<GalerkinSpace>) -> Result<SpectralField> {
    let mut recs = Vec::with_capacity(space.len());
    for k in space.modes() {
        let mut c = [0.0; 6];
        for v in c.iter_mut() {
            *v = get_f64(r)?;
        }
        recs.push((k.0, reals_coeff(&c)));
    }
    build_field(space, recs)
}

pub fn write_trajectory(t: &Trajectory, w: &mut impl Write) -> Result<()> {
    let header = TrajectoryHeader {
        cutoff: t.space().cutoff(),
        dt: t.dt,
        seed: t.seed,
        replica: t.replica,
        points: t.times.len(),
        has_variation: t.variation.is_some(),
        has_convolution: t.convolution.is_some(),
        rng_word_pos: t.rng_word_pos.map(|p| p.to_string()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(TRAJ_MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, json.len() as u32)?;
    w.write_all(&json)?;
    put_f64s(w, &t.times)?;
    for s in &t.states {
        put_block(w, s)?;
    }
    for series in [&t.variation, &t.convolution].into_iter().flatten() {
        for s in series {
            put_block(w, s)?;
        }
    }
    put_f64s(w, &t.increments)?;
    Ok(())
}

pub fn read_trajectory(r: &mut impl Read) -> Result<Trajectory> {
    check_magic(r, TRAJ_MAGIC)?;
    let n = get_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(fmt_err("implausible header length"));
    }
    let mut json = vec![0u8; n];
    r.read_exact(&mut json).map_err(|e| fmt_err(format!("truncated header: {e}")))?;
    let h: TrajectoryHeader = serde_json::from_slice(&json).map_err(|e| fmt_err(format!("bad header: {e}")))?;
    if h.points == 0 {
        return Err(fmt_err("checkpoint holds no points"));
    }
    let space = GalerkinSpace::new(h.cutoff).map_err(|e| fmt_err(e.to_string()))?;
    let times = (0..h.points).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
    let read_series = |r: &mut dyn Read| -> Result<Vec<SpectralField>> {
        let mut r = r;
        (0..h.points).map(|_| get_block(&mut r, &space)).collect()
    };
    let states = read_series(r)?;
    let variation = if h.has_variation { Some(read_series(r)?) } else { None };
    let convolution = if h.has_convolution { Some(read_series(r)?) } else { None };
    let incs = (h.points - 1) * space.dim();
    let increments = (0..incs).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fmt_err("trailing bytes after checkpoint"));
    }
    let rng_word_pos = h
        .rng_word_pos
        .map(|s| s.parse::<u128>().map_err(|e| fmt_err(format!("bad generator position: {e}"))))
        .transpose()?;
    Ok(Trajectory {
        dt: h.dt,
        seed: h.seed,
        replica: h.replica,
        times,
        states,
        variation,
        convolution,
        increments,
        rng_word_pos,
    })
}

pub fn save_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectory(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    read_trajectory(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseOperator, NoiseParams};
    use crate::sde::{simulate_with_variation, SimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn field_round_trips_exactly() {
        let s = GalerkinSpace::new(2).unwrap();
        let f = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(1), 0.7);
        let mut buf = Vec::new();
        write_field_binary(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 60 * s.len());
        assert_eq!(read_field_binary(&mut buf.as_slice()).unwrap(), f);
        assert_eq!(field_from_json(&field_to_json(&f)).unwrap(), f);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let s = GalerkinSpace::new(1).unwrap();
        let f = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(2), 0.0);
        let mut buf = Vec::new();
        write_field_binary(&f, &mut buf).unwrap();
        assert!(read_field_binary(&mut &buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_field_binary(&mut bad.as_slice()), Err(Error::Format(_))));
        // break the reality condition on the first record
        let mut bad = buf.clone();
        bad[16 + 12 + 7] ^= 0x40;
        assert!(read_field_binary(&mut bad.as_slice()).is_err());
        assert!(field_from_json(r#"{"cutoff":1,"records":[{"k":[5,0,0],"c":[0,0,0,0,0,0]}]}"#).is_err());
    }

    #[test]
    fn trajectory_round_trips() {
        let s = GalerkinSpace::new(1).unwrap();
        let cfg = SimConfig::new(&s, 1e-3, 0.01, NoiseOperator::new(NoiseParams::default()).unwrap(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = SpectralField::random(&s, &mut rng, 1.0);
        let h = SpectralField::random(&s, &mut rng, 1.0);
        let t = simulate_with_variation(&x0, &h, &cfg).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&t, &mut buf).unwrap();
        let back = read_trajectory(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut again = Vec::new();
        write_trajectory(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }
}

/// JSON writes non-finite floats as `null`; these read `null` back as NaN.
pub mod nullable {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer};

    pub fn f64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub fn map<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<String, f64>, D::Error> {
        let m = BTreeMap::<String, Option<f64>>::deserialize(d)?;
        Ok(m.into_iter().map(|(k, v)| (k, v.unwrap_or(f64::NAN))).collect())
    }
}
