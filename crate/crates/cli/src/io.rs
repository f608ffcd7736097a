//! File formats.
//!
//! CSV: UTF-8, comma separated, `\n` line endings, one header row. Numbers
//! are written with the shortest representation that parses back to the
//! same `f64`.
//!
//! `samples.bin` holds the retained states of a chain, all integers and
//! floats little-endian:
//!
//! ```text
//! magic      8 bytes  "LBRRSAMP"
//! version    u32      1
//! n_states   u32
//! dims       6 × u64  P, S, K, N_omega, S2, N_h
//! per state  f64, matrices row-major:
//!            psi P×S, gamma S×K, phi_gamma S×K, delta S, sigma_sq K,
//!            omega N_omega×S                      (N_omega > 0)
//!            h N_h×S2, lambda S2×K, phi_lambda S2×K, delta_lambda S2   (S2 > 0)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use latent_brrr::{FactorNoise, ModelState};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SAMPLES_MAGIC: &[u8; 8] = b"LBRRSAMP";
pub const SAMPLES_VERSION: u32 = 1;

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::output(path, e))
}

/// Read a numeric CSV with a header row. Returns the matrix and the column names.
pub fn read_matrix(path: &Path) -> CliResult<(DMatrix<f64>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(open(path)?));
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::format(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let cols = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::format(path, e))?;
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::format(path, format!("row {r}, column {c}: not a number: {field:?}")))?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((DMatrix::from_row_slice(rows, cols, &values), header))
}

pub fn default_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, header: &[String]) -> CliResult<()> {
    if header.len() != m.ncols() {
        return Err(CliError::Usage(format!(
            "{}: {} column names for {} columns",
            path.display(),
            header.len(),
            m.ncols()
        )));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    let io_err = |e: csv::Error| CliError::output(path, std::io::Error::other(e));
    w.write_record(header).map_err(io_err)?;
    let mut row = Vec::with_capacity(m.ncols());
    for r in 0..m.nrows() {
        row.clear();
        row.extend(m.row(r).iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let mut text = String::new();
    open(path)?
        .read_to_string(&mut text)
        .map_err(|source| CliError::Input {
            path: path.to_path_buf(),
            source,
        })?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::output(path, std::io::Error::other(e)))?;
    text.push('\n');
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::output(path, e))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|source| CliError::Input {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Row-major nested vectors, for JSON.
pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return None;
    }
    Some(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
}

fn put_matrix(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for v in m.row(r).iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn put_vector(buf: &mut Vec<u8>, v: &DVector<f64>) {
    for x in v.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_samples(path: &Path, states: &[ModelState]) -> CliResult<()> {
    let first = states.first();
    let p = first.map_or(0, |s| s.psi.nrows());
    let s = first.map_or(0, |s| s.rank());
    let k = first.map_or(0, |s| s.gamma.ncols());
    let n_omega = first.and_then(|s| s.omega.as_ref()).map_or(0, |o| o.nrows());
    let s2 = first.and_then(|s| s.noise.as_ref()).map_or(0, |n| n.lambda.nrows());
    let n_h = first.and_then(|s| s.noise.as_ref()).map_or(0, |n| n.h.nrows());
    let n_states = u32::try_from(states.len()).map_err(|_| CliError::Usage("too many states for samples.bin".into()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(SAMPLES_MAGIC);
    buf.extend_from_slice(&SAMPLES_VERSION.to_le_bytes());
    buf.extend_from_slice(&n_states.to_le_bytes());
    for d in [p, s, k, n_omega, s2, n_h] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for st in states {
        put_matrix(&mut buf, &st.psi);
        put_matrix(&mut buf, &st.gamma);
        put_matrix(&mut buf, &st.phi_gamma);
        put_vector(&mut buf, &st.delta);
        put_vector(&mut buf, &st.sigma_sq);
        if let Some(o) = &st.omega {
            put_matrix(&mut buf, o);
        }
        if let Some(n) = &st.noise {
            put_matrix(&mut buf, &n.h);
            put_matrix(&mut buf, &n.lambda);
            put_matrix(&mut buf, &n.phi_lambda);
            put_vector(&mut buf, &n.delta_lambda);
        }
    }
    let mut w = create(path)?;
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| CliError::output(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> CliResult<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(CliError::format(self.path, "truncated samples file"));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| CliError::format(self.path, "dimension overflows usize"))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, r: usize, c: usize) -> CliResult<DMatrix<f64>> {
        let mut m = DMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }

    fn vector(&mut self, n: usize) -> CliResult<DVector<f64>> {
        let mut v = DVector::zeros(n);
        for i in 0..n {
            v[i] = self.f64()?;
        }
        Ok(v)
    }
}

pub fn read_samples(path: &Path) -> CliResult<Vec<ModelState>> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|source| CliError::Input {
            path: path.to_path_buf(),
            source,
        })?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(8)? != SAMPLES_MAGIC {
        return Err(CliError::format(path, "not a samples file"));
    }
    let version = c.u32()?;
    if version != SAMPLES_VERSION {
        return Err(CliError::format(path, format!("unsupported samples version {version}")));
    }
    let n_states = c.u32()? as usize;
    let [p, s, k, n_omega, s2, n_h] = [c.u64()?, c.u64()?, c.u64()?, c.u64()?, c.u64()?, c.u64()?];
    let mut states = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let psi = c.matrix(p, s)?;
        let gamma = c.matrix(s, k)?;
        let phi_gamma = c.matrix(s, k)?;
        let delta = c.vector(s)?;
        let sigma_sq = c.vector(k)?;
        let omega = if n_omega > 0 { Some(c.matrix(n_omega, s)?) } else { None };
        let noise = if s2 > 0 {
            Some(FactorNoise {
                h: c.matrix(n_h, s2)?,
                lambda: c.matrix(s2, k)?,
                phi_lambda: c.matrix(s2, k)?,
                delta_lambda: c.vector(s2)?,
            })
        } else {
            None
        };
        states.push(ModelState {
            psi,
            gamma,
            omega,
            noise,
            phi_gamma,
            delta,
            sigma_sq,
        });
    }
    if c.pos != bytes.len() {
        return Err(CliError::format(path, "trailing bytes after last state"));
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1e-300, 1e300, std::f64::consts::PI, -0.0, 123456789.12345679]);
        let names = default_names("c", 3);
        write_matrix(&path, &m, &names).unwrap();
        let (back, header) = read_matrix(&path).unwrap();
        assert_eq!(header, names);
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
    }

    #[test]
    fn csv_reports_bad_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n3,x\n").unwrap();
        let err = read_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("row 1, column 1"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_matrix(Path::new("/nonexistent/y.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/y.csv"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn samples_round_trip() {
        use latent_brrr::{sample_prior, Dims, ModelConfig, Variant};
        use rand::SeedableRng;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for variant in [Variant::LatentNoise, Variant::IndependentNoise, Variant::NoNoise] {
            let mut cfg = ModelConfig::with_variant(variant);
            cfg.rank = 2;
            if variant == Variant::LatentNoise {
                cfg.latent_snr = None;
                cfg.sigma_omega_sq = Some(1.0);
            }
            if variant == Variant::IndependentNoise {
                cfg.noise_rank = Some(3);
            }
            let dims = Dims::new(5, 3, 4, 2).unwrap();
            let states: Vec<_> = (0..3).map(|_| sample_prior(&cfg, &dims, &mut rng).unwrap()).collect();
            let path = dir.path().join("s.bin");
            write_samples(&path, &states).unwrap();
            assert_eq!(read_samples(&path).unwrap(), states);
            let bytes = std::fs::read(&path).unwrap();
            assert_eq!(&bytes[..8], SAMPLES_MAGIC);
            std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
            assert!(read_samples(&path).is_err());
        }
    }
}
