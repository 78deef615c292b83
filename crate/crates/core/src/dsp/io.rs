use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureKind, FeatureMatrix, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const FEATURE_MAGIC: &[u8; 4] = b"DRVF";
const FEATURE_VERSION: u32 = 1;

/// Reads 16-bit mono PCM at the processing rate; samples scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::invalid(format!(
            "{}: only 16-bit integer PCM is supported",
            path.display()
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM. Quantization is lossy; values outside [-1, 1) clip.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn write_feature_matrix(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes())?;
    out.write_all(&[m.kind().code()])?;
    out.write_all(&(m.frames() as u32).to_le_bytes())?;
    out.write_all(&(m.dim() as u32).to_le_bytes())?;
    for v in m.data().as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format("not a feature matrix file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(Error::format(format!("unsupported feature file version {version}")));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let kind = FeatureKind::from_code(code[0])
        .ok_or_else(|| Error::format(format!("unknown feature kind code {}", code[0])))?;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    if cols != kind.dim() {
        return Err(Error::format(format!(
            "{kind} file declares {cols} columns"
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    FeatureMatrix::new(kind, Matrix::from_vec(rows, cols, data), 0.010)
}

/// CSV with a `frame` column followed by one column per dimension.
/// Pitch tracks get the header `frame_index,f0_hz`.
pub fn write_feature_csv(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    if m.kind() == FeatureKind::Pitch1 {
        writeln!(out, "frame_index,f0_hz")?;
    } else {
        let header: Vec<String> = (0..m.dim()).map(|d| format!("d{d}")).collect();
        writeln!(out, "frame,{}", header.join(","))?;
    }
    for (t, row) in m.data().iter_rows().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{t},{}", vals.join(","))?;
    }
    out.flush()?;
    Ok(())
}
