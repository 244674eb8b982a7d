//! Multichannel WAV reading and writing.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `[channel][sample]` as 32-bit float PCM.
pub fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    let len = channels.first().map_or(0, Vec::len);
    if channels.is_empty() || channels.iter().any(|c| c.len() != len) {
        return Err(Error::Input(format!(
            "{}: channels must be non-empty and of equal length",
            path.display()
        )));
    }
    if channels.len() > u16::MAX as usize {
        return Err(Error::Input(format!("{}: too many channels", path.display())));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for n in 0..len {
        for c in channels {
            writer.write_sample(c[n] as f32).map_err(wav_err(path))?;
        }
    }
    writer.finalize().map_err(wav_err(path))
}

/// Reads a WAV file as `[channel][sample]` in `[-1, 1]` scale, plus its rate.
pub fn read_wav(path: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err(path))?
        }
    };
    let mut out = vec![Vec::with_capacity(interleaved.len() / channels); channels];
    for (i, v) in interleaved.into_iter().enumerate() {
        out[i % channels].push(v);
    }
    Ok((out, spec.sample_rate))
}

/// Rounds every sample through `f32`, matching what a WAV round trip stores.
pub fn quantize_f32(signal: &[f64]) -> Vec<f64> {
    signal.iter().map(|&v| v as f32 as f64).collect()
}
