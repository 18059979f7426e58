//! WAV input and output.
//!
//! Integer PCM of any width and 32-bit float are accepted; only the first
//! channel is kept and the clip is resampled to 16 kHz.

use std::path::Path;

use aacap_core::frontend::{AudioClip, SAMPLE_RATE};

use crate::error::{CliError, CliResult, StageExt};

pub fn read_wav(path: &Path) -> CliResult<AudioClip> {
    let stage = "read-wav";
    let mut reader = hound::WavReader::open(path).map_err(|e| CliError::data(stage, format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader.samples::<i32>().step_by(channels).map(|s| s.map(|v| v as f64 / scale)).collect::<Result<_, _>>()
        }
        hound::SampleFormat::Float => reader.samples::<f32>().step_by(channels).map(|s| s.map(f64::from)).collect::<Result<_, _>>(),
    }
    .map_err(|e| CliError::data(stage, format!("{}: {e}", path.display())))?;
    let clip = AudioClip::new(samples, spec.sample_rate).stage(stage)?;
    Ok(if clip.sample_rate == SAMPLE_RATE { clip } else { clip.resampled(SAMPLE_RATE) })
}

/// 16-bit mono PCM, written through a temporary file.
pub fn write_wav(path: &Path, clip: &AudioClip) -> CliResult<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec).map_err(|e| CliError::runtime("write-wav", e))?;
        for &s in &clip.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
            w.write_sample(v).map_err(|e| CliError::runtime("write-wav", e))?;
        }
        w.finalize().map_err(|e| CliError::runtime("write-wav", e))?;
    }
    crate::fsio::atomic_write(path, &cursor.into_inner())
}
