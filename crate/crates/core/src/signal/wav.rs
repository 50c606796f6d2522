use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::Signal;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads a 16-bit PCM or 32-bit float RIFF/WAVE file, one [`Signal`] per channel.
pub fn wav_read(path: impl AsRef<Path>) -> Result<Vec<Signal>> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let chans = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "unsupported wav encoding {fmt:?} {bits}-bit"
            )))
        }
    };
    if chans == 0 || !interleaved.len().is_multiple_of(chans) {
        return Err(Error::Format("truncated sample frame".into()));
    }
    (0..chans)
        .map(|c| {
            Signal::new(
                interleaved.iter().skip(c).step_by(chans).copied().collect(),
                spec.sample_rate,
            )
        })
        .collect()
}

/// Writes equal-length channels as an interleaved RIFF/WAVE file. PCM16
/// samples are clipped to [-1, 1).
pub fn wav_write(path: impl AsRef<Path>, channels: &[Signal], format: WavFormat) -> Result<()> {
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidInput("no channels to write".into()))?;
    if channels
        .iter()
        .any(|c| c.len() != first.len() || c.sample_rate() != first.sample_rate())
    {
        return Err(Error::Shape("channels differ in length or rate".into()));
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: first.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for i in 0..first.len() {
        for c in channels {
            let v = c.samples()[i];
            match format {
                WavFormat::Float32 => writer.write_sample(v as f32)?,
                WavFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?
                }
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
