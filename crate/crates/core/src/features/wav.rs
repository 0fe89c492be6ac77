//! 16-bit PCM WAV reading and writing.

use std::path::Path;

use super::FeatureError;

/// Decoded audio, one `Vec` per channel, samples scaled to [-1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

pub fn read_wav(path: &Path) -> Result<Audio, FeatureError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(FeatureError::Config(format!(
            "{}: only 16-bit PCM is supported",
            path.display()
        )));
    }
    let n = spec.channels as usize;
    let mut channels = vec![Vec::new(); n];
    for (i, s) in reader.samples::<i16>().enumerate() {
        channels[i % n].push(s? as f64 / 32768.0);
    }
    Ok(Audio {
        sample_rate: spec.sample_rate,
        channels,
    })
}

/// Writes a mono PCM16 file; samples outside [-1, 1) are clipped.
pub fn write_wav(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}
