//! WAV decoding and band-limited resampling.
//!
//! Only RIFF/WAVE with PCM16 or IEEE float32 payloads is understood. Multi-channel
//! input is folded to mono by averaging each frame. No trimming or loudness
//! normalization is applied; samples are passed through as decoded.

use std::f64::consts::PI;

use thiserror::Error;

/// Rate every feature extractor expects.
pub const WORKING_RATE: u32 = 16_000;

const TAPS_PER_PHASE: usize = 64;
const KAISER_BETA: f64 = 8.6;
// Above this many phases the coefficient table is computed on the fly per output sample.
const MAX_TABLE_PHASES: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AudioError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: format tag {format_tag}, {bits} bits, {channels} channels")]
    UnsupportedEncoding {
        format_tag: u16,
        bits: u16,
        channels: u16,
    },
    #[error("WAV contains no samples")]
    EmptyAudio,
    #[error("sample rate must be positive")]
    ZeroRate,
}

/// Mono sample buffer with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, clamping samples into [-1, 1]. Non-finite samples become 0.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroRate);
        }
        let samples = samples
            .into_iter()
            .map(|s| if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 })
            .collect();
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AudioError> {
        if self.pos + n > self.bytes.len() {
            return Err(AudioError::MalformedHeader(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, AudioError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, AudioError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Clone, Copy)]
struct Format {
    tag: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Decodes a RIFF/WAVE byte stream into a mono buffer.
pub fn read_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"RIFF" {
        return Err(AudioError::MalformedHeader("missing RIFF tag".into()));
    }
    let _riff_size = r.u32()?;
    if r.take(4)? != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing WAVE tag".into()));
    }

    let mut format: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while r.pos + 8 <= bytes.len() {
        let id = r.take(4)?;
        let size = r.u32()? as usize;
        if id == b"data" {
            // Some writers leave the data size as 0 or 0xFFFFFFFF when streaming.
            let avail = bytes.len() - r.pos;
            let size = if size == 0 || size > avail { avail } else { size };
            data = Some(r.take(size)?);
            break;
        }
        let body = r.take(size)?;
        if id == b"fmt " {
            format = Some(parse_fmt(body)?);
        }
        if size % 2 == 1 && r.pos < bytes.len() {
            r.pos += 1;
        }
    }

    let format = format.ok_or_else(|| AudioError::MalformedHeader("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedHeader("no data chunk".into()))?;
    if format.rate == 0 {
        return Err(AudioError::MalformedHeader("sample rate is zero".into()));
    }

    let unsupported = AudioError::UnsupportedEncoding {
        format_tag: format.tag,
        bits: format.bits,
        channels: format.channels,
    };
    if !(1..=2).contains(&format.channels) {
        return Err(unsupported);
    }
    let channels = format.channels as usize;
    let interleaved: Vec<f64> = match (format.tag, format.bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
            .collect(),
        (FORMAT_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        _ => return Err(unsupported),
    };

    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    AudioBuffer::new(mono, format.rate)
}

fn parse_fmt(body: &[u8]) -> Result<Format, AudioError> {
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    let mut tag = r.u16()?;
    let channels = r.u16()?;
    let rate = r.u32()?;
    let _byte_rate = r.u32()?;
    let _block_align = r.u16()?;
    let bits = r.u16()?;
    if tag == FORMAT_EXTENSIBLE && body.len() >= 26 {
        // cbSize, valid bits, channel mask, then the sub-format GUID whose first two bytes are the tag.
        r.pos = 24;
        tag = r.u16()?;
    }
    Ok(Format {
        tag,
        channels,
        rate,
        bits,
    })
}

/// Encodes a buffer as mono PCM16. Samples are scaled by 32768 and saturated.
pub fn write_wav_pcm16(buf: &AudioBuffer) -> Vec<u8> {
    let data_len = buf.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &buf.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Polyphase windowed-sinc kernel. Phase `p` of `up` holds the weights for
/// an output sample that falls `p / up` input samples past an integer input index.
struct SincKernel {
    up: u64,
    // Cutoff as a fraction of the input sample rate.
    cutoff: f64,
    i0_beta: f64,
    table: Option<Vec<f64>>,
}

impl SincKernel {
    fn new(up: u64, cutoff: f64) -> Self {
        let mut kernel = Self {
            up,
            cutoff,
            i0_beta: bessel_i0(KAISER_BETA),
            table: None,
        };
        if up <= MAX_TABLE_PHASES {
            let mut table = Vec::with_capacity(up as usize * TAPS_PER_PHASE);
            for phase in 0..up {
                table.extend(kernel.compute_phase(phase));
            }
            kernel.table = Some(table);
        }
        kernel
    }

    fn compute_phase(&self, phase: u64) -> [f64; TAPS_PER_PHASE] {
        let frac = phase as f64 / self.up as f64;
        let half = (TAPS_PER_PHASE / 2) as f64;
        let mut w = [0.0; TAPS_PER_PHASE];
        for (j, wj) in w.iter_mut().enumerate() {
            // Tap j covers input offset k = j - (half - 1), so the window spans (-half, half].
            let offset = j as f64 - (half - 1.0) - frac;
            let t = offset / half;
            let window = if t.abs() <= 1.0 {
                bessel_i0(KAISER_BETA * (1.0 - t * t).sqrt()) / self.i0_beta
            } else {
                0.0
            };
            *wj = 2.0 * self.cutoff * sinc(2.0 * self.cutoff * offset) * window;
        }
        // Unit DC gain per phase.
        let total: f64 = w.iter().sum();
        if total.abs() > 1e-12 {
            for wj in &mut w {
                *wj /= total;
            }
        }
        w
    }

    fn phase(&self, phase: u64) -> std::borrow::Cow<'_, [f64]> {
        match &self.table {
            Some(t) => {
                let start = phase as usize * TAPS_PER_PHASE;
                std::borrow::Cow::Borrowed(&t[start..start + TAPS_PER_PHASE])
            }
            None => std::borrow::Cow::Owned(self.compute_phase(phase).to_vec()),
        }
    }
}

/// Resamples with a 64-tap-per-phase Kaiser-windowed sinc (beta 8.6),
/// cut off at half the lower of the two rates.
///
/// Output length is `round(len * target / source)`. Equal rates return the input unchanged.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::ZeroRate);
    }
    let source_rate = buf.sample_rate;
    if source_rate == target_rate {
        return Ok(buf.clone());
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = source_rate as u64 / g;
    let cutoff = 0.5 * source_rate.min(target_rate) as f64 / source_rate as f64;
    let kernel = SincKernel::new(up, cutoff);

    let n_in = buf.samples.len();
    let n_out = ((n_in as f64) * target_rate as f64 / source_rate as f64).round() as usize;
    let first_tap = TAPS_PER_PHASE as i64 / 2 - 1;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let weights = kernel.phase(pos % up);
        let mut acc = 0.0;
        for (j, w) in weights.iter().enumerate() {
            let idx = base + j as i64 - first_tap;
            if idx >= 0 && (idx as usize) < n_in {
                acc += w * buf.samples[idx as usize];
            }
        }
        out.push(acc);
    }
    AudioBuffer::new(out, target_rate)
}
