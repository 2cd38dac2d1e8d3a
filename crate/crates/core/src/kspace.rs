//! Complex k-space matrices, FFT helpers, and the on-disk k-space format.
//!
//! Layout: `n_phase` phase-encode lines, each a readout of `n_read` complex
//! samples (readout index fastest). The readout direction is also the time
//! axis within a line, which is why band-wise processing FFTs along it.
//!
//! File format (`KSPC`): 4-byte magic, little-endian u32 header length, JSON
//! header, then `16 * n_read * n_phase` bytes of little-endian f64 (re, im)
//! pairs, row-major with readout fastest.

use crate::error::{CoreError, Result};
use crate::C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

#[derive(Debug, Clone)]
pub struct KSpaceMatrix {
    /// Row-major: `data[p * n_read + r]`.
    pub data: Vec<C64>,
    pub n_read: usize,
    pub n_phase: usize,
    /// Dwell time per readout sample, seconds.
    pub dwell_s: f64,
    pub channel: String,
}

impl KSpaceMatrix {
    pub fn zeros(n_read: usize, n_phase: usize, dwell_s: f64, channel: &str) -> Self {
        KSpaceMatrix {
            data: vec![C64::new(0.0, 0.0); n_read * n_phase],
            n_read,
            n_phase,
            dwell_s,
            channel: channel.to_string(),
        }
    }

    pub fn row(&self, p: usize) -> &[C64] {
        &self.data[p * self.n_read..(p + 1) * self.n_read]
    }

    pub fn row_mut(&mut self, p: usize) -> &mut [C64] {
        &mut self.data[p * self.n_read..(p + 1) * self.n_read]
    }

    pub fn same_dims(&self, other: &KSpaceMatrix) -> bool {
        self.n_read == other.n_read && self.n_phase == other.n_phase
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Root-mean-square magnitude of one row.
    pub fn row_rms(&self, p: usize) -> f64 {
        let row = self.row(p);
        (row.iter().map(|c| c.norm_sqr()).sum::<f64>() / row.len() as f64).sqrt()
    }

    /// Total power sum |K|^2.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Forward FFT of a row in place (unnormalized).
pub fn fft_in_place(row: &mut [C64]) {
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(row.len()).process(row);
}

/// Inverse FFT of a row in place, normalized by 1/N.
pub fn ifft_in_place(row: &mut [C64]) {
    let n = row.len();
    let mut planner = FftPlanner::new();
    planner.plan_fft_inverse(n).process(row);
    let s = 1.0 / n as f64;
    for v in row.iter_mut() {
        *v *= s;
    }
}

/// 2D forward DFT of an `n_phase x n_read` row-major matrix (unnormalized).
pub fn fft2(data: &mut [C64], n_read: usize, n_phase: usize) {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(n_read);
    for p in 0..n_phase {
        row_fft.process(&mut data[p * n_read..(p + 1) * n_read]);
    }
    let col_fft = planner.plan_fft_forward(n_phase);
    let mut col = vec![C64::new(0.0, 0.0); n_phase];
    for r in 0..n_read {
        for p in 0..n_phase {
            col[p] = data[p * n_read + r];
        }
        col_fft.process(&mut col);
        for p in 0..n_phase {
            data[p * n_read + r] = col[p];
        }
    }
}

/// 2D inverse DFT, normalized by 1/(n_read * n_phase).
pub fn ifft2(data: &mut [C64], n_read: usize, n_phase: usize) {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_inverse(n_read);
    for p in 0..n_phase {
        row_fft.process(&mut data[p * n_read..(p + 1) * n_read]);
    }
    let col_fft = planner.plan_fft_inverse(n_phase);
    let mut col = vec![C64::new(0.0, 0.0); n_phase];
    for r in 0..n_read {
        for p in 0..n_phase {
            col[p] = data[p * n_read + r];
        }
        col_fft.process(&mut col);
        for p in 0..n_phase {
            data[p * n_read + r] = col[p];
        }
    }
    let s = 1.0 / (n_read * n_phase) as f64;
    for v in data.iter_mut() {
        *v *= s;
    }
}

/// JSON header of a k-space file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KSpaceHeader {
    pub format_version: u32,
    pub n_read: usize,
    pub n_phase: usize,
    pub dwell_s: f64,
    pub channel: String,
    pub seed: u64,
    pub config_hash: String,
}

const MAGIC: &[u8; 4] = b"KSPC";

pub fn write_kspace<W: Write>(
    w: &mut W,
    k: &KSpaceMatrix,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let header = KSpaceHeader {
        format_version: 1,
        n_read: k.n_read,
        n_phase: k.n_phase,
        dwell_s: k.dwell_s,
        channel: k.channel.clone(),
        seed,
        config_hash: config_hash.to_string(),
    };
    let hbytes = serde_json::to_vec(&header).map_err(|e| CoreError::Config(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(hbytes.len() as u32).to_le_bytes())?;
    w.write_all(&hbytes)?;
    for c in &k.data {
        w.write_all(&c.re.to_le_bytes())?;
        w.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_kspace<R: Read>(r: &mut R) -> Result<(KSpaceMatrix, KSpaceHeader)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::InvalidInput("not a KSPC file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let hlen = u32::from_le_bytes(len) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: KSpaceHeader =
        serde_json::from_slice(&hbytes).map_err(|e| CoreError::Config(e.to_string()))?;
    let n = header.n_read * header.n_phase;
    let mut payload = vec![0u8; 16 * n];
    r.read_exact(&mut payload)?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let re = f64::from_le_bytes(payload[16 * i..16 * i + 8].try_into().unwrap());
        let im = f64::from_le_bytes(payload[16 * i + 8..16 * i + 16].try_into().unwrap());
        data.push(C64::new(re, im));
    }
    Ok((
        KSpaceMatrix {
            data,
            n_read: header.n_read,
            n_phase: header.n_phase,
            dwell_s: header.dwell_s,
            channel: header.channel.clone(),
        },
        header,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft2_round_trip() {
        let (nr, np) = (16, 8);
        let mut data: Vec<C64> = (0..nr * np)
            .map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let orig = data.clone();
        fft2(&mut data, nr, np);
        ifft2(&mut data, nr, np);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn file_round_trip() {
        let mut k = KSpaceMatrix::zeros(8, 4, 1e-5, "saddle");
        for (i, v) in k.data.iter_mut().enumerate() {
            *v = C64::new(i as f64, -(i as f64) * 0.5);
        }
        let mut buf = Vec::new();
        write_kspace(&mut buf, &k, 42, "deadbeef").unwrap();
        assert_eq!(buf.len(), 4 + 4 + (buf.len() - 8 - 16 * 32) + 16 * 32);
        let (k2, h) = read_kspace(&mut buf.as_slice()).unwrap();
        assert_eq!(h.seed, 42);
        assert_eq!(h.config_hash, "deadbeef");
        assert_eq!(k2.data, k.data);
        assert_eq!(k2.channel, "saddle");
    }
}
