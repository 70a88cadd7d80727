//! Direct O(n^2) DFT reference for the MFCC pipeline.
//!
//! Written independently of the library: no FFT, no shared filterbank or DCT code.

use std::f64::consts::PI;

pub fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn inv_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Returns `[frames][13]` features for 16 kHz PCM with the default parameters.
pub fn oracle_mfcc(pcm: &[i16]) -> Vec<Vec<f64>> {
    let (frame_len, stride, nfft, nfilt, ncoef, win) = (320usize, 320usize, 256usize, 32usize, 13usize, 101usize);
    let x: Vec<f64> = pcm.iter().map(|&s| s as f64 / 32768.0).collect();
    let frames = (x.len() - frame_len) / stride + 1;

    let hz_points: Vec<f64> = (0..nfilt + 2)
        .map(|i| inv_mel(mel(8000.0) * i as f64 / (nfilt + 1) as f64))
        .collect();
    let tri = |m: usize, f: f64| -> f64 {
        let (a, b, c) = (hz_points[m], hz_points[m + 1], hz_points[m + 2]);
        if f > a && f <= b {
            (f - a) / (b - a)
        } else if f > b && f < c {
            (c - f) / (c - b)
        } else {
            0.0
        }
    };

    let mut ceps = vec![vec![0.0; ncoef]; frames];
    for (t, row) in ceps.iter_mut().enumerate() {
        let seg: Vec<f64> = (0..nfft)
            .map(|n| {
                let w = 0.54 - 0.46 * (2.0 * PI * n as f64 / (nfft as f64 - 1.0)).cos();
                x[t * stride + n] * w
            })
            .collect();
        let mag: Vec<f64> = (0..=nfft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in seg.iter().enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / nfft as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        let logmel: Vec<f64> = (0..nfilt)
            .map(|m| {
                let e: f64 = mag
                    .iter()
                    .enumerate()
                    .map(|(k, a)| a * tri(m, k as f64 * 16000.0 / nfft as f64))
                    .sum();
                e.max(1e-12).ln()
            })
            .collect();
        for (k, out) in row.iter_mut().enumerate() {
            let scale = if k == 0 { (1.0 / nfilt as f64).sqrt() } else { (2.0 / nfilt as f64).sqrt() };
            *out = scale
                * logmel
                    .iter()
                    .enumerate()
                    .map(|(m, v)| v * (PI * k as f64 * (2 * m + 1) as f64 / (2 * nfilt) as f64).cos())
                    .sum::<f64>();
        }
    }

    let mut out = vec![vec![0.0; ncoef]; frames];
    for t in 0..frames {
        let lo = t.saturating_sub(win / 2);
        let hi = (t + win / 2).min(frames - 1);
        for c in 0..ncoef {
            let vals: Vec<f64> = (lo..=hi).map(|s| ceps[s][c]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            out[t][c] = (ceps[t][c] - mean) / var.max(1e-10).sqrt();
        }
    }
    out
}

pub fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub const MFCC_FIXTURES: [&str; 5] = ["sine_1k", "two_tone", "chirp", "noise", "square_env"];

pub fn read_fixture(name: &str) -> Vec<i16> {
    let path = fixture_dir().join("mfcc").join(format!("{name}.wav"));
    hound::WavReader::open(path)
        .unwrap()
        .into_samples::<i16>()
        .collect::<Result<_, _>>()
        .unwrap()
}

/// Largest absolute deviation between the library and the oracle on one fixture.
pub fn max_deviation(name: &str) -> f64 {
    let pcm = read_fixture(name);
    let lib = sfl_core::mfcc::mfcc_extract(&pcm, &sfl_core::mfcc::MfccConfig::default()).unwrap();
    let reference = oracle_mfcc(&pcm);
    assert_eq!(lib.values().shape(), &[reference.len(), 13]);
    lib.values()
        .data()
        .iter()
        .zip(reference.iter().flatten())
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max)
}
