use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, Provenance, Sample, CLASS_NAMES, SILENCE, UNKNOWN};
use crate::audio::{fit_clip, read_wav};
use crate::mfcc::{Mfcc, MfccConfig};

/// Maps a Speech-Commands folder name to a class index. Folders that are
/// not one of the five digits or a silence folder count as "unknown".
pub fn label_for_folder(name: &str) -> u8 {
    match name {
        "silence" | "_silence_" | "_background_noise_" => SILENCE,
        other => CLASS_NAMES[..5]
            .iter()
            .position(|c| *c == other)
            .map_or(UNKNOWN, |i| i as u8),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut entries = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io)?;
    entries.sort();
    Ok(entries)
}

/// Loads `root/<class>/*.wav`, fitting each clip to one second before MFCC.
///
/// Folders and files are visited in lexicographic order.
pub fn load_wav_corpus(root: impl AsRef<Path>, cfg: &MfccConfig) -> Result<Dataset, DataError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf()));
    }
    let mfcc = Mfcc::new(cfg.clone())?;
    let mut samples = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label = label_for_folder(name);
        for file in sorted_entries(&dir)? {
            let is_wav = file
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if !is_wav {
                continue;
            }
            let audio = fit_clip(read_wav(&file)?);
            let features = mfcc.extract_pcm(&audio)?.into_tensor();
            samples.push(Sample { features, label });
        }
    }
    if samples.is_empty() {
        return Err(DataError::NoAudio(root.to_path_buf()));
    }
    log::info!("loaded {} clips from {}", samples.len(), root.display());
    Ok(Dataset::new(samples, Provenance::WavCorpus(root.to_path_buf())))
}
