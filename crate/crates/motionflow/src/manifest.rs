//! Sequence manifests: where the frames and labels of a sequence live and
//! how the pipeline should be configured for it.

use std::path::{Path, PathBuf};

use motionflow_core::cycle_compensator::CompensatorConfig;
use motionflow_core::flow_estimator::EstimatorConfig;
use motionflow_core::propagation::SparseSequence;
use motionflow_core::{Frame, LabelMask};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Sequence directory, relative to the manifest file.
    #[serde(default = "current_dir")]
    pub directory: PathBuf,
    /// File name pattern with one `%d` or `%0Nd` placeholder for the index.
    pub frame_pattern: String,
    pub label_pattern: String,
    pub num_frames: usize,
    /// Indices that carry a label, in increasing order.
    pub labeled: Vec<usize>,
    pub interval: usize,
    pub num_classes: usize,
    /// Dense masks for every frame, used only to score the output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensator: Option<CompensatorConfig>,
}

fn current_dir() -> PathBuf {
    PathBuf::from(".")
}

/// Expands the single `%d` / `%0Nd` placeholder of `pattern`.
pub fn format_index(pattern: &str, index: usize) -> CliResult<String> {
    let bad = || CliError::input(format!("pattern {pattern:?} needs exactly one %d or %0Nd placeholder"));
    let start = pattern.find('%').ok_or_else(bad)?;
    let rest = &pattern[start + 1..];
    let end = rest.find('d').ok_or_else(bad)?;
    let spec = &rest[..end];
    let tail = &rest[end + 1..];
    if tail.contains('%') {
        return Err(bad());
    }
    let digits = match spec {
        "" => format!("{index}"),
        s if s.starts_with('0') && s[1..].chars().all(|c| c.is_ascii_digit()) && s.len() > 1 => {
            let width: usize = s[1..].parse().map_err(|_| bad())?;
            format!("{index:0width$}")
        }
        _ => return Err(bad()),
    };
    Ok(format!("{}{digits}{tail}", &pattern[..start]))
}

/// A manifest together with the directory its patterns resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> CliResult<Self> {
        let manifest: Manifest = io::read_json(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let root = base.join(&manifest.directory);
        if manifest.num_frames == 0 {
            return Err(CliError::input("manifest lists no frames"));
        }
        if manifest.labeled.iter().any(|&t| t >= manifest.num_frames) {
            return Err(CliError::input("labeled index beyond the last frame"));
        }
        Ok(Self { manifest, root })
    }

    pub fn frame_path(&self, t: usize) -> CliResult<PathBuf> {
        Ok(self.root.join(format_index(&self.manifest.frame_pattern, t)?))
    }

    pub fn frame(&self, t: usize) -> CliResult<Frame> {
        if t >= self.manifest.num_frames {
            return Err(CliError::input(format!(
                "frame {t} is outside the sequence of {} frames",
                self.manifest.num_frames
            )));
        }
        io::read_frame(&self.frame_path(t)?)
    }

    fn masks(&self, pattern: &str, indices: impl Iterator<Item = usize>) -> CliResult<Vec<(usize, LabelMask)>> {
        indices
            .map(|t| Ok((t, io::read_mask(&self.root.join(format_index(pattern, t)?))?)))
            .collect()
    }

    /// Reads every frame and the labeled masks, checking that they agree in
    /// size and that the labels follow the stride rule.
    pub fn sequence(&self) -> CliResult<SparseSequence> {
        let m = &self.manifest;
        let frames = (0..m.num_frames).map(|t| self.frame(t)).collect::<CliResult<Vec<_>>>()?;
        let labels = self.masks(&m.label_pattern, m.labeled.iter().copied())?;
        let (h, w) = (frames[0].height(), frames[0].width());
        if frames.iter().any(|f| !f.same_dims(&frames[0])) {
            return Err(CliError::input("frames differ in size or channel count"));
        }
        if labels.iter().any(|(_, l)| l.height() != h || l.width() != w) {
            return Err(CliError::input("label masks and frames differ in size"));
        }
        Ok(SparseSequence::new(frames, labels.into_iter().collect(), m.interval, m.num_classes)?)
    }

    /// Dense ground-truth masks, when the manifest names them.
    pub fn ground_truth(&self) -> CliResult<Option<Vec<LabelMask>>> {
        match &self.manifest.ground_truth_pattern {
            None => Ok(None),
            Some(p) => Ok(Some(self.masks(p, 0..self.manifest.num_frames)?.into_iter().map(|(_, m)| m).collect())),
        }
    }
}
