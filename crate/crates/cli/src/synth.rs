use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kanvox_core::preprocess::{synth_generate, SynthSpec};

/// Generates a phantom cohort and returns the manifest path.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    synth_generate(spec, out)
        .with_context(|| format!("preprocess: synthesizing into {}", out.display()))?;
    Ok(out.join("manifest.json"))
}
