//! Stage orchestration with content-addressed artifacts.
//!
//! Every stage writes a manifest next to its primary output recording the
//! stage parameters digest, the digests of all inputs and outputs, wall
//! time and seed. A stage refuses to consume an input whose bytes no longer
//! match the digest its producer recorded.

mod ablate;
mod stages;

pub use ablate::{run_ablate, AblateStage, CellSummary, Grid};
pub use stages::{
    run_corpus, run_embed, run_evaluate, run_finetune, run_pretrain, run_pretrain_data,
    run_synth, run_vocab, CorpusStage, EmbedStage, EmptyPolicy, EvaluateStage, EvaluationOutput,
    FinetuneStage, FoldReport, PredictionRecord, PretrainDataStage, PretrainStage, SynthStage,
    TaskReport, VocabStage,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::file_digest;
use crate::embed::{Aggregation, EmbedMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Whole-pipeline defaults, loadable from one JSON file and overridable per
/// stage by CLI flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub vocab_size: usize,
    pub min_frequency: u64,
    pub mask_rate: f64,
    pub negative_ratio: f64,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub mode: EmbedMode,
    pub aggregation: Aggregation,
    pub api_only: bool,
    pub empty_policy: EmptyPolicy,
    pub folds: usize,
    pub threshold: f64,
    pub beam_width: usize,
    pub classes: usize,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub balance: bool,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::base(),
            vocab_size: 10_000,
            min_frequency: 2,
            mask_rate: 0.15,
            negative_ratio: 0.5,
            batch: 72,
            lr: 1e-4,
            epochs: 40,
            warmup_steps: 0,
            mode: EmbedMode::Ae,
            aggregation: Aggregation::Addition,
            api_only: false,
            empty_policy: EmptyPolicy::Error,
            folds: 3,
            threshold: 0.5,
            beam_width: 10,
            classes: 2,
            finetune_epochs: 40,
            finetune_batch: 256,
            finetune_lr: 1e-3,
            balance: false,
            seed: 0,
            deterministic: true,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Record of one executed stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub deterministic: bool,
}

/// Where the manifest of an artifact lives: `<file>.manifest.json`, or
/// `stage-manifest.json` inside a directory artifact.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join("stage-manifest.json")
    } else {
        let mut s = artifact.as_os_str().to_os_string();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

pub fn read_stage_manifest(artifact: &Path) -> Result<Option<StageManifest>> {
    let path = manifest_path(artifact);
    if !path.exists() {
        return Ok(None);
    }
    let manifest: StageManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(Some(manifest))
}

/// Digest of an artifact: file bytes, or for a directory the digest of the
/// sorted (name, file-digest) listing.
pub fn artifact_digest(path: &Path) -> Result<String> {
    if path.is_dir() {
        use sha2::{Digest, Sha256};
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let mut hasher = Sha256::new();
        for file in names {
            if file.is_file() {
                // Manifests change after outputs are hashed; skip them.
                if file.file_name().is_some_and(|n| n == "stage-manifest.json") {
                    continue;
                }
                hasher.update(file.file_name().unwrap().to_string_lossy().as_bytes());
                hasher.update(file_digest(&file)?.as_bytes());
            }
        }
        Ok(crate::corpus::hex(&hasher.finalize()))
    } else {
        file_digest(path)
    }
}

/// Digest an input and verify it against the manifest its producing stage
/// left behind, when one exists.
pub fn require_fresh(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let digest = artifact_digest(path)?;
    if let Some(manifest) = read_stage_manifest(path)? {
        let key = path.to_string_lossy().to_string();
        let recorded = manifest
            .outputs
            .get(&key)
            .or_else(|| manifest.outputs.values().next());
        if let Some(expected) = recorded {
            if *expected != digest {
                return Err(Error::StaleArtifact {
                    path: path.to_path_buf(),
                    expected: expected.clone(),
                    found: digest,
                });
            }
        }
    }
    Ok(digest)
}

pub(crate) struct StageRun {
    stage: String,
    config_digest: String,
    inputs: BTreeMap<String, String>,
    started: Instant,
    seed: u64,
    deterministic: bool,
}

impl StageRun {
    pub(crate) fn begin<C: Serialize>(
        stage: &str,
        params: &C,
        seed: u64,
        deterministic: bool,
    ) -> Result<Self> {
        use sha2::{Digest, Sha256};
        let encoded = serde_json::to_vec(params)?;
        Ok(StageRun {
            stage: stage.to_string(),
            config_digest: crate::corpus::hex(&Sha256::digest(&encoded)),
            inputs: BTreeMap::new(),
            started: Instant::now(),
            seed,
            deterministic,
        })
    }

    pub(crate) fn input(&mut self, path: &Path) -> Result<String> {
        let digest = require_fresh(path)?;
        self.inputs
            .insert(path.to_string_lossy().to_string(), digest.clone());
        Ok(digest)
    }

    /// Hash the outputs and write the manifest next to the primary output.
    pub(crate) fn finish(self, primary_output: &Path, outputs: &[&Path]) -> Result<StageManifest> {
        let mut out_digests = BTreeMap::new();
        for path in outputs {
            out_digests.insert(
                path.to_string_lossy().to_string(),
                artifact_digest(path)?,
            );
        }
        let manifest = StageManifest {
            stage: self.stage,
            config_digest: self.config_digest,
            inputs: self.inputs,
            outputs: out_digests,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            seed: self.seed,
            deterministic: self.deterministic,
        };
        std::fs::write(
            manifest_path(primary_output),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_and_accepts_partials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let config = PipelineConfig::default();
        std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        let back = PipelineConfig::load(&path).unwrap();
        assert_eq!(back.vocab_size, 10_000);
        assert_eq!(back.batch, 72);
        assert!((back.lr - 1e-4).abs() < 1e-18);
        assert_eq!(back.finetune_batch, 256);
        assert_eq!(back.beam_width, 10);

        std::fs::write(&path, r#"{"seed": 9, "model": {"layers": 3}}"#).unwrap();
        let partial = PipelineConfig::load(&path).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.model.layers, 3);
        assert_eq!(partial.model.hidden, 768);
    }

    #[test]
    fn stale_inputs_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("data.bin");
        std::fs::write(&artifact, b"v1").unwrap();

        #[derive(Serialize)]
        struct P;
        let run = StageRun::begin("test", &P, 0, true).unwrap();
        run.finish(&artifact, &[&artifact]).unwrap();

        // Untouched artifact passes.
        require_fresh(&artifact).unwrap();
        // Tampering is caught.
        std::fs::write(&artifact, b"v2").unwrap();
        assert!(matches!(
            require_fresh(&artifact),
            Err(Error::StaleArtifact { .. })
        ));
        // Missing input reported as such.
        assert!(matches!(
            require_fresh(&dir.path().join("absent")),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn directory_digest_ignores_its_own_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("ckpt");
        std::fs::create_dir(&artifact).unwrap();
        std::fs::write(artifact.join("params.bin"), b"abc").unwrap();
        let before = artifact_digest(&artifact).unwrap();
        std::fs::write(artifact.join("stage-manifest.json"), b"{}").unwrap();
        assert_eq!(artifact_digest(&artifact).unwrap(), before);
        std::fs::write(artifact.join("params.bin"), b"abcd").unwrap();
        assert_ne!(artifact_digest(&artifact).unwrap(), before);
    }
}
