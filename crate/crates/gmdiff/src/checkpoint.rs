//! Checkpoint format shared by denoisers and classifiers.
//!
//! Layout: a line `gmdiff-checkpoint v1`, a TOML header, a `---` marker line,
//! then every parameter tensor as raw 64-bit little-endian floats in the
//! architecture's declaration order (per hidden layer: `w`, `b`, `emb_w`,
//! `emb_b`; then `out_w`, `out_b`; then `class_embed` when conditional). The
//! header's `arch` table fully determines the tensor shapes, so the binary
//! section is exactly `8 * total_parameters` bytes.

use serde::{Deserialize, Serialize};

use crate::classifiers::MlpClassifier;
use crate::error::{Error, Result};
use crate::models::{Mlp, MlpConfig, MlpDenoiser};
use crate::schedules::{NoiseSchedule, ScheduleSpec};

const MAGIC: &str = "gmdiff-checkpoint v1";
const MARKER: &str = "---";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Denoiser,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: CheckpointKind,
    data_dim: usize,
    training_steps: u64,
    /// Whether the stored weights are the EMA average.
    ema: bool,
    #[serde(default)]
    learned_variance: bool,
    schedule: ScheduleSpec,
    arch: MlpConfig,
}

/// A parsed checkpoint: header fields plus the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub data_dim: usize,
    pub training_steps: u64,
    pub ema: bool,
    pub learned_variance: bool,
    pub schedule: ScheduleSpec,
    pub arch: MlpConfig,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_denoiser(
        model: &MlpDenoiser,
        schedule: ScheduleSpec,
        training_steps: u64,
        ema: bool,
    ) -> Self {
        Self {
            kind: CheckpointKind::Denoiser,
            data_dim: model.mlp().config().input_dim,
            training_steps,
            ema,
            learned_variance: model.learned_variance(),
            schedule,
            arch: model.mlp().config().clone(),
            params: model.mlp().params().to_vec(),
        }
    }

    pub fn from_classifier(
        model: &MlpClassifier,
        schedule: ScheduleSpec,
        training_steps: u64,
        ema: bool,
    ) -> Self {
        Self {
            kind: CheckpointKind::Classifier,
            data_dim: model.mlp().config().input_dim,
            training_steps,
            ema,
            learned_variance: false,
            schedule,
            arch: model.mlp().config().clone(),
            params: model.mlp().params().to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if self.arch.input_dim != self.data_dim {
            return Err(Error::Checkpoint("arch input_dim disagrees with data_dim".into()));
        }
        match self.kind {
            CheckpointKind::Denoiser => {
                let expected =
                    if self.learned_variance { 2 * self.data_dim } else { self.data_dim };
                if self.arch.output_dim != expected {
                    return Err(Error::Checkpoint(format!(
                        "denoiser head must have {expected} outputs, found {}",
                        self.arch.output_dim
                    )));
                }
            }
            CheckpointKind::Classifier => {
                if self.arch.class_conditioning.is_some() {
                    return Err(Error::Checkpoint(
                        "classifier trunks cannot be class-conditioned".into(),
                    ));
                }
                if self.arch.output_dim < 2 {
                    return Err(Error::Checkpoint("classifier needs at least two classes".into()));
                }
            }
        }
        let expected = crate::models::ParamLayout::from_config(&self.arch).total();
        if self.params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameters, found {}",
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind,
            data_dim: self.data_dim,
            training_steps: self.training_steps,
            ema: self.ema,
            learned_variance: self.learned_variance,
            schedule: self.schedule,
            arch: self.arch.clone(),
        };
        let mut out = Vec::with_capacity(self.params.len() * 8 + 512);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(
            toml::to_string(&header).expect("header serializes").as_bytes(),
        );
        out.extend_from_slice(MARKER.as_bytes());
        out.push(b'\n');
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing magic line".into()))?;
        let magic = std::str::from_utf8(&bytes[..magic_end])
            .map_err(|_| Error::Checkpoint("magic line is not UTF-8".into()))?;
        if magic.trim_end_matches('\r') != MAGIC {
            return Err(Error::Checkpoint(format!("unrecognized magic {magic:?}")));
        }
        // Scan line-wise for the header/binary marker.
        let mut pos = magic_end + 1;
        let mut header_end = None;
        while pos < bytes.len() {
            let line_end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|o| pos + o)
                .unwrap_or(bytes.len());
            let line = &bytes[pos..line_end];
            if line == MARKER.as_bytes() || line == b"---\r" {
                header_end = Some((pos, line_end + 1));
                break;
            }
            pos = line_end + 1;
        }
        let (header_stop, binary_start) =
            header_end.ok_or_else(|| Error::Checkpoint("missing --- marker".into()))?;
        let header_text = std::str::from_utf8(&bytes[magic_end + 1..header_stop])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: Header = toml::from_str(header_text)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let binary = &bytes[binary_start.min(bytes.len())..];
        if binary.len() % 8 != 0 {
            return Err(Error::Checkpoint("binary section is not a whole number of f64s".into()));
        }
        let params: Vec<f64> = binary
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let ckpt = Checkpoint {
            kind: header.kind,
            data_dim: header.data_dim,
            training_steps: header.training_steps,
            ema: header.ema,
            learned_variance: header.learned_variance,
            schedule: header.schedule,
            arch: header.arch,
            params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn into_denoiser(&self) -> Result<MlpDenoiser> {
        if self.kind != CheckpointKind::Denoiser {
            return Err(Error::Checkpoint("not a denoiser checkpoint".into()));
        }
        let mut mlp = Mlp::zeroed(self.arch.clone())?;
        mlp.set_params(self.params.clone())?;
        MlpDenoiser::from_mlp(mlp, self.data_dim, self.learned_variance)
    }

    pub fn into_classifier(&self) -> Result<MlpClassifier> {
        if self.kind != CheckpointKind::Classifier {
            return Err(Error::Checkpoint("not a classifier checkpoint".into()));
        }
        let mut mlp = Mlp::zeroed(self.arch.clone())?;
        mlp.set_params(self.params.clone())?;
        MlpClassifier::from_mlp(mlp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::ClassifierSpec;
    use crate::models::DenoiserSpec;
    use crate::schedules::ScheduleFamily;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched_spec() -> ScheduleSpec {
        ScheduleSpec { family: ScheduleFamily::Linear, steps: 100 }
    }

    fn small_denoiser(seed: u64) -> MlpDenoiser {
        let spec = DenoiserSpec {
            hidden: vec![8, 8],
            embedding_dim: 8,
            group_size: 4,
            conditional: true,
            learned_variance: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpDenoiser::new(&spec, 2, 3, &mut rng).unwrap()
    }

    #[test]
    fn denoiser_round_trip_is_bit_exact() {
        let model = small_denoiser(1);
        let ckpt = Checkpoint::from_denoiser(&model, sched_spec(), 123, true);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        let restored = back.into_denoiser().unwrap();
        assert_eq!(restored.mlp().params(), model.mlp().params());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn classifier_round_trip() {
        let spec = ClassifierSpec { hidden: vec![8], embedding_dim: 8, group_size: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clf = MlpClassifier::new(&spec, 2, 4, &mut rng).unwrap();
        let ckpt = Checkpoint::from_classifier(&clf, sched_spec(), 55, false);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.kind, CheckpointKind::Classifier);
        let restored = back.into_classifier().unwrap();
        assert_eq!(restored.mlp().params(), clf.mlp().params());
        assert!(back.into_denoiser().is_err());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = small_denoiser(3);
        let good = Checkpoint::from_denoiser(&model, sched_spec(), 1, false).to_bytes();

        assert!(Checkpoint::from_bytes(b"").is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint\n").is_err());

        // Truncated binary section.
        let truncated = &good[..good.len() - 9];
        assert!(Checkpoint::from_bytes(truncated).is_err());

        // Flip the header's data_dim against the arch.
        let text = String::from_utf8_lossy(&good[..200]).to_string();
        assert!(text.contains("data_dim = 2"));
        let mut bad = good.clone();
        let idx = find_subsequence(&bad, b"data_dim = 2").unwrap();
        bad[idx + "data_dim = ".len()] = b'3';
        assert!(Checkpoint::from_bytes(&bad).is_err());

        // Non-finite parameter.
        let mut nan = Checkpoint::from_denoiser(&model, sched_spec(), 1, false);
        nan.params[0] = f64::NAN;
        assert!(Checkpoint::from_bytes(&nan.to_bytes()).is_err());
    }

    fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
        haystack.windows(needle.len()).position(|w| w == needle)
    }

    #[test]
    fn header_is_human_readable() {
        let model = small_denoiser(4);
        let bytes = Checkpoint::from_denoiser(&model, sched_spec(), 9, true).to_bytes();
        let text = String::from_utf8_lossy(&bytes[..300]);
        assert!(text.starts_with("gmdiff-checkpoint v1\n"));
        assert!(text.contains("kind = \"denoiser\""));
        assert!(text.contains("training_steps = 9"));
        assert!(text.contains("[schedule]"));
    }
}
