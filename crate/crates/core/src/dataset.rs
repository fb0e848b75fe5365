//! Synthetic paired text/trajectory data.
//!
//! Each sample strings together one or more primitive behaviors. A
//! primitive is a fixed direction on the latent sphere; its prompt token is
//! its index and consecutive clauses are joined by a separator token. The
//! script of commanded latents is rolled out through the world and the
//! training latents are re-extracted from the resulting states, so they carry
//! the same lookahead smoothing as real tracked latents.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{project_to_sphere, LatentTrajectory, StateTrajectory, Trajectory};
use crate::linalg::gaussian_vector;
use crate::world::{ExtractionConfig, SyntheticWorld, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub world: WorldSpec,
    pub extraction: ExtractionConfig,
    /// Number of primitive behaviors; token ids `0..n_behaviors`, separator is `n_behaviors`.
    pub n_behaviors: usize,
    pub n_samples: usize,
    /// Latent frames per sample (`T_z`); states have one more row.
    pub latent_len: usize,
    /// Relative frequency of prompts with 1, 2, … clauses.
    pub stage_weights: Vec<f64>,
    pub min_stage_len: usize,
    /// Per-frame Gaussian jitter added to the commanded latents before projection.
    pub script_noise: f64,
    pub init_state_scale: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            extraction: ExtractionConfig::default(),
            n_behaviors: 8,
            n_samples: 500,
            latent_len: 64,
            stage_weights: vec![0.5, 0.25, 0.25],
            min_stage_len: 16,
            script_noise: 0.05,
            init_state_scale: 0.3,
        }
    }
}

impl DatasetSpec {
    pub fn separator_token(&self) -> usize {
        self.n_behaviors
    }

    pub fn vocab_size(&self) -> usize {
        self.n_behaviors + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_behaviors == 0 {
            return bad("need at least one behavior");
        }
        if self.n_samples == 0 {
            return bad("need at least one sample");
        }
        if self.stage_weights.is_empty() || self.stage_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("stage weights must be non-negative");
        }
        if self.stage_weights.iter().sum::<f64>() <= 0.0 {
            return bad("stage weights sum to zero");
        }
        let max_stages = self.stage_weights.len();
        if self.min_stage_len == 0 || self.min_stage_len * max_stages > self.latent_len {
            return bad("latent_len cannot hold the longest prompt at min_stage_len");
        }
        if max_stages > 1 && self.n_behaviors < 2 {
            return bad("multi-clause prompts need at least two behaviors");
        }
        if self.extraction.lookahead == 0 {
            return bad("lookahead must be at least 1");
        }
        if !(self.script_noise >= 0.0) || !(self.init_state_scale >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        Ok(())
    }

    /// Target latent of every primitive behavior, one row each, on the sphere.
    pub fn behavior_latents(&self) -> Array2<f64> {
        let d = self.world.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.world.seed ^ 0x5eed_beef);
        let mut out = Array2::zeros((self.n_behaviors, d));
        for b in 0..self.n_behaviors {
            let v = gaussian_vector(&mut rng, d, 1.0);
            out.row_mut(b).assign(&project_to_sphere(v.view(), 1e-12).expect("gaussian draw is nonzero"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub prompt_tokens: Vec<usize>,
    pub states: StateTrajectory,
    pub latents: LatentTrajectory,
}

impl Sample {
    /// Behavior tokens with separators removed.
    pub fn behaviors(&self, separator: usize) -> Vec<usize> {
        self.prompt_tokens.iter().copied().filter(|&t| t != separator).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

fn split_lengths<R: Rng>(rng: &mut R, total: usize, n: usize, min_len: usize) -> Vec<usize> {
    let extra = total - n * min_len;
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let sum: f64 = weights.iter().sum();
    let mut lens: Vec<usize> = weights.iter().map(|w| min_len + (extra as f64 * w / sum).floor() as usize).collect();
    let used: usize = lens.iter().sum();
    *lens.last_mut().expect("n >= 1") += total - used;
    lens
}

pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let world = SyntheticWorld::new(spec.world.clone())?;
    let prototypes = spec.behavior_latents();
    let stage_dist = WeightedIndex::new(&spec.stage_weights).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let d = spec.world.latent_dim;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let n_stages = stage_dist.sample(&mut rng) + 1;
        let lens = split_lengths(&mut rng, spec.latent_len, n_stages, spec.min_stage_len);
        let mut behaviors = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            let b = loop {
                let b = rng.gen_range(0..spec.n_behaviors);
                if behaviors.last() != Some(&b) {
                    break b;
                }
            };
            behaviors.push(b);
        }
        let mut script = Array2::zeros((spec.latent_len, d));
        let mut t = 0;
        for (&b, &len) in behaviors.iter().zip(&lens) {
            for _ in 0..len {
                let jitter = Array1::from_shape_simple_fn(d, || spec.script_noise * rng.sample::<f64, _>(StandardNormal));
                let v = &prototypes.row(b) + &jitter;
                script.row_mut(t).assign(&project_to_sphere(v.view(), spec.extraction.norm_floor)?);
                t += 1;
            }
        }
        let s1 = gaussian_vector(&mut rng, spec.world.state_dim, spec.init_state_scale);
        let states = world.rollout(s1.view(), &Trajectory::new(script)?)?;
        let latents = world.extract_latents(&spec.extraction, &states)?;
        let mut prompt_tokens = Vec::with_capacity(2 * n_stages - 1);
        for (k, &b) in behaviors.iter().enumerate() {
            if k > 0 {
                prompt_tokens.push(spec.separator_token());
            }
            prompt_tokens.push(b);
        }
        samples.push(Sample { prompt_tokens, states, latents });
    }
    Ok(Dataset { spec: spec.clone(), seed, samples })
}

impl Dataset {
    pub fn world(&self) -> Result<SyntheticWorld> {
        SyntheticWorld::new(self.spec.world.clone())
    }

    /// Deterministic split: the last `holdout` samples are held out.
    pub fn split(&self, holdout: usize) -> (&[Sample], &[Sample]) {
        let cut = self.samples.len().saturating_sub(holdout);
        self.samples.split_at(cut)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(text)?;
        let samples = raw
            .samples
            .into_iter()
            .map(|s| {
                Ok(Sample {
                    prompt_tokens: s.prompt_tokens,
                    states: Trajectory::from_rows(&s.states)?,
                    latents: Trajectory::from_rows(&s.latents)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: raw.spec, seed: raw.seed, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    spec: DatasetSpec,
    seed: u64,
    samples: Vec<RawSample>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    prompt_tokens: Vec<usize>,
    states: Vec<Vec<f64>>,
    latents: Vec<Vec<f64>>,
}

/// Serializes a float with 17 significant digits.
pub(crate) struct F17(pub f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

pub(crate) struct Rows<'a>(pub &'a Array2<f64>);

impl Serialize for Rows<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.rows().into_iter().map(|r| r.iter().map(|&x| F17(x)).collect::<Vec<_>>()))
    }
}

impl Serialize for Sample {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Sample", 3)?;
        st.serialize_field("prompt_tokens", &self.prompt_tokens)?;
        st.serialize_field("states", &Rows(self.states.data()))?;
        st.serialize_field("latents", &Rows(self.latents.data()))?;
        st.end()
    }
}

impl Serialize for Dataset {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Dataset", 3)?;
        st.serialize_field("spec", &self.spec)?;
        st.serialize_field("seed", &self.seed)?;
        st.serialize_field("samples", &self.samples)?;
        st.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec { n_samples: 12, ..DatasetSpec::default() }
    }

    #[test]
    fn shapes_and_tokens() {
        let spec = small_spec();
        let ds = generate_dataset(&spec, 3).unwrap();
        assert_eq!(ds.samples.len(), 12);
        for s in &ds.samples {
            assert_eq!(s.latents.len(), spec.latent_len);
            assert_eq!(s.states.len(), spec.latent_len + 1);
            assert_eq!(s.prompt_tokens.len() % 2, 1);
            for (k, &t) in s.prompt_tokens.iter().enumerate() {
                assert_eq!(t == spec.separator_token(), k % 2 == 1);
            }
            for r in s.latents.data().rows() {
                assert!((r.dot(&r).sqrt() - 8f64.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_behavior_vocabulary() {
        let spec = DatasetSpec { n_behaviors: 1, stage_weights: vec![1.0], n_samples: 5, script_noise: 0.0, ..DatasetSpec::default() };
        let ds = generate_dataset(&spec, 1).unwrap();
        assert!(ds.samples.iter().all(|s| s.prompt_tokens == vec![0]));
        // after the initial transient all scripts hold the same latent
        let tail = |s: &Sample| s.latents.row(spec.latent_len - 1).to_owned();
        let first = tail(&ds.samples[0]);
        for s in &ds.samples {
            assert!((&tail(s) - &first).mapv(f64::abs).sum() < 1e-6);
        }
    }

    #[test]
    fn deterministic_json() {
        let spec = small_spec();
        let a = generate_dataset(&spec, 42).unwrap().to_json().unwrap();
        let b = generate_dataset(&spec, 42).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 43).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let ds = generate_dataset(&small_spec(), 7).unwrap();
        let text = ds.to_json().unwrap();
        let back = Dataset::from_json(&text).unwrap();
        assert_eq!(back, ds);
        assert!(text.contains("e-1") || text.contains("e0"));
    }

    #[test]
    fn invalid_specs() {
        let mut spec = small_spec();
        spec.stage_weights = vec![];
        assert!(matches!(generate_dataset(&spec, 0), Err(Error::InvalidSpec(_))));
        let spec = DatasetSpec { min_stage_len: 40, ..small_spec() };
        assert!(generate_dataset(&spec, 0).is_err());
        let spec = DatasetSpec { n_behaviors: 1, ..small_spec() };
        assert!(generate_dataset(&spec, 0).is_err());
    }
}
