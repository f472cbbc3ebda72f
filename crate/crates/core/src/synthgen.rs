//! Vector observations with task-irrelevant variation, training tuples,
//! random-negative augmentation and holdout splitting.
//!
//! An observation of a state under nuisance factors `f` is
//!
//! ```text
//! o = M_view[f.viewpoint] (occupancy + f.jitter)
//!   + M_distract f.distractors + f.lighting * lighting_dir + noise
//! ```
//!
//! with mixing matrices drawn once from the render seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::worlds::{apply_action, enumerate_states, legal_actions, WorldSpec, WorldState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid render configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("holdout fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    World(#[from] crate::worlds::WorldError),
}

/// Scalar rendering settings; the mixing matrices are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Observation dimension.
    pub dim: usize,
    pub viewpoints: usize,
    pub distractors: usize,
    pub p_distractor: f64,
    pub sigma_jitter: f64,
    pub sigma_noise: f64,
    /// Norm of each distractor's mixing column.
    pub distractor_scale: f64,
    /// Norm of the lighting direction.
    pub lighting_scale: f64,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            dim: 64,
            viewpoints: 2,
            distractors: 0,
            p_distractor: 0.8,
            sigma_jitter: 0.17,
            sigma_noise: 0.05,
            distractor_scale: 1.0,
            lighting_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderParams {
    pub config: RenderConfig,
    slots: usize,
    /// One `dim x slots` row-major matrix per viewpoint.
    mix_view: Vec<Vec<f64>>,
    /// `dim x distractors`, row-major.
    mix_distract: Vec<f64>,
    lighting_dir: Vec<f64>,
}

/// `rows x cols` matrix with N(0,1) entries and columns rescaled to `norm`.
fn random_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize, norm: f64) -> Vec<f64> {
    let mut m: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    for c in 0..cols {
        let len = (0..rows).map(|r| m[r * cols + c].powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            m[r * cols + c] *= norm / len;
        }
    }
    m
}

impl RenderParams {
    pub fn new(spec: &WorldSpec, config: RenderConfig) -> Result<Self, SynthError> {
        Self::check_config(spec, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mix_view = (0..config.viewpoints)
            .map(|_| random_columns(&mut rng, config.dim, spec.slots, 1.0))
            .collect();
        let mix_distract =
            random_columns(&mut rng, config.dim, config.distractors, config.distractor_scale);
        let lighting_dir = random_columns(&mut rng, config.dim, 1, config.lighting_scale);
        Ok(RenderParams {
            config,
            slots: spec.slots,
            mix_view,
            mix_distract,
            lighting_dir,
        })
    }

    /// Builds parameters from explicit matrices.
    pub fn from_parts(
        spec: &WorldSpec,
        config: RenderConfig,
        mix_view: Vec<Vec<f64>>,
        mix_distract: Vec<f64>,
        lighting_dir: Vec<f64>,
    ) -> Result<Self, SynthError> {
        Self::check_config(spec, &config)?;
        let d = config.dim;
        if mix_view.len() != config.viewpoints {
            return Err(SynthError::DimensionMismatch {
                expected: config.viewpoints,
                got: mix_view.len(),
            });
        }
        for m in &mix_view {
            check_len(m.len(), d * spec.slots)?;
        }
        check_len(mix_distract.len(), d * config.distractors)?;
        check_len(lighting_dir.len(), d)?;
        Ok(RenderParams {
            config,
            slots: spec.slots,
            mix_view,
            mix_distract,
            lighting_dir,
        })
    }

    fn check_config(spec: &WorldSpec, c: &RenderConfig) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if c.dim < spec.slots {
            return bad("observation dimension must be at least the slot count");
        }
        if c.viewpoints == 0 {
            return bad("need at least one viewpoint");
        }
        if c.distractors > 32 {
            return bad("at most 32 distractors");
        }
        if !(0.0..=1.0).contains(&c.p_distractor) {
            return bad("p_distractor must lie in [0, 1]");
        }
        if !(c.sigma_jitter >= 0.0 && c.sigma_noise >= 0.0) {
            return bad("standard deviations must be non-negative");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn mix_view(&self, v: usize) -> &[f64] {
        &self.mix_view[v]
    }
}

fn check_len(got: usize, expected: usize) -> Result<(), SynthError> {
    if got == expected {
        Ok(())
    } else {
        Err(SynthError::DimensionMismatch { expected, got })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFactors {
    pub viewpoint: usize,
    /// Bit `k` set when distractor `k` is present.
    pub distractors: u32,
    pub lighting: f64,
    pub jitter: Vec<f64>,
}

impl NuisanceFactors {
    /// No distractors, no lighting, no jitter, first viewpoint.
    pub fn neutral(slots: usize) -> Self {
        NuisanceFactors {
            viewpoint: 0,
            distractors: 0,
            lighting: 0.0,
            jitter: vec![0.0; slots],
        }
    }
}

pub fn sample_factors<R: Rng + ?Sized>(params: &RenderParams, rng: &mut R) -> NuisanceFactors {
    let c = &params.config;
    let viewpoint = rng.random_range(0..c.viewpoints);
    let mut distractors = 0u32;
    for k in 0..c.distractors {
        if rng.random::<f64>() < c.p_distractor {
            distractors |= 1 << k;
        }
    }
    let lighting = rng.random::<f64>();
    let bound = 3.0 * c.sigma_jitter;
    let jitter = (0..params.slots)
        .map(|_| {
            let j: f64 = rng.sample::<f64, _>(StandardNormal) * c.sigma_jitter;
            j.clamp(-bound, bound)
        })
        .collect();
    NuisanceFactors {
        viewpoint,
        distractors,
        lighting,
        jitter,
    }
}

pub fn render<R: Rng + ?Sized>(
    spec: &WorldSpec,
    state: WorldState,
    factors: &NuisanceFactors,
    params: &RenderParams,
    rng: &mut R,
) -> Result<Vec<f64>, SynthError> {
    spec.validate(state)?;
    let s = params.slots;
    check_len(factors.jitter.len(), s)?;
    if factors.viewpoint >= params.config.viewpoints {
        return Err(SynthError::DimensionMismatch {
            expected: params.config.viewpoints,
            got: factors.viewpoint,
        });
    }
    let d = params.config.dim;
    let k = params.config.distractors;
    let latent: Vec<f64> = state
        .occupancy(s)
        .iter()
        .zip(&factors.jitter)
        .map(|(o, j)| o + j)
        .collect();
    let mix = &params.mix_view[factors.viewpoint];
    let noise = Normal::new(0.0, params.config.sigma_noise).expect("non-negative std");
    let mut out = Vec::with_capacity(d);
    for r in 0..d {
        let mut v: f64 = mix[r * s..(r + 1) * s]
            .iter()
            .zip(&latent)
            .map(|(a, b)| a * b)
            .sum();
        for j in 0..k {
            if factors.distractors >> j & 1 == 1 {
                v += params.mix_distract[r * k + j];
            }
        }
        v += factors.lighting * params.lighting_dir[r];
        out.push(v);
    }
    // noise is drawn after the deterministic part so zero-noise renders do
    // not depend on the stream position
    if params.config.sigma_noise > 0.0 {
        for v in &mut out {
            *v += noise.sample(rng);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataTuple {
    pub o_i: Vec<f64>,
    pub o_j: Vec<f64>,
    /// 1 for a similar pair, 0 for an action pair.
    pub s: u8,
    pub augmented: bool,
}

impl DataTuple {
    pub fn is_similar(&self) -> bool {
        self.s == 1
    }
}

/// Ground truth kept next to each tuple. Only evaluation code reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub state_i: WorldState,
    pub state_j: WorldState,
    pub factors_i: NuisanceFactors,
    pub factors_j: NuisanceFactors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub params: RenderParams,
    pub tuples: Vec<DataTuple>,
    pub sidecar: Vec<SidecarEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// The observation-only view handed to training code.
    pub fn tuples(&self) -> &[DataTuple] {
        &self.tuples
    }

    pub fn n_action_pairs(&self) -> usize {
        self.tuples.iter().filter(|t| t.s == 0 && !t.augmented).count()
    }

    pub fn n_similar_pairs(&self) -> usize {
        self.tuples.iter().filter(|t| t.s == 1).count()
    }

    pub fn n_augmented(&self) -> usize {
        self.tuples.iter().filter(|t| t.augmented).count()
    }

    /// Copy with augmented tuples removed.
    pub fn without_augmented(&self) -> Dataset {
        let (tuples, sidecar) = self
            .tuples
            .iter()
            .zip(&self.sidecar)
            .filter(|(t, _)| !t.augmented)
            .map(|(t, s)| (t.clone(), s.clone()))
            .unzip();
        Dataset {
            spec: self.spec,
            params: self.params.clone(),
            tuples,
            sidecar,
        }
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            spec: self.spec,
            params: self.params.clone(),
            tuples: idx.iter().map(|&i| self.tuples[i].clone()).collect(),
            sidecar: idx.iter().map(|&i| self.sidecar[i].clone()).collect(),
        }
    }
}

pub fn generate_dataset<R: Rng + ?Sized>(
    spec: &WorldSpec,
    params: &RenderParams,
    n_tuples: usize,
    frac_action: f64,
    rng: &mut R,
) -> Result<Dataset, SynthError> {
    if n_tuples == 0 {
        return Err(SynthError::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&frac_action) {
        return Err(SynthError::InvalidConfig(format!(
            "frac_action must lie in [0, 1], got {frac_action}"
        )));
    }
    let states = enumerate_states(spec);
    let mut tuples = Vec::with_capacity(n_tuples);
    let mut sidecar = Vec::with_capacity(n_tuples);
    for _ in 0..n_tuples {
        let state = states[rng.random_range(0..states.len())];
        let action_pair = rng.random::<f64>() < frac_action;
        let other = if action_pair {
            let actions = legal_actions(spec, state)?;
            let a = actions[rng.random_range(0..actions.len())];
            apply_action(spec, state, a)?
        } else {
            state
        };
        let f_i = sample_factors(params, rng);
        let f_j = sample_factors(params, rng);
        let o_i = render(spec, state, &f_i, params, rng)?;
        let o_j = render(spec, other, &f_j, params, rng)?;
        tuples.push(DataTuple {
            o_i,
            o_j,
            s: if action_pair { 0 } else { 1 },
            augmented: false,
        });
        sidecar.push(SidecarEntry {
            state_i: state,
            state_j: other,
            factors_i: f_i,
            factors_j: f_j,
        });
    }
    Ok(Dataset {
        spec: *spec,
        params: params.clone(),
        tuples,
        sidecar,
    })
}

/// Appends `n` random negatives `(o_i, o_k, s = 0)` per similar pair, with
/// `o_k` drawn uniformly from every observation in `ds`.
pub fn augment<R: Rng + ?Sized>(ds: &Dataset, n: usize, rng: &mut R) -> Result<Dataset, SynthError> {
    if ds.is_empty() {
        return Err(SynthError::EmptyDataset);
    }
    let mut out = ds.clone();
    if n == 0 {
        return Ok(out);
    }
    let n_obs = 2 * ds.len();
    for (t, side) in ds.tuples.iter().zip(&ds.sidecar) {
        if !t.is_similar() {
            continue;
        }
        for _ in 0..n {
            let pick = rng.random_range(0..n_obs);
            let (src, src_side) = (&ds.tuples[pick / 2], &ds.sidecar[pick / 2]);
            let (o_k, state_k, factors_k) = if pick % 2 == 0 {
                (&src.o_i, src_side.state_i, &src_side.factors_i)
            } else {
                (&src.o_j, src_side.state_j, &src_side.factors_j)
            };
            out.tuples.push(DataTuple {
                o_i: t.o_i.clone(),
                o_j: o_k.clone(),
                s: 0,
                augmented: true,
            });
            out.sidecar.push(SidecarEntry {
                state_i: side.state_i,
                state_j: state_k,
                factors_i: side.factors_i.clone(),
                factors_j: factors_k.clone(),
            });
        }
    }
    Ok(out)
}

/// Random disjoint split; `round(frac * n)` tuples go to the holdout. Both
/// parts keep the original tuple order.
pub fn split_holdout<R: Rng + ?Sized>(
    ds: &Dataset,
    frac: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset), SynthError> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(SynthError::InvalidFraction(frac));
    }
    let (train, holdout) = split_indices(ds.len(), frac, rng);
    Ok((ds.subset(&train), ds.subset(&holdout)))
}

/// Index partition used by [`split_holdout`].
pub fn split_indices<R: Rng + ?Sized>(n: usize, frac: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_hold = ((n as f64) * frac).round() as usize;
    let mut holdout = idx[..n_hold].to_vec();
    let mut train = idx[n_hold..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    (train, holdout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::{is_legal_transition, WorldKind};

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn quiet_config(viewpoints: usize) -> RenderConfig {
        RenderConfig {
            dim: 16,
            viewpoints,
            distractors: 0,
            sigma_jitter: 0.0,
            sigma_noise: 0.0,
            ..RenderConfig::default()
        }
    }

    #[test]
    fn identity_mixing_pads_occupancy() {
        let spec = WorldSpec::new(WorldKind::BoxStacking);
        let d = 12;
        let mut mix = vec![0.0; d * spec.slots];
        for s in 0..spec.slots {
            mix[s * spec.slots + s] = 1.0;
        }
        let cfg = RenderConfig {
            dim: d,
            viewpoints: 1,
            sigma_jitter: 0.0,
            sigma_noise: 0.0,
            ..RenderConfig::default()
        };
        let params = RenderParams::from_parts(&spec, cfg, vec![mix], vec![], vec![0.0; d]).unwrap();
        let state = WorldState::from_slots(&[0, 1, 3, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = render(&spec, state, &NuisanceFactors::neutral(9), &params, &mut rng).unwrap();
        let mut expected = state.occupancy(9);
        expected.resize(d, 0.0);
        assert_eq!(o, expected);
    }

    #[test]
    fn viewpoints_differ() {
        let spec = WorldSpec::new(WorldKind::BoxStacking);
        let params = RenderParams::new(&spec, quiet_config(2)).unwrap();
        let state = WorldState::from_slots(&[0, 1, 3, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = NuisanceFactors::neutral(9);
        let a = render(&spec, state, &f, &params, &mut rng).unwrap();
        f.viewpoint = 1;
        let b = render(&spec, state, &f, &params, &mut rng).unwrap();
        assert!(dist(&a, &b) > 0.1);
    }

    #[test]
    fn one_slot_change_is_one_column() {
        let spec = WorldSpec::new(WorldKind::ShelfArrangement);
        let params = RenderParams::new(&spec, quiet_config(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = NuisanceFactors::neutral(8);
        let a = WorldState::from_slots(&[0, 1, 2, 3]);
        let b = WorldState::from_slots(&[0, 1, 2, 4]);
        let oa = render(&spec, a, &f, &params, &mut rng).unwrap();
        let ob = render(&spec, b, &f, &params, &mut rng).unwrap();
        let mix = params.mix_view(0);
        for r in 0..params.dim() {
            let expected = mix[r * 8 + 4] - mix[r * 8 + 3];
            assert!((ob[r] - oa[r] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn columns_are_normalised() {
        let spec = WorldSpec::new(WorldKind::BoxManipulation);
        let params = RenderParams::new(&spec, RenderConfig::default()).unwrap();
        let m = params.mix_view(1);
        for c in 0..9 {
            let n: f64 = (0..64).map(|r| m[r * 9 + c].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn render_rejects_bad_factors() {
        let spec = WorldSpec::new(WorldKind::BoxStacking);
        let params = RenderParams::new(&spec, quiet_config(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = NuisanceFactors::neutral(3);
        let s = WorldState::from_slots(&[0, 1, 3, 6]);
        assert!(matches!(
            render(&spec, s, &f, &params, &mut rng),
            Err(SynthError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn factor_sampling_statistics() {
        let spec = WorldSpec::new(WorldKind::ShelfArrangement);
        let cfg = RenderConfig {
            distractors: 5,
            p_distractor: 0.8,
            viewpoints: 1,
            ..RenderConfig::default()
        };
        let params = RenderParams::new(&spec, cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let f = sample_factors(&params, &mut rng);
            assert_eq!(f.viewpoint, 0);
            assert!((0.0..=1.0).contains(&f.lighting));
            assert!(f.jitter.iter().all(|j| j.abs() <= 3.0 * 0.17 + 1e-12));
            for (k, c) in counts.iter_mut().enumerate() {
                *c += (f.distractors >> k & 1) as usize;
            }
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.8).abs() < 0.02);
        }
        let none = RenderParams::new(&spec, RenderConfig { p_distractor: 0.0, ..cfg }).unwrap();
        for _ in 0..100 {
            assert_eq!(sample_factors(&none, &mut rng).distractors, 0);
        }
    }

    fn small_dataset(n: usize, seed: u64) -> Dataset {
        let spec = WorldSpec::new(WorldKind::BoxStacking);
        let params = RenderParams::new(&spec, RenderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_dataset(&spec, &params, n, 0.5, &mut rng).unwrap()
    }

    #[test]
    fn dataset_sidecar_consistent() {
        let ds = small_dataset(2500, 1);
        assert_eq!(ds.len(), 2500);
        let actions = ds.n_action_pairs();
        // binomial(2500, 0.5): 4 standard deviations is 100
        assert!((actions as i64 - 1250).abs() < 100, "{actions}");
        for (t, s) in ds.tuples.iter().zip(&ds.sidecar) {
            assert!(!t.augmented);
            assert_eq!(t.o_i.len(), 64);
            if t.s == 1 {
                assert_eq!(s.state_i, s.state_j);
            } else {
                assert!(is_legal_transition(&ds.spec, s.state_i, s.state_j).unwrap());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small_dataset(100, 5), small_dataset(100, 5));
        assert_ne!(small_dataset(100, 5).tuples, small_dataset(100, 6).tuples);
    }

    #[test]
    fn augment_zero_is_identity() {
        let ds = small_dataset(50, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&ds, 0, &mut rng).unwrap(), ds);
    }

    #[test]
    fn augment_adds_negatives_per_similar_pair() {
        let ds = small_dataset(2500, 3);
        let similar = ds.n_similar_pairs();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let aug = augment(&ds, 1, &mut rng).unwrap();
        assert_eq!(aug.len(), ds.len() + similar);
        let added = &aug.tuples[ds.len()..];
        assert!(added.iter().all(|t| t.s == 0 && t.augmented));
        assert_eq!(&aug.tuples[..ds.len()], &ds.tuples[..]);
        let aug3 = augment(&ds, 3, &mut rng).unwrap();
        assert_eq!(aug3.len(), ds.len() + 3 * similar);

        // rate of false negatives against the state frequencies of all observations
        let mut freq = std::collections::HashMap::new();
        for s in &ds.sidecar {
            *freq.entry(s.state_i).or_insert(0usize) += 1;
            *freq.entry(s.state_j).or_insert(0usize) += 1;
        }
        let total = 2.0 * ds.len() as f64;
        let added_side = &aug.sidecar[ds.len()..];
        let expected: f64 = added_side
            .iter()
            .map(|s| freq[&s.state_i] as f64 / total)
            .sum::<f64>()
            / added_side.len() as f64;
        let observed = added_side.iter().filter(|s| s.state_i == s.state_j).count() as f64
            / added_side.len() as f64;
        // 12 states -> expected ~ 1/12; binomial sd over ~1250 draws ~ 0.008
        assert!((observed - expected).abs() < 0.035, "{observed} vs {expected}");
    }

    #[test]
    fn holdout_split_partitions() {
        let ds = small_dataset(2500, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, hold) = split_holdout(&ds, 0.2, &mut rng).unwrap();
        assert_eq!((train.len(), hold.len()), (2000, 500));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ti, hi) = split_indices(2500, 0.2, &mut rng);
        let mut all: Vec<usize> = ti.iter().chain(&hi).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2500).collect::<Vec<_>>());
        assert_eq!(train.tuples[0], ds.tuples[ti[0]]);
        assert_eq!(hold.sidecar[3], ds.sidecar[hi[3]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let again = split_holdout(&ds, 0.2, &mut rng).unwrap();
        assert_eq!(again.1, hold);
        assert!(split_holdout(&ds, 1.0, &mut rng).is_err());
        assert!(split_holdout(&ds, 0.0, &mut rng).is_err());
    }
}
